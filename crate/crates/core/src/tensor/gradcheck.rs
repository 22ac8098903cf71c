//! Central finite-difference verification of the reverse pass.
//!
//! Graphs built here are always evaluation graphs, so dropout is the
//! identity; train-mode dropout is random and is not checked.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NodeId, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Entries sampled per parameter tensor; 0 checks every entry.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares autodiff gradients of the scalar built by `loss` against
/// central differences, for every parameter that requires a gradient.
pub fn grad_check<F>(store: &mut ParamStore, loss: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    g.backward(out, store)?;
    let analytic: Vec<Option<Vec<f64>>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grads();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        tolerance: config.tolerance,
        passed: true,
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let entries: Vec<usize> = if config.max_entries == 0 || n <= config.max_entries {
            (0..n).collect()
        } else {
            let mut e = sample(&mut rng, n, config.max_entries).into_vec();
            e.sort_unstable();
            e
        };
        for idx in entries {
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[idx]);
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + config.step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig - config.step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = idx;
            }
        }
    }
    report.passed = report.max_rel_error <= config.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::nn::{LayerNormLayer, Linear};
    use crate::tensor::Tensor;

    fn input() -> Tensor {
        Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4]]).unwrap()
    }

    #[test]
    fn linear_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 3, 2, 0.5, &mut rng);
        let x = input();
        let report = grad_check(
            &mut store,
            |g, s| {
                let xi = g.constant(x.clone());
                let y = lin.forward(g, s, xi)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            GradCheckConfig { tolerance: 1e-6, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn layer_norm_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ln = LayerNormLayer::new(&mut store, "ln", 3);
        let proj = Linear::new(&mut store, "proj", 3, 1, 0.5, &mut rng);
        let x = input();
        let report = grad_check(
            &mut store,
            |g, s| {
                let xi = g.constant(x.clone());
                let y = ln.forward(g, s, xi)?;
                let z = proj.forward(g, s, y)?;
                let sq = g.mul(z, z)?;
                Ok(g.sum(sq))
            },
            GradCheckConfig { tolerance: 1e-5, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn dropout_is_inactive_during_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 3, 3, 0.5, &mut rng);
        let x = input();
        let report = grad_check(
            &mut store,
            |g, s| {
                let xi = g.constant(x.clone());
                let y = lin.forward(g, s, xi)?;
                let d = g.dropout(y, 0.5);
                let sq = g.mul(d, d)?;
                Ok(g.sum(sq))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

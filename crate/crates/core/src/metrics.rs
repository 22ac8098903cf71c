//! Structure and clustering metrics.
//!
//! Partitions are given as one cluster label per item; labels only need to
//! be equal within a cluster.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{targets, Labeled};
use crate::error::{Error, Result};
use crate::graph::{connected_components, Mode, ReplyGraph};

pub const VI_FORMULA: &str = "scaled VI = 100 * (1 - VI / ln n), VI = H(pred|gold) + H(gold|pred), natural log; n = 1 scores 100";

fn same_size(pred: &ReplyGraph, gold: &ReplyGraph) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Mismatch(format!(
            "predicted graph has {} nodes, gold has {}",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Fraction of non-root utterances whose predicted parent equals the gold
/// parent. A graph with no non-root utterance scores 1.
pub fn graph_accuracy(pred: &ReplyGraph, gold: &ReplyGraph) -> Result<f64> {
    let (correct, total) = graph_counts(pred, gold)?;
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}

fn graph_counts(pred: &ReplyGraph, gold: &ReplyGraph) -> Result<(usize, usize)> {
    same_size(pred, gold)?;
    let n = gold.len();
    let correct = (1..n).filter(|&i| pred.parents(i) == gold.parents(i)).count();
    Ok((correct, n.saturating_sub(1)))
}

/// Fraction of conversations whose predicted structure matches exactly.
pub fn conversation_accuracy(preds: &[ReplyGraph], golds: &[ReplyGraph]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Mismatch(format!("{} predictions for {} conversations", preds.len(), golds.len())));
    }
    if golds.is_empty() {
        return Ok(1.0);
    }
    let mut exact = 0;
    for (p, g) in preds.iter().zip(golds) {
        same_size(p, g)?;
        exact += usize::from(p == g);
    }
    Ok(exact as f64 / golds.len() as f64)
}

/// Precision, recall and F1. `degenerate` is set when a denominator was 0
/// and the corresponding value was reported as 0 by convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            degenerate: predicted == 0 || gold == 0,
        }
    }
}

fn edge_set(graph: &ReplyGraph, annotated: &[usize]) -> BTreeSet<(usize, usize)> {
    annotated
        .iter()
        .flat_map(|&c| graph.parents(c).iter().map(move |&p| (c, p)))
        .collect()
}

fn edge_counts(pred: &ReplyGraph, gold: &ReplyGraph, annotated: &[usize]) -> (usize, usize, usize) {
    let p = edge_set(pred, annotated);
    let g = edge_set(gold, annotated);
    (p.intersection(&g).count(), p.len(), g.len())
}

/// Edge precision/recall over (child, parent) pairs whose child is in
/// `annotated`; self links count as edges.
pub fn edge_prf(pred: &ReplyGraph, gold: &ReplyGraph, annotated: &[usize]) -> Result<Prf> {
    same_size(pred, gold)?;
    let (c, p, g) = edge_counts(pred, gold, annotated);
    Ok(Prf::from_counts(c, p, g))
}

fn check_partitions(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Mismatch(format!(
            "partitions over {} and {} items",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

fn entropy<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn variation_of_information(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_partitions(pred, gold)?;
    let n = pred.len() as f64;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut cp: HashMap<usize, usize> = HashMap::new();
    let mut cg: HashMap<usize, usize> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gold) {
        *joint.entry((p, g)).or_default() += 1;
        *cp.entry(p).or_default() += 1;
        *cg.entry(g).or_default() += 1;
    }
    let vi = 2.0 * entropy(joint.values(), n) - entropy(cp.values(), n) - entropy(cg.values(), n);
    Ok(vi.max(0.0))
}

pub fn scaled_vi(pred: &[usize], gold: &[usize]) -> Result<f64> {
    let vi = variation_of_information(pred, gold)?;
    let n = pred.len();
    if n <= 1 {
        return Ok(100.0);
    }
    Ok(100.0 * (1.0 - vi / (n as f64).ln()))
}

fn clusters(labels: &[usize]) -> Vec<BTreeSet<usize>> {
    let mut by: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().insert(i);
    }
    by.into_values().collect()
}

/// Maximum total weight of a one-to-one assignment of rows to columns
/// (Hungarian algorithm with potentials).
pub fn max_weight_matching(weights: &[Vec<f64>]) -> f64 {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return 0.0;
    }
    let max_w = weights.iter().flatten().copied().fold(0.0, f64::max);
    // square cost matrix, 1-based as in the classic formulation
    let cost = |i: usize, j: usize| -> f64 {
        let w = if i <= rows && j <= cols { weights[i - 1][j - 1] } else { 0.0 };
        max_w - w
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n)
        .filter(|&j| p[j] <= rows && j <= cols)
        .map(|j| weights[p[j] - 1][j - 1])
        .sum()
}

/// One-to-one overlap: best cluster matching by intersection size, as a
/// percentage of the items.
pub fn one_to_one(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_partitions(pred, gold)?;
    if pred.is_empty() {
        return Ok(100.0);
    }
    let pc = clusters(pred);
    let gc = clusters(gold);
    let weights: Vec<Vec<f64>> = pc
        .iter()
        .map(|p| gc.iter().map(|g| p.intersection(g).count() as f64).collect())
        .collect();
    Ok(100.0 * max_weight_matching(&weights) / pred.len() as f64)
}

fn exact_counts(pred: &[usize], gold: &[usize]) -> (usize, usize, usize) {
    let pc = clusters(pred);
    let gc: BTreeSet<BTreeSet<usize>> = clusters(gold).into_iter().collect();
    let correct = pc.iter().filter(|c| gc.contains(*c)).count();
    (correct, pc.len(), gc.len())
}

/// A predicted cluster counts as correct only if it equals a gold cluster.
pub fn cluster_exact_prf(pred: &[usize], gold: &[usize]) -> Result<Prf> {
    check_partitions(pred, gold)?;
    let (c, p, g) = exact_counts(pred, gold);
    Ok(Prf::from_counts(c, p, g))
}

/// Cluster labels of the `annotated` messages: connected components of the
/// reply graph restricted to them.
pub fn clusters_from_graph(graph: &ReplyGraph, annotated: &[usize]) -> Vec<usize> {
    let sub = graph.induced(annotated);
    let mut labels = vec![0; annotated.len()];
    for (k, comp) in connected_components(&sub, annotated.len()).iter().enumerate() {
        for &i in comp {
            labels[i] = k;
        }
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub conversations: usize,
    pub targets: usize,
    pub graph_acc: Option<f64>,
    pub conv_acc: Option<f64>,
    pub edge_p: Option<f64>,
    pub edge_r: Option<f64>,
    pub edge_f: Option<f64>,
    pub scaled_vi: Option<f64>,
    pub one_to_one: Option<f64>,
    pub cluster_p: Option<f64>,
    pub cluster_r: Option<f64>,
    pub cluster_f: Option<f64>,
    pub vi_formula: String,
    /// Metrics whose denominator was empty and were reported as 0.
    pub degenerate: Vec<String>,
}

/// Fraction of targets whose predicted parents are all gold parents.
pub fn parent_accuracy(preds: &[Labeled], golds: &[Labeled]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Mismatch(format!("{} predictions for {} conversations", preds.len(), golds.len())));
    }
    let (mut correct, mut total) = (0, 0);
    for ((_, p), (conv, g)) in preds.iter().zip(golds) {
        same_size(p, g)?;
        for t in targets(conv) {
            total += 1;
            let ps = p.parents(t);
            correct += usize::from(!ps.is_empty() && ps.is_subset(g.parents(t)));
        }
    }
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}

/// Corpus-level report. Reddit: micro-averaged graph accuracy and
/// conversation accuracy. IRC: micro-averaged edge and exact-cluster
/// scores, and per-conversation VI and 1-1 averaged over conversations.
pub fn evaluate(preds: &[Labeled], golds: &[Labeled]) -> Result<MetricsReport> {
    if preds.len() != golds.len() {
        return Err(Error::Mismatch(format!("{} predictions for {} conversations", preds.len(), golds.len())));
    }
    let mode = golds.first().map_or(Mode::RedditTree, |(c, _)| c.mode);
    for ((pc, pg), (gc, gg)) in preds.iter().zip(golds) {
        if pc.conv_id != gc.conv_id {
            return Err(Error::Mismatch(format!("conversation `{}` paired with `{}`", pc.conv_id, gc.conv_id)));
        }
        same_size(pg, gg)?;
    }
    let mut r = MetricsReport {
        mode,
        conversations: golds.len(),
        targets: golds.iter().map(|(c, _)| targets(c).len()).sum(),
        graph_acc: None,
        conv_acc: None,
        edge_p: None,
        edge_r: None,
        edge_f: None,
        scaled_vi: None,
        one_to_one: None,
        cluster_p: None,
        cluster_r: None,
        cluster_f: None,
        vi_formula: VI_FORMULA.to_string(),
        degenerate: Vec::new(),
    };
    match mode {
        Mode::RedditTree => {
            let (mut correct, mut total) = (0, 0);
            for ((_, p), (_, g)) in preds.iter().zip(golds) {
                let (c, t) = graph_counts(p, g)?;
                correct += c;
                total += t;
            }
            r.graph_acc = Some(if total == 0 { 1.0 } else { correct as f64 / total as f64 });
            let pg: Vec<ReplyGraph> = preds.iter().map(|(_, g)| g.clone()).collect();
            let gg: Vec<ReplyGraph> = golds.iter().map(|(_, g)| g.clone()).collect();
            r.conv_acc = Some(conversation_accuracy(&pg, &gg)?);
        }
        Mode::IrcMultiParent => {
            let (mut ec, mut ep, mut eg) = (0, 0, 0);
            let (mut cc, mut cp, mut cg) = (0, 0, 0);
            let (mut vi, mut oto) = (0.0, 0.0);
            for ((_, p), (conv, g)) in preds.iter().zip(golds) {
                let annotated = targets(conv);
                let (a, b, c) = edge_counts(p, g, &annotated);
                ec += a;
                ep += b;
                eg += c;
                let pl = clusters_from_graph(p, &annotated);
                let gl = clusters_from_graph(g, &annotated);
                let (a, b, c) = exact_counts(&pl, &gl);
                cc += a;
                cp += b;
                cg += c;
                vi += scaled_vi(&pl, &gl)?;
                oto += one_to_one(&pl, &gl)?;
            }
            let edges = Prf::from_counts(ec, ep, eg);
            let exact = Prf::from_counts(cc, cp, cg);
            if edges.degenerate {
                r.degenerate.push("edge".into());
            }
            if exact.degenerate {
                r.degenerate.push("cluster".into());
            }
            let k = golds.len().max(1) as f64;
            r.edge_p = Some(edges.precision);
            r.edge_r = Some(edges.recall);
            r.edge_f = Some(edges.f1);
            r.scaled_vi = Some(if golds.is_empty() { 100.0 } else { vi / k });
            r.one_to_one = Some(if golds.is_empty() { 100.0 } else { oto / k });
            r.cluster_p = Some(exact.precision);
            r.cluster_r = Some(exact.recall);
            r.cluster_f = Some(exact.f1);
        }
    }
    Ok(r)
}

impl MetricsReport {
    /// Aligned two-column table; fractions as percentages.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.vi_formula);
        let _ = writeln!(out, "# mode {}, {} conversations, {} targets", self.mode.as_str(), self.conversations, self.targets);
        let rows: [(&str, Option<f64>, f64); 10] = [
            ("graph_acc", self.graph_acc, 100.0),
            ("conv_acc", self.conv_acc, 100.0),
            ("edge_p", self.edge_p, 100.0),
            ("edge_r", self.edge_r, 100.0),
            ("edge_f", self.edge_f, 100.0),
            ("scaled_vi", self.scaled_vi, 1.0),
            ("one_to_one", self.one_to_one, 1.0),
            ("cluster_p", self.cluster_p, 100.0),
            ("cluster_r", self.cluster_r, 100.0),
            ("cluster_f", self.cluster_f, 100.0),
        ];
        let _ = writeln!(out, "{:<12} {:>8}", "metric", "score");
        for (name, value, scale) in rows {
            if let Some(v) = value {
                let _ = writeln!(out, "{name:<12} {:>8.2}", v * scale);
            }
        }
        if !self.degenerate.is_empty() {
            let _ = writeln!(out, "# empty denominators reported as 0: {}", self.degenerate.join(", "));
        }
        out
    }
}

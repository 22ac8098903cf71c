use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::masking::AttentionMask;

/// Score written into masked attention cells before the softmax.
pub const MASK_FILL: f64 = -1e9;
/// Attention weights below this are snapped to exactly zero.
pub const WEIGHT_FLOOR: f64 = 1e-30;

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Generic 0/1 attention pattern (`rows` queries by `cols` keys).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<u8>,
}

impl MaskMatrix {
    pub fn new(rows: usize, cols: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::Shape(format!("mask {rows}x{cols} needs {} cells", rows * cols)));
        }
        Ok(MaskMatrix { rows, cols, cells })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        MaskMatrix {
            rows,
            cols,
            cells: vec![1; rows * cols],
        }
    }

    /// Every query may attend to every key whose flag is set.
    pub fn key_padding(rows: usize, keep: &[bool]) -> Self {
        let cols = keep.len();
        let row: Vec<u8> = keep.iter().map(|&k| u8::from(k)).collect();
        MaskMatrix {
            rows,
            cols,
            cells: row.repeat(rows),
        }
    }

    #[inline]
    fn allowed(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.cols + j] != 0
    }
}

impl From<&AttentionMask> for MaskMatrix {
    fn from(m: &AttentionMask) -> Self {
        let l = m.size();
        let cells = (0..l).flat_map(|i| m.row(i).to_vec()).collect();
        MaskMatrix { rows: l, cols: l, cells }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: NodeId, scale: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<f64> },
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SelectRows { x: NodeId, rows: Vec<usize> },
    MeanRows { x: NodeId, rows: Vec<usize> },
    Sum(NodeId),
    RankLoss { logits: NodeId, target: usize, probs: Vec<f64> },
    BceLoss { logits: NodeId, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass. Dropout is active only on training graphs.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    loaded: HashMap<ParamId, NodeId>,
    rng: Option<ChaCha8Rng>,
    done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            loaded: HashMap::new(),
            rng: None,
            done: false,
        }
    }

    pub fn training(seed: u64) -> Self {
        Graph {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Reads a parameter; repeated reads within one graph share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.loaded.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = self.push(p.value.clone(), Op::Param(id), p.requires_grad);
        self.loaded.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = mm(ta.data(), tb.data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let cols = ta.cols();
        if tb.len() != cols {
            return Err(Error::Shape(format!("bias of {} values for {cols} columns", tb.len())));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(cols) {
            row.iter_mut().zip(tb.data()).for_each(|(x, b)| *x += b);
        }
        let shape = ta.shape().to_vec();
        let ng = self.ng(&[a, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, bias), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("mul {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect()).unwrap();
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect()).unwrap();
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        let lanes = lanes(t, axis)?;
        let mut out = vec![0.0; t.len()];
        for lane in &lanes {
            let m = lane.iter().map(|&i| t.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for &i in lane {
                out[i] = (t.data()[i] - m).exp();
                s += out[i];
            }
            for &i in lane {
                out[i] /= s;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// the elementwise affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != cols || b.len() != cols {
            return Err(Error::Shape(format!("layer norm over {cols} features with {} / {} affine values", g.len(), b.len())));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Inverted dropout; identity on evaluation graphs or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let n = self.nodes[x.0].value.len();
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().zip(&scale).map(|(a, s)| a * s).collect()).unwrap();
        let ng = self.ng(&[x]);
        self.push(out, Op::Dropout { x, scale }, ng)
    }

    /// Multi-head scaled dot-product attention. Cells where `mask` is 0 get
    /// weight exactly 0. `q` is `Lq x D`, `k` and `v` are `Lk x D`.
    pub fn masked_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, mask: &MaskMatrix, heads: usize) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (lq, lk, d) = (tq.rows(), tk.rows(), tq.cols());
        if tk.cols() != d || tv.cols() != d || tv.rows() != lk {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{d} features cannot be split into {heads} heads")));
        }
        if mask.rows != lq || mask.cols != lk {
            return Err(Error::Shape(format!("mask {}x{} for scores {lq}x{lk}", mask.rows, mask.cols)));
        }
        if let Some(r) = (0..lq).find(|&i| (0..lk).all(|j| !mask.allowed(i, j))) {
            return Err(Error::Mask(format!("row {r} has nothing to attend to")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        let mut scores = vec![0.0; lk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut m = f64::NEG_INFINITY;
                for j in 0..lk {
                    let s = if mask.allowed(i, j) {
                        let kj = &kd[j * d + off..j * d + off + dh];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    } else {
                        MASK_FILL
                    };
                    scores[j] = s;
                    m = m.max(s);
                }
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let mut sum = 0.0;
                for j in 0..lk {
                    p[j] = (scores[j] - m).exp();
                    sum += p[j];
                }
                for j in 0..lk {
                    p[j] /= sum;
                    if p[j] < WEIGHT_FLOOR || !mask.allowed(i, j) {
                        p[j] = 0.0;
                    }
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..lk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += p[j] * x);
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(Tensor::matrix(lq, d, out)?, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (vocab, dim) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Shape(format!("id {bad} outside a table of {vocab} rows")));
        }
        let out: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let ng = self.ng(&[table]);
        Ok(self.push(Tensor::matrix(ids.len(), dim, out)?, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Stacks inputs vertically; vectors count as single rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map(|&p| self.value(p).cols()).ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Shape(format!("concat rows of width {} and {cols}", t.cols())));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Joins inputs side by side; all must have the same row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.value(p).rows()).ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat cols with different row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::Shape(format!("row {bad} of a {}-row tensor", t.rows())));
        }
        let out: Vec<f64> = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
        let cols = t.cols();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(rows.len(), cols, out)?, Op::SelectRows { x, rows: rows.to_vec() }, ng))
    }

    /// Mean of the listed rows, as a `1 x cols` matrix.
    pub fn mean_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= t.rows()) {
            return Err(Error::Shape("mean over an empty or out-of-range row set".into()));
        }
        let cols = t.cols();
        let mut out = vec![0.0; cols];
        for &r in rows {
            out.iter_mut().zip(t.row(r)).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(1, cols, out)?, Op::MeanRows { x, rows: rows.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Softmax cross-entropy over the first `candidates` logits with the
    /// true class `target`.
    pub fn rank_loss(&mut self, logits: NodeId, candidates: usize, target: usize) -> Result<NodeId> {
        let t = self.value(logits).data();
        if candidates == 0 || candidates > t.len() || target >= candidates {
            return Err(Error::InvalidLabel(format!(
                "target {target} among {candidates} candidates of {} logits",
                t.len()
            )));
        }
        let c = &t[..candidates];
        let m = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = c.iter().map(|x| (x - m).exp()).sum();
        let lse = m + z.ln();
        let probs: Vec<f64> = c.iter().map(|x| (x - lse).exp()).collect();
        let loss = lse - c[target];
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::RankLoss { logits, target, probs }, ng))
    }

    /// Sum of per-logit binary cross-entropies against 0/1 labels.
    pub fn bce_loss(&mut self, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
        let t = self.value(logits).data();
        if t.len() != labels.len() {
            return Err(Error::Shape(format!("{} logits for {} labels", t.len(), labels.len())));
        }
        let loss = t.iter().zip(labels).map(|(&x, &y)| softplus(x) - y * x).sum();
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceLoss { logits, labels: labels.to_vec() }, ng))
    }

    /// Reverse pass from the scalar `loss`. Parameter gradients are added to
    /// `store`. A graph can be differentiated only once.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.done {
            return Err(Error::StaleGraph);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward from a non-scalar of shape {:?}", self.value(loss).shape())));
        }
        self.done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |id: NodeId, contrib: Vec<f64>| {
                if !nodes[id.0].needs_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if nodes[a.0].needs_grad {
                        send(*a, mm_a_bt(&g, tb.data(), m, n, k));
                    }
                    if nodes[b.0].needs_grad {
                        send(*b, mm_at_b(ta.data(), &g, m, k, n));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(a, bias) => {
                    let cols = nodes[a.0].value.cols();
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    send(*bias, gb);
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    send(*a, g.iter().zip(tb).map(|(x, y)| x * y).collect());
                    send(*b, g.iter().zip(ta).map(|(x, y)| x * y).collect());
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
                Op::Gelu(a) => {
                    let xs = nodes[a.0].value.data();
                    send(*a, g.iter().zip(xs).map(|(gy, &x)| gy * gelu_grad(x)).collect());
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for lane in lanes(&node.value, *axis)? {
                        let dot: f64 = lane.iter().map(|&i| g[i] * y[i]).sum();
                        for &i in &lane {
                            gx[i] = y[i] * (g[i] - dot);
                        }
                    }
                    send(*x, gx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let cols = node.value.cols();
                    let gam = nodes[gamma.0].value.data();
                    let mut gg = vec![0.0; cols];
                    let mut gbeta = vec![0.0; cols];
                    let mut gx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                            gbeta[c] += gr[c];
                            let d = gr[c] * gam[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            gx[r * cols + c] = rs * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                    send(*gamma, gg);
                    send(*beta, gbeta);
                    send(*x, gx);
                }
                Op::Dropout { x, scale } => send(*x, g.iter().zip(scale).map(|(a, s)| a * s).collect()),
                Op::Attention { q, k, v, heads, probs } => {
                    let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let (lq, lk, d) = (tq.rows(), tk.rows(), tq.cols());
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                    let mut gq = vec![0.0; lq * d];
                    let mut gk = vec![0.0; lk * d];
                    let mut gv = vec![0.0; lk * d];
                    let mut dp = vec![0.0; lk];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..lq {
                            let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                            let go = &g[i * d + off..i * d + off + dh];
                            let mut dot = 0.0;
                            for j in 0..lk {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vd[j * d + off..j * d + off + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += p[j] * dp[j];
                                let gvj = &mut gv[j * d + off..j * d + off + dh];
                                gvj.iter_mut().zip(go).for_each(|(a, b)| *a += p[j] * b);
                            }
                            for j in 0..lk {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                for c in 0..dh {
                                    gq[i * d + off + c] += ds * kd[j * d + off + c];
                                    gk[j * d + off + c] += ds * qd[i * d + off + c];
                                }
                            }
                        }
                    }
                    send(*q, gq);
                    send(*k, gk);
                    send(*v, gv);
                }
                Op::Embedding { table, ids } => {
                    let t = &nodes[table.0].value;
                    let dim = t.cols();
                    let mut gt = vec![0.0; t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                            .for_each(|(a, b)| *a += b);
                    }
                    send(*table, gt);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        send(*p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut start = 0;
                    for p in parts {
                        let c = nodes[p.0].value.cols();
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + start..r * total + start + c]);
                        }
                        send(*p, gp);
                        start += c;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let t = &nodes[x.0].value;
                    let cols = t.cols();
                    let mut gx = vec![0.0; t.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        gx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                            .for_each(|(a, b)| *a += b);
                    }
                    send(*x, gx);
                }
                Op::MeanRows { x, rows } => {
                    let t = &nodes[x.0].value;
                    let cols = t.cols();
                    let inv = 1.0 / rows.len() as f64;
                    let mut gx = vec![0.0; t.len()];
                    for &r in rows {
                        gx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, b)| *a += b * inv);
                    }
                    send(*x, gx);
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    send(*x, vec![g[0]; n]);
                }
                Op::RankLoss { logits, target, probs } => {
                    let n = nodes[logits.0].value.len();
                    let mut gl = vec![0.0; n];
                    for (j, p) in probs.iter().enumerate() {
                        gl[j] = g[0] * (p - if j == *target { 1.0 } else { 0.0 });
                    }
                    send(*logits, gl);
                }
                Op::BceLoss { logits, labels } => {
                    let t = nodes[logits.0].value.data();
                    send(*logits, t.iter().zip(labels).map(|(&x, &y)| g[0] * (sigmoid(x) - y)).collect());
                }
            }
        }
        Ok(())
    }
}

fn lanes(t: &Tensor, axis: usize) -> Result<Vec<Vec<usize>>> {
    let (rows, cols) = (t.rows(), t.cols());
    match (t.shape().len(), axis) {
        (0 | 1, 0) | (2, 1) => Ok((0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect()),
        (2, 0) => Ok((0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()).collect()),
        _ => Err(Error::Shape(format!("softmax axis {axis} on shape {:?}", t.shape()))),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `a (m x k) * b (k x n)`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
        }
    }
    out
}

/// `g (m x n) * b^T` where `b` is `k x n`; result `m x k`.
fn mm_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * g` where `a` is `m x k` and `g` is `m x n`; result `k x n`.
fn mm_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(o, y)| *o += x * y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.insert(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_columns() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.matmul(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_collapses_to_self() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![-0.7, 0.1]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let mut cells = vec![1u8; 9];
        cells[3..6].copy_from_slice(&[0, 1, 0]);
        let mask = MaskMatrix::new(3, 3, cells).unwrap();
        let out = g.masked_attention(q, q, v, &mask, 1).unwrap();
        assert_eq!(g.value(out).row(1), &[3.0, 4.0]);
    }

    #[test]
    fn attention_rejects_empty_rows() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let mask = MaskMatrix::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert!(matches!(g.masked_attention(q, q, q, &mask, 1), Err(Error::Mask(_))));
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![0.5, 1.0], vec![-1.0, 2.0], vec![0.2, 0.2]]).unwrap());
        let mask = MaskMatrix::new(3, 3, vec![1, 0, 1, 1, 1, 0, 0, 0, 1]).unwrap();
        let _ = g.masked_attention(q, q, q, &mask, 2).unwrap();
        let Op::Attention { probs, .. } = &g.nodes.last().unwrap().op else { unreachable!() };
        for row in probs.chunks(3).enumerate() {
            let (r, p) = row;
            let i = r % 3;
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert!(p[j] >= 0.0);
                if !mask.allowed(i, j) {
                    assert_eq!(p[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 5.0, -2.0, 8.0], vec![0.1, 0.2, 0.3, 0.4]]).unwrap());
        let gamma = g.constant(Tensor::vector(vec![1.0; 4]));
        let beta = g.constant(Tensor::vector(vec![0.0; 4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn grad_of_sum_and_square() {
        let (mut s, ids) = store_with(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        let mut g = Graph::new();
        let x = g.param(&s, ids[0]);
        let y = g.sum(x);
        g.backward(y, &mut s).unwrap();
        assert_eq!(s.get(ids[0]).grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));

        let (mut s, ids) = store_with(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new();
        let x = g.param(&s, ids[0]);
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        g.backward(y, &mut s).unwrap();
        assert_eq!(s.get(ids[0]).grad.as_deref(), Some(&[2.0, 4.0][..]));
        assert!(matches!(g.backward(y, &mut s), Err(Error::StaleGraph)));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let (mut s, ids) = store_with(&[("enc.w", Tensor::vector(vec![1.0])), ("w", Tensor::vector(vec![2.0]))]);
        s.set_requires_grad("enc.", false);
        let mut g = Graph::new();
        let a = g.param(&s, ids[0]);
        let b = g.param(&s, ids[1]);
        let p = g.mul(a, b).unwrap();
        let y = g.sum(p);
        g.backward(y, &mut s).unwrap();
        assert!(s.get(ids[0]).grad.is_none());
        assert_eq!(s.get(ids[1]).grad.as_deref(), Some(&[1.0][..]));
    }

    #[test]
    fn losses() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = g.rank_loss(t, 2, 0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let t = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = g.rank_loss(t, 2, 0).unwrap();
        assert!((g.value(l).item() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        let b = g.bce_loss(t, &[1.0, 0.0]).unwrap();
        let expect = -(sigmoid(1.0).ln()) - (1.0 - sigmoid(0.0)).ln();
        assert!((g.value(b).item() - expect).abs() < 1e-15);
        assert!(matches!(g.rank_loss(t, 2, 2), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn dropout_identity_in_eval() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut t = Graph::training(3);
        let x = t.constant(Tensor::vector(vec![1.0; 1000]));
        let y = t.dropout(x, 0.5);
        let zeros = t.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 400 && zeros < 600);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}

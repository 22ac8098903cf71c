//! Layers assembled from graph ops. Each layer only stores [`ParamId`]s;
//! values live in the [`ParamStore`].

use rand::Rng;

use super::{Graph, MaskMatrix, NodeId, ParamId, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: store.insert_normal(format!("{name}.weight"), vec![input, output], std, rng),
            bias: store.insert_filled(format!("{name}.bias"), vec![output], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormLayer {
            gamma: store.insert_filled(format!("{name}.gamma"), vec![dim], 1.0),
            beta: store.insert_filled(format!("{name}.beta"), vec![dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Post-norm transformer encoder layer: masked self-attention and a GELU
/// feed-forward block, each followed by a residual add and layer norm.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNormLayer,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNormLayer,
    heads: usize,
    dropout: f64,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        intermediate: usize,
        heads: usize,
        dropout: f64,
        std: f64,
        rng: &mut R,
    ) -> Self {
        TransformerLayer {
            query: Linear::new(store, &format!("{name}.attn.query"), hidden, hidden, std, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), hidden, hidden, std, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), hidden, hidden, std, rng),
            output: Linear::new(store, &format!("{name}.attn.output"), hidden, hidden, std, rng),
            attn_norm: LayerNormLayer::new(store, &format!("{name}.attn.norm"), hidden),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), hidden, intermediate, std, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), intermediate, hidden, std, rng),
            ffn_norm: LayerNormLayer::new(store, &format!("{name}.ffn.norm"), hidden),
            heads,
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId, mask: &MaskMatrix) -> Result<NodeId> {
        let q = self.query.forward(g, s, x)?;
        let k = self.key.forward(g, s, x)?;
        let v = self.value.forward(g, s, x)?;
        let ctx = g.masked_attention(q, k, v, mask, self.heads)?;
        let attn = self.output.forward(g, s, ctx)?;
        let attn = g.dropout(attn, self.dropout);
        let res = g.add(x, attn)?;
        let h = self.attn_norm.forward(g, s, res)?;

        let f = self.ffn_in.forward(g, s, h)?;
        let f = g.gelu(f);
        let f = self.ffn_out.forward(g, s, f)?;
        let f = g.dropout(f, self.dropout);
        let res = g.add(h, f)?;
        self.ffn_norm.forward(g, s, res)
    }
}

//! The second-stage masked transformer over utterance vectors, the output
//! head and the two losses.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Window;
use crate::encoder::{extract_features, Encoder, EncoderConfig, Vocabulary, FEATURE_SCHEMA, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::graph::{Conversation, Mode};
use crate::masking::{AttentionMask, MaskKind};
use crate::tensor::nn::{Linear, TransformerLayer};
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Graph, MaskMatrix, NodeId, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Rank,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub dropout: f64,
    pub loss: LossKind,
    pub feature_mode: bool,
    /// Learned position embeddings on the second stage.
    pub positional: bool,
    pub max_window: usize,
    pub mask: MaskKind,
}

impl ModelConfig {
    /// Full-size second stage: 4 layers, hidden 300, intermediate 1024,
    /// 4 heads.
    pub fn full(mode: Mode, vocab_size: usize) -> Self {
        let (max_window, max_tokens, loss) = match mode {
            Mode::RedditTree => (16, 50, LossKind::Rank),
            Mode::IrcMultiParent => (40, 36, LossKind::Bce),
        };
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size,
                max_tokens,
                ..EncoderConfig::default()
            },
            layers: 4,
            hidden: 300,
            intermediate: 1024,
            heads: 4,
            dropout: 0.1,
            loss,
            feature_mode: mode == Mode::IrcMultiParent,
            positional: false,
            max_window,
            mask: MaskKind::Ancestor,
        }
    }

    /// Scaled-down preset for CPU runs.
    pub fn desk(mode: Mode, vocab_size: usize) -> Self {
        let full = Self::full(mode, vocab_size);
        ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 32,
                num_layers: 1,
                num_heads: 2,
                intermediate: 64,
                output_dim: 32,
                ..full.encoder
            },
            layers: 2,
            hidden: 32,
            intermediate: 64,
            heads: 2,
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_window < 2 {
            return Err(Error::InvalidConfig("max_window must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let MaskKind::Depth(0) = self.mask {
            return Err(Error::InvalidConfig("ancestor depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parent labels of one target, in window coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Index of the single true parent among the history rows.
    Rank(usize),
    /// 0/1 per window row, the target row included.
    Multi(Vec<f64>),
}

/// The position of the single positive among the history entries of `y`.
pub fn rank_target(y: &[f64]) -> Result<usize> {
    let hist = &y[..y.len().saturating_sub(1)];
    let pos: Vec<usize> = (0..hist.len()).filter(|&i| hist[i] != 0.0).collect();
    match (pos.as_slice(), y.last()) {
        ([p], Some(&0.0)) => Ok(*p),
        _ => Err(Error::InvalidLabel(format!(
            "rank loss needs exactly one history positive, got {y:?}"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    encoder: Encoder,
    input: Linear,
    positions: Option<ParamId>,
    layers: Vec<TransformerLayer>,
    head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder.clone(), &mut rng)?;
        let h = config.hidden;
        let std = 0.5 / (h as f64).sqrt();
        let in_dim = config.encoder.output_dim + if config.feature_mode { NUM_FEATURES } else { 0 };
        let input = Linear::new(&mut store, "stage2.input", in_dim, h, 1.0 / (in_dim as f64).sqrt(), &mut rng);
        let positions = config
            .positional
            .then(|| store.insert_normal("stage2.positions", vec![config.max_window, h], std, &mut rng));
        let layers = (0..config.layers)
            .map(|l| {
                TransformerLayer::new(
                    &mut store,
                    &format!("stage2.layer{l}"),
                    h,
                    config.intermediate,
                    config.heads,
                    config.dropout,
                    std,
                    &mut rng,
                )
            })
            .collect();
        let head = Linear::new(&mut store, "head", h, 1, std, &mut rng);
        Ok((
            Model {
                config,
                encoder,
                input,
                positions,
                layers,
                head,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Encoder output for each utterance, `n x output_dim`.
    pub fn encode_utterances(&self, g: &mut Graph, s: &ParamStore, tokens: &[Vec<usize>]) -> Result<NodeId> {
        let seqs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
        self.encoder.encode_batch(g, s, &seqs)
    }

    /// Projects the encoder vectors of the window rows (with pair features
    /// appended in feature mode) to the second-stage width.
    pub fn window_input(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        vectors: NodeId,
        features: Option<&[[f64; NUM_FEATURES]]>,
    ) -> Result<NodeId> {
        let l = g.value(vectors).rows();
        let x = match (self.config.feature_mode, features) {
            (true, Some(f)) => {
                if f.len() != l {
                    return Err(Error::Shape(format!("{} feature rows for {l} utterances", f.len())));
                }
                let ft = g.constant(Tensor::matrix(l, NUM_FEATURES, f.concat())?);
                g.concat_cols(&[vectors, ft])?
            }
            (true, None) => return Err(Error::Shape("feature mode needs pair features".into())),
            (false, Some(_)) => return Err(Error::Shape("pair features given with feature mode off".into())),
            (false, None) => vectors,
        };
        let x = self.input.forward(g, s, x)?;
        match self.positions {
            Some(p) => {
                if l > self.config.max_window {
                    return Err(Error::Shape(format!("window of {l} exceeds {} positions", self.config.max_window)));
                }
                let table = g.param(s, p);
                let pe = g.embedding(table, &(0..l).collect::<Vec<_>>())?;
                g.add(x, pe)
            }
            None => Ok(x),
        }
    }

    /// Second-stage transformer; every layer attends through `mask`.
    pub fn contextualize(&self, g: &mut Graph, s: &ParamStore, x: NodeId, mask: &AttentionMask) -> Result<NodeId> {
        let l = g.value(x).rows();
        if mask.size() != l {
            return Err(Error::Shape(format!("{l} utterances with a {0}x{0} mask", mask.size())));
        }
        let mm = MaskMatrix::from(mask);
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(g, s, x, &mm)?;
        }
        Ok(x)
    }

    /// One logit per utterance, `L x 1`.
    pub fn parent_logits(&self, g: &mut Graph, s: &ParamStore, ctx: NodeId) -> Result<NodeId> {
        self.head.forward(g, s, ctx)
    }

    /// Logits for a window whose encoder vectors are rows `rows` of
    /// `encoded`.
    pub fn window_logits(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        encoded: NodeId,
        rows: &[usize],
        features: Option<&[[f64; NUM_FEATURES]]>,
        mask: &AttentionMask,
    ) -> Result<NodeId> {
        let v = g.select_rows(encoded, rows)?;
        let x = self.window_input(g, s, v, features)?;
        let ctx = self.contextualize(g, s, x, mask)?;
        self.parent_logits(g, s, ctx)
    }

    pub fn loss(&self, g: &mut Graph, logits: NodeId, labels: &Labels) -> Result<NodeId> {
        let l = g.value(logits).len();
        match (self.config.loss, labels) {
            (LossKind::Rank, Labels::Rank(y)) => g.rank_loss(logits, l - 1, *y),
            (LossKind::Bce, Labels::Multi(y)) => g.bce_loss(logits, y),
            (LossKind::Rank, Labels::Multi(y)) => {
                let t = rank_target(y)?;
                g.rank_loss(logits, l - 1, t)
            }
            (LossKind::Bce, Labels::Rank(y)) => {
                let mut v = vec![0.0; l];
                *v.get_mut(*y).ok_or_else(|| Error::InvalidLabel(format!("parent {y} outside window")))? = 1.0;
                g.bce_loss(logits, &v)
            }
        }
    }

    /// Pair features for every row of `window` against its target, when
    /// feature mode is on.
    pub fn window_features(&self, conv: &Conversation, window: &Window) -> Option<Vec<[f64; NUM_FEATURES]>> {
        self.config.feature_mode.then(|| {
            let target = &conv.utterances[window.original[window.target]];
            window
                .original
                .iter()
                .map(|&i| extract_features(&conv.utterances[i], target, conv).scaled())
                .collect()
        })
    }

    /// The attention mask for a window; the target's own parents are never
    /// consulted.
    pub fn window_mask(&self, window: &Window) -> Result<AttentionMask> {
        let l = window.len();
        let history: Vec<usize> = (0..l - 1).collect();
        self.config.mask.build(&window.graph.induced(&history), l)
    }
}

/// A model together with its parameters and vocabulary.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub store: ParamStore,
    pub vocab: Vocabulary,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    vocab: Vec<String>,
    feature_schema: Option<String>,
    positional: bool,
}

impl TrainedModel {
    pub fn tokenize(&self, conv: &Conversation) -> Vec<Vec<usize>> {
        conv.utterances
            .iter()
            .map(|u| self.vocab.tokenize(&u.text, self.model.config.encoder.max_tokens))
            .collect()
    }

    fn meta(&self) -> Result<serde_json::Value> {
        let vocab = (3..self.vocab.len()).filter_map(|i| self.vocab.token(i).map(str::to_string)).collect();
        Ok(serde_json::to_value(Meta {
            model: self.model.config.clone(),
            vocab,
            feature_schema: self.model.config.feature_mode.then(|| FEATURE_SCHEMA.to_string()),
            positional: self.model.config.positional,
        })?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Checkpoint::to_bytes(&self.store, &self.meta()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store, &self.meta()?)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_value(ckpt.meta)?;
        let (model, mut store) = Model::new(meta.model, 0)?;
        store.load_values(&ckpt.params)?;
        Ok(TrainedModel {
            model,
            store,
            vocab: Vocabulary::from_tokens(meta.vocab),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(load_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ReplyGraph;
    use crate::masking::{ancestor_mask, full_mask};

    fn tiny(loss: LossKind, feature_mode: bool) -> (Model, ParamStore) {
        let mut cfg = ModelConfig::desk(Mode::RedditTree, 20);
        cfg.encoder.max_tokens = 6;
        cfg.hidden = 8;
        cfg.intermediate = 16;
        cfg.loss = loss;
        cfg.feature_mode = feature_mode;
        Model::new(cfg, 11).unwrap()
    }

    fn vectors(g: &mut Graph, rows: &[Vec<f64>]) -> NodeId {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    fn sample_rows(l: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..l)
            .map(|i| (0..dim).map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0).collect())
            .collect()
    }

    fn contextual(model: &Model, s: &ParamStore, rows: &[Vec<f64>], mask: &AttentionMask) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let v = vectors(&mut g, rows);
        let x = model.window_input(&mut g, s, v, None).unwrap();
        let c = model.contextualize(&mut g, s, x, mask).unwrap();
        let t = g.value(c);
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    #[test]
    fn presets() {
        let full = ModelConfig::full(Mode::RedditTree, 100);
        assert_eq!((full.layers, full.hidden, full.intermediate, full.heads), (4, 300, 1024, 4));
        assert_eq!(full.loss, LossKind::Rank);
        assert!(!full.positional);
        let irc = ModelConfig::full(Mode::IrcMultiParent, 100);
        assert_eq!((irc.max_window, irc.encoder.max_tokens, irc.loss), (40, 36, LossKind::Bce));
        let mut bad = full.clone();
        bad.hidden = 301;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_row_window() {
        let (model, s) = tiny(LossKind::Rank, false);
        let rows = sample_rows(1, 32);
        let a = contextual(&model, &s, &rows, &full_mask(1));
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].len(), 8);
    }

    #[test]
    fn ancestor_mask_blocks_information() {
        let (model, s) = tiny(LossKind::Rank, false);
        // 0 <- 1 <- 3, 0 <- 2, target 4
        let graph = ReplyGraph::from_parent_vec(&[0, 0, 0, 1]);
        let mask = ancestor_mask(&graph, 5).unwrap();
        let rows = sample_rows(5, 32);
        let base = contextual(&model, &s, &rows, &mask);
        let mut moved = rows.clone();
        moved[2][0] += 3.0;
        let after = contextual(&model, &s, &moved, &mask);
        // row 2 is outside the ancestors of 0, 1, 3 and of the target
        for i in [0, 1, 3, 4] {
            assert_eq!(base[i], after[i], "row {i}");
        }
        assert_ne!(base[2], after[2]);

        let full = contextual(&model, &s, &rows, &full_mask(5));
        let full_after = contextual(&model, &s, &moved, &full_mask(5));
        assert!((0..5).filter(|&i| i != 2).any(|i| full[i] != full_after[i]));
    }

    #[test]
    fn mask_size_must_match() {
        let (model, s) = tiny(LossKind::Rank, false);
        let mut g = Graph::new();
        let v = vectors(&mut g, &sample_rows(3, 32));
        let x = model.window_input(&mut g, &s, v, None).unwrap();
        assert!(matches!(model.contextualize(&mut g, &s, x, &full_mask(4)), Err(Error::Shape(_))));
    }

    #[test]
    fn head_logits() {
        let (model, mut s) = tiny(LossKind::Rank, false);
        let w = model.head().weight;
        let b = model.head().bias;
        s.get_mut(w).value.data_mut().fill(0.0);
        for c in [0.0, 1.7] {
            s.get_mut(b).value.data_mut()[0] = c;
            let mut g = Graph::new();
            let v = vectors(&mut g, &sample_rows(4, 32));
            let x = model.window_input(&mut g, &s, v, None).unwrap();
            let ctx = model.contextualize(&mut g, &s, x, &full_mask(4)).unwrap();
            let t = model.parent_logits(&mut g, &s, ctx).unwrap();
            assert_eq!(g.value(t).shape(), &[4, 1]);
            assert!(g.value(t).data().iter().all(|&x| x == c));
        }
    }

    #[test]
    fn label_checks() {
        assert_eq!(rank_target(&[0.0, 1.0, 0.0]).unwrap(), 1);
        assert!(matches!(rank_target(&[0.0, 0.0, 0.0]), Err(Error::InvalidLabel(_))));
        assert!(matches!(rank_target(&[1.0, 1.0, 0.0]), Err(Error::InvalidLabel(_))));
        assert!(matches!(rank_target(&[1.0, 0.0, 1.0]), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn loss_values() {
        let (model, _) = tiny(LossKind::Rank, false);
        let mut g = Graph::new();
        let t = g.constant(Tensor::vector(vec![0.0, 0.0, 5.0]));
        let l = model.loss(&mut g, t, &Labels::Rank(0)).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let t = g.constant(Tensor::vector(vec![1.0, 0.0, 5.0]));
        let l = model.loss(&mut g, t, &Labels::Rank(0)).unwrap();
        assert!((g.value(l).item() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);

        let (bce, _) = tiny(LossKind::Bce, false);
        let t = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = bce.loss(&mut g, t, &Labels::Multi(vec![1.0, 0.0])).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
        let l = bce.loss(&mut g, t, &Labels::Multi(vec![1.0, 1.0])).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn feature_projection_is_linear_in_the_features() {
        let (with, s) = tiny(LossKind::Rank, true);
        let rows = sample_rows(3, 32);
        let mut g = Graph::new();
        let v = vectors(&mut g, &rows);
        let zero = [[0.0; NUM_FEATURES]; 3];
        let x = with.window_input(&mut g, &s, v, Some(&zero)).unwrap();
        // with zero features only the V slots of the projection contribute
        let w = s.value(with.input.weight);
        let b = s.value(with.input.bias);
        for (r, row) in rows.iter().enumerate() {
            for c in 0..8 {
                let expect: f64 = b.data()[c] + row.iter().enumerate().map(|(k, x)| x * w.data()[k * 8 + c]).sum::<f64>();
                assert!((g.value(x).row(r)[c] - expect).abs() < 1e-12);
            }
        }
        assert!(with.window_input(&mut g, &s, v, None).is_err());
        let (without, s2) = tiny(LossKind::Rank, false);
        let mut g2 = Graph::new();
        let v2 = vectors(&mut g2, &rows);
        let y = without.window_input(&mut g2, &s2, v2, None).unwrap();
        assert_eq!(g2.value(y).shape(), g.value(x).shape());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, store) = tiny(LossKind::Rank, false);
        let tm = TrainedModel {
            model,
            store,
            vocab: Vocabulary::from_tokens(["a", "b"]),
        };
        let back = TrainedModel::from_checkpoint(Checkpoint::from_bytes(&tm.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.model.config(), tm.model.config());
        assert_eq!(back.vocab, tm.vocab);
        assert_eq!(back.store.checksum(""), tm.store.checksum(""));
    }
}

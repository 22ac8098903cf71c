//! Utterance encoder: tokenization, a small transformer (or mean-pool)
//! producing one vector per utterance, and hand-crafted pair features.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::graph::{Conversation, Utterance};
use crate::tensor::nn::{LayerNormLayer, Linear, TransformerLayer};
use crate::tensor::{Graph, MaskMatrix, NodeId, ParamId, ParamStore};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Lowercases and splits into runs of alphanumerics; every other
/// non-whitespace character is a token of its own.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Reserved entries followed by `tokens` in order.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocabulary {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        for (i, t) in v.tokens.iter().enumerate() {
            v.index.insert(t.clone(), i);
        }
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Most frequent first, ties alphabetical. `max_size` counts the
    /// reserved entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for t in split_tokens(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(max) = max_size {
            ranked.truncate(max.saturating_sub(RESERVED.len()));
        }
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// CLS, then token ids, truncated and padded to exactly `max_tokens`.
    pub fn tokenize(&self, text: &str, max_tokens: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(max_tokens);
        ids.push(CLS);
        ids.extend(split_tokens(text).iter().map(|t| self.id(t)));
        ids.resize(max_tokens, PAD);
        ids
    }

    /// One token per line; line `n` (from 0) holds id `n + 3`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_tokens(text.lines().filter(|l| !l.is_empty())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate: usize,
    pub max_tokens: usize,
    pub output_dim: usize,
    pub kind: EncoderKind,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            embed_dim: 128,
            num_layers: 2,
            num_heads: 4,
            intermediate: 512,
            max_tokens: 50,
            output_dim: 256,
            kind: EncoderKind::Transformer,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= CLS {
            return Err(Error::InvalidConfig("vocabulary must hold more than the reserved tokens".into()));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.max_tokens == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("max_tokens and output_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Parameter-name prefix of every encoder tensor.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    tokens: ParamId,
    positions: Option<ParamId>,
    embed_norm: Option<LayerNormLayer>,
    layers: Vec<TransformerLayer>,
    pooler: Linear,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let std = 0.02_f64.max(1.0 / (config.embed_dim as f64).sqrt() * 0.5);
        let d = config.embed_dim;
        let tokens = store.insert_normal("encoder.tokens", vec![config.vocab_size, d], std, rng);
        let transformer = config.kind == EncoderKind::Transformer;
        let positions =
            transformer.then(|| store.insert_normal("encoder.positions", vec![config.max_tokens, d], std, rng));
        let embed_norm = transformer.then(|| LayerNormLayer::new(store, "encoder.embed_norm", d));
        let layers = (0..if transformer { config.num_layers } else { 0 })
            .map(|l| {
                TransformerLayer::new(
                    store,
                    &format!("encoder.layer{l}"),
                    d,
                    config.intermediate,
                    config.num_heads,
                    config.dropout,
                    std,
                    rng,
                )
            })
            .collect();
        let pooler = Linear::new(store, "encoder.pooler", d, config.output_dim, 1.0 / (d as f64).sqrt(), rng);
        Ok(Encoder {
            config,
            tokens,
            positions,
            embed_norm,
            layers,
            pooler,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes each sequence to one row of an `n x output_dim` matrix.
    ///
    /// Padding never takes part in the computation: sequences are trimmed
    /// at their first PAD and packed side by side with a block-diagonal
    /// attention mask, so adding or removing trailing PADs cannot change
    /// the output.
    pub fn encode_batch(&self, g: &mut Graph, s: &ParamStore, seqs: &[&[usize]]) -> Result<NodeId> {
        if seqs.is_empty() {
            return Err(Error::Shape("no sequences to encode".into()));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.len() > self.config.max_tokens {
                return Err(Error::Shape(format!(
                    "sequence of {} ids exceeds max_tokens {}",
                    seq.len(),
                    self.config.max_tokens
                )));
            }
            let len = seq.iter().position(|&t| t == PAD).unwrap_or(seq.len());
            if len == 0 {
                return Err(Error::Shape("sequence has no tokens".into()));
            }
            spans.push((ids.len(), len));
            ids.extend_from_slice(&seq[..len]);
            pos.extend(0..len);
        }
        let table = g.param(s, self.tokens);
        let emb = g.embedding(table, &ids)?;
        let pooled = match (self.positions, &self.embed_norm) {
            (None, _) | (_, None) => {
                let means = spans
                    .iter()
                    .map(|&(start, len)| g.mean_rows(emb, &(start..start + len).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?;
                g.concat_rows(&means)?
            }
            (Some(positions), Some(embed_norm)) => {
                let ptable = g.param(s, positions);
                let pemb = g.embedding(ptable, &pos)?;
                let x = g.add(emb, pemb)?;
                let mut x = embed_norm.forward(g, s, x)?;
                x = g.dropout(x, self.config.dropout);
                let total = ids.len();
                let mut cells = vec![0u8; total * total];
                for &(start, len) in &spans {
                    for i in start..start + len {
                        cells[i * total + start..i * total + start + len].fill(1);
                    }
                }
                let mask = MaskMatrix::new(total, total, cells)?;
                for layer in &self.layers {
                    x = layer.forward(g, s, x, &mask)?;
                }
                let firsts: Vec<usize> = spans.iter().map(|&(start, _)| start).collect();
                g.select_rows(x, &firsts)?
            }
        };
        self.pooler.forward(g, s, pooled)
    }

    pub fn encode(&self, g: &mut Graph, s: &ParamStore, seq: &[usize]) -> Result<NodeId> {
        self.encode_batch(g, s, &[seq])
    }
}

/// Identifier of the pair-feature layout below; stored with checkpoints.
pub const FEATURE_SCHEMA: &str = "pair-features-v1 (approximation of the IRC feature set)";
pub const NUM_FEATURES: usize = 9;

/// Features of a (history, target) utterance pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FeatureVector {
    pub position_gap: f64,
    pub log_time_gap: f64,
    pub same_author: f64,
    pub target_mentions_author: f64,
    pub author_mentions_target: f64,
    pub is_system: f64,
    pub length: f64,
    pub year: f64,
    pub frequency_bucket: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.position_gap,
            self.log_time_gap,
            self.same_author,
            self.target_mentions_author,
            self.author_mentions_target,
            self.is_system,
            self.length,
            self.year,
            self.frequency_bucket,
        ]
    }

    /// Fixed rescaling to roughly unit range, used as model input.
    pub fn scaled(&self) -> [f64; NUM_FEATURES] {
        [
            self.position_gap / 10.0,
            self.log_time_gap / 10.0,
            self.same_author,
            self.target_mentions_author,
            self.author_mentions_target,
            self.is_system,
            self.length / 100.0,
            (self.year - 2000.0) / 10.0,
            self.frequency_bucket / 5.0,
        ]
    }
}

/// The name a message addresses with a leading `name:` or `name,`.
pub fn addressee(text: &str) -> Option<&str> {
    let text = text.trim_start();
    let end = text.find([':', ','])?;
    let name = &text[..end];
    (!name.is_empty() && !name.contains(char::is_whitespace)).then_some(name)
}

fn addresses(text: &str, author: &str) -> bool {
    !author.is_empty() && addressee(text).is_some_and(|n| n.eq_ignore_ascii_case(author))
}

fn is_system(u: &Utterance) -> bool {
    u.author.is_empty() || u.author == "*" || u.text.starts_with("===")
}

fn year_of(unix_seconds: i64) -> i64 {
    // civil-from-days over the proleptic Gregorian calendar
    let z = unix_seconds.div_euclid(86_400) + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    yoe + era * 400 + i64::from(month <= 2)
}

pub fn extract_features(history: &Utterance, target: &Utterance, conv: &Conversation) -> FeatureVector {
    let messages = conv.utterances.iter().filter(|u| u.author == history.author).count();
    FeatureVector {
        position_gap: target.index.abs_diff(history.index) as f64,
        log_time_gap: ((target.timestamp - history.timestamp).unsigned_abs() as f64).ln_1p(),
        same_author: f64::from(u8::from(history.author == target.author)),
        target_mentions_author: f64::from(u8::from(addresses(&target.text, &history.author))),
        author_mentions_target: f64::from(u8::from(addresses(&history.text, &target.author))),
        is_system: f64::from(u8::from(is_system(history))),
        length: history.text.chars().count() as f64,
        year: year_of(history.timestamp) as f64,
        frequency_bucket: ((messages + 1) as f64).log2().floor(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["hello , world", "the cat sat on the mat ."], 1, None)
    }

    #[test]
    fn tokenizes() {
        let v = vocab();
        let ids = v.tokenize("Hello, world", 8);
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[0], CLS);
        assert_eq!(&ids[1..4], &[v.id("hello"), v.id(","), v.id("world")]);
        assert!(ids[4..].iter().all(|&i| i == PAD));
        assert_ne!(v.id("hello"), UNK);

        let long = vec!["cat"; 60].join(" ");
        let ids = v.tokenize(&long, 50);
        assert_eq!(ids.len(), 50);
        assert_eq!(ids[0], CLS);
        assert!(ids[1..].iter().all(|&i| i == v.id("cat")));

        assert_eq!(v.tokenize("zebra", 3), vec![CLS, UNK, PAD]);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = vocab();
        assert_eq!(v.id("the"), 3);
        let text = v.to_file_string();
        assert_eq!(text.lines().next(), Some("the"));
        assert_eq!(Vocabulary::from_tokens(text.lines()), v);
    }

    fn encoder(kind: EncoderKind) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EncoderConfig {
            vocab_size: vocab().len(),
            embed_dim: 16,
            num_layers: 2,
            num_heads: 4,
            intermediate: 32,
            max_tokens: 12,
            output_dim: 8,
            kind,
            dropout: 0.1,
        };
        (Encoder::new(&mut store, cfg, &mut rng).unwrap(), store)
    }

    fn encode(enc: &Encoder, store: &ParamStore, ids: &[usize]) -> Vec<f64> {
        let mut g = Graph::new();
        let v = enc.encode(&mut g, store, ids).unwrap();
        g.value(v).data().to_vec()
    }

    #[test]
    fn output_shape_and_determinism() {
        let v = vocab();
        for kind in [EncoderKind::Transformer, EncoderKind::MeanPool] {
            let (enc, store) = encoder(kind);
            let ids = v.tokenize("the cat sat", 12);
            let a = encode(&enc, &store, &ids);
            assert_eq!(a.len(), 8);
            assert_eq!(a, encode(&enc, &store, &ids));
            assert!(matches!(
                enc.encode(&mut Graph::new(), &store, &[CLS; 13]),
                Err(Error::Shape(_))
            ));
        }
    }

    #[test]
    fn padding_is_invisible() {
        let v = vocab();
        let (enc, store) = encoder(EncoderKind::Transformer);
        let short = v.tokenize("the cat sat", 4);
        let long = v.tokenize("the cat sat", 12);
        assert_eq!(encode(&enc, &store, &short), encode(&enc, &store, &long));
    }

    #[test]
    fn key_padding_matches_trimmed_rows() {
        let (enc, store) = encoder(EncoderKind::Transformer);
        let mut g = Graph::new();
        let x = g.constant(crate::tensor::Tensor::from_rows(&[vec![0.5; 16], vec![-0.5; 16], vec![9.0; 16]]).unwrap());
        let mask = MaskMatrix::key_padding(3, &[true, true, false]);
        let a = enc.layers[0].forward(&mut g, &store, x, &mask).unwrap();
        let x2 = g.constant(crate::tensor::Tensor::from_rows(&[vec![0.5; 16], vec![-0.5; 16]]).unwrap());
        let b = enc.layers[0].forward(&mut g, &store, x2, &MaskMatrix::ones(2, 2)).unwrap();
        assert_eq!(&g.value(a).data()[..32], g.value(b).data());
    }

    #[test]
    fn batch_equals_single() {
        let v = vocab();
        let (enc, store) = encoder(EncoderKind::Transformer);
        let a = v.tokenize("the cat", 12);
        let b = v.tokenize("hello , world the mat", 12);
        let mut g = Graph::new();
        let both = enc.encode_batch(&mut g, &store, &[&a, &b]).unwrap();
        let both = g.value(both).data().to_vec();
        assert_eq!(&both[..8], &encode(&enc, &store, &a)[..]);
        assert_eq!(&both[8..], &encode(&enc, &store, &b)[..]);
    }

    #[test]
    fn order_sensitivity_per_kind() {
        let v = vocab();
        let ab = v.tokenize("cat mat", 12);
        let ba = v.tokenize("mat cat", 12);
        let (enc, store) = encoder(EncoderKind::Transformer);
        assert_ne!(encode(&enc, &store, &ab), encode(&enc, &store, &ba));
        let (enc, store) = encoder(EncoderKind::MeanPool);
        let x = encode(&enc, &store, &ab);
        let y = encode(&enc, &store, &ba);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    fn utt(i: usize, author: &str, ts: i64, text: &str) -> Utterance {
        Utterance {
            id: format!("m{i}"),
            index: i,
            author: author.into(),
            timestamp: ts,
            text: text.into(),
            is_context: false,
        }
    }

    #[test]
    fn pair_features() {
        let conv = Conversation {
            conv_id: "c".into(),
            mode: Mode::IrcMultiParent,
            utterances: vec![
                utt(0, "bob", 1_420_070_400, "my machine hangs"),
                utt(1, "bob", 1_420_070_405, "any ideas"),
                utt(2, "amy", 1_420_070_410, "bob: try rebooting"),
            ],
        };
        let u = &conv.utterances;
        let f = extract_features(&u[0], &u[1], &conv);
        assert_eq!(f.same_author, 1.0);
        assert_eq!(f.position_gap, 1.0);
        assert!((f.log_time_gap - 6f64.ln()).abs() < 1e-15);
        assert_eq!(f.year, 2015.0);

        let s = extract_features(&u[1], &u[1], &conv);
        assert_eq!((s.position_gap, s.log_time_gap), (0.0, 0.0));

        let m = extract_features(&u[1], &u[2], &conv);
        assert_eq!(m.target_mentions_author, 1.0);
        assert_eq!(m.author_mentions_target, 0.0);
        assert_eq!(m.same_author, 0.0);
        assert!(m.to_array().iter().all(|x| x.is_finite()));
        assert_eq!(m.frequency_bucket, 1.0);
    }

    #[test]
    fn years() {
        assert_eq!(year_of(0), 1970);
        assert_eq!(year_of(951_782_400), 2000); // 2000-02-29
        assert_eq!(year_of(1_704_067_199), 2023);
        assert_eq!(year_of(1_704_067_200), 2024);
    }

    #[test]
    fn addressing() {
        assert_eq!(addressee("bob: hi"), Some("bob"));
        assert_eq!(addressee("  bob, hi"), Some("bob"));
        assert_eq!(addressee("well then: hi"), None);
        assert_eq!(addressee("hi"), None);
    }
}

//! Two-stage training: the second stage and head with the utterance encoder
//! frozen, then everything jointly. Masks always come from gold structure.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{target_window, targets, Labeled};
use crate::decode::{reconstruct, DecodeRule};
use crate::encoder::{Vocabulary, ENCODER_PREFIX, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::masking::AttentionMask;
use crate::metrics::parent_accuracy;
use crate::model::{Labels, LossKind, Model, ModelConfig, TrainedModel};
use crate::tensor::{Adam, AdamConfig, Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_lr: f64,
    pub stage1_batch: usize,
    pub stage1_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_batch: usize,
    pub stage2_epochs: usize,
    pub early_stopping_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::reddit()
    }
}

impl TrainConfig {
    pub fn reddit() -> Self {
        TrainConfig {
            stage1_lr: 1e-4,
            stage1_batch: 32,
            stage1_epochs: 10,
            stage2_lr: 1e-5,
            stage2_batch: 8,
            stage2_epochs: 10,
            early_stopping_patience: 3,
            seed: 0,
        }
    }

    pub fn irc() -> Self {
        TrainConfig {
            stage1_lr: 1e-5,
            stage1_batch: 32,
            stage1_epochs: 10,
            stage2_lr: 1e-7,
            stage2_batch: 4,
            stage2_epochs: 10,
            ..Self::reddit()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::RedditTree => Self::reddit(),
            Mode::IrcMultiParent => Self::irc(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs_ok = self.stage1_lr > 0.0 && self.stage2_lr > 0.0 && self.stage1_lr.is_finite() && self.stage2_lr.is_finite();
        if !lrs_ok {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(Error::InvalidConfig("each stage needs at least one epoch".into()));
        }
        if self.stage1_batch == 0 || self.stage2_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// TOML, or JSON when the file name ends in `.json`. Missing keys take
    /// the Reddit defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub step: usize,
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_graph_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub encoder_checksum_initial: String,
    pub encoder_checksum_after_stage1: String,
    pub encoder_checksum_after_stage2: String,
    pub best_stage: u8,
    pub best_epoch: usize,
    pub best_dev_graph_acc: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,epoch,train_loss,dev_graph_acc\n");
        for e in &self.log {
            let _ = writeln!(out, "{},{},{},{:.10},{:.6}", e.step, e.stage, e.epoch, e.train_loss, e.dev_graph_acc);
        }
        out
    }
}

/// One training example: a target, its window and gold labels.
#[derive(Debug, Clone)]
struct Sample {
    conv: usize,
    rows: Vec<usize>,
    features: Option<Vec<[f64; NUM_FEATURES]>>,
    mask: AttentionMask,
    labels: Labels,
}

fn build_samples(model: &Model, corpus: &[Labeled]) -> Result<Vec<Vec<Sample>>> {
    let cfg = model.config();
    corpus
        .iter()
        .enumerate()
        .map(|(ci, (conv, gold))| {
            let mut out = Vec::new();
            for t in targets(conv) {
                let window = target_window(conv, gold, t, cfg.max_window)?;
                let parents = gold.parents(t);
                let labels = match cfg.loss {
                    LossKind::Rank => {
                        let Some(p) = window.original.iter().position(|i| parents.contains(i)) else {
                            continue;
                        };
                        if window.len() < 2 || p == window.target {
                            continue;
                        }
                        Labels::Rank(p)
                    }
                    LossKind::Bce => Labels::Multi(
                        window
                            .original
                            .iter()
                            .map(|i| f64::from(u8::from(parents.contains(i))))
                            .collect(),
                    ),
                };
                out.push(Sample {
                    conv: ci,
                    features: model.window_features(conv, &window),
                    mask: model.window_mask(&window)?,
                    rows: window.original,
                    labels,
                });
            }
            Ok(out)
        })
        .collect()
}

/// Dev score used for early stopping: the fraction of targets whose
/// free-running predicted parents are all gold parents.
pub fn dev_graph_accuracy(tm: &TrainedModel, dev: &[Labeled]) -> Result<f64> {
    let preds = dev
        .iter()
        .map(|(conv, _)| Ok((conv.clone(), reconstruct(tm, conv, None, DecodeRule::Top1)?.graph)))
        .collect::<Result<Vec<_>>>()?;
    parent_accuracy(&preds, dev)
}

struct Trainer<'a> {
    tm: TrainedModel,
    tokens: Vec<Vec<Vec<usize>>>,
    samples: Vec<Vec<Sample>>,
    dev: &'a [Labeled],
    config: &'a TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    log: Vec<EpochLog>,
    best: Option<(f64, u8, usize, ParamStore)>,
}

impl Trainer<'_> {
    fn batch_loss(&self, g: &mut Graph, batch: &[&Sample], frozen: Option<&[Tensor]>) -> Result<NodeId> {
        let model = &self.tm.model;
        let s = &self.tm.store;
        let mut encoded: Vec<(usize, NodeId)> = Vec::new();
        let mut losses = Vec::with_capacity(batch.len());
        for sample in batch {
            let enc = match encoded.iter().find(|(c, _)| *c == sample.conv) {
                Some(&(_, e)) => e,
                None => {
                    let e = match frozen {
                        Some(cache) => g.constant(cache[sample.conv].clone()),
                        None => model.encode_utterances(g, s, &self.tokens[sample.conv])?,
                    };
                    encoded.push((sample.conv, e));
                    e
                }
            };
            let logits = model.window_logits(g, s, enc, &sample.rows, sample.features.as_deref(), &sample.mask)?;
            losses.push(model.loss(g, logits, &sample.labels)?);
        }
        let stacked = g.concat_rows(&losses)?;
        let total = g.sum(stacked);
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    fn epoch_order(&mut self) -> Vec<(usize, usize)> {
        let mut convs: Vec<usize> = (0..self.samples.len()).collect();
        convs.shuffle(&mut self.rng);
        let mut order = Vec::new();
        for c in convs {
            let mut idx: Vec<usize> = (0..self.samples[c].len()).collect();
            idx.shuffle(&mut self.rng);
            order.extend(idx.into_iter().map(|i| (c, i)));
        }
        order
    }

    fn run_stage(&mut self, stage: u8, lr: f64, batch: usize, epochs: usize) -> Result<()> {
        let frozen = stage == 1;
        self.tm.store.set_requires_grad(ENCODER_PREFIX, !frozen);
        let cache: Option<Vec<Tensor>> = if frozen {
            Some(
                self.tokens
                    .iter()
                    .map(|t| {
                        let mut g = Graph::new();
                        let e = self.tm.model.encode_utterances(&mut g, &self.tm.store, t)?;
                        Ok(g.value(e).clone())
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
        let mut since_best = 0;
        for epoch in 1..=epochs {
            let order = self.epoch_order();
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(batch) {
                self.step += 1;
                let mut g = Graph::training(self.config.seed ^ (self.step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let refs: Vec<&Sample> = chunk.iter().map(|&(c, i)| &self.samples[c][i]).collect();
                let loss = self.batch_loss(&mut g, &refs, cache.as_deref())?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { step: self.step, loss: value });
                }
                g.backward(loss, &mut self.tm.store)?;
                adam.step(&mut self.tm.store)?;
                sum += value;
                batches += 1;
            }
            let dev = if self.dev.is_empty() { 0.0 } else { dev_graph_accuracy(&self.tm, self.dev)? };
            let train_loss = if batches == 0 { 0.0 } else { sum / batches as f64 };
            log::info!("stage {stage} epoch {epoch}: train loss {train_loss:.5}, dev graph acc {dev:.4}");
            self.log.push(EpochLog {
                step: self.step,
                stage,
                epoch,
                train_loss,
                dev_graph_acc: dev,
            });
            let improved = self.best.as_ref().is_none_or(|b| dev > b.0 || self.dev.is_empty());
            if improved {
                self.best = Some((dev, stage, epoch, self.tm.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if self.config.early_stopping_patience > 0 && since_best >= self.config.early_stopping_patience {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Trains a model on `train`, early-stopping on `dev`, and returns the
/// parameters with the best dev score. The vocabulary is built from the
/// training texts unless one is given.
pub fn train_two_stage(
    train: &[Labeled],
    dev: &[Labeled],
    model_config: &ModelConfig,
    config: &TrainConfig,
    vocab: Option<Vocabulary>,
) -> Result<(TrainedModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = vocab.unwrap_or_else(|| {
        Vocabulary::build(
            train.iter().flat_map(|(c, _)| c.utterances.iter().map(|u| u.text.as_str())),
            1,
            None,
        )
    });
    let mut mc = model_config.clone();
    mc.encoder.vocab_size = vocab.len();
    let (model, store) = Model::new(mc, config.seed)?;
    let tm = TrainedModel { model, store, vocab };
    let tokens: Vec<Vec<Vec<usize>>> = train.iter().map(|(c, _)| tm.tokenize(c)).collect();
    let samples = build_samples(&tm.model, train)?;
    if samples.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    let initial = tm.store.checksum(ENCODER_PREFIX);
    let mut trainer = Trainer {
        tm,
        tokens,
        samples,
        dev,
        config,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        step: 0,
        log: Vec::new(),
        best: None,
    };
    trainer.run_stage(1, config.stage1_lr, config.stage1_batch, config.stage1_epochs)?;
    let after1 = trainer.tm.store.checksum(ENCODER_PREFIX);
    if let Some((_, _, _, best)) = &trainer.best {
        trainer.tm.store = best.clone();
    }
    trainer.run_stage(2, config.stage2_lr, config.stage2_batch, config.stage2_epochs)?;
    let after2 = trainer.tm.store.checksum(ENCODER_PREFIX);
    let (best_dev, best_stage, best_epoch, best_store) = trainer.best.take().expect("at least one epoch ran");
    let mut tm = trainer.tm;
    tm.store = best_store;
    tm.store.set_requires_grad("", true);
    tm.store.zero_grads();
    Ok((
        tm,
        TrainReport {
            log: trainer.log,
            encoder_checksum_initial: initial,
            encoder_checksum_after_stage1: after1,
            encoder_checksum_after_stage2: after2,
            best_stage,
            best_epoch,
            best_dev_graph_acc: best_dev,
        },
    ))
}

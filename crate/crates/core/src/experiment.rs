//! Mask ablation sweeps: train one model per mask variant on the same
//! splits and compare test scores with the predict-first baseline.

use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{target_window, Labeled};
use crate::decode::{predict_first_baseline, reconstruct_corpus, DecodeRule};
use crate::encoder::{EncoderConfig, EncoderKind, Vocabulary};
use crate::error::{Error, Result};
use crate::masking::MaskKind;
use crate::metrics::evaluate;
use crate::model::{Labels, LossKind, Model, ModelConfig};
use crate::synth::{generate_corpus, SynthConfig};
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport};
use crate::train::{train_two_stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mask: String,
    pub graph_acc: f64,
    pub conv_acc: f64,
    pub teacher_forced_graph_acc: Option<f64>,
    pub best_dev_graph_acc: Option<f64>,
}

pub const PREDICT_FIRST: &str = "predict-first";

fn scores(preds: &[Labeled], gold: &[Labeled]) -> Result<(f64, f64)> {
    let r = evaluate(preds, gold)?;
    Ok((r.graph_acc.unwrap_or(0.0), r.conv_acc.unwrap_or(0.0)))
}

/// Trains and evaluates one model per mask, optionally followed by the
/// predict-first row.
pub fn run_ablation(
    train: &[Labeled],
    dev: &[Labeled],
    test: &[Labeled],
    model: &ModelConfig,
    config: &TrainConfig,
    masks: &[MaskKind],
    predict_first: bool,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &mask in masks {
        let mc = ModelConfig { mask, ..model.clone() };
        let (tm, report) = train_two_stage(train, dev, &mc, config, None)?;
        let free: Vec<Labeled> = reconstruct_corpus(&tm, test, false, DecodeRule::Top1)?
            .into_iter()
            .map(|(l, _)| l)
            .collect();
        let forced: Vec<Labeled> = reconstruct_corpus(&tm, test, true, DecodeRule::Top1)?
            .into_iter()
            .map(|(l, _)| l)
            .collect();
        let (graph_acc, conv_acc) = scores(&free, test)?;
        let (tf, _) = scores(&forced, test)?;
        log::info!("mask {}: test graph acc {graph_acc:.4}, teacher forced {tf:.4}", mask.label());
        rows.push(AblationRow {
            mask: mask.label(),
            graph_acc,
            conv_acc,
            teacher_forced_graph_acc: Some(tf),
            best_dev_graph_acc: Some(report.best_dev_graph_acc),
        });
    }
    if !predict_first {
        return Ok(rows);
    }
    let baseline: Vec<Labeled> = test
        .iter()
        .map(|(c, _)| (c.clone(), predict_first_baseline(c).graph))
        .collect();
    let (graph_acc, conv_acc) = scores(&baseline, test)?;
    rows.push(AblationRow {
        mask: PREDICT_FIRST.into(),
        graph_acc,
        conv_acc,
        teacher_forced_graph_acc: None,
        best_dev_graph_acc: None,
    });
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    let mut out = String::from("mask,graph_acc,conv_acc,teacher_forced_graph_acc,best_dev_graph_acc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.mask,
            r.graph_acc,
            r.conv_acc,
            opt(r.teacher_forced_graph_acc),
            opt(r.best_dev_graph_acc)
        );
    }
    out
}

/// Gradient check through the whole model on one synthetic window: token
/// encoder, pair features, second stage, head and the chosen loss.
pub fn model_grad_check(loss: LossKind, seed: u64) -> Result<GradCheckReport> {
    let synth = SynthConfig { n_conversations: 1, n_utterances: 6, seed, ..SynthConfig::default() };
    let (conv, gold) = generate_corpus(&synth)?.remove(0);
    let vocab = Vocabulary::build(conv.utterances.iter().map(|u| u.text.as_str()), 1, None);
    let max_tokens = 6;
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: vocab.len(),
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            intermediate: 12,
            max_tokens,
            output_dim: 6,
            kind: EncoderKind::Transformer,
            dropout: 0.0,
        },
        layers: 2,
        hidden: 8,
        intermediate: 12,
        heads: 2,
        dropout: 0.0,
        loss,
        feature_mode: true,
        positional: true,
        max_window: 8,
        mask: MaskKind::Ancestor,
    };
    let (model, mut store) = Model::new(cfg, seed)?;
    let tokens: Vec<Vec<usize>> = conv.utterances.iter().map(|u| vocab.tokenize(&u.text, max_tokens)).collect();
    let target = conv.len() - 1;
    let window = target_window(&conv, &gold, target, 8)?;
    let mask = model.window_mask(&window)?;
    let features = model.window_features(&conv, &window);
    let parents = gold.parents(target);
    let labels = match loss {
        LossKind::Rank => Labels::Rank(
            window
                .original
                .iter()
                .position(|i| parents.contains(i))
                .ok_or_else(|| Error::InvalidTarget(format!("parent of {target} not in its window")))?,
        ),
        LossKind::Bce => Labels::Multi(window.original.iter().map(|i| f64::from(u8::from(parents.contains(i)))).collect()),
    };
    grad_check(
        &mut store,
        |g, s| {
            let enc = model.encode_utterances(g, s, &tokens)?;
            let logits = model.window_logits(g, s, enc, &window.original, features.as_deref(), &mask)?;
            model.loss(g, logits, &labels)
        },
        GradCheckConfig { seed, ..GradCheckConfig::default() },
    )
}

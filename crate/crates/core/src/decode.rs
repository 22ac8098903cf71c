//! Greedy left-to-right structure reconstruction and the predict-first
//! baseline.

use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{target_window, targets, Labeled};
use crate::error::{Error, Result};
use crate::graph::{Conversation, Mode, ReplyGraph};
use crate::masking::{validate_mask, MaskKind};
use crate::model::{LossKind, TrainedModel};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DecodeRule {
    /// The single most probable parent.
    Top1,
    /// Every candidate with probability above the threshold, falling back
    /// to the most probable one (BCE models only).
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetProbabilities {
    pub target: usize,
    /// Candidate indices in the conversation.
    pub candidates: Vec<usize>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedStructure {
    pub graph: ReplyGraph,
    pub probabilities: Vec<TargetProbabilities>,
    /// Targets whose window could not be pruned to the size limit.
    pub oversize: Vec<usize>,
}

fn argmax_latest(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x >= p[best] {
            best = i;
        }
    }
    best
}

/// Turns the logits of one window into candidate probabilities and the
/// chosen parent positions. Rank models choose among the history rows;
/// BCE models may choose the target itself. Ties go to the later row.
pub fn choose_parents(logits: &[f64], loss: LossKind, rule: DecodeRule) -> Result<(Vec<usize>, Vec<f64>)> {
    let l = logits.len();
    match loss {
        LossKind::Rank => {
            if l < 2 {
                return Err(Error::NoCandidates(l.saturating_sub(1)));
            }
            let c = &logits[..l - 1];
            let m = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = c.iter().map(|x| (x - m).exp()).sum();
            let probs: Vec<f64> = c.iter().map(|x| (x - m).exp() / z).collect();
            Ok((vec![argmax_latest(&probs)], probs))
        }
        LossKind::Bce => {
            if l == 0 {
                return Err(Error::NoCandidates(0));
            }
            let probs: Vec<f64> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
            let top = argmax_latest(&probs);
            let chosen = match rule {
                DecodeRule::Top1 => vec![top],
                DecodeRule::Threshold(t) => {
                    let over: Vec<usize> = (0..l).filter(|&i| probs[i] > t).collect();
                    if over.is_empty() {
                        vec![top]
                    } else {
                        over
                    }
                }
            };
            Ok((chosen, probs))
        }
    }
}

/// Starting structure before any prediction: empty for trees, self links
/// for IRC context messages.
fn initial_graph(conv: &Conversation) -> ReplyGraph {
    let mut g = ReplyGraph::new(conv.len());
    if conv.mode == Mode::IrcMultiParent {
        for u in conv.utterances.iter().filter(|u| u.is_context) {
            g.set_parents(u.index, [u.index]);
        }
    }
    g
}

/// Predicts every target in order, building each window and mask from the
/// predictions made so far. With `teacher`, windows and masks come from
/// that graph instead.
pub fn reconstruct(
    tm: &TrainedModel,
    conv: &Conversation,
    teacher: Option<&ReplyGraph>,
    rule: DecodeRule,
) -> Result<DecodedStructure> {
    let model = &tm.model;
    let cfg = model.config();
    let mut graph = initial_graph(conv);
    let mut out = DecodedStructure {
        graph: ReplyGraph::new(0),
        probabilities: Vec::new(),
        oversize: Vec::new(),
    };
    let todo = targets(conv);
    if todo.is_empty() {
        out.graph = graph;
        return Ok(out);
    }
    let encoded: Tensor = {
        let mut g = Graph::new();
        let e = model.encode_utterances(&mut g, &tm.store, &tm.tokenize(conv))?;
        g.value(e).clone()
    };
    for t in todo {
        let structure = teacher.unwrap_or(&graph);
        let window = target_window(conv, structure, t, cfg.max_window)?;
        if window.oversize {
            out.oversize.push(t);
        }
        let mask = model.window_mask(&window)?;
        if cfg!(debug_assertions) && cfg.mask == MaskKind::Ancestor {
            let history: Vec<usize> = (0..window.len() - 1).collect();
            let violations = validate_mask(&mask, &window.graph.induced(&history))?;
            debug_assert!(violations.is_empty(), "decoder mask deviates: {violations:?}");
        }
        let features = model.window_features(conv, &window);
        let mut g = Graph::new();
        let enc = g.constant(encoded.clone());
        let logits = model.window_logits(&mut g, &tm.store, enc, &window.original, features.as_deref(), &mask)?;
        let (chosen, probs) = choose_parents(g.value(logits).data(), cfg.loss, rule)?;
        graph.set_parents(t, chosen.iter().map(|&c| window.original[c]));
        out.probabilities.push(TargetProbabilities {
            target: t,
            candidates: window.original[..probs.len()].to_vec(),
            probabilities: probs,
        });
    }
    graph.validate(conv.mode)?;
    out.graph = graph;
    Ok(out)
}

/// Every comment replies to the root.
pub fn predict_first_baseline(conv: &Conversation) -> DecodedStructure {
    let mut g = ReplyGraph::new(conv.len());
    for i in 1..conv.len() {
        g.set_parents(i, [0]);
    }
    DecodedStructure {
        graph: g,
        probabilities: Vec::new(),
        oversize: Vec::new(),
    }
}

/// Decodes every conversation; the result pairs each input conversation
/// with its predicted structure.
pub fn reconstruct_corpus(tm: &TrainedModel, corpus: &[Labeled], teacher_forced: bool, rule: DecodeRule) -> Result<Vec<(Labeled, DecodedStructure)>> {
    corpus
        .iter()
        .map(|(conv, gold)| {
            let d = reconstruct(tm, conv, teacher_forced.then_some(gold), rule)?;
            Ok(((conv.clone(), d.graph.clone()), d))
        })
        .collect()
}

/// `conv_id,target_id,candidate_id,probability` rows.
pub fn probabilities_csv(decoded: &[(Labeled, DecodedStructure)]) -> String {
    let mut out = String::from("conv_id,target_id,candidate_id,probability\n");
    for ((conv, _), d) in decoded {
        for tp in &d.probabilities {
            for (&c, &p) in tp.candidates.iter().zip(&tp.probabilities) {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.17e}",
                    conv.conv_id, conv.utterances[tp.target].id, conv.utterances[c].id, p
                );
            }
        }
    }
    out
}

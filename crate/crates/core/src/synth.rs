//! Synthetic threaded conversations where a reply's own words are a noisy
//! cue to its thread and the thread history is a clean one.
//!
//! The vocabulary is split once per corpus into root tokens, one topic set
//! per thread, and one surface set per group of confusable threads. A new
//! thread opens with a reply to the root that uses only topic tokens. Later
//! replies answer the latest message of their thread and fill each token
//! slot from their topic with probability `1 - ambiguity`, otherwise from
//! the surface set shared with the other threads of its confusable group.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Labeled;
use crate::error::{Error, Result};
use crate::graph::{Conversation, Mode, ReplyGraph, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_conversations: usize,
    pub n_utterances: usize,
    pub n_topics: usize,
    pub vocab_size: usize,
    pub ambiguity: f64,
    pub seed: u64,
    pub tokens_per_message: usize,
    pub topic_tokens: usize,
    pub root_tokens: usize,
    /// Number of threads sharing one surface set.
    pub confusable_group: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_conversations: 100,
            n_utterances: 12,
            n_topics: 4,
            vocab_size: 200,
            ambiguity: 0.6,
            seed: 0,
            tokens_per_message: 3,
            topic_tokens: 4,
            root_tokens: 4,
            confusable_group: 2,
        }
    }
}

impl SynthConfig {
    fn groups(&self) -> usize {
        self.n_topics.div_ceil(self.confusable_group)
    }

    fn tokens_needed(&self) -> usize {
        self.root_tokens + self.topic_tokens * (self.n_topics + self.groups())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_conversations == 0 || self.n_utterances == 0 || self.n_topics == 0 || self.confusable_group == 0 {
            return Err(Error::InvalidConfig("counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::InvalidConfig(format!("ambiguity {} outside [0, 1]", self.ambiguity)));
        }
        if self.tokens_per_message == 0 || self.tokens_per_message > self.topic_tokens || self.root_tokens == 0 {
            return Err(Error::InvalidConfig(
                "tokens_per_message must be in 1..=topic_tokens and root_tokens positive".into(),
            ));
        }
        if self.vocab_size < self.tokens_needed() {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} is too small for {} topics; need at least {}",
                self.vocab_size,
                self.n_topics,
                self.tokens_needed()
            )));
        }
        Ok(())
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

struct TokenSets {
    root: Vec<usize>,
    topics: Vec<Vec<usize>>,
    surfaces: Vec<Vec<usize>>,
}

impl TokenSets {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut pool: Vec<usize> = (0..cfg.vocab_size).collect();
        pool.shuffle(rng);
        let mut it = pool.into_iter();
        let mut take = |n: usize| -> Vec<usize> { it.by_ref().take(n).collect() };
        let root = take(cfg.root_tokens);
        let topics = (0..cfg.n_topics).map(|_| take(cfg.topic_tokens)).collect();
        let surfaces = (0..cfg.groups()).map(|_| take(cfg.topic_tokens)).collect();
        TokenSets { root, topics, surfaces }
    }
}

fn generate_one(cfg: &SynthConfig, sets: &TokenSets, index: usize, rng: &mut ChaCha8Rng) -> Labeled {
    let TokenSets { root, topics, surfaces } = sets;
    let authors = 5;
    let mut ts = 1_500_000_000i64 + rng.random_range(0..1_000_000);
    let mut latest: Vec<Option<usize>> = vec![None; cfg.n_topics];
    let mut parent = vec![0usize; cfg.n_utterances];
    let mut utterances = Vec::with_capacity(cfg.n_utterances);
    for u in 0..cfg.n_utterances {
        let tokens: Vec<usize> = if u == 0 {
            root.clone()
        } else {
            let k = rng.random_range(0..cfg.n_topics);
            let tokens = match latest[k] {
                None => topics[k].choose_multiple(rng, cfg.tokens_per_message).copied().collect(),
                Some(p) => {
                    parent[u] = p;
                    let mut own = topics[k].clone();
                    own.shuffle(rng);
                    let mut shared = surfaces[k / cfg.confusable_group].clone();
                    shared.shuffle(rng);
                    (0..cfg.tokens_per_message)
                        .map(|_| {
                            if rng.random::<f64>() < cfg.ambiguity {
                                shared.pop().expect("enough surface tokens")
                            } else {
                                own.pop().expect("enough topic tokens")
                            }
                        })
                        .collect()
                }
            };
            latest[k] = Some(u);
            tokens
        };
        ts += rng.random_range(1..120);
        utterances.push(Utterance {
            id: format!("s{index}-{u}"),
            index: u,
            author: format!("user{}", rng.random_range(0..authors)),
            timestamp: ts,
            text: tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" "),
            is_context: false,
        });
    }
    (
        Conversation {
            conv_id: format!("synth-{index}"),
            mode: Mode::RedditTree,
            utterances,
        },
        ReplyGraph::from_parent_vec(&parent),
    )
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<Labeled>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sets = TokenSets::draw(cfg, &mut rng);
    Ok((0..cfg.n_conversations).map(|i| generate_one(cfg, &sets, i, &mut rng)).collect())
}

/// Pairwise baseline: each comment replies to the most recent earlier
/// comment sharing a word with it, or to the root if none does.
pub fn overlap_oracle(conv: &Conversation) -> ReplyGraph {
    let words: Vec<BTreeSet<&str>> = conv.utterances.iter().map(|u| u.text.split_whitespace().collect()).collect();
    let parent: Vec<usize> = (0..conv.len())
        .map(|t| {
            (1..t)
                .rev()
                .find(|&c| !words[c].is_disjoint(&words[t]))
                .unwrap_or(0)
        })
        .collect();
    ReplyGraph::from_parent_vec(&parent)
}

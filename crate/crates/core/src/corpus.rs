//! Reading and writing the line-delimited corpus format, plus the filtering,
//! windowing and splitting rules applied before training.
//!
//! One JSON object per line:
//!
//! ```text
//! {"conv_id": str, "mode": "reddit"|"irc",
//!  "utterances": [{"id": str, "author": str, "ts": int, "text": str,
//!                  "parents": [str], "context": bool}]}
//! ```

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::graph::{Conversation, Mode, ReplyGraph, Utterance};

/// Marker texts that identify a deleted Reddit comment.
pub const DELETED_MARKERS: [&str; 2] = ["[deleted]", "[removed]"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub mode: Mode,
    pub max_window: usize,
    pub max_tokens: usize,
    pub split_ratios: (f64, f64, f64),
    pub seed: u64,
}

impl CorpusConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let (max_window, max_tokens) = match mode {
            Mode::RedditTree => (16, 50),
            Mode::IrcMultiParent => (40, 36),
        };
        CorpusConfig {
            mode,
            max_window,
            max_tokens,
            split_ratios: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_ratios(self.split_ratios)?;
        if self.max_window < 2 {
            return Err(Error::InvalidConfig("max_window must be at least 2".into()));
        }
        Ok(())
    }
}

fn validate_ratios((a, b, c): (f64, f64, f64)) -> Result<()> {
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {a},{b},{c} must be positive and sum to 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordUtterance {
    id: String,
    author: String,
    ts: i64,
    text: String,
    #[serde(default)]
    parents: Vec<String>,
    #[serde(default)]
    context: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    deleted: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    conv_id: String,
    mode: Mode,
    utterances: Vec<RecordUtterance>,
}

pub type Labeled = (Conversation, ReplyGraph);

fn record_to_labeled(rec: Record) -> Result<Labeled> {
    let mode = rec.mode;
    let parent_ids: Vec<Vec<String>> = rec.utterances.iter().map(|u| u.parents.clone()).collect();
    let utterances: Vec<Utterance> = rec
        .utterances
        .into_iter()
        .map(|u| Utterance {
            id: u.id,
            index: 0,
            author: u.author,
            timestamp: u.ts,
            // an explicit deleted flag is folded into the text marker
            text: if u.deleted { DELETED_MARKERS[0].to_string() } else { u.text },
            is_context: u.context,
        })
        .collect();
    let (conv, order) = Conversation::canonical(rec.conv_id, mode, utterances)?;
    let mut index_of = HashMap::with_capacity(conv.len());
    for u in &conv.utterances {
        if index_of.insert(u.id.as_str(), u.index).is_some() {
            return Err(Error::InvalidGraph(format!("duplicate utterance id `{}` in `{}`", u.id, conv.conv_id)));
        }
    }
    let mut graph = ReplyGraph::new(conv.len());
    for (new, &old) in order.iter().enumerate() {
        for pid in &parent_ids[old] {
            let &p = index_of.get(pid.as_str()).ok_or_else(|| {
                Error::InvalidGraph(format!(
                    "utterance `{}` in `{}` replies to unknown id `{pid}`",
                    conv.utterances[new].id, conv.conv_id
                ))
            })?;
            graph.add_edge(new, p);
        }
    }
    graph.validate(mode)?;
    Ok((conv, graph))
}

fn labeled_to_record(conv: &Conversation, graph: &ReplyGraph) -> Record {
    Record {
        conv_id: conv.conv_id.clone(),
        mode: conv.mode,
        utterances: conv
            .utterances
            .iter()
            .map(|u| RecordUtterance {
                id: u.id.clone(),
                author: u.author.clone(),
                ts: u.timestamp,
                text: u.text.clone(),
                parents: graph
                    .parents(u.index)
                    .iter()
                    .map(|&p| conv.utterances[p].id.clone())
                    .collect(),
                context: u.is_context,
                deleted: false,
            })
            .collect(),
    }
}

pub fn parse_conversations_str(input: &str) -> Result<Vec<Labeled>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record_to_labeled(rec)?);
    }
    Ok(out)
}

pub fn parse_conversations(path: &Path) -> Result<Vec<Labeled>> {
    parse_conversations_str(&std::fs::read_to_string(path)?)
}

pub fn conversations_to_jsonl(corpus: &[Labeled]) -> Result<String> {
    let mut out = String::new();
    for (conv, graph) in corpus {
        out.push_str(&serde_json::to_string(&labeled_to_record(conv, graph))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_conversations(path: &Path, corpus: &[Labeled]) -> Result<()> {
    atomic_write(path, conversations_to_jsonl(corpus)?.as_bytes())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterRules {
    pub max_chars: usize,
    pub min_depth: usize,
    pub drop_non_ascii: bool,
    pub drop_deleted: bool,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            max_chars: 128,
            min_depth: 6,
            drop_non_ascii: true,
            drop_deleted: true,
        }
    }
}

impl FilterRules {
    fn rejects(&self, text: &str) -> bool {
        (self.drop_deleted && DELETED_MARKERS.contains(&text.trim()))
            || (self.drop_non_ascii && !text.is_ascii())
            || text.chars().count() > self.max_chars
    }
}

/// Drops rejected comments together with all their descendants, then drops
/// conversations whose remaining tree is shallower than `min_depth` nodes.
pub fn filter_reddit_large(corpus: &[Labeled], rules: &FilterRules) -> Vec<Labeled> {
    corpus
        .iter()
        .filter_map(|(conv, graph)| {
            let n = conv.len();
            let mut keep = vec![true; n];
            // parents precede children, so one forward pass cascades
            for i in 0..n {
                let parent_gone = graph.parent(i).is_some_and(|p| p != i && !keep[p]);
                if parent_gone || rules.rejects(&conv.utterances[i].text) {
                    keep[i] = false;
                }
            }
            if !keep[0] {
                return None;
            }
            let idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
            let sub_graph = graph.induced(&idx);
            (sub_graph.max_depth() >= rules.min_depth).then(|| (conv.subset(&idx), sub_graph))
        })
        .collect()
}

/// Keeps only the first `n` utterances (canonical order).
pub fn truncate_to_first(conv: &Conversation, graph: &ReplyGraph, n: usize) -> Labeled {
    let idx: Vec<usize> = (0..conv.len().min(n)).collect();
    (conv.subset(&idx), graph.induced(&idx))
}

/// A sub-conversation handed to the model. `original[k]` is the index in the
/// source conversation of window position `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub conversation: Conversation,
    pub graph: ReplyGraph,
    pub original: Vec<usize>,
    pub target: usize,
    /// Set when the window could not be shrunk to the requested size.
    pub oversize: bool,
}

impl Window {
    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    fn from_indices(conv: &Conversation, graph: &ReplyGraph, keep: Vec<usize>, target: usize, oversize: bool) -> Window {
        let target = keep.iter().position(|&i| i == target).expect("target kept");
        Window {
            conversation: conv.subset(&keep),
            graph: graph.induced(&keep),
            original: keep,
            target,
            oversize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneStrategy {
    /// Remove the removable leaf with the latest timestamp first.
    LatestLeaf,
    /// Remove a uniformly random removable leaf.
    RandomLeaf { seed: u64 },
}

/// Shrinks a tree to at most `k` utterances by repeatedly removing leaves
/// that are neither the root, the target, nor an ancestor of the target.
pub fn prune_to_window(conv: &Conversation, graph: &ReplyGraph, target: usize, k: usize) -> Result<Window> {
    prune_to_window_with(conv, graph, target, k, PruneStrategy::LatestLeaf)
}

pub fn prune_to_window_with(
    conv: &Conversation,
    graph: &ReplyGraph,
    target: usize,
    k: usize,
    strategy: PruneStrategy,
) -> Result<Window> {
    if target == 0 {
        return Err(Error::InvalidTarget("the root cannot be a target".into()));
    }
    if target >= conv.len() {
        return Err(Error::InvalidTarget(format!("target {target} outside a conversation of {}", conv.len())));
    }
    let n = conv.len();
    let protected: BTreeSet<usize> = graph.ancestors(target)?.into_iter().chain([0, target]).collect();
    let mut alive = vec![true; n];
    let mut live_children = vec![0usize; n];
    for (c, p) in graph.edges() {
        if c != p {
            live_children[p] += 1;
        }
    }
    let mut rng = match strategy {
        PruneStrategy::RandomLeaf { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        PruneStrategy::LatestLeaf => None,
    };
    let mut count = n;
    let mut oversize = false;
    while count > k {
        let leaves: Vec<usize> = (0..n)
            .filter(|&i| alive[i] && live_children[i] == 0 && !protected.contains(&i))
            .collect();
        let pick = match rng.as_mut() {
            Some(rng) => leaves.choose(rng).copied(),
            None => leaves
                .iter()
                .copied()
                .max_by_key(|&i| (conv.utterances[i].timestamp, i)),
        };
        let Some(leaf) = pick else {
            oversize = true;
            break;
        };
        alive[leaf] = false;
        count -= 1;
        for &p in graph.parents(leaf) {
            if p != leaf {
                live_children[p] -= 1;
            }
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    Ok(Window::from_indices(conv, graph, keep, target, oversize))
}

/// The `w` consecutive utterances ending at `target`.
pub fn irc_window(conv: &Conversation, graph: &ReplyGraph, target: usize, w: usize) -> Result<Window> {
    if target >= conv.len() {
        return Err(Error::InvalidTarget(format!("target {target} outside a conversation of {}", conv.len())));
    }
    let start = (target + 1).saturating_sub(w.max(1));
    Ok(Window::from_indices(conv, graph, (start..=target).collect(), target, false))
}

/// The model input for one target: its pruned history (Reddit) or the
/// trailing message window (IRC), with the target last.
pub fn target_window(conv: &Conversation, graph: &ReplyGraph, target: usize, max_window: usize) -> Result<Window> {
    match conv.mode {
        Mode::RedditTree => {
            let (prefix, prefix_graph) = truncate_to_first(conv, graph, target + 1);
            prune_to_window(&prefix, &prefix_graph, target, max_window)
        }
        Mode::IrcMultiParent => irc_window(conv, graph, target, max_window),
    }
}

/// Utterances whose parents are predicted: every non-root comment, or
/// every non-context message.
pub fn targets(conv: &Conversation) -> Vec<usize> {
    match conv.mode {
        Mode::RedditTree => (1..conv.len()).collect(),
        Mode::IrcMultiParent => (0..conv.len()).filter(|&i| !conv.utterances[i].is_context).collect(),
    }
}

/// Gives the first `context_count` messages themselves as parent and flags
/// them as context. Returns the new graph and the indices whose existing
/// annotation was overwritten.
pub fn mark_context_self_parents(
    conv: &mut Conversation,
    graph: &ReplyGraph,
    context_count: usize,
) -> Result<(ReplyGraph, Vec<usize>)> {
    if context_count > conv.len() {
        return Err(Error::InvalidConfig(format!(
            "{context_count} context messages requested but the conversation has {}",
            conv.len()
        )));
    }
    let mut out = graph.clone();
    let mut overwritten = Vec::new();
    for i in 0..context_count {
        let ps = graph.parents(i);
        if !ps.is_empty() && !(ps.len() == 1 && ps.contains(&i)) {
            log::warn!("{}: context message {i} was annotated; replacing with a self link", conv.conv_id);
            overwritten.push(i);
        }
        out.set_parents(i, [i]);
        conv.utterances[i].is_context = true;
    }
    Ok((out, overwritten))
}

/// Deterministic shuffle then split at conversation granularity.
pub fn split_corpus<T>(mut items: Vec<T>, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    validate_ratios(ratios)?;
    let n = items.len();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * ratios.0).round() as usize;
    let n_dev = (((n as f64) * ratios.1).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = items.split_off(n_train + n_dev);
    let dev = items.split_off(n_train);
    Ok((items, dev, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PairSample {
    pub conversation: usize,
    pub candidate: usize,
    pub target: usize,
    pub label: bool,
}

/// All gold (parent, target) pairs plus, per target, as many non-parent
/// candidates drawn without replacement (fewer if not enough exist).
pub fn pair_samples_downsampled(corpus: &[Labeled], seed: u64) -> Vec<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (ci, (conv, graph)) in corpus.iter().enumerate() {
        for t in 0..conv.len() {
            if conv.utterances[t].is_context {
                continue;
            }
            let parents = graph.parents(t);
            if parents.is_empty() {
                continue;
            }
            let upper = match conv.mode {
                Mode::RedditTree => t,
                Mode::IrcMultiParent => t + 1,
            };
            for &p in parents {
                out.push(PairSample { conversation: ci, candidate: p, target: t, label: true });
            }
            let negatives: Vec<usize> = (0..upper).filter(|c| !parents.contains(c)).collect();
            let k = parents.len().min(negatives.len());
            for &c in negatives.choose_multiple(&mut rng, k) {
                out.push(PairSample { conversation: ci, candidate: c, target: t, label: false });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(i: usize, ts: i64, text: &str) -> Utterance {
        Utterance {
            id: format!("u{i}"),
            index: i,
            author: format!("a{i}"),
            timestamp: ts,
            text: text.to_string(),
            is_context: false,
        }
    }

    fn tree(parent: &[usize], texts: &[&str]) -> Labeled {
        let conv = Conversation {
            conv_id: "t".into(),
            mode: Mode::RedditTree,
            utterances: texts.iter().enumerate().map(|(i, t)| utt(i, i as i64, t)).collect(),
        };
        (conv, ReplyGraph::from_parent_vec(parent))
    }

    fn chain(n: usize) -> Labeled {
        let parent: Vec<usize> = (0..n).map(|i| i.saturating_sub(1)).collect();
        tree(&parent, &vec!["ok"; n])
    }

    #[test]
    fn parses_a_thread() {
        let line = r#"{"conv_id":"c1","mode":"reddit","utterances":[{"id":"t","author":"a","ts":1,"text":"title","parents":[]},{"id":"c2","author":"c","ts":3,"text":"y","parents":["c1"]},{"id":"c1","author":"b","ts":2,"text":"x","parents":["t"]}]}"#;
        let corpus = parse_conversations_str(line).unwrap();
        assert_eq!(corpus.len(), 1);
        let (conv, graph) = &corpus[0];
        assert_eq!(conv.len(), 3);
        assert_eq!(conv.utterances[1].id, "c1");
        assert_eq!(graph.parent(2), Some(1));
        let back = conversations_to_jsonl(&corpus).unwrap();
        assert_eq!(parse_conversations_str(&back).unwrap(), corpus);
    }

    #[test]
    fn parse_errors() {
        assert!(parse_conversations_str("").unwrap().is_empty());
        let missing = r#"{"conv_id":"c","mode":"reddit","utterances":[{"id":"t","author":"a","ts":1,"text":"x"},{"id":"b","author":"a","ts":2,"text":"y","parents":["zz"]}]}"#;
        assert!(matches!(parse_conversations_str(missing), Err(Error::InvalidGraph(_))));
        let later = r#"{"conv_id":"c","mode":"reddit","utterances":[{"id":"t","author":"a","ts":1,"text":"x"},{"id":"b","author":"a","ts":2,"text":"y","parents":["c"]},{"id":"c","author":"a","ts":3,"text":"z","parents":["t"]}]}"#;
        assert!(matches!(parse_conversations_str(later), Err(Error::InvalidGraph(_))));
        let garbage = format!("{}\n{{not json", r#"{"conv_id":"c","mode":"irc","utterances":[{"id":"t","author":"a","ts":1,"text":"x"}]}"#);
        assert!(matches!(parse_conversations_str(&garbage), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn deleted_flag_becomes_marker() {
        let line = r#"{"conv_id":"c","mode":"reddit","utterances":[{"id":"t","author":"a","ts":1,"text":"x"},{"id":"b","author":"a","ts":2,"text":"y","parents":["t"],"deleted":true}]}"#;
        let corpus = parse_conversations_str(line).unwrap();
        assert_eq!(corpus[0].0.utterances[1].text, "[deleted]");
    }

    #[test]
    fn large_filter_rules() {
        let rules = FilterRules::default();
        let kept = filter_reddit_large(&[chain(7)], &rules);
        assert_eq!(kept.len(), 1);

        let long = "x".repeat(129);
        let (conv, graph) = chain(7);
        let mut conv2 = conv.clone();
        conv2.utterances[2].text = long;
        assert!(filter_reddit_large(&[(conv2, graph.clone())], &rules).is_empty());

        let (conv, graph) = chain(8);
        let mut conv3 = conv.clone();
        conv3.utterances[7].text = "héllo".into();
        let kept = filter_reddit_large(&[(conv3, graph)], &rules);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].0.len(), 7);
        assert_eq!(kept[0].1.max_depth(), 7);

        let (conv, graph) = chain(9);
        let mut conv4 = conv.clone();
        conv4.utterances[4].text = "[removed]".into();
        let once = filter_reddit_large(&[(conv4.clone(), graph.clone())], &FilterRules { min_depth: 2, ..rules });
        assert_eq!(once[0].0.len(), 4);
    }

    #[test]
    fn prune_latest_leaf_first() {
        let star = tree(&[0, 0, 0, 0, 0], &["r", "a", "b", "c", "d"]);
        let w = prune_to_window(&star.0, &star.1, 2, 3).unwrap();
        assert_eq!(w.original, vec![0, 1, 2]);
        assert_eq!(w.target, 2);
        assert!(!w.oversize);

        let c = chain(4);
        let w = prune_to_window(&c.0, &c.1, 3, 4).unwrap();
        assert_eq!(w.original, vec![0, 1, 2, 3]);

        let c = chain(5);
        let w = prune_to_window(&c.0, &c.1, 4, 3).unwrap();
        assert_eq!(w.original, vec![0, 1, 2, 3, 4]);
        assert!(w.oversize);

        assert!(matches!(prune_to_window(&c.0, &c.1, 0, 3), Err(Error::InvalidTarget(_))));
    }

    #[test]
    fn prune_removes_subtrees_bottom_up() {
        // 0 <- 1 <- 2, 0 <- 3, target 3: leaf 2 goes first, then 1
        let t = tree(&[0, 0, 1, 0], &["r", "a", "b", "c"]);
        let w = prune_to_window(&t.0, &t.1, 3, 2).unwrap();
        assert_eq!(w.original, vec![0, 3]);
        assert_eq!(w.graph.parent(1), Some(0));
    }

    #[test]
    fn irc_windows() {
        let n = 80;
        let conv = Conversation {
            conv_id: "irc".into(),
            mode: Mode::IrcMultiParent,
            utterances: (0..n).map(|i| utt(i, i as i64, "m")).collect(),
        };
        let graph = ReplyGraph::new(n);
        let w = irc_window(&conv, &graph, 73, 40).unwrap();
        assert_eq!(w.original, (34..=73).collect::<Vec<_>>());
        assert_eq!(w.target, 39);
        let w = irc_window(&conv, &graph, 5, 40).unwrap();
        assert_eq!(w.original, (0..=5).collect::<Vec<_>>());
        let w = irc_window(&conv, &graph, 5, 1).unwrap();
        assert_eq!(w.original, vec![5]);
    }

    #[test]
    fn reddit_target_window_sees_only_history() {
        let star = tree(&[0, 0, 0, 0, 0], &["r", "a", "b", "c", "d"]);
        let w = target_window(&star.0, &star.1, 2, 16).unwrap();
        assert_eq!(w.original, vec![0, 1, 2]);
        assert_eq!(w.target, 2);
        let w = target_window(&star.0, &star.1, 4, 3).unwrap();
        assert_eq!(w.original, vec![0, 1, 4]);
        assert_eq!(targets(&star.0), vec![1, 2, 3, 4]);
    }

    #[test]
    fn context_marking() {
        let n = 1200;
        let mut conv = Conversation {
            conv_id: "irc".into(),
            mode: Mode::IrcMultiParent,
            utterances: (0..n).map(|i| utt(i, i as i64, "m")).collect(),
        };
        let mut graph = ReplyGraph::new(n);
        graph.set_parents(1100, [1099]);
        graph.set_parents(10, [3]);
        let (g, overwritten) = mark_context_self_parents(&mut conv, &graph, 1000).unwrap();
        assert!((0..1000).all(|i| g.parents(i).iter().eq([i].iter()) && conv.utterances[i].is_context));
        assert_eq!(g.parents(1100), graph.parents(1100));
        assert!(!conv.utterances[1000].is_context);
        assert_eq!(overwritten, vec![10]);

        let (g, _) = mark_context_self_parents(&mut conv.clone(), &graph, 0).unwrap();
        assert_eq!(g, graph);
        assert!(matches!(mark_context_self_parents(&mut conv, &graph, 5000), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn splits() {
        let (a, b, c) = split_corpus((0..10).collect(), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let again = split_corpus((0..10).collect(), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.clone(), b.clone(), c.clone()), again);
        let mut all: Vec<i32> = [a, b, c].concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let (a, b, c) = split_corpus((0..9359).collect::<Vec<_>>(), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7487, 936, 936));
        assert!(split_corpus(vec![1], (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn downsampled_pairs_are_balanced() {
        let t = tree(&[0, 0, 0, 1, 2, 0, 3], &["a"; 7]);
        let samples = pair_samples_downsampled(&[t.clone()], 3);
        let pos = samples.iter().filter(|s| s.label).count();
        let neg = samples.len() - pos;
        // target 1 has a single candidate, so it contributes no negative
        assert_eq!(pos, 6);
        assert_eq!(neg, 5);
        let first: Vec<_> = samples.iter().filter(|s| s.target == 1).collect();
        assert_eq!(first.len(), 1);
        assert!(first[0].label);
        let third: Vec<_> = samples.iter().filter(|s| s.target == 3).collect();
        assert_eq!(third.iter().filter(|s| s.label).count(), 1);
        assert_eq!(third.iter().filter(|s| !s.label).count(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_tree() -> impl Strategy<Value = Vec<usize>> {
            (2usize..18).prop_flat_map(|n| {
                (0..n)
                    .map(|i| if i == 0 { Just(0).boxed() } else { (0..i).boxed() })
                    .collect::<Vec<_>>()
            })
        }

        proptest! {
            #[test]
            fn prune_keeps_root_target_and_ancestors(parent in random_tree(), k in 2usize..10, t in 1usize..18) {
                let n = parent.len();
                let t = 1 + (t - 1) % (n - 1);
                let (conv, graph) = tree(&parent, &vec!["x"; n]);
                let w = prune_to_window(&conv, &graph, t, k).unwrap();
                prop_assert!(w.original.contains(&0));
                prop_assert!(w.original.contains(&t));
                for a in graph.ancestors(t).unwrap() {
                    prop_assert!(w.original.contains(&a));
                }
                prop_assert!(w.len() <= k || w.oversize);
                w.graph.validate(Mode::RedditTree).unwrap();
            }

            #[test]
            fn filter_is_idempotent(parent in random_tree(), bad in proptest::collection::vec(any::<bool>(), 18)) {
                let n = parent.len();
                let texts: Vec<&str> = (0..n).map(|i| if bad[i] && i > 0 { "[deleted]" } else { "fine" }).collect();
                let corpus = vec![tree(&parent, &texts)];
                let rules = FilterRules { min_depth: 3, ..FilterRules::default() };
                let once = filter_reddit_large(&corpus, &rules);
                let twice = filter_reddit_large(&once, &rules);
                prop_assert_eq!(once, twice);
            }

            #[test]
            fn irc_window_ends_at_target(n in 1usize..60, t in 0usize..60, w in 1usize..45) {
                let t = t % n;
                let conv = Conversation {
                    conv_id: "x".into(),
                    mode: Mode::IrcMultiParent,
                    utterances: (0..n).map(|i| utt(i, i as i64, "m")).collect(),
                };
                let win = irc_window(&conv, &ReplyGraph::new(n), t, w).unwrap();
                prop_assert!(win.len() <= w);
                prop_assert_eq!(*win.original.last().unwrap(), t);
            }

            #[test]
            fn splits_partition(n in 0usize..200, seed in any::<u64>()) {
                let (a, b, c) = split_corpus((0..n).collect::<Vec<_>>(), (0.8, 0.1, 0.1), seed).unwrap();
                let mut all = [a, b, c].concat();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }
}

//! Conversations, reply graphs and the graph algorithms shared by every
//! other module.
//!
//! Utterances are addressed by their 0-based index in canonical order
//! (timestamp, then original file order). Ids only matter for I/O.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Every comment has exactly one earlier parent; index 0 is the title.
    #[serde(rename = "reddit")]
    RedditTree,
    /// Messages may have several parents, including themselves.
    #[serde(rename = "irc")]
    IrcMultiParent,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::RedditTree => "reddit",
            Mode::IrcMultiParent => "irc",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reddit" => Ok(Mode::RedditTree),
            "irc" => Ok(Mode::IrcMultiParent),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub index: usize,
    pub author: String,
    pub timestamp: i64,
    pub text: String,
    pub is_context: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub mode: Mode,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    /// Builds a conversation, putting the utterances in canonical order and
    /// rewriting their indices. Returns the conversation together with
    /// `order`, where `order[new_index] = position in the input`.
    pub fn canonical(
        conv_id: impl Into<String>,
        mode: Mode,
        mut utterances: Vec<Utterance>,
    ) -> Result<(Self, Vec<usize>)> {
        if utterances.is_empty() {
            return Err(Error::InvalidGraph("conversation has no utterances".into()));
        }
        let mut order: Vec<usize> = (0..utterances.len()).collect();
        // stable sort keeps file order among equal timestamps
        order.sort_by_key(|&i| utterances[i].timestamp);
        let mut slots: Vec<Option<Utterance>> = utterances.drain(..).map(Some).collect();
        let utterances = order
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                let mut u = slots[old].take().expect("each slot taken once");
                u.index = new;
                u
            })
            .collect();
        Ok((
            Conversation {
                conv_id: conv_id.into(),
                mode,
                utterances,
            },
            order,
        ))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Keeps the utterances at `indices` (ascending), re-indexing them 0..k.
    pub fn subset(&self, indices: &[usize]) -> Conversation {
        let utterances = indices
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                let mut u = self.utterances[old].clone();
                u.index = new;
                u
            })
            .collect();
        Conversation {
            conv_id: self.conv_id.clone(),
            mode: self.mode,
            utterances,
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (i, u) in self.utterances.iter().enumerate() {
            if u.index != i {
                return Err(Error::InvalidGraph(format!(
                    "utterance at position {i} carries index {}",
                    u.index
                )));
            }
        }
        for w in self.utterances.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                return Err(Error::InvalidGraph(format!(
                    "timestamps decrease between utterances {} and {}",
                    w[0].index, w[1].index
                )));
            }
        }
        Ok(())
    }
}

/// Parent sets indexed by utterance. An empty set means "no parent"
/// (the Reddit root, or an unannotated message).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplyGraph {
    parents: Vec<BTreeSet<usize>>,
}

impl ReplyGraph {
    pub fn new(n: usize) -> Self {
        ReplyGraph {
            parents: vec![BTreeSet::new(); n],
        }
    }

    /// Tree from a single-parent vector; `parent[0]` is ignored.
    pub fn from_parent_vec(parent: &[usize]) -> Self {
        let mut g = ReplyGraph::new(parent.len());
        for (i, &p) in parent.iter().enumerate().skip(1) {
            g.parents[i].insert(p);
        }
        g
    }

    pub fn from_sets(parents: Vec<BTreeSet<usize>>) -> Self {
        ReplyGraph { parents }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parents(&self, node: usize) -> &BTreeSet<usize> {
        &self.parents[node]
    }

    pub fn set_parents(&mut self, node: usize, parents: impl IntoIterator<Item = usize>) {
        self.parents[node] = parents.into_iter().collect();
    }

    pub fn add_edge(&mut self, child: usize, parent: usize) {
        self.parents[child].insert(parent);
    }

    /// The single parent of `node` in a tree, if any.
    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parents[node].iter().next().copied()
    }

    /// (child, parent) pairs, self loops included.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents
            .iter()
            .enumerate()
            .flat_map(|(c, ps)| ps.iter().map(move |&p| (c, p)))
    }

    /// Induced subgraph on `keep` (ascending original indices), re-indexed.
    pub fn induced(&self, keep: &[usize]) -> ReplyGraph {
        let mut pos = vec![usize::MAX; self.len()];
        for (new, &old) in keep.iter().enumerate() {
            pos[old] = new;
        }
        let parents = keep
            .iter()
            .map(|&old| {
                self.parents[old]
                    .iter()
                    .filter_map(|&p| (pos[p] != usize::MAX).then_some(pos[p]))
                    .collect()
            })
            .collect();
        ReplyGraph { parents }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let n = self.len();
        for (child, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                if p >= n {
                    return Err(Error::InvalidGraph(format!(
                        "utterance {child} has out-of-range parent {p}"
                    )));
                }
            }
        }
        match mode {
            Mode::RedditTree => {
                if n > 0 && !self.parents[0].is_empty() {
                    return Err(Error::InvalidGraph("the root must not have a parent".into()));
                }
                for (child, ps) in self.parents.iter().enumerate().skip(1) {
                    if ps.len() != 1 {
                        return Err(Error::InvalidGraph(format!(
                            "utterance {child} has {} parents, expected exactly one",
                            ps.len()
                        )));
                    }
                    let p = *ps.iter().next().unwrap();
                    if p >= child {
                        return Err(Error::InvalidGraph(format!(
                            "utterance {child} replies to later or same utterance {p}"
                        )));
                    }
                }
            }
            Mode::IrcMultiParent => {
                for (child, ps) in self.parents.iter().enumerate() {
                    if let Some(&p) = ps.iter().find(|&&p| p > child) {
                        return Err(Error::InvalidGraph(format!(
                            "message {child} replies to later message {p}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check(&self, node: usize) -> Result<()> {
        if node < self.len() {
            Ok(())
        } else {
            Err(Error::NotFound(node))
        }
    }

    /// Transitive closure of the parent links of `node`, excluding the node.
    pub fn ancestors(&self, node: usize) -> Result<BTreeSet<usize>> {
        self.check(node)?;
        let mut seen = BTreeSet::new();
        let mut stack: Vec<usize> = self.parents[node].iter().copied().collect();
        while let Some(p) = stack.pop() {
            if p == node || !seen.insert(p) {
                continue;
            }
            stack.extend(self.parents[p].iter().copied());
        }
        Ok(seen)
    }

    /// Number of parent hops from `descendant` up to `ancestor`, or `None`
    /// when `ancestor` is not reachable that way.
    pub fn graph_distance(&self, descendant: usize, ancestor: usize) -> Result<Option<usize>> {
        self.check(descendant)?;
        self.check(ancestor)?;
        if descendant == ancestor {
            return Ok(Some(0));
        }
        let mut dist = vec![usize::MAX; self.len()];
        dist[descendant] = 0;
        let mut queue = VecDeque::from([descendant]);
        while let Some(v) = queue.pop_front() {
            for &p in &self.parents[v] {
                if dist[p] == usize::MAX {
                    dist[p] = dist[v] + 1;
                    if p == ancestor {
                        return Ok(Some(dist[p]));
                    }
                    queue.push_back(p);
                }
            }
        }
        Ok(None)
    }

    /// Node depth counted in nodes (root = 1). Tree mode only.
    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![1usize; self.len()];
        for i in 1..self.len() {
            if let Some(p) = self.parent(i) {
                if p < i {
                    depth[i] = depth[p] + 1;
                }
            }
        }
        depth
    }

    pub fn max_depth(&self) -> usize {
        self.depths().into_iter().max().unwrap_or(0)
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.len()];
        for (c, p) in self.edges() {
            if c != p {
                ch[p].push(c);
            }
        }
        ch
    }
}

/// Partition of `0..n` into the connected components of the undirected
/// reply graph. Self loops are ignored; clusters are sorted and listed by
/// their smallest member.
pub fn connected_components(graph: &ReplyGraph, n: usize) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(n);
    for (c, p) in graph.edges() {
        if c != p && c < n && p < n {
            uf.union(c, p);
        }
    }
    uf.groups()
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    pub(crate) fn groups(&mut self) -> Vec<Vec<usize>> {
        let n = self.parent.len();
        let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            let r = self.find(i);
            by_root[r].push(i);
        }
        by_root.into_iter().filter(|g| !g.is_empty()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeStats {
    pub count: usize,
    pub comment_count: usize,
    pub average_depth: f64,
    pub max_depth: usize,
}

/// Corpus statistics for tree-shaped conversations. Depth is the number of
/// nodes on the longest root-to-leaf path.
pub fn tree_stats(corpus: &[(Conversation, ReplyGraph)]) -> Result<TreeStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let depths: Vec<usize> = corpus.iter().map(|(_, g)| g.max_depth()).collect();
    Ok(TreeStats {
        count: corpus.len(),
        comment_count: corpus.iter().map(|(c, _)| c.len()).sum(),
        average_depth: depths.iter().sum::<usize>() as f64 / corpus.len() as f64,
        max_depth: depths.into_iter().max().unwrap_or(0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiParentStats {
    pub count: usize,
    pub annotated_messages: usize,
    pub average_parents: f64,
}

/// Statistics for multi-parent chat logs; context messages are skipped.
pub fn multi_parent_stats(corpus: &[(Conversation, ReplyGraph)]) -> Result<MultiParentStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut annotated = 0usize;
    let mut parents = 0usize;
    for (conv, graph) in corpus {
        for u in conv.utterances.iter().filter(|u| !u.is_context) {
            let k = graph.parents(u.index).len();
            if k > 0 {
                annotated += 1;
                parents += k;
            }
        }
    }
    Ok(MultiParentStats {
        count: corpus.len(),
        annotated_messages: annotated,
        average_parents: if annotated == 0 {
            0.0
        } else {
            parents as f64 / annotated as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_ancestors(parent: &[Option<usize>], node: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut cur = node;
        while let Some(p) = parent[cur] {
            if p == cur {
                break;
            }
            out.insert(p);
            cur = p;
        }
        out
    }

    #[test]
    fn ancestors_follow_parent_chain() {
        let g = ReplyGraph::from_parent_vec(&[0, 0, 0, 1]);
        let expect = brute_ancestors(&[None, Some(0), Some(0), Some(1)], 3);
        assert_eq!(g.ancestors(3).unwrap(), expect);
        assert_eq!(expect, BTreeSet::from([0, 1]));
        assert!(g.ancestors(0).unwrap().is_empty());
        assert!(matches!(g.ancestors(9), Err(Error::NotFound(9))));
    }

    #[test]
    fn self_parent_adds_no_ancestor() {
        let mut g = ReplyGraph::new(6);
        g.set_parents(5, [5]);
        assert!(g.ancestors(5).unwrap().is_empty());
    }

    #[test]
    fn distances() {
        let chain = ReplyGraph::from_parent_vec(&[0, 0, 1, 2]);
        assert_eq!(chain.graph_distance(3, 0).unwrap(), Some(3));
        assert_eq!(chain.graph_distance(2, 2).unwrap(), Some(0));
        let siblings = ReplyGraph::from_parent_vec(&[0, 0, 0]);
        assert_eq!(siblings.graph_distance(2, 1).unwrap(), None);
        assert!(matches!(chain.graph_distance(7, 0), Err(Error::NotFound(7))));
    }

    #[test]
    fn components() {
        let mut g = ReplyGraph::new(4);
        g.set_parents(1, [0]);
        g.set_parents(3, [2]);
        assert_eq!(connected_components(&g, 4), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(
            connected_components(&ReplyGraph::new(3), 3),
            vec![vec![0], vec![1], vec![2]]
        );
        let mut s = ReplyGraph::new(2);
        s.set_parents(1, [1]);
        assert_eq!(connected_components(&s, 2), vec![vec![0], vec![1]]);
    }

    fn conv(n: usize) -> Conversation {
        let utterances = (0..n)
            .map(|i| Utterance {
                id: format!("u{i}"),
                index: i,
                author: "a".into(),
                timestamp: i as i64,
                text: String::new(),
                is_context: false,
            })
            .collect();
        Conversation {
            conv_id: "c".into(),
            mode: Mode::RedditTree,
            utterances,
        }
    }

    #[test]
    fn depth_statistics() {
        let chain4 = (conv(4), ReplyGraph::from_parent_vec(&[0, 0, 1, 2]));
        assert_eq!(tree_stats(&[chain4.clone()]).unwrap().average_depth, 4.0);
        let chain3 = (conv(3), ReplyGraph::from_parent_vec(&[0, 0, 1]));
        let chain5 = (conv(5), ReplyGraph::from_parent_vec(&[0, 0, 1, 2, 3]));
        let s = tree_stats(&[chain3, chain5]).unwrap();
        assert_eq!(s.average_depth, 4.0);
        assert_eq!(s.max_depth, 5);
        assert_eq!(s.comment_count, 8);
        let star = (conv(4), ReplyGraph::from_parent_vec(&[0, 0, 0, 0]));
        assert_eq!(tree_stats(&[star]).unwrap().average_depth, 2.0);
        assert!(matches!(tree_stats(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn tree_validation() {
        let mut g = ReplyGraph::from_parent_vec(&[0, 0, 1]);
        assert!(g.validate(Mode::RedditTree).is_ok());
        g.set_parents(1, [2]);
        assert!(g.validate(Mode::RedditTree).is_err());
        let mut irc = ReplyGraph::new(3);
        irc.set_parents(2, [2, 0]);
        assert!(irc.validate(Mode::IrcMultiParent).is_ok());
        irc.set_parents(1, [2]);
        assert!(irc.validate(Mode::IrcMultiParent).is_err());
    }

    #[test]
    fn canonical_order_breaks_ties_by_file_order() {
        let mk = |id: &str, ts| Utterance {
            id: id.into(),
            index: 0,
            author: "x".into(),
            timestamp: ts,
            text: String::new(),
            is_context: false,
        };
        let (c, order) =
            Conversation::canonical("c", Mode::RedditTree, vec![mk("a", 5), mk("b", 1), mk("c", 5)])
                .unwrap();
        let ids: Vec<&str> = c.utterances.iter().map(|u| u.id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(order, [1, 0, 2]);
        c.check_invariants().unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_tree() -> impl Strategy<Value = Vec<usize>> {
            (1usize..20).prop_flat_map(|n| {
                let parents: Vec<BoxedStrategy<usize>> = (0..n)
                    .map(|i| if i == 0 { Just(0).boxed() } else { (0..i).boxed() })
                    .collect();
                parents
            })
        }

        proptest! {
            #[test]
            fn ancestors_transitively_closed(parent in random_tree()) {
                let g = ReplyGraph::from_parent_vec(&parent);
                for b in 0..g.len() {
                    let ab = g.ancestors(b).unwrap();
                    for &a in &ab {
                        for c in g.ancestors(a).unwrap() {
                            prop_assert!(ab.contains(&c));
                        }
                    }
                    // in a tree, the ancestor count equals the distance to the root
                    prop_assert_eq!(Some(ab.len()), g.graph_distance(b, 0).unwrap());
                }
            }

            #[test]
            fn components_partition(parent in random_tree()) {
                let g = ReplyGraph::from_parent_vec(&parent);
                let comps = connected_components(&g, g.len());
                let mut all: Vec<usize> = comps.concat();
                all.sort_unstable();
                prop_assert_eq!(all, (0..g.len()).collect::<Vec<_>>());
            }
        }
    }
}

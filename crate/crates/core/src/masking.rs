//! Attention masks for the second-stage transformer.
//!
//! A mask is an `L x L` 0/1 matrix; row `i` lists what utterance `i` may
//! attend to. The last row/column belongs to the target utterance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ReplyGraph;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    cells: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub row: usize,
    pub col: usize,
    pub expected: u8,
    pub found: u8,
}

impl AttentionMask {
    pub fn zeros(size: usize) -> Self {
        AttentionMask {
            size,
            cells: vec![0; size * size],
        }
    }

    /// Builds a mask from explicit rows; used by tests and debug tooling.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Shape("mask rows must all have length L".into()));
        }
        Ok(AttentionMask {
            size,
            cells: rows.iter().flat_map(|r| r.iter().map(|&c| u8::from(c != 0))).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn target(&self) -> usize {
        self.size - 1
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.size + j] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.cells[i * self.size + j] = u8::from(on);
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.cells[i * self.size..(i + 1) * self.size]
    }

    /// Diagonal ones, last column ones, and at least one attendable cell per row.
    pub fn check_invariants(&self) -> Result<()> {
        let l = self.size;
        for i in 0..l {
            if !self.get(i, i) {
                return Err(Error::Mask(format!("row {i} cannot attend to itself")));
            }
            if !self.get(i, l - 1) {
                return Err(Error::Mask(format!("row {i} cannot attend to the target")));
            }
        }
        Ok(())
    }

    fn with_base(size: usize) -> Self {
        let mut m = AttentionMask::zeros(size);
        for i in 0..size {
            m.set(i, i, true);
            m.set(i, size - 1, true);
        }
        m
    }
}

/// Row-major 0/1 grid, one row per line.
impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.size {
            let line: String = self.row(i).iter().map(|&c| if c != 0 { '1' } else { '0' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn check_prefix(graph: &ReplyGraph, size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::Shape("mask size must be at least 1".into()));
    }
    let target = size - 1;
    if graph.len() > size {
        return Err(Error::InvalidGraph(format!(
            "graph has {} nodes but the mask only covers {size}",
            graph.len()
        )));
    }
    for i in 0..graph.len().min(target) {
        if let Some(&p) = graph.parents(i).iter().find(|&&p| p >= target) {
            return Err(Error::InvalidGraph(format!(
                "utterance {i} references index {p} at or beyond the target {target}"
            )));
        }
    }
    Ok(())
}

/// Each history utterance attends to itself, its ancestors and the target;
/// the target attends only to itself. The graph covers the history
/// `0..L-1`; if it also has a node for the target, that node's parents
/// are ignored.
pub fn ancestor_mask(graph_prefix: &ReplyGraph, size: usize) -> Result<AttentionMask> {
    check_prefix(graph_prefix, size)?;
    let mut m = AttentionMask::with_base(size);
    for i in 0..graph_prefix.len().min(size - 1) {
        for a in graph_prefix.ancestors(i)? {
            m.set(i, a, true);
        }
    }
    Ok(m)
}

/// Ancestor mask with ancestors further than `depth` hops removed.
pub fn depth_limited_mask(graph_prefix: &ReplyGraph, size: usize, depth: usize) -> Result<AttentionMask> {
    if depth == 0 {
        return Err(Error::InvalidConfig("ancestor depth must be at least 1".into()));
    }
    check_prefix(graph_prefix, size)?;
    let mut m = AttentionMask::with_base(size);
    for i in 0..graph_prefix.len().min(size - 1) {
        for a in graph_prefix.ancestors(i)? {
            match graph_prefix.graph_distance(i, a)? {
                Some(d) if d <= depth => m.set(i, a, true),
                _ => {}
            }
        }
    }
    Ok(m)
}

/// Each history utterance attends to the `window` utterances right before it.
pub fn temporal_mask(size: usize, window: usize) -> AttentionMask {
    let mut m = AttentionMask::with_base(size);
    for i in 0..size.saturating_sub(1) {
        for j in i.saturating_sub(window)..i {
            m.set(i, j, true);
        }
    }
    m
}

pub fn full_mask(size: usize) -> AttentionMask {
    AttentionMask {
        size,
        cells: vec![1; size * size],
    }
}

/// Cell-by-cell comparison against the ancestor mask of `graph_prefix`.
pub fn validate_mask(mask: &AttentionMask, graph_prefix: &ReplyGraph) -> Result<Vec<Violation>> {
    if graph_prefix.len() + 1 < mask.size() || graph_prefix.len() > mask.size() {
        return Err(Error::Shape(format!(
            "graph with {} nodes does not match a {}x{} mask",
            graph_prefix.len(),
            mask.size(),
            mask.size()
        )));
    }
    let expected = ancestor_mask(graph_prefix, mask.size())?;
    let l = mask.size();
    let mut out = Vec::new();
    for i in 0..l {
        for j in 0..l {
            let (e, f) = (expected.get(i, j), mask.get(i, j));
            if e != f {
                out.push(Violation {
                    row: i,
                    col: j,
                    expected: u8::from(e),
                    found: u8::from(f),
                });
            }
        }
    }
    Ok(out)
}

/// The mask families compared in the ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum MaskKind {
    Ancestor,
    None,
    Depth(usize),
    Temporal(usize),
}

impl MaskKind {
    pub fn build(&self, graph_prefix: &ReplyGraph, size: usize) -> Result<AttentionMask> {
        match *self {
            MaskKind::Ancestor => ancestor_mask(graph_prefix, size),
            MaskKind::None => Ok(full_mask(size)),
            MaskKind::Depth(d) => depth_limited_mask(graph_prefix, size, d),
            MaskKind::Temporal(t) => Ok(temporal_mask(size, t)),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            MaskKind::Ancestor => "ancestor".into(),
            MaskKind::None => "none".into(),
            MaskKind::Depth(d) => format!("depth:{d}"),
            MaskKind::Temporal(t) => format!("temporal:{t}"),
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown mask `{s}`"));
        match s {
            "ancestor" => Ok(MaskKind::Ancestor),
            "none" | "full" => Ok(MaskKind::None),
            _ => {
                let (kind, param) = s.split_once(':').ok_or_else(bad)?;
                let value: usize = param.parse().map_err(|_| bad())?;
                match kind {
                    "depth" => Ok(MaskKind::Depth(value)),
                    "temporal" => Ok(MaskKind::Temporal(value)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

//! Messages-sequence graphs: directed CAN-ID transition counts for one batch
//! window, and the cosine similarity between two of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can_frame::{write_id, FrameBatch};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("batch of {0} frames has no transitions (need at least 2)")]
    BatchTooSmall(usize),
    #[error("graph has no non-zero edge")]
    ZeroVector,
}

/// Directed edge between two packed CAN-ID keys (see [`crate::CanFrame::key`]).
pub type Edge = (u32, u32);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MessagesSequenceGraph {
    window_index: u64,
    nodes: BTreeSet<u32>,
    edges: BTreeMap<Edge, u64>,
}

impl MessagesSequenceGraph {
    /// Builds a graph from explicit edge counts. Zero counts are dropped.
    pub fn from_edges(window_index: u64, edges: impl IntoIterator<Item = (Edge, u64)>) -> Self {
        let mut g = MessagesSequenceGraph {
            window_index,
            ..Default::default()
        };
        for ((src, dst), count) in edges {
            if count > 0 {
                g.add(src, dst, count);
            }
        }
        g
    }

    fn add(&mut self, src: u32, dst: u32, count: u64) {
        self.nodes.insert(src);
        self.nodes.insert(dst);
        *self.edges.entry((src, dst)).or_insert(0) += count;
    }

    pub fn window_index(&self) -> u64 {
        self.window_index
    }

    pub fn nodes(&self) -> &BTreeSet<u32> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeMap<Edge, u64> {
        &self.edges
    }

    /// Count on `src -> dst`; absent edges count zero.
    pub fn count(&self, src: u32, dst: u32) -> u64 {
        self.edges.get(&(src, dst)).copied().unwrap_or(0)
    }

    pub fn total_transitions(&self) -> u64 {
        self.edges.values().sum()
    }

    fn squared_norm(&self) -> u128 {
        self.edges.values().map(|&c| c as u128 * c as u128).sum()
    }

    /// Edge list, one `SRCHEX DSTHEX COUNT` line per edge in key order.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (&(src, dst), count) in &self.edges {
            write_id(&mut out, src).unwrap();
            out.push(' ');
            write_id(&mut out, dst).unwrap();
            writeln!(out, " {count}").unwrap();
        }
        out
    }
}

impl fmt::Display for MessagesSequenceGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_edge_list())
    }
}

/// Counts `id[k] -> id[k+1]` for every consecutive pair in the batch.
pub fn build_msg(batch: &FrameBatch) -> Result<MessagesSequenceGraph, GraphError> {
    build_msg_with_boundary(batch, None)
}

/// Like [`build_msg`], additionally counting the transition from the last
/// frame of the previous window (`carried`) into this batch's first frame.
pub fn build_msg_with_boundary(batch: &FrameBatch, carried: Option<u32>) -> Result<MessagesSequenceGraph, GraphError> {
    let frames = batch.frames();
    if frames.len() < 2 {
        return Err(GraphError::BatchTooSmall(frames.len()));
    }
    let mut g = MessagesSequenceGraph {
        window_index: batch.window_index(),
        ..Default::default()
    };
    if let Some(prev) = carried {
        g.add(prev, frames[0].key(), 1);
    }
    for pair in frames.windows(2) {
        g.add(pair[0].key(), pair[1].key(), 1);
    }
    Ok(g)
}

/// Cosine similarity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    /// Clamps into `[0, 1]`; NaN is rejected.
    pub fn new(value: f64) -> Option<Self> {
        (!value.is_nan()).then(|| SimilarityScore(value.clamp(0.0, 1.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Cosine of the angle between the two graphs' edge-count vectors, aligned
/// over the union of their edges (a missing edge counts zero).
///
/// Dot product and squared norms are accumulated exactly in integers, so the
/// result is symmetric bit-for-bit and `cosine(g, g)` is exactly 1 for any
/// realistic count magnitude.
pub fn cosine_similarity(a: &MessagesSequenceGraph, b: &MessagesSequenceGraph) -> Result<SimilarityScore, GraphError> {
    let (na, nb) = (a.squared_norm(), b.squared_norm());
    if na == 0 || nb == 0 {
        return Err(GraphError::ZeroVector);
    }
    // Only shared edges contribute to the dot product; iterate the smaller map.
    let (small, large) = if a.edges.len() <= b.edges.len() { (a, b) } else { (b, a) };
    let dot: u128 = small
        .edges
        .iter()
        .filter_map(|(e, &c)| large.edges.get(e).map(|&d| c as u128 * d as u128))
        .sum();
    let denom = ((na as f64) * (nb as f64)).sqrt();
    Ok(SimilarityScore::new(dot as f64 / denom).expect("finite ratio"))
}

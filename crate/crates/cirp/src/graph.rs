//! Undirected weighted item-item co-purchase graph.
//!
//! Two items are connected when the same user purchased them consecutively
//! within a short window (one day by default). Weights count how often that
//! happened; sampling downstream treats edges as unweighted unless asked.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, ItemIndex};
use crate::error::{CirpError, Result};

/// How consecutive purchases are turned into edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRule {
    /// Adjacent entries of the per-user time-sorted sequence.
    #[default]
    Consecutive,
    /// Every pair of entries whose timestamps fall within the window.
    AllWithinWindow,
}

/// Immutable undirected graph over dense item indices.
///
/// Neighbor lists are sorted ascending and symmetric; self-loops are
/// forbidden. Weights are positive co-occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemGraph {
    adjacency: Vec<Vec<(usize, u32)>>,
    edge_count: usize,
}

impl ItemGraph {
    /// Build from a map of undirected edges keyed by (low, high) index.
    pub fn from_edge_weights(
        num_items: usize,
        edges: impl IntoIterator<Item = ((usize, usize), u32)>,
    ) -> Result<Self> {
        let mut adjacency: Vec<Vec<(usize, u32)>> = vec![Vec::new(); num_items];
        let mut edge_count = 0;
        for ((a, b), weight) in edges {
            if a == b {
                return Err(CirpError::Validation(format!("self-loop on item {a}")));
            }
            if a >= num_items || b >= num_items {
                return Err(CirpError::Validation(format!(
                    "edge ({a},{b}) out of range for {num_items} items"
                )));
            }
            if weight == 0 {
                return Err(CirpError::Validation(format!(
                    "edge ({a},{b}) has zero weight"
                )));
            }
            adjacency[a].push((b, weight));
            adjacency[b].push((a, weight));
            edge_count += 1;
        }
        for list in &mut adjacency {
            list.sort_unstable_by_key(|&(j, _)| j);
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(CirpError::Validation("duplicate edge".into()));
            }
        }
        Ok(ItemGraph {
            adjacency,
            edge_count,
        })
    }

    pub fn num_items(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn degree(&self, item: usize) -> usize {
        self.adjacency[item].len()
    }

    /// Sorted neighbor list of an item with co-occurrence weights.
    pub fn neighbors(&self, item: usize) -> &[(usize, u32)] {
        &self.adjacency[item]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search_by_key(&b, |&(j, _)| j).is_ok()
    }

    /// Each undirected edge once, as (low index, high index, weight),
    /// ordered by (low, high).
    pub fn edges(&self) -> Vec<(usize, usize, u32)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for (i, list) in self.adjacency.iter().enumerate() {
            for &(j, w) in list {
                if i < j {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// Check symmetry, absence of self-loops, neighbor ordering, and the
    /// edge-count bookkeeping. Used by tests and after pruning.
    pub fn validate(&self) -> Result<()> {
        let mut half_edges = 0usize;
        for (i, list) in self.adjacency.iter().enumerate() {
            let mut prev: Option<usize> = None;
            for &(j, w) in list {
                if j == i {
                    return Err(CirpError::Validation(format!("self-loop on item {i}")));
                }
                if let Some(p) = prev {
                    if j <= p {
                        return Err(CirpError::Validation(format!(
                            "neighbor list of {i} not strictly ascending"
                        )));
                    }
                }
                prev = Some(j);
                match self.adjacency[j].binary_search_by_key(&i, |&(k, _)| k) {
                    Ok(pos) if self.adjacency[j][pos].1 == w => {}
                    _ => {
                        return Err(CirpError::Validation(format!(
                            "edge ({i},{j}) lacks a symmetric counterpart of equal weight"
                        )));
                    }
                }
                half_edges += 1;
            }
        }
        if half_edges != 2 * self.edge_count {
            return Err(CirpError::Validation(format!(
                "edge count {} does not match adjacency ({half_edges} half-edges)",
                self.edge_count
            )));
        }
        Ok(())
    }
}

/// Construct the co-purchase graph from an interaction log.
///
/// Per user, interactions are sorted by timestamp (stable in input order);
/// qualifying pairs within `window_seconds` whose endpoints differ increment
/// the undirected edge weight.
pub fn build_graph(
    interactions: &[Interaction],
    window_seconds: i64,
    item_index: &ItemIndex,
    pair_rule: PairRule,
) -> Result<ItemGraph> {
    if window_seconds <= 0 {
        return Err(CirpError::Config("window_seconds must be positive".into()));
    }
    // BTreeMap keeps user processing order deterministic.
    let mut per_user: BTreeMap<&str, Vec<(i64, usize)>> = BTreeMap::new();
    for interaction in interactions {
        let idx = item_index.require(&interaction.item_id)?;
        per_user
            .entry(interaction.user_id.as_str())
            .or_default()
            .push((interaction.timestamp, idx));
    }

    let mut weights: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for sequence in per_user.values_mut() {
        sequence.sort_by_key(|&(t, _)| t);
        match pair_rule {
            PairRule::Consecutive => {
                for w in sequence.windows(2) {
                    let (t0, a) = w[0];
                    let (t1, b) = w[1];
                    if t1 - t0 <= window_seconds && a != b {
                        *weights.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                    }
                }
            }
            PairRule::AllWithinWindow => {
                for p in 0..sequence.len() {
                    for q in (p + 1)..sequence.len() {
                        let (t0, a) = sequence[p];
                        let (t1, b) = sequence[q];
                        if t1 - t0 > window_seconds {
                            break;
                        }
                        if a != b {
                            *weights.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                        }
                    }
                }
            }
        }
    }

    ItemGraph::from_edge_weights(item_index.len(), weights)
}

/// Summary counts used by the `build-graph` stage report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_items: usize,
    pub edge_count: usize,
    /// histogram[d] = number of items with degree d.
    pub degree_histogram: Vec<usize>,
    pub isolated_items: usize,
}

pub fn graph_stats(graph: &ItemGraph) -> GraphStats {
    let max_degree = (0..graph.num_items())
        .map(|i| graph.degree(i))
        .max()
        .unwrap_or(0);
    let mut degree_histogram = vec![0usize; max_degree + 1];
    for i in 0..graph.num_items() {
        degree_histogram[graph.degree(i)] += 1;
    }
    GraphStats {
        num_items: graph.num_items(),
        edge_count: graph.edge_count(),
        isolated_items: degree_histogram.first().copied().unwrap_or(0),
        degree_histogram,
    }
}

/// Write `item_a<TAB>item_b<TAB>weight`, one line per undirected edge, with
/// item_a < item_b lexicographically and lines sorted.
pub fn write_edges(graph: &ItemGraph, item_index: &ItemIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut lines: Vec<(String, String, u32)> = graph
        .edges()
        .into_iter()
        .map(|(i, j, w)| {
            let a = item_index.id(i).to_owned();
            let b = item_index.id(j).to_owned();
            if a <= b {
                (a, b, w)
            } else {
                (b, a, w)
            }
        })
        .collect();
    lines.sort();

    let file = File::create(path).map_err(|e| CirpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (a, b, weight) in lines {
        writeln!(w, "{a}\t{b}\t{weight}").map_err(|e| CirpError::io(path, e))?;
    }
    w.flush().map_err(|e| CirpError::io(path, e))
}

pub fn read_edges(path: impl AsRef<Path>, item_index: &ItemIndex) -> Result<ItemGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CirpError::io(path, e))?;
    let mut weights: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| CirpError::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CirpError::parse(
                path,
                lineno,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let a = item_index
            .get(fields[0])
            .ok_or_else(|| CirpError::parse(path, lineno, format!("unknown item {}", fields[0])))?;
        let b = item_index
            .get(fields[1])
            .ok_or_else(|| CirpError::parse(path, lineno, format!("unknown item {}", fields[1])))?;
        if a == b {
            return Err(CirpError::parse(
                path,
                lineno,
                format!("self-loop on item {}", fields[0]),
            ));
        }
        let weight: u32 = fields[2]
            .parse()
            .map_err(|_| CirpError::parse(path, lineno, format!("bad weight {:?}", fields[2])))?;
        if weights.insert((a.min(b), a.max(b)), weight).is_some() {
            return Err(CirpError::parse(
                path,
                lineno,
                format!("duplicate edge {} {}", fields[0], fields[1]),
            ));
        }
    }
    ItemGraph::from_edge_weights(item_index.len(), weights)
}

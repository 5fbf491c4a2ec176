//! Score-based relation pruning.
//!
//! Each item ranks its neighbors by inner-product score and marks the
//! lowest floor(beta/100 * degree) of them as noise. Marked edges are
//! dropped under one of two rules; the survivors form the pruned graph
//! that pre-training samples from.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingTable;
use crate::error::{CirpError, Result};
use crate::graph::ItemGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalRule {
    /// Drop an edge as soon as one endpoint marks it.
    #[default]
    EitherEndpoint,
    /// Drop only edges both endpoints agree are noise.
    BothEndpoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub beta_percent: f64,
    #[serde(default)]
    pub removal_rule: RemovalRule,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            beta_percent: 30.0,
            removal_rule: RemovalRule::default(),
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.beta_percent) || !self.beta_percent.is_finite() {
            return Err(CirpError::Config(format!(
                "beta_percent must lie in [0, 100], got {}",
                self.beta_percent
            )));
        }
        Ok(())
    }
}

/// Written next to the pruned edge file by the `prune` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub beta_percent: f64,
    pub removal_rule: RemovalRule,
    pub edges_before: usize,
    pub edges_after: usize,
}

/// Drop each item's lowest-scored relations.
///
/// Neighbors of item i are sorted by (s_ij ascending, j ascending) and the
/// first floor(beta/100 * deg_i) entries are marked; the index order makes
/// score ties deterministic, smaller index marked first.
pub fn prune_graph(
    graph: &ItemGraph,
    embeddings: &EmbeddingTable,
    config: &PruneConfig,
) -> Result<ItemGraph> {
    config.validate()?;
    if embeddings.num_items() < graph.num_items() {
        return Err(CirpError::Validation(format!(
            "embeddings cover {} items but the graph has {}",
            embeddings.num_items(),
            graph.num_items()
        )));
    }

    let marks = mark_sets(graph, embeddings, config.beta_percent);
    let survivors = graph.edges().into_iter().filter_map(|(a, b, w)| {
        let by_a = marks[a].contains(&b);
        let by_b = marks[b].contains(&a);
        let removed = match config.removal_rule {
            RemovalRule::EitherEndpoint => by_a || by_b,
            RemovalRule::BothEndpoints => by_a && by_b,
        };
        (!removed).then_some(((a, b), w))
    });
    ItemGraph::from_edge_weights(graph.num_items(), survivors)
}

/// For each item, the neighbors inside its marked prefix.
fn mark_sets(
    graph: &ItemGraph,
    embeddings: &EmbeddingTable,
    beta_percent: f64,
) -> Vec<BTreeSet<usize>> {
    (0..graph.num_items())
        .map(|i| {
            let drop = (beta_percent / 100.0 * graph.degree(i) as f64).floor() as usize;
            if drop == 0 {
                return BTreeSet::new();
            }
            let mut ranked: Vec<(f64, usize)> = graph
                .neighbors(i)
                .iter()
                .map(|&(j, _)| (embeddings.row(i).dot(&embeddings.row(j)), j))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ranked.iter().take(drop).map(|&(_, j)| j).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
        let dim = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        EmbeddingTable::new(
            ndarray::Array2::from_shape_vec((rows.len(), dim), flat).unwrap(),
        )
        .unwrap()
    }

    fn four_cycle() -> (ItemGraph, EmbeddingTable) {
        // a-b-c-d-a with a,b pointing one way and c,d the other.
        let graph = ItemGraph::from_edge_weights(
            4,
            [((0, 1), 1), ((1, 2), 1), ((2, 3), 1), ((0, 3), 1)],
        )
        .unwrap();
        let emb = table(vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]);
        (graph, emb)
    }

    #[test]
    fn beta_zero_is_identity() {
        let (graph, emb) = four_cycle();
        let pruned = prune_graph(
            &graph,
            &emb,
            &PruneConfig {
                beta_percent: 0.0,
                removal_rule: RemovalRule::EitherEndpoint,
            },
        )
        .unwrap();
        assert_eq!(pruned, graph);
    }

    #[test]
    fn four_cycle_splits_into_agreeing_pairs() {
        // Every item has 2 neighbors and marks 1: a marks {a,d}, b marks
        // {b,c}, c marks {b,c}, d marks {a,d}. Either-endpoint leaves
        // {a-b, c-d}.
        let (graph, emb) = four_cycle();
        let pruned = prune_graph(
            &graph,
            &emb,
            &PruneConfig {
                beta_percent: 50.0,
                removal_rule: RemovalRule::EitherEndpoint,
            },
        )
        .unwrap();
        pruned.validate().unwrap();
        assert_eq!(pruned.edge_count(), 2);
        assert!(pruned.has_edge(0, 1));
        assert!(pruned.has_edge(2, 3));
    }

    #[test]
    fn both_endpoints_rule_needs_agreement() {
        // Same marks as above; both cross edges are marked by both of
        // their endpoints, so the outcome coincides here.
        let (graph, emb) = four_cycle();
        let pruned = prune_graph(
            &graph,
            &emb,
            &PruneConfig {
                beta_percent: 50.0,
                removal_rule: RemovalRule::BothEndpoints,
            },
        )
        .unwrap();
        assert_eq!(pruned.edge_count(), 2);

        // A star center with beta=50 marks one leaf, but leaves (degree 1,
        // floor(0.5) = 0) mark nothing: agreement saves every edge.
        let star = ItemGraph::from_edge_weights(3, [((0, 1), 1), ((0, 2), 1)]).unwrap();
        let emb = table(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let either = prune_graph(
            &star,
            &emb,
            &PruneConfig {
                beta_percent: 50.0,
                removal_rule: RemovalRule::EitherEndpoint,
            },
        )
        .unwrap();
        let both = prune_graph(
            &star,
            &emb,
            &PruneConfig {
                beta_percent: 50.0,
                removal_rule: RemovalRule::BothEndpoints,
            },
        )
        .unwrap();
        assert_eq!(either.edge_count(), 1);
        assert!(!either.has_edge(0, 1), "orthogonal leaf is the marked one");
        assert_eq!(both.edge_count(), 2);
    }

    #[test]
    fn mark_count_is_floored_fraction_of_degree() {
        // Center with 10 leaves at distinct scores; beta=30 drops exactly 3.
        let edges: Vec<((usize, usize), u32)> =
            (1..=10).map(|leaf| ((0, leaf), 1)).collect();
        let graph = ItemGraph::from_edge_weights(11, edges).unwrap();
        let mut rows = vec![vec![1.0]];
        rows.extend((1..=10).map(|leaf| vec![leaf as f64]));
        let pruned = prune_graph(
            &graph,
            &table(rows),
            &PruneConfig {
                beta_percent: 30.0,
                removal_rule: RemovalRule::EitherEndpoint,
            },
        )
        .unwrap();
        assert_eq!(pruned.edge_count(), 7);
        // The three lowest-scoring leaves are gone.
        for leaf in 1..=3 {
            assert!(!pruned.has_edge(0, leaf));
        }
        for leaf in 4..=10 {
            assert!(pruned.has_edge(0, leaf));
        }
    }

    #[test]
    fn score_ties_mark_the_smaller_index_first() {
        // Both leaves score identically; floor(0.5 * 2) = 1 mark goes to
        // the smaller index.
        let graph = ItemGraph::from_edge_weights(3, [((0, 1), 1), ((0, 2), 1)]).unwrap();
        let emb = table(vec![vec![1.0], vec![1.0], vec![1.0]]);
        let pruned = prune_graph(
            &graph,
            &emb,
            &PruneConfig {
                beta_percent: 50.0,
                removal_rule: RemovalRule::EitherEndpoint,
            },
        )
        .unwrap();
        assert!(!pruned.has_edge(0, 1));
        assert!(pruned.has_edge(0, 2));
    }

    #[test]
    fn nested_betas_nest_their_survivors() {
        let (graph, _) = four_cycle();
        let emb = table(vec![
            vec![1.0, 0.2],
            vec![0.9, -0.1],
            vec![0.3, 1.0],
            vec![-0.2, 0.8],
        ]);
        let mut previous: Option<ItemGraph> = None;
        for beta in [0.0, 25.0, 50.0, 75.0, 100.0] {
            let pruned = prune_graph(
                &graph,
                &emb,
                &PruneConfig {
                    beta_percent: beta,
                    removal_rule: RemovalRule::EitherEndpoint,
                },
            )
            .unwrap();
            if let Some(prev) = &previous {
                for (a, b, _) in pruned.edges() {
                    assert!(prev.has_edge(a, b), "edge ({a},{b}) resurrected at beta {beta}");
                }
            }
            previous = Some(pruned);
        }
    }

    #[test]
    fn missing_embeddings_error() {
        let (graph, _) = four_cycle();
        let short = table(vec![vec![1.0], vec![1.0]]);
        assert!(prune_graph(&graph, &short, &PruneConfig::default()).is_err());
        let bad_beta = PruneConfig {
            beta_percent: 101.0,
            removal_rule: RemovalRule::EitherEndpoint,
        };
        let emb = table(vec![vec![1.0]; 4]);
        assert_eq!(
            prune_graph(&graph, &emb, &bad_beta).unwrap_err().exit_code(),
            2
        );
    }

    #[test]
    fn survivor_scores_dominate_removed_ones_for_the_marker() {
        let (graph, emb) = four_cycle();
        let config = PruneConfig {
            beta_percent: 50.0,
            removal_rule: RemovalRule::EitherEndpoint,
        };
        let pruned = prune_graph(&graph, &emb, &config).unwrap();
        let marks = mark_sets(&graph, &emb, config.beta_percent);
        for i in 0..graph.num_items() {
            let removed: Vec<usize> = graph
                .neighbors(i)
                .iter()
                .map(|&(j, _)| j)
                .filter(|&j| !pruned.has_edge(i, j) && marks[i].contains(&j))
                .collect();
            let kept: Vec<usize> = pruned.neighbors(i).iter().map(|&(j, _)| j).collect();
            for &r in &removed {
                let sr = emb.row(i).dot(&emb.row(r));
                for &k in &kept {
                    let sk = emb.row(i).dot(&emb.row(k));
                    assert!(sr <= sk, "item {i}: removed {r} outscores kept {k}");
                }
            }
        }
    }
}

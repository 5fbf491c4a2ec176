//! Property tests for the invariants the modules promise: format
//! round-trips, graph symmetry and order-insensitivity, propagation
//! linearity, monotone pruning, and scale-invariant encoding and ranking.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use ndarray::{Array1, Array2, ArrayView1};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cirp::bundling::{ndcg_at_k, rank_candidates, recall_at_k};
use cirp::corpus::{
    filter_cold_start, load_bundles, load_features, load_interactions, write_bundles,
    write_features, write_interactions, Bundle, BundleSet, EmbeddingTable, FeatureMatrix,
    Interaction, ItemIndex,
};
use cirp::encoder::{contrast, encode, ContrastConfig, EncoderParams};
use cirp::gae::{propagate, score, GraphNorm};
use cirp::graph::{build_graph, read_edges, write_edges, ItemGraph, PairRule};
use cirp::prune::{prune_graph, PruneConfig, RemovalRule};

fn interactions_strategy() -> impl Strategy<Value = Vec<Interaction>> {
    prop::collection::vec((0u8..6, 0u8..10, 0i64..2_000), 0..40).prop_map(|rows| {
        rows.into_iter()
            .map(|(u, i, t)| Interaction::new(format!("u{u}"), format!("i{i}"), t).unwrap())
            .collect()
    })
}

fn features_strategy() -> impl Strategy<Value = FeatureMatrix> {
    (1usize..6, 1usize..5).prop_flat_map(|(rows, cols)| {
        prop::collection::vec(-1.0e3f32..1.0e3, rows * cols).prop_map(move |values| {
            let ids = (0..rows).map(|i| format!("i{i}")).collect();
            let data = Array2::from_shape_vec((rows, cols), values).unwrap();
            FeatureMatrix::new(ids, data).unwrap()
        })
    })
}

fn bundles_strategy() -> impl Strategy<Value = BundleSet> {
    prop::collection::vec(prop::collection::btree_set(0u8..30, 2..5), 1..8).prop_map(|sets| {
        let bundles = sets
            .into_iter()
            .enumerate()
            .map(|(i, set)| Bundle {
                bundle_id: format!("b{i}"),
                items: set.into_iter().map(|x| format!("i{x}")).collect(),
            })
            .collect();
        BundleSet::new(bundles).unwrap()
    })
}

/// Undirected graph on `n` nodes from an arbitrary edge map.
fn graph_strategy(n: usize) -> impl Strategy<Value = ItemGraph> {
    prop::collection::btree_map((0..n, 0..n), 1u32..5, 0..2 * n).prop_map(move |raw| {
        let mut edges = BTreeMap::new();
        for ((a, b), w) in raw {
            if a != b {
                edges.insert((a.min(b), a.max(b)), w);
            }
        }
        ItemGraph::from_edge_weights(n, edges).unwrap()
    })
}

fn small_index(n: usize) -> ItemIndex {
    ItemIndex::from_ids((0..n).map(|i| format!("i{i}")).collect()).unwrap()
}

fn views(rows: &[(usize, Array1<f64>)]) -> Vec<(usize, ArrayView1<'_, f64>)> {
    rows.iter().map(|(i, r)| (*i, r.view())).collect()
}

/// Rows of unit norm; rare near-zero draws fall back to a basis vector.
fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut rows = Array2::<f64>::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    for mut row in rows.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-3 {
            row.fill(0.0);
            row[0] = 1.0;
        } else {
            row /= norm;
        }
    }
    rows
}

proptest! {
    #[test]
    fn interaction_files_round_trip(log in interactions_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.tsv");
        write_interactions(&path, &log).unwrap();
        prop_assert_eq!(load_interactions(&path).unwrap(), log);
    }

    #[test]
    fn feature_files_round_trip(matrix in features_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let fmat = dir.path().join("f.fmat");
        let ids = dir.path().join("f.ids");
        write_features(&fmat, &ids, &matrix).unwrap();
        prop_assert_eq!(load_features(&fmat, &ids).unwrap(), matrix);
    }

    #[test]
    fn bundle_files_round_trip(bundles in bundles_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundles.jsonl");
        write_bundles(&path, &bundles).unwrap();
        prop_assert_eq!(load_bundles(&path).unwrap(), bundles);
    }

    #[test]
    fn edge_files_round_trip(graph in graph_strategy(8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.tsv");
        write_edges(&graph, &small_index(8), &path).unwrap();
        let loaded = read_edges(&path, &small_index(8)).unwrap();
        prop_assert_eq!(loaded, graph);
    }

    #[test]
    fn cold_start_filter_keeps_a_subsequence(
        log in interactions_strategy(),
        cold in prop::collection::hash_set(0u8..10, 0..5),
    ) {
        let downstream: HashSet<String> = cold.into_iter().map(|i| format!("i{i}")).collect();
        let filtered = filter_cold_start(log.clone(), &downstream);
        prop_assert!(filtered.iter().all(|row| !downstream.contains(&row.item_id)));
        // Subsequence: each kept row appears in the original, in order.
        let mut rest = log.iter();
        for kept in &filtered {
            prop_assert!(rest.any(|original| original == kept));
        }
    }

    #[test]
    fn graph_building_ignores_user_order(
        log in interactions_strategy(),
        window in 1i64..500,
    ) {
        let index = small_index(10);
        let graph = build_graph(&log, window, &index, PairRule::Consecutive).unwrap();
        graph.validate().unwrap();

        // Rebuild with whole-user blocks concatenated in reverse order;
        // within-user input order is what matters and is preserved.
        let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
        for row in &log {
            by_user.entry(&row.user_id).or_default().push(row);
        }
        let reversed: Vec<Interaction> = by_user
            .values()
            .rev()
            .flat_map(|rows| rows.iter().map(|&r| r.clone()))
            .collect();
        let regrouped = build_graph(&reversed, window, &index, PairRule::Consecutive).unwrap();
        prop_assert_eq!(&regrouped, &graph);

        // Total weight counts exactly the qualifying consecutive pairs.
        let mut expected = 0u32;
        for rows in by_user.values() {
            let mut seq = rows.clone();
            seq.sort_by_key(|r| r.timestamp);
            for pair in seq.windows(2) {
                if pair[1].timestamp - pair[0].timestamp <= window
                    && pair[0].item_id != pair[1].item_id
                {
                    expected += 1;
                }
            }
        }
        let total: u32 = graph.edges().into_iter().map(|(_, _, w)| w).sum();
        prop_assert_eq!(total, expected);
    }

    #[test]
    fn propagation_is_linear(
        graph in graph_strategy(9),
        seed in any::<u64>(),
        k in 0usize..4,
        row_norm in any::<bool>(),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let norm = if row_norm { GraphNorm::Row } else { GraphNorm::Symmetric };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e0 = Array2::from_shape_fn((9, 3), |_| rng.gen_range(-1.0..1.0));
        let f0 = Array2::from_shape_fn((9, 3), |_| rng.gen_range(-1.0..1.0));
        let combined = propagate(&(&e0 * alpha + &f0 * beta), &graph, k, norm);
        let separate =
            propagate(&e0, &graph, k, norm) * alpha + propagate(&f0, &graph, k, norm) * beta;
        for (x, y) in combined.iter().zip(separate.iter()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            prop_assert!(rel < 1e-6, "combined {x} vs separate {y}");
        }
    }

    #[test]
    fn relation_scores_are_symmetric(
        seed in any::<u64>(),
        n in 2usize..10,
        d in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0));
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(score(&e, i, j), score(&e, j, i));
            }
        }
    }

    #[test]
    fn pruning_is_monotone_in_beta(
        graph in graph_strategy(10),
        seed in any::<u64>(),
        beta_low in 0.0f64..100.0,
        beta_gap in 0.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = EmbeddingTable::new(Array2::from_shape_fn((10, 4), |_| {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap();
        let config = |beta| PruneConfig {
            beta_percent: beta,
            removal_rule: RemovalRule::EitherEndpoint,
        };
        let low = prune_graph(&graph, &table, &config(beta_low)).unwrap();
        let high = prune_graph(&graph, &table, &config((beta_low + beta_gap).min(100.0))).unwrap();
        low.validate().unwrap();
        high.validate().unwrap();

        let original: BTreeSet<(usize, usize)> =
            graph.edges().into_iter().map(|(a, b, _)| (a, b)).collect();
        let survivors_low: BTreeSet<(usize, usize)> =
            low.edges().into_iter().map(|(a, b, _)| (a, b)).collect();
        for (a, b, _) in high.edges() {
            prop_assert!(survivors_low.contains(&(a, b)));
        }
        for pair in &survivors_low {
            prop_assert!(original.contains(pair));
        }
    }

    #[test]
    fn encoding_ignores_positive_input_scale(
        seed in any::<u64>(),
        scale in 0.01f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ContrastConfig { output_dim: 4, ..ContrastConfig::default() };
        let mut params = EncoderParams::init(5, 3, &config, &mut rng).unwrap();
        // Scale invariance is promised for bias-free stacks only.
        for stack in [&mut params.image, &mut params.text] {
            for layer in &mut stack.layers {
                layer.bias.fill(0.0);
            }
        }
        let image = Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
        let text = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let plain = encode(&params, &image, &text);
        let scaled = encode(&params, &(&image * scale), &(&text * scale));
        match (plain, scaled) {
            (Ok((v1, t1)), Ok((v2, t2))) => {
                for (a, b) in v1.iter().zip(v2.iter()).chain(t1.iter().zip(t2.iter())) {
                    prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
            // A projection collapsing to zero norm fails for both inputs.
            (Err(_), Err(_)) => {}
            (plain, scaled) => {
                return Err(TestCaseError::fail(format!(
                    "scaling changed encodability: {plain:?} vs {scaled:?}"
                )));
            }
        }
    }

    #[test]
    fn contrast_without_soft_targets_is_nonnegative(
        seed in any::<u64>(),
        n in 1usize..7,
        tau in 0.03f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = unit_rows(n, 4, &mut rng);
        let b = unit_rows(n, 4, &mut rng);
        let loss = contrast(&a, &b, &a, &b, tau, tau, 0.0, &[], &[]).unwrap();
        prop_assert!(loss >= 0.0, "loss {loss}");
    }

    // Power-of-two scales shift exponents without touching mantissas, so
    // the cosine values and therefore the ranking are bit-identical.
    #[test]
    fn ranking_survives_positive_scaling(
        seed in any::<u64>(),
        m in 1usize..9,
        dim in 1usize..5,
        p_exp in -3i32..4,
        exps in prop::collection::vec(-3i32..4, 9),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0));
        let base: Vec<(usize, Array1<f64>)> = (0..m)
            .map(|i| (i, Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))))
            .collect();
        let scaled: Vec<(usize, Array1<f64>)> = base
            .iter()
            .zip(&exps)
            .map(|((i, row), &e)| (*i, row * 2f64.powi(e)))
            .collect();
        let p_scaled = &p * 2f64.powi(p_exp);
        prop_assert_eq!(
            rank_candidates(p.view(), &views(&base)).unwrap(),
            rank_candidates(p_scaled.view(), &views(&scaled)).unwrap()
        );
    }

    #[test]
    fn metrics_stay_in_the_unit_interval(
        seed in any::<u64>(),
        m in 1usize..30,
        k in 1usize..35,
        truth in prop::collection::btree_set(0usize..30, 1..6),
    ) {
        let mut ranked: Vec<usize> = (0..m).collect();
        ranked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let recall = recall_at_k(&ranked, &truth, k).unwrap();
        let ndcg = ndcg_at_k(&ranked, &truth, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&recall), "recall {recall}");
        prop_assert!((0.0..=1.0).contains(&ndcg), "ndcg {ndcg}");
    }
}

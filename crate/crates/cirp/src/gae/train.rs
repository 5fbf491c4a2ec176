//! Link-prediction training loop for the graph auto-encoder.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingTable;
use crate::error::{CirpError, Result};
use crate::graph::ItemGraph;

use super::{
    bpr_loss_and_grad, eval_link_prediction, propagate, validate_triples, GaeConfig,
    GaeOptimizer, GaeParams,
};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean ranking loss per triple over the epoch.
    pub loss: f64,
    /// Absent when the validation split is empty.
    pub val_auc: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct GaeOutcome {
    /// Final embeddings of the best validation epoch.
    pub embeddings: EmbeddingTable,
    /// The matching layer-0 table (what the optimizer actually moved).
    pub e0: Array2<f64>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_hit_rate_at_10: Option<f64>,
}

type EdgeList = Vec<(usize, usize)>;

/// Split edges by seeded shuffle. Validation and test sizes round down;
/// the remainder trains.
fn split_edges(
    edges: &[(usize, usize)],
    ratios: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> (EdgeList, EdgeList, EdgeList) {
    let mut shuffled = edges.to_vec();
    shuffled.shuffle(rng);
    let n = shuffled.len();
    let n_val = (ratios.1 * n as f64).floor() as usize;
    let n_test = (ratios.2 * n as f64).floor() as usize;
    let val = shuffled[..n_val].to_vec();
    let test = shuffled[n_val..n_val + n_test].to_vec();
    let train = shuffled[n_val + n_test..].to_vec();
    (train, val, test)
}

/// Uniform item not adjacent to `anchor` (and not the anchor itself).
///
/// Rejection sampling with a deterministic scan fallback; errors only when
/// the anchor is connected to every other item.
fn sample_negative(rng: &mut ChaCha8Rng, graph: &ItemGraph, anchor: usize) -> Result<usize> {
    let n = graph.num_items();
    for _ in 0..64 {
        let cand = rng.gen_range(0..n);
        if cand != anchor && !graph.has_edge(anchor, cand) {
            return Ok(cand);
        }
    }
    let start = rng.gen_range(0..n);
    for off in 0..n {
        let cand = (start + off) % n;
        if cand != anchor && !graph.has_edge(anchor, cand) {
            return Ok(cand);
        }
    }
    Err(CirpError::Validation(format!(
        "item {anchor} has no non-neighbor to sample"
    )))
}

/// Equal-size non-edge sample for a held-out positive set.
fn sample_non_edges(
    rng: &mut ChaCha8Rng,
    graph: &ItemGraph,
    count: usize,
) -> Result<Vec<(usize, usize)>> {
    let n = graph.num_items();
    if n < 2 {
        return Err(CirpError::Validation(
            "need at least two items to sample non-edges".into(),
        ));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.gen_range(0..n);
        let b = sample_negative(rng, graph, a)?;
        out.push((a, b));
    }
    Ok(out)
}

struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
}

impl AdamState {
    fn new(shape: (usize, usize)) -> Self {
        AdamState {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bias1 = 1.0 - B1.powi(self.t as i32);
        let bias2 = 1.0 - B2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Fit layer-0 embeddings by ranking observed edges above sampled
/// non-edges, and return the snapshot with the best validation AUC.
pub fn train_gae(graph: &ItemGraph, config: &GaeConfig) -> Result<GaeOutcome> {
    config.validate()?;
    if graph.edge_count() == 0 {
        return Err(CirpError::Config(
            "cannot train the graph auto-encoder on a graph with zero edges".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let edges: Vec<(usize, usize)> = graph.edges().into_iter().map(|(a, b, _)| (a, b)).collect();
    let (train, val, test) = split_edges(&edges, config.split_ratios, &mut rng);
    if train.is_empty() {
        return Err(CirpError::Config(
            "edge split left the training set empty".into(),
        ));
    }

    // Held-out negatives are fixed up front so epoch AUCs are comparable.
    let val_negatives = sample_non_edges(&mut rng, graph, val.len())?;
    let test_negatives = sample_non_edges(&mut rng, graph, test.len())?;

    let init = Normal::new(0.0, 0.1).expect("finite std");
    let e0 = Array2::from_shape_fn((graph.num_items(), config.d), |_| init.sample(&mut rng));
    let mut params = GaeParams::new(e0, config.k)?;
    let mut adam = match config.optimizer {
        GaeOptimizer::Adam => Some(AdamState::new((graph.num_items(), config.d))),
        GaeOptimizer::Sgd => None,
    };

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, GaeParams, Array2<f64>)> = None;
    let mut order = train.clone();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut triple_count = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let mut triples = Vec::with_capacity(chunk.len() * config.negatives_per_positive);
            for &(i, j) in chunk {
                for _ in 0..config.negatives_per_positive {
                    triples.push((i, j, sample_negative(&mut rng, graph, i)?));
                }
            }
            if cfg!(debug_assertions) {
                validate_triples(graph, &triples)?;
            }
            let (loss, grad) =
                bpr_loss_and_grad(&params, graph, config.norm, &triples, config.l2_lambda);
            if !loss.is_finite() {
                return Err(CirpError::Numerical(format!(
                    "ranking loss became non-finite at epoch {epoch}"
                )));
            }
            loss_sum += loss;
            triple_count += triples.len();
            let scale = 1.0 / triples.len() as f64;
            match adam.as_mut() {
                Some(state) => {
                    let scaled = grad.mapv(|g| g * scale);
                    state.step(&mut params.e0, &scaled, config.learning_rate);
                }
                None => params.e0.scaled_add(-config.learning_rate * scale, &grad),
            }
        }

        let e_final = propagate(&params.e0, graph, params.k, config.norm);
        let val_auc = if val.is_empty() {
            None
        } else {
            Some(eval_link_prediction(&e_final, &val, &val_negatives)?.0)
        };
        log.push(EpochRecord {
            epoch,
            loss: loss_sum / triple_count.max(1) as f64,
            val_auc,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        let candidate_auc = val_auc.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            Some((_, incumbent, _, _)) => candidate_auc > *incumbent,
            None => true,
        };
        // With no validation split every epoch "improves": best = last.
        if improved || val.is_empty() {
            best = Some((epoch, candidate_auc, params.clone(), e_final));
        }
    }

    let (best_epoch, best_auc, best_params, best_final) = best.expect("epochs >= 1");
    let (test_auc, test_hit) = if test.is_empty() {
        (None, None)
    } else {
        let (auc, hit) = eval_link_prediction(&best_final, &test, &test_negatives)?;
        (Some(auc), Some(hit))
    };
    Ok(GaeOutcome {
        embeddings: EmbeddingTable::new(best_final)?,
        e0: best_params.e0,
        log,
        best_epoch,
        best_val_auc: if val.is_empty() { None } else { Some(best_auc) },
        test_auc,
        test_hit_rate_at_10: test_hit,
    })
}

//! Graph auto-encoder with a LightGCN propagation kernel.
//!
//! The encoder is nothing but a trainable layer-0 embedding table pushed
//! through K rounds of neighborhood averaging; layers are summed into the
//! final embedding. Link prediction with a pairwise ranking loss fits the
//! table so that observed edges score above non-edges. The resulting edge
//! scores drive relation pruning; the embeddings themselves are not used
//! downstream.

mod train;

pub use train::{train_gae, EpochRecord, GaeOutcome};

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CirpError, Result};
use crate::graph::ItemGraph;

/// Neighborhood normalization of the propagation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphNorm {
    /// e_i gets the plain mean of its neighbors: coefficient 1/|N_i|.
    #[default]
    Row,
    /// Symmetric 1/sqrt(|N_i||N_j|) coefficients.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaeOptimizer {
    #[default]
    Sgd,
    Adam,
}

/// Trainable state: the layer-0 table and the propagation depth.
#[derive(Debug, Clone, PartialEq)]
pub struct GaeParams {
    pub e0: Array2<f64>,
    pub k: usize,
}

impl GaeParams {
    pub fn new(e0: Array2<f64>, k: usize) -> Result<Self> {
        if e0.ncols() == 0 {
            return Err(CirpError::Config("embedding dimension must be >= 1".into()));
        }
        if e0.iter().any(|v| !v.is_finite()) {
            return Err(CirpError::Numerical(
                "layer-0 embeddings contain a non-finite value".into(),
            ));
        }
        Ok(GaeParams { e0, k })
    }

    pub fn dim(&self) -> usize {
        self.e0.ncols()
    }
}

fn default_lr() -> f64 {
    0.05
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    512
}
fn default_negatives() -> usize {
    1
}
fn default_d() -> usize {
    32
}
fn default_k() -> usize {
    2
}
fn default_seed() -> u64 {
    42
}
fn default_split() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaeConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// λ of the ranking loss; decoupled from the optimizer.
    #[serde(default = "default_lambda")]
    pub l2_lambda: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_negatives")]
    pub negatives_per_positive: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Train/validation/test fractions of the edge set.
    #[serde(default = "default_split")]
    pub split_ratios: (f64, f64, f64),
    #[serde(default)]
    pub norm: GraphNorm,
    #[serde(default)]
    pub optimizer: GaeOptimizer,
}

impl Default for GaeConfig {
    fn default() -> Self {
        GaeConfig {
            learning_rate: default_lr(),
            l2_lambda: default_lambda(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            negatives_per_positive: default_negatives(),
            d: default_d(),
            k: default_k(),
            seed: default_seed(),
            split_ratios: default_split(),
            norm: GraphNorm::default(),
            optimizer: GaeOptimizer::default(),
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CirpError::Config("learning_rate must be positive".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(CirpError::Config("l2_lambda must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.negatives_per_positive == 0 {
            return Err(CirpError::Config(
                "epochs, batch_size, and negatives_per_positive must be >= 1".into(),
            ));
        }
        if self.d == 0 {
            return Err(CirpError::Config("d must be >= 1".into()));
        }
        let (a, b, c) = self.split_ratios;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(CirpError::Config(
                "split_ratios must be non-negative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// One neighborhood-averaging round: x -> P x.
fn propagate_step(x: &Array2<f64>, graph: &ItemGraph, norm: GraphNorm) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(x.raw_dim());
    for i in 0..graph.num_items() {
        let deg_i = graph.degree(i);
        if deg_i == 0 {
            continue;
        }
        let mut acc = out.row_mut(i);
        match norm {
            GraphNorm::Row => {
                let inv = 1.0 / deg_i as f64;
                for &(j, _) in graph.neighbors(i) {
                    acc.scaled_add(inv, &x.row(j));
                }
            }
            GraphNorm::Symmetric => {
                for &(j, _) in graph.neighbors(i) {
                    let coef = 1.0 / ((deg_i as f64) * (graph.degree(j) as f64)).sqrt();
                    acc.scaled_add(coef, &x.row(j));
                }
            }
        }
    }
    out
}

/// The adjoint round x -> P^T x, used by the backward pass.
fn propagate_step_transpose(x: &Array2<f64>, graph: &ItemGraph, norm: GraphNorm) -> Array2<f64> {
    match norm {
        // P^T spreads row j to its neighbors with j's own coefficient.
        GraphNorm::Row => {
            let mut out = Array2::<f64>::zeros(x.raw_dim());
            for i in 0..graph.num_items() {
                let mut acc = out.row_mut(i);
                for &(j, _) in graph.neighbors(i) {
                    let inv = 1.0 / graph.degree(j) as f64;
                    acc.scaled_add(inv, &x.row(j));
                }
            }
            out
        }
        GraphNorm::Symmetric => propagate_step(x, graph, norm),
    }
}

/// Run K propagation rounds and sum all layers: E_final = Σ_k P^k E0.
///
/// Items without neighbors receive zero at every layer past 0, so their
/// final row equals their layer-0 row.
pub fn propagate(e0: &Array2<f64>, graph: &ItemGraph, k: usize, norm: GraphNorm) -> Array2<f64> {
    assert_eq!(e0.nrows(), graph.num_items(), "embedding rows vs graph items");
    let mut total = e0.clone();
    let mut layer = e0.clone();
    for _ in 0..k {
        layer = propagate_step(&layer, graph, norm);
        total += &layer;
    }
    total
}

/// Pull a gradient w.r.t. E_final back to E0: Σ_k (P^T)^k G.
pub fn propagate_backward(
    grad_final: &Array2<f64>,
    graph: &ItemGraph,
    k: usize,
    norm: GraphNorm,
) -> Array2<f64> {
    let mut total = grad_final.clone();
    let mut layer = grad_final.clone();
    for _ in 0..k {
        layer = propagate_step_transpose(&layer, graph, norm);
        total += &layer;
    }
    total
}

/// Inner-product edge score on final embeddings.
pub fn score(e_final: &Array2<f64>, i: usize, j: usize) -> f64 {
    e_final.row(i).dot(&e_final.row(j))
}

/// ln(1 + e^(-x)), evaluated without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise ranking loss over (anchor, positive, negative) triples:
/// Σ -ln σ(s_ij - s_ij') + λ Σ_u ‖e_u^(0)‖² with u ranging over the
/// distinct items of the batch.
pub fn bpr_loss(
    e_final: &Array2<f64>,
    triples: &[(usize, usize, usize)],
    params: &GaeParams,
    lambda: f64,
) -> f64 {
    let mut loss = 0.0;
    let mut batch_items = BTreeSet::new();
    for &(i, j, j_neg) in triples {
        let margin = score(e_final, i, j) - score(e_final, i, j_neg);
        loss += softplus_neg(margin);
        batch_items.extend([i, j, j_neg]);
    }
    if lambda > 0.0 {
        let reg: f64 = batch_items
            .iter()
            .map(|&u| params.e0.row(u).dot(&params.e0.row(u)))
            .sum();
        loss += lambda * reg;
    }
    loss
}

/// Loss plus its analytic gradient w.r.t. the layer-0 table.
///
/// The ranking part differentiates through the fixed propagation map via
/// the adjoint rounds; the regularizer acts on layer 0 directly.
pub fn bpr_loss_and_grad(
    params: &GaeParams,
    graph: &ItemGraph,
    norm: GraphNorm,
    triples: &[(usize, usize, usize)],
    lambda: f64,
) -> (f64, Array2<f64>) {
    let e_final = propagate(&params.e0, graph, params.k, norm);
    let mut loss = 0.0;
    let mut grad_final = Array2::<f64>::zeros(e_final.raw_dim());
    let mut batch_items = BTreeSet::new();
    for &(i, j, j_neg) in triples {
        let margin = score(&e_final, i, j) - score(&e_final, i, j_neg);
        loss += softplus_neg(margin);
        let coef = sigmoid(margin) - 1.0;
        let diff = &e_final.row(j) - &e_final.row(j_neg);
        grad_final.row_mut(i).scaled_add(coef, &diff);
        grad_final.row_mut(j).scaled_add(coef, &e_final.row(i));
        grad_final.row_mut(j_neg).scaled_add(-coef, &e_final.row(i));
        batch_items.extend([i, j, j_neg]);
    }
    let mut grad = propagate_backward(&grad_final, graph, params.k, norm);
    if lambda > 0.0 {
        for &u in &batch_items {
            let reg_row = params.e0.row(u).to_owned();
            loss += lambda * reg_row.dot(&reg_row);
            grad.row_mut(u).scaled_add(2.0 * lambda, &reg_row);
        }
    }
    (loss, grad)
}

/// Debug-mode contract check: every (i,j) must be an edge and (i,j') must
/// not be one.
pub fn validate_triples(graph: &ItemGraph, triples: &[(usize, usize, usize)]) -> Result<()> {
    for &(i, j, j_neg) in triples {
        if !graph.has_edge(i, j) {
            return Err(CirpError::Validation(format!(
                "triple positive ({i},{j}) is not an edge"
            )));
        }
        if i == j_neg || graph.has_edge(i, j_neg) {
            return Err(CirpError::Validation(format!(
                "triple negative ({i},{j_neg}) is not a non-edge"
            )));
        }
    }
    Ok(())
}

/// AUC and hit-rate@10 over equal-size positive and negative pair sets.
///
/// AUC counts score pairs with s_pos > s_neg, ties worth one half. The
/// hit rate ranks each positive against the whole negative set; rank
/// r = 1 + |{neg : s_neg > s_pos}| counts as a hit when r <= 10.
pub fn eval_link_prediction(
    e_final: &Array2<f64>,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> Result<(f64, f64)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(CirpError::Validation(
            "link-prediction eval needs non-empty positive and negative sets".into(),
        ));
    }
    if positives.len() != negatives.len() {
        return Err(CirpError::Validation(format!(
            "positive/negative set sizes differ: {} vs {}",
            positives.len(),
            negatives.len()
        )));
    }
    let pos_scores: Vec<f64> = positives.iter().map(|&(i, j)| score(e_final, i, j)).collect();
    let neg_scores: Vec<f64> = negatives.iter().map(|&(i, j)| score(e_final, i, j)).collect();
    let mut wins = 0.0;
    let mut hits = 0usize;
    for &sp in &pos_scores {
        let mut above = 0usize;
        for &sn in &neg_scores {
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
            if sn > sp {
                above += 1;
            }
        }
        let rank = 1 + above;
        if rank <= 10 {
            hits += 1;
        }
    }
    let auc = wins / (pos_scores.len() as f64 * neg_scores.len() as f64);
    let hit_rate = hits as f64 / pos_scores.len() as f64;
    Ok((auc, hit_rate))
}

//! Contrastive pre-training over graph edges.

use std::time::Instant;

use ndarray::Array2;
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, FeatureMatrix};
use crate::error::{CirpError, Result};
use crate::graph::ItemGraph;

use super::{
    forward, momentum_update, total_loss_with_grad, ContrastConfig, EncoderGrads, EncoderParams,
    LrSchedule, MomentumState,
};

/// One optimizer step in the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: EncoderParams,
    pub momentum: MomentumState,
    pub log: Vec<StepRecord>,
}

/// Decoupled-weight-decay adaptive optimizer.
///
/// Decay applies to weight matrices only; biases and the temperature move
/// by the adaptive step alone.
struct AdamW {
    m: EncoderGrads,
    v: EncoderGrads,
    t: u64,
    weight_decay: f64,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &EncoderParams, weight_decay: f64) -> Self {
        AdamW {
            m: EncoderGrads::zeros_like(params),
            v: EncoderGrads::zeros_like(params),
            t: 0,
            weight_decay,
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &EncoderGrads, lr: f64) {
        self.t += 1;
        let bias1 = 1.0 - Self::B1.powi(self.t as i32);
        let bias2 = 1.0 - Self::B2.powi(self.t as i32);
        let update_scalar = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, decay: f64| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * (m_hat / (v_hat.sqrt() + Self::EPS) + decay * *p);
        };

        for (side, grad_side, m_side, v_side) in [
            (&mut params.image, &grads.image, &mut self.m.image, &mut self.v.image),
            (&mut params.text, &grads.text, &mut self.m.text, &mut self.v.text),
        ] {
            for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in side
                .layers
                .iter_mut()
                .zip(grad_side)
                .zip(m_side.iter_mut())
                .zip(v_side.iter_mut())
            {
                for ((p, &g), (m, v)) in layer
                    .weight
                    .iter_mut()
                    .zip(gw.iter())
                    .zip(mw.iter_mut().zip(vw.iter_mut()))
                {
                    update_scalar(p, g, m, v, self.weight_decay);
                }
                for ((p, &g), (m, v)) in layer
                    .bias
                    .iter_mut()
                    .zip(gb.iter())
                    .zip(mb.iter_mut().zip(vb.iter_mut()))
                {
                    update_scalar(p, g, m, v, 0.0);
                }
            }
        }
        update_scalar(
            &mut params.log_tau,
            grads.log_tau,
            &mut self.m.log_tau,
            &mut self.v.log_tau,
            0.0,
        );
    }
}

fn epoch_lr(config: &ContrastConfig, epoch: usize) -> f64 {
    match config.lr_schedule {
        LrSchedule::Multiplicative => {
            config.learning_rate * config.lr_decay_per_epoch.powi(epoch as i32)
        }
        LrSchedule::Linear => {
            if config.epochs <= 1 {
                config.learning_rate
            } else {
                let span = (config.epochs - 1) as f64;
                config.learning_rate
                    * (1.0 - config.lr_decay_per_epoch * epoch as f64 / span)
            }
        }
    }
}

/// Train the dual encoders on the pruned relation graph.
pub fn pretrain(
    graph: &ItemGraph,
    images: &FeatureMatrix,
    texts: &FeatureMatrix,
    config: &ContrastConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if graph.edge_count() == 0 {
        return Err(CirpError::Config(
            "pre-training needs a graph with at least one edge".into(),
        ));
    }
    if images.num_items() != graph.num_items() || texts.num_items() != graph.num_items() {
        return Err(CirpError::Validation(format!(
            "feature tables ({} image rows, {} text rows) must cover all {} graph items",
            images.num_items(),
            texts.num_items(),
            graph.num_items()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = EncoderParams::init(images.dim(), texts.dim(), config, &mut rng)?;
    let mut momentum = MomentumState::new(&params, config.momentum, config.queue_size);
    let mut optimizer = AdamW::new(&params, config.weight_decay);

    let all_edges: Vec<(usize, usize, u32)> = graph.edges();
    let weights: Vec<u32> = all_edges.iter().map(|&(_, _, w)| w).collect();
    let plain: Vec<(usize, usize)> = all_edges.iter().map(|&(i, j, _)| (i, j)).collect();
    let weighted = if config.weighted_sampling {
        Some(WeightedIndex::new(&weights).map_err(|e| {
            CirpError::Validation(format!("edge weights unusable for sampling: {e}"))
        })?)
    } else {
        None
    };

    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lr = epoch_lr(config, epoch);
        let epoch_edges: Vec<(usize, usize)> = match &weighted {
            Some(dist) => (0..plain.len()).map(|_| plain[dist.sample(&mut rng)]).collect(),
            None => {
                let mut shuffled = plain.clone();
                shuffled.shuffle(&mut rng);
                shuffled
            }
        };

        for batch in epoch_edges.chunks(config.batch_size) {
            let started = Instant::now();
            let (loss, grads) =
                total_loss_with_grad(batch, images, texts, &params, &momentum, config)?;
            if !loss.is_finite() {
                return Err(CirpError::Numerical(format!(
                    "pre-training loss became non-finite at step {step}"
                )));
            }
            optimizer.step(&mut params, &grads, lr);
            momentum_update(&params, &mut momentum.shadow, momentum.m)?;
            if config.queue_size > 0 {
                for &(i, j) in batch {
                    for item in [i, j] {
                        let v = forward(&momentum.shadow.image, &images.row_f64(item))?.output;
                        let t = forward(&momentum.shadow.text, &texts.row_f64(item))?.output;
                        momentum.queue_image.push(v);
                        momentum.queue_text.push(t);
                    }
                }
            }
            log.push(StepRecord {
                step,
                epoch,
                loss,
                lr,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
    }
    params.validate()?;
    Ok(PretrainOutcome { params, momentum, log })
}

/// Encode every item row; output rows follow the feature tables.
pub fn embed_all(
    params: &EncoderParams,
    images: &FeatureMatrix,
    texts: &FeatureMatrix,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    if images.num_items() != texts.num_items() {
        return Err(CirpError::Validation(format!(
            "modality tables disagree on item count: {} vs {}",
            images.num_items(),
            texts.num_items()
        )));
    }
    let n = images.num_items();
    let d = params.output_dim();
    let mut v_out = Array2::<f64>::zeros((n, d));
    let mut t_out = Array2::<f64>::zeros((n, d));
    for item in 0..n {
        let v = forward(&params.image, &images.row_f64(item))?.output;
        let t = forward(&params.text, &texts.row_f64(item))?.output;
        v_out.row_mut(item).assign(&v);
        t_out.row_mut(item).assign(&t);
    }
    Ok((EmbeddingTable::new(v_out)?, EmbeddingTable::new(t_out)?))
}

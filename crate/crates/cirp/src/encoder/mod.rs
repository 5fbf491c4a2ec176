//! Dual modality encoders and their momentum copies.
//!
//! Each modality gets a small projection stack over externally supplied
//! feature rows, ending in L2 normalization, plus one shared trainable
//! temperature. A momentum (shadow) copy of everything supplies soft
//! contrastive targets and optional queue negatives; it is updated by
//! exponential averaging and never sees a gradient.

mod checkpoint;
mod contrast;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use contrast::{cic_loss, contrast, itc_loss, total_loss, total_loss_with_grad, EncoderGrads};
pub use train::{embed_all, pretrain, PretrainOutcome, StepRecord};

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CirpError, Result};

pub const TAU_INIT: f64 = 0.07;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// out_dim x in_dim.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearLayer {
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, INIT_STD).expect("finite std");
        LinearLayer {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng)),
            bias: Array1::zeros(out_dim),
        }
    }
}

/// Layers applied in order with tanh between them (never after the last),
/// followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub layers: Vec<LinearLayer>,
}

impl ProjectionStack {
    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty stack").weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub image: ProjectionStack,
    pub text: ProjectionStack,
    /// Unconstrained scalar; the temperature is exp(log_tau).
    pub log_tau: f64,
}

impl EncoderParams {
    /// Seeded Gaussian weights, zero biases, temperature 0.07.
    ///
    /// Draw order is fixed (image stack, then text stack, row-major per
    /// weight matrix) so a seed pins the initialization bit for bit.
    pub fn init(
        image_dim: usize,
        text_dim: usize,
        config: &ContrastConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let widths = |raw: usize| -> Vec<(usize, usize)> {
            match config.hidden_dim {
                None => vec![(raw, config.output_dim)],
                Some(h) => vec![(raw, h), (h, config.output_dim)],
            }
        };
        fn build(dims: Vec<(usize, usize)>, rng: &mut impl Rng) -> ProjectionStack {
            ProjectionStack {
                layers: dims
                    .into_iter()
                    .map(|(i, o)| LinearLayer::init(i, o, rng))
                    .collect(),
            }
        }
        Ok(EncoderParams {
            image: build(widths(image_dim), rng),
            text: build(widths(text_dim), rng),
            log_tau: TAU_INIT.ln(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn output_dim(&self) -> usize {
        self.image.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |s: &ProjectionStack| {
            s.layers
                .iter()
                .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
        };
        if !finite(&self.image) || !finite(&self.text) || !self.log_tau.is_finite() {
            return Err(CirpError::Numerical(
                "encoder parameters contain a non-finite value".into(),
            ));
        }
        if self.image.out_dim() != self.text.out_dim() {
            return Err(CirpError::Config(
                "image and text stacks must share the output dimension".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    ItcOnly,
    CicOnly,
    #[default]
    ItcAndCic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// lr multiplied by lr_decay_per_epoch at each epoch end.
    #[default]
    Multiplicative,
    /// lr interpolated from lr down to (1 - decay) * lr over the epochs.
    Linear,
}

fn d_alpha() -> f64 {
    0.4
}
fn d_momentum() -> f64 {
    0.995
}
fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    3e-5
}
fn d_decay() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    0.05
}
fn d_epochs() -> usize {
    10
}
fn d_seed() -> u64 {
    42
}
fn d_out() -> usize {
    128
}

/// Pre-training configuration. The defaults follow the published recipe:
/// batch 16, lr 3e-5 decayed 0.9 per epoch, weight decay 0.05, 10 epochs,
/// soft-label weight 0.4, momentum 0.995.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub queue_size: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_decay")]
    pub lr_decay_per_epoch: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub loss_mode: LossMode,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_out")]
    pub output_dim: usize,
    /// None: a single linear layer. Some(h): one hidden layer of width h
    /// with tanh.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    /// Sample edge batches proportionally to co-purchase counts instead of
    /// uniformly.
    #[serde(default)]
    pub weighted_sampling: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            alpha: d_alpha(),
            momentum: d_momentum(),
            queue_size: 0,
            batch_size: d_batch(),
            learning_rate: d_lr(),
            lr_decay_per_epoch: d_decay(),
            lr_schedule: LrSchedule::default(),
            weight_decay: d_wd(),
            epochs: d_epochs(),
            loss_mode: LossMode::default(),
            seed: d_seed(),
            output_dim: d_out(),
            hidden_dim: None,
            weighted_sampling: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CirpError::Config("alpha must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(CirpError::Config("momentum must lie in [0, 1]".into()));
        }
        // Written so NaN fails both checks.
        let lr_ok = self.learning_rate > 0.0;
        let wd_ok = self.weight_decay >= 0.0;
        if !lr_ok || !wd_ok {
            return Err(CirpError::Config(
                "learning_rate must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(CirpError::Config(
                "lr_decay_per_epoch must lie in (0, 1]".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.output_dim == 0 {
            return Err(CirpError::Config(
                "batch_size, epochs, and output_dim must be >= 1".into(),
            ));
        }
        if self.hidden_dim == Some(0) {
            return Err(CirpError::Config("hidden_dim must be >= 1 when set".into()));
        }
        Ok(())
    }
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    input: Array1<f64>,
    /// Post-tanh activation per hidden layer, in order.
    hidden: Vec<Array1<f64>>,
    norm: f64,
    pub(crate) output: Array1<f64>,
}

pub(crate) fn forward(stack: &ProjectionStack, input: &Array1<f64>) -> Result<ForwardCache> {
    if input.iter().any(|v| !v.is_finite()) {
        return Err(CirpError::Numerical(
            "encoder input contains a non-finite value".into(),
        ));
    }
    if input.len() != stack.in_dim() {
        return Err(CirpError::Validation(format!(
            "encoder input has {} features, stack expects {}",
            input.len(),
            stack.in_dim()
        )));
    }
    let mut hidden = Vec::new();
    let mut current = input.clone();
    for (idx, layer) in stack.layers.iter().enumerate() {
        let pre = layer.weight.dot(&current) + &layer.bias;
        if idx + 1 == stack.layers.len() {
            current = pre;
        } else {
            current = pre.mapv(f64::tanh);
            hidden.push(current.clone());
        }
    }
    let norm = current.dot(&current).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(CirpError::Numerical(
            "projection produced a zero or non-finite vector".into(),
        ));
    }
    let output = current.mapv(|v| v / norm);
    Ok(ForwardCache {
        input: input.clone(),
        hidden,
        norm,
        output,
    })
}

/// Accumulate dW/db for one item given the gradient at its unit output.
pub(crate) fn backward(
    stack: &ProjectionStack,
    cache: &ForwardCache,
    grad_output: &Array1<f64>,
    grads: &mut [(Array2<f64>, Array1<f64>)],
) {
    // Through y = h/|h|: dh = (g - y (y.g)) / |h|.
    let y = &cache.output;
    let radial = y.dot(grad_output);
    let mut grad = (grad_output - &(y * radial)) / cache.norm;

    for idx in (0..stack.layers.len()).rev() {
        let below = if idx == 0 {
            &cache.input
        } else {
            &cache.hidden[idx - 1]
        };
        let (dw, db) = &mut grads[idx];
        *dw += &(&grad.view().insert_axis(Axis(1)) * &below.view().insert_axis(Axis(0)));
        *db += &grad;
        if idx > 0 {
            let upstream = stack.layers[idx].weight.t().dot(&grad);
            // tanh' = 1 - tanh^2, and hidden[idx-1] is already the tanh.
            grad = upstream * &cache.hidden[idx - 1].mapv(|a| 1.0 - a * a);
        }
    }
}

/// Unit image and text vectors for one item.
pub fn encode(
    params: &EncoderParams,
    image_row: &Array1<f64>,
    text_row: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let v = forward(&params.image, image_row)?.output;
    let t = forward(&params.text, text_row)?.output;
    Ok((v, t))
}

/// FIFO of unit vectors serving as extra contrast candidates.
#[derive(Debug, Clone, Default)]
pub struct FeatureQueue {
    capacity: usize,
    entries: VecDeque<Array1<f64>>,
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Self {
        FeatureQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, vector: Array1<f64>) {
        if self.capacity == 0 {
            return;
        }
        debug_assert!((vector.dot(&vector).sqrt() - 1.0).abs() < 1e-6);
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(vector);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Array1<f64>> {
        self.entries.iter()
    }
}

/// The shadow encoder plus per-modality candidate queues.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub shadow: EncoderParams,
    pub m: f64,
    pub queue_image: FeatureQueue,
    pub queue_text: FeatureQueue,
}

impl MomentumState {
    pub fn new(live: &EncoderParams, m: f64, queue_size: usize) -> Self {
        MomentumState {
            shadow: live.clone(),
            m,
            queue_image: FeatureQueue::new(queue_size),
            queue_text: FeatureQueue::new(queue_size),
        }
    }
}

/// shadow <- m * shadow + (1 - m) * live, element-wise over every tensor
/// and the temperature scalar.
pub fn momentum_update(live: &EncoderParams, shadow: &mut EncoderParams, m: f64) -> Result<()> {
    let blend_stack = |live: &ProjectionStack, shadow: &mut ProjectionStack| -> Result<()> {
        if live.layers.len() != shadow.layers.len() {
            return Err(CirpError::Validation(
                "momentum update: layer count mismatch".into(),
            ));
        }
        for (l, s) in live.layers.iter().zip(&mut shadow.layers) {
            if l.weight.raw_dim() != s.weight.raw_dim() || l.bias.raw_dim() != s.bias.raw_dim() {
                return Err(CirpError::Validation(
                    "momentum update: tensor shape mismatch".into(),
                ));
            }
            s.weight.zip_mut_with(&l.weight, |sv, lv| *sv = m * *sv + (1.0 - m) * lv);
            s.bias.zip_mut_with(&l.bias, |sv, lv| *sv = m * *sv + (1.0 - m) * lv);
        }
        Ok(())
    };
    blend_stack(&live.image, &mut shadow.image)?;
    blend_stack(&live.text, &mut shadow.text)?;
    shadow.log_tau = m * shadow.log_tau + (1.0 - m) * live.log_tau;
    Ok(())
}

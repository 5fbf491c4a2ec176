//! Momentum-target contrastive losses.
//!
//! One `contrast` call covers both retrieval directions between two batches
//! of unit vectors. Predictions come from the live encoders; the soft part
//! of the target distribution comes from the shadow encoders (including the
//! shadow temperature), so targets are constants of the live parameters and
//! the analytic gradient is the plain stop-gradient one.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::corpus::FeatureMatrix;
use crate::error::{CirpError, Result};

use super::{backward, forward, ContrastConfig, EncoderParams, ForwardCache, LossMode, MomentumState};

/// Gradients mirroring the shape of [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub image: Vec<(Array2<f64>, Array1<f64>)>,
    pub text: Vec<(Array2<f64>, Array1<f64>)>,
    pub log_tau: f64,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        let zeros = |stack: &super::ProjectionStack| {
            stack
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weight.raw_dim()),
                        Array1::zeros(l.bias.raw_dim()),
                    )
                })
                .collect()
        };
        EncoderGrads {
            image: zeros(&params.image),
            text: zeros(&params.text),
            log_tau: 0.0,
        }
    }
}

fn stack_rows(rows: &[&Array1<f64>]) -> Array2<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), dim), |(r, c)| rows[r][c])
}

/// One retrieval direction: anchors against candidates.
///
/// Returns the mean cross-entropy and d(loss)/d(logits), which is
/// (p - y) / n.
fn direction(
    anchors: &Array2<f64>,
    candidates: &Array2<f64>,
    anchors_m: &Array2<f64>,
    candidates_m: &Array2<f64>,
    tau: f64,
    target_tau: f64,
    alpha: f64,
) -> (f64, Array2<f64>) {
    let n = anchors.nrows();
    let logits = anchors.dot(&candidates.t()) / tau;
    let log_p = log_softmax_rows(&logits);

    let mut targets = if alpha > 0.0 {
        let target_logits = anchors_m.dot(&candidates_m.t()) / target_tau;
        softmax_rows(&target_logits) * alpha
    } else {
        Array2::zeros(logits.raw_dim())
    };
    for i in 0..n {
        targets[[i, i]] += 1.0 - alpha;
    }

    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..logits.ncols() {
            loss -= targets[[i, j]] * log_p[[i, j]];
        }
    }
    loss /= n as f64;

    let mut d_logits = log_p.mapv(f64::exp) - targets;
    d_logits.mapv_inplace(|v| v / n as f64);
    (loss, d_logits)
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - log_sum);
    }
    out
}

pub(crate) struct ContrastGrad {
    pub loss: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub grad_log_tau: f64,
}

/// Both directions with gradients w.r.t. the live batches and log tau.
#[allow(clippy::too_many_arguments)]
pub(crate) fn contrast_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    a_m: &Array2<f64>,
    b_m: &Array2<f64>,
    tau: f64,
    target_tau: f64,
    alpha: f64,
    queue_a: &[&Array1<f64>],
    queue_b: &[&Array1<f64>],
) -> Result<ContrastGrad> {
    let n = a.nrows();
    if n == 0 {
        return Err(CirpError::Validation("contrast needs a non-empty batch".into()));
    }
    if b.nrows() != n || a_m.nrows() != n || b_m.nrows() != n {
        return Err(CirpError::Validation(
            "contrast batches must share their row count".into(),
        ));
    }

    // Queue entries are shadow features; they extend both the prediction
    // and the target candidate sets and never receive gradients.
    let extend = |live: &Array2<f64>, queue: &[&Array1<f64>]| -> Array2<f64> {
        if queue.is_empty() {
            return live.clone();
        }
        let mut rows: Vec<&Array1<f64>> = Vec::with_capacity(live.nrows() + queue.len());
        let owned: Vec<Array1<f64>> = live.rows().into_iter().map(|r| r.to_owned()).collect();
        rows.extend(owned.iter());
        rows.extend(queue.iter().copied());
        stack_rows(&rows)
    };
    let cand_b = extend(b, queue_b);
    let cand_b_m = extend(b_m, queue_b);
    let cand_a = extend(a, queue_a);
    let cand_a_m = extend(a_m, queue_a);

    let (loss_ab, d_ab) = direction(a, &cand_b, a_m, &cand_b_m, tau, target_tau, alpha);
    let (loss_ba, d_ba) = direction(b, &cand_a, b_m, &cand_a_m, tau, target_tau, alpha);

    // S = (anchor . cand) * exp(-log_tau): d(loss)/d(log_tau) = -sum dS * S.
    let logits_ab = a.dot(&cand_b.t()) / tau;
    let logits_ba = b.dot(&cand_a.t()) / tau;
    let mut grad_log_tau = 0.0;
    grad_log_tau -= 0.5 * (&d_ab * &logits_ab).sum();
    grad_log_tau -= 0.5 * (&d_ba * &logits_ba).sum();

    // Anchor gradients plus candidate gradients restricted to live rows.
    let mut grad_a = d_ab.dot(&cand_b) / tau;
    grad_a += &(d_ba.t().slice(ndarray::s![..n, ..]).dot(b) / tau);
    grad_a.mapv_inplace(|v| v * 0.5);
    let mut grad_b = d_ba.dot(&cand_a) / tau;
    grad_b += &(d_ab.t().slice(ndarray::s![..n, ..]).dot(a) / tau);
    grad_b.mapv_inplace(|v| v * 0.5);

    Ok(ContrastGrad {
        loss: 0.5 * (loss_ab + loss_ba),
        grad_a,
        grad_b,
        grad_log_tau,
    })
}

/// Symmetric contrastive loss between two aligned batches of unit vectors.
///
/// `tau` scales the live logits, `target_tau` the shadow logits behind the
/// soft targets; row i of `a` is the positive partner of row i of `b`.
#[allow(clippy::too_many_arguments)]
pub fn contrast(
    a: &Array2<f64>,
    b: &Array2<f64>,
    a_m: &Array2<f64>,
    b_m: &Array2<f64>,
    tau: f64,
    target_tau: f64,
    alpha: f64,
    queue_a: &[&Array1<f64>],
    queue_b: &[&Array1<f64>],
) -> Result<f64> {
    contrast_grad(a, b, a_m, b_m, tau, target_tau, alpha, queue_a, queue_b).map(|g| g.loss)
}

/// Live forward caches and shadow outputs for the distinct items of a batch.
struct BatchEncodings {
    slot_of: BTreeMap<usize, usize>,
    live_v: Vec<ForwardCache>,
    live_t: Vec<ForwardCache>,
    shadow_v: Vec<Array1<f64>>,
    shadow_t: Vec<Array1<f64>>,
}

impl BatchEncodings {
    fn build(
        items: impl IntoIterator<Item = usize>,
        images: &FeatureMatrix,
        texts: &FeatureMatrix,
        params: &EncoderParams,
        shadow: &EncoderParams,
    ) -> Result<Self> {
        let mut slot_of = BTreeMap::new();
        for item in items {
            if item >= images.num_items() || item >= texts.num_items() {
                return Err(CirpError::Validation(format!(
                    "item index {item} outside the feature tables"
                )));
            }
            let next = slot_of.len();
            slot_of.entry(item).or_insert(next);
        }
        let mut live_v = vec![None; slot_of.len()];
        let mut live_t = vec![None; slot_of.len()];
        let mut shadow_v = vec![None; slot_of.len()];
        let mut shadow_t = vec![None; slot_of.len()];
        for (&item, &slot) in &slot_of {
            let img = images.row_f64(item);
            let txt = texts.row_f64(item);
            live_v[slot] = Some(forward(&params.image, &img)?);
            live_t[slot] = Some(forward(&params.text, &txt)?);
            shadow_v[slot] = Some(forward(&shadow.image, &img)?.output);
            shadow_t[slot] = Some(forward(&shadow.text, &txt)?.output);
        }
        Ok(BatchEncodings {
            slot_of,
            live_v: live_v.into_iter().map(Option::unwrap).collect(),
            live_t: live_t.into_iter().map(Option::unwrap).collect(),
            shadow_v: shadow_v.into_iter().map(Option::unwrap).collect(),
            shadow_t: shadow_t.into_iter().map(Option::unwrap).collect(),
        })
    }

    fn gather_v(&self, side: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let live: Vec<&Array1<f64>> = side
            .iter()
            .map(|i| &self.live_v[self.slot_of[i]].output)
            .collect();
        let shadow: Vec<&Array1<f64>> = side.iter().map(|i| &self.shadow_v[self.slot_of[i]]).collect();
        (stack_rows(&live), stack_rows(&shadow))
    }

    fn gather_t(&self, side: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let live: Vec<&Array1<f64>> = side
            .iter()
            .map(|i| &self.live_t[self.slot_of[i]].output)
            .collect();
        let shadow: Vec<&Array1<f64>> = side.iter().map(|i| &self.shadow_t[self.slot_of[i]]).collect();
        (stack_rows(&live), stack_rows(&shadow))
    }
}

/// Image-vs-text alignment within the same items.
pub fn itc_loss(
    items: &[usize],
    images: &FeatureMatrix,
    texts: &FeatureMatrix,
    params: &EncoderParams,
    momentum: &MomentumState,
    config: &ContrastConfig,
) -> Result<f64> {
    if items.is_empty() {
        return Err(CirpError::Validation("itc_loss needs a non-empty batch".into()));
    }
    let enc = BatchEncodings::build(items.iter().copied(), images, texts, params, &momentum.shadow)?;
    let (v, v_m) = enc.gather_v(items);
    let (t, t_m) = enc.gather_t(items);
    let qi: Vec<&Array1<f64>> = momentum.queue_image.entries().collect();
    let qt: Vec<&Array1<f64>> = momentum.queue_text.entries().collect();
    contrast(
        &v,
        &t,
        &v_m,
        &t_m,
        params.tau(),
        momentum.shadow.tau(),
        config.alpha,
        &qi,
        &qt,
    )
}

/// Cross-item alignment along graph edges: Contrast(v_i, t_j) plus the
/// mirrored Contrast(t_i, v_j).
pub fn cic_loss(
    edges: &[(usize, usize)],
    images: &FeatureMatrix,
    texts: &FeatureMatrix,
    params: &EncoderParams,
    momentum: &MomentumState,
    config: &ContrastConfig,
) -> Result<f64> {
    if edges.is_empty() {
        return Err(CirpError::Validation("cic_loss needs a non-empty batch".into()));
    }
    let items = edges.iter().flat_map(|&(i, j)| [i, j]);
    let enc = BatchEncodings::build(items, images, texts, params, &momentum.shadow)?;
    let i_side: Vec<usize> = edges.iter().map(|&(i, _)| i).collect();
    let j_side: Vec<usize> = edges.iter().map(|&(_, j)| j).collect();
    let (vi, vi_m) = enc.gather_v(&i_side);
    let (ti, ti_m) = enc.gather_t(&i_side);
    let (vj, vj_m) = enc.gather_v(&j_side);
    let (tj, tj_m) = enc.gather_t(&j_side);
    let qi: Vec<&Array1<f64>> = momentum.queue_image.entries().collect();
    let qt: Vec<&Array1<f64>> = momentum.queue_text.entries().collect();
    let tau = params.tau();
    let target_tau = momentum.shadow.tau();
    let first = contrast(&vi, &tj, &vi_m, &tj_m, tau, target_tau, config.alpha, &qi, &qt)?;
    let second = contrast(&ti, &vj, &ti_m, &vj_m, tau, target_tau, config.alpha, &qt, &qi)?;
    Ok(first + second)
}

/// The joint objective over an edge batch, honoring `loss_mode`.
pub fn total_loss(
    edges: &[(usize, usize)],
    images: &FeatureMatrix,
    texts: &FeatureMatrix,
    params: &EncoderParams,
    momentum: &MomentumState,
    config: &ContrastConfig,
) -> Result<f64> {
    total_loss_with_grad(edges, images, texts, params, momentum, config).map(|(l, _)| l)
}

/// Joint objective plus analytic gradients w.r.t. every live parameter.
pub fn total_loss_with_grad(
    edges: &[(usize, usize)],
    images: &FeatureMatrix,
    texts: &FeatureMatrix,
    params: &EncoderParams,
    momentum: &MomentumState,
    config: &ContrastConfig,
) -> Result<(f64, EncoderGrads)> {
    if edges.is_empty() {
        return Err(CirpError::Validation("total_loss needs a non-empty batch".into()));
    }
    let items = edges.iter().flat_map(|&(i, j)| [i, j]);
    let enc = BatchEncodings::build(items, images, texts, params, &momentum.shadow)?;
    let i_side: Vec<usize> = edges.iter().map(|&(i, _)| i).collect();
    let j_side: Vec<usize> = edges.iter().map(|&(_, j)| j).collect();
    let (vi, vi_m) = enc.gather_v(&i_side);
    let (ti, ti_m) = enc.gather_t(&i_side);
    let (vj, vj_m) = enc.gather_v(&j_side);
    let (tj, tj_m) = enc.gather_t(&j_side);
    let qi: Vec<&Array1<f64>> = momentum.queue_image.entries().collect();
    let qt: Vec<&Array1<f64>> = momentum.queue_text.entries().collect();
    let tau = params.tau();
    let target_tau = momentum.shadow.tau();
    let n_slots = enc.slot_of.len();
    let dim = params.output_dim();

    // Output-space gradient accumulators per distinct item and modality.
    let mut grad_v_out = Array2::<f64>::zeros((n_slots, dim));
    let mut grad_t_out = Array2::<f64>::zeros((n_slots, dim));
    let mut grad_log_tau = 0.0;
    let mut loss = 0.0;

    let scatter = |side: &[usize], grads: &Array2<f64>, into: &mut Array2<f64>| {
        for (row, item) in side.iter().enumerate() {
            let slot = enc.slot_of[item];
            into.row_mut(slot).scaled_add(1.0, &grads.row(row));
        }
    };

    let include_itc = matches!(config.loss_mode, LossMode::ItcOnly | LossMode::ItcAndCic);
    let include_cic = matches!(config.loss_mode, LossMode::CicOnly | LossMode::ItcAndCic);

    if include_itc {
        let g = contrast_grad(&vi, &ti, &vi_m, &ti_m, tau, target_tau, config.alpha, &qi, &qt)?;
        loss += g.loss;
        grad_log_tau += g.grad_log_tau;
        scatter(&i_side, &g.grad_a, &mut grad_v_out);
        scatter(&i_side, &g.grad_b, &mut grad_t_out);

        let g = contrast_grad(&vj, &tj, &vj_m, &tj_m, tau, target_tau, config.alpha, &qi, &qt)?;
        loss += g.loss;
        grad_log_tau += g.grad_log_tau;
        scatter(&j_side, &g.grad_a, &mut grad_v_out);
        scatter(&j_side, &g.grad_b, &mut grad_t_out);
    }
    if include_cic {
        let g = contrast_grad(&vi, &tj, &vi_m, &tj_m, tau, target_tau, config.alpha, &qi, &qt)?;
        loss += g.loss;
        grad_log_tau += g.grad_log_tau;
        scatter(&i_side, &g.grad_a, &mut grad_v_out);
        scatter(&j_side, &g.grad_b, &mut grad_t_out);

        let g = contrast_grad(&ti, &vj, &ti_m, &vj_m, tau, target_tau, config.alpha, &qt, &qi)?;
        loss += g.loss;
        grad_log_tau += g.grad_log_tau;
        scatter(&i_side, &g.grad_a, &mut grad_t_out);
        scatter(&j_side, &g.grad_b, &mut grad_v_out);
    }

    let mut grads = EncoderGrads::zeros_like(params);
    grads.log_tau = grad_log_tau;
    for (&item, &slot) in &enc.slot_of {
        let _ = item;
        backward(
            &params.image,
            &enc.live_v[slot],
            &grad_v_out.row(slot).to_owned(),
            &mut grads.image,
        );
        backward(
            &params.text,
            &enc.live_t[slot],
            &grad_t_out.row(slot).to_owned(),
            &mut grads.text,
        );
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Array2<f64> {
        let dim = rows[0].len();
        let mut m = Array2::from_shape_fn((rows.len(), dim), |(r, c)| rows[r][c]);
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        m
    }

    /// Plain InfoNCE both ways, written independently of `contrast`.
    fn infonce_oracle(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> f64 {
        let n = a.nrows();
        let mut total = 0.0;
        for (anchors, cands) in [(a, b), (b, a)] {
            for i in 0..n {
                let logits: Vec<f64> =
                    (0..n).map(|j| anchors.row(i).dot(&cands.row(j)) / tau).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let log_sum: f64 =
                    logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                total -= logits[i] - log_sum;
            }
        }
        total / (2.0 * n as f64)
    }

    fn plain(a: &Array2<f64>, b: &Array2<f64>, tau: f64, alpha: f64) -> f64 {
        contrast(a, b, a, b, tau, tau, alpha, &[], &[]).unwrap()
    }

    #[test]
    fn single_pair_with_hard_targets_is_free() {
        let a = unit_rows(vec![vec![1.0, 0.0]]);
        let b = unit_rows(vec![vec![0.0, 1.0]]);
        assert_eq!(plain(&a, &b, 1.0, 0.0), 0.0);
    }

    #[test]
    fn identity_logit_matrix_reproduces_the_softplus_value() {
        let a = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let loss = plain(&a, &a.clone(), 1.0, 0.0);
        assert!((loss - 0.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn identical_anchors_make_the_reverse_direction_uniform() {
        // Candidates A are identical, so every B->A row is uniform and
        // contributes ln 2; the A->B part comes from the oracle.
        let a = unit_rows(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let b = unit_rows(vec![vec![0.6, 0.8], vec![0.8, -0.6]]);
        let loss = plain(&a, &b, 1.0, 0.0);
        let n = 2.0;
        let mut ab = 0.0;
        for i in 0..2 {
            let logits: Vec<f64> = (0..2).map(|j| a.row(i).dot(&b.row(j))).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum: f64 = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            ab -= logits[i] - log_sum;
        }
        let expected = 0.5 * (ab / n + std::f64::consts::LN_2);
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_matches_the_infonce_oracle() {
        let a = unit_rows(vec![
            vec![0.9, 0.1, -0.2],
            vec![-0.3, 0.8, 0.5],
            vec![0.2, -0.7, 0.4],
        ]);
        let b = unit_rows(vec![
            vec![0.5, 0.5, 0.0],
            vec![0.1, -0.9, 0.3],
            vec![-0.6, 0.2, 0.7],
        ]);
        for tau in [0.07, 0.5, 1.0] {
            let ours = plain(&a, &b, tau, 0.0);
            let oracle = infonce_oracle(&a, &b, tau);
            assert!((ours - oracle).abs() < 1e-10, "tau {tau}: {ours} vs {oracle}");
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(contrast(&empty, &empty, &empty, &empty, 1.0, 1.0, 0.0, &[], &[]).is_err());
    }

    #[test]
    fn nonneg_with_hard_targets_and_soft_targets_shift_the_value() {
        let a = unit_rows(vec![vec![1.0, 0.2], vec![-0.4, 1.0]]);
        let b = unit_rows(vec![vec![0.9, -0.1], vec![0.3, 0.8]]);
        assert!(plain(&a, &b, 0.5, 0.0) >= 0.0);
        let soft = plain(&a, &b, 0.5, 0.4);
        assert!(soft.is_finite());
        assert_ne!(soft, plain(&a, &b, 0.5, 0.0));
    }

    #[test]
    fn queue_entries_enter_the_denominator() {
        let a = unit_rows(vec![vec![1.0, 0.0]]);
        let b = unit_rows(vec![vec![1.0, 0.0]]);
        // Without a queue the single candidate makes the loss zero; a hard
        // negative in the queue must cost something.
        let distractor = array![1.0, 0.0];
        let with_queue = contrast(&a, &b, &a, &b, 1.0, 1.0, 0.0, &[], &[&distractor]).unwrap();
        assert!(with_queue > 0.3, "loss {with_queue}");
        // Two equal candidates: exactly ln 2 in the A->B direction; the
        // B->A direction has a single candidate (queue_a empty) and is 0.
        assert!((with_queue - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn toy_world() -> (FeatureMatrix, FeatureMatrix, EncoderParams, MomentumState, ContrastConfig) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let config = ContrastConfig {
            output_dim: 4,
            alpha: 0.0,
            ..ContrastConfig::default()
        };
        let params = EncoderParams::init(3, 3, &config, &mut rng).unwrap();
        let momentum = MomentumState::new(&params, config.momentum, config.queue_size);
        let ids: Vec<String> = (0..4).map(|i| format!("i{i}")).collect();
        let images = FeatureMatrix::new(
            ids.clone(),
            ndarray::Array2::from_shape_fn((4, 3), |(r, c)| ((r * 3 + c) as f32).sin()),
        )
        .unwrap();
        let texts = FeatureMatrix::new(
            ids,
            ndarray::Array2::from_shape_fn((4, 3), |(r, c)| ((r * 3 + c) as f32).cos()),
        )
        .unwrap();
        (images, texts, params, momentum, config)
    }

    #[test]
    fn itc_on_identical_modal_vectors_vanishes_at_tiny_tau() {
        // v = t per item with orthogonal directions: the diagonal logit
        // dominates as tau shrinks.
        let ids: Vec<String> = (0..3).map(|i| format!("i{i}")).collect();
        let eye = ndarray::Array2::from_shape_fn((3, 3), |(r, c)| f32::from(u8::from(r == c)));
        let images = FeatureMatrix::new(ids.clone(), eye.clone()).unwrap();
        let texts = FeatureMatrix::new(ids, eye).unwrap();
        let stack = || super::super::ProjectionStack {
            layers: vec![super::super::LinearLayer {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
        };
        let mut params = EncoderParams {
            image: stack(),
            text: stack(),
            log_tau: 0.01f64.ln(),
        };
        let momentum = MomentumState::new(&params, 0.995, 0);
        let config = ContrastConfig { alpha: 0.0, ..ContrastConfig::default() };
        let tiny = itc_loss(&[0, 1, 2], &images, &texts, &params, &momentum, &config).unwrap();
        assert!(tiny < 1e-10, "loss {tiny}");

        // At tau = 1 the same batch must match the brute-force value:
        // each row has one logit 1 and two 0.
        params.log_tau = 0.0;
        let momentum = MomentumState::new(&params, 0.995, 0);
        let loss = itc_loss(&[0, 1, 2], &images, &texts, &params, &momentum, &config).unwrap();
        let expected = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn cic_on_feature_identical_partners_reduces_to_itc() {
        // Item 1 duplicates item 0 and item 3 duplicates item 2, so the
        // cross-item pairs carry exactly the within-item signal and the
        // cic value collapses to the two itc terms.
        let (_, _, params, momentum, config) = toy_world();
        let ids: Vec<String> = (0..4).map(|i| format!("i{i}")).collect();
        let base = |r: usize, c: usize| ((r / 2 * 3 + c) as f32).sin() + 0.2;
        let images = FeatureMatrix::new(
            ids.clone(),
            ndarray::Array2::from_shape_fn((4, 3), |(r, c)| base(r, c)),
        )
        .unwrap();
        let texts = FeatureMatrix::new(
            ids,
            ndarray::Array2::from_shape_fn((4, 3), |(r, c)| base(r, c) * 0.5 - 1.0),
        )
        .unwrap();
        let edges = [(0usize, 1usize), (2, 3)];
        let cic = cic_loss(&edges, &images, &texts, &params, &momentum, &config).unwrap();
        let itc = itc_loss(&[0, 2], &images, &texts, &params, &momentum, &config).unwrap()
            + itc_loss(&[1, 3], &images, &texts, &params, &momentum, &config).unwrap();
        assert!((cic - itc).abs() < 1e-12, "cic {cic} vs itc sum {itc}");
    }

    #[test]
    fn two_edge_batch_matches_brute_force() {
        let (images, texts, params, momentum, config) = toy_world();
        let edges = [(0usize, 1usize), (2, 3)];
        let cic = cic_loss(&edges, &images, &texts, &params, &momentum, &config).unwrap();

        // Independent enumeration of both 2x2 logit matrices.
        let enc = |item: usize| {
            encode_pair(&params, &images, &texts, item)
        };
        let (v0, t0) = enc(0);
        let (v1, t1) = enc(1);
        let (v2, t2) = enc(2);
        let (v3, t3) = enc(3);
        let tau = params.tau();
        let ce = |anchors: [&Array1<f64>; 2], cands: [&Array1<f64>; 2]| -> f64 {
            let mut total = 0.0;
            for i in 0..2 {
                let logits = [anchors[i].dot(cands[0]) / tau, anchors[i].dot(cands[1]) / tau];
                let max = logits[0].max(logits[1]);
                let log_sum = ((logits[0] - max).exp() + (logits[1] - max).exp()).ln() + max;
                total -= logits[i] - log_sum;
            }
            total / 2.0
        };
        let term1 = 0.5 * (ce([&v0, &v2], [&t1, &t3]) + ce([&t1, &t3], [&v0, &v2]));
        let term2 = 0.5 * (ce([&t0, &t2], [&v1, &v3]) + ce([&v1, &v3], [&t0, &t2]));
        assert!((cic - (term1 + term2)).abs() < 1e-12);
    }

    fn encode_pair(
        params: &EncoderParams,
        images: &FeatureMatrix,
        texts: &FeatureMatrix,
        item: usize,
    ) -> (Array1<f64>, Array1<f64>) {
        super::super::encode(params, &images.row_f64(item), &texts.row_f64(item)).unwrap()
    }

    #[test]
    fn total_loss_obeys_the_mode_contract() {
        let (images, texts, params, momentum, mut config) = toy_world();
        let edges = [(0usize, 2usize), (1, 3)];
        let i_side = [0usize, 1];
        let j_side = [2usize, 3];

        config.loss_mode = LossMode::ItcAndCic;
        let full = total_loss(&edges, &images, &texts, &params, &momentum, &config).unwrap();
        config.loss_mode = LossMode::ItcOnly;
        let itc_part = total_loss(&edges, &images, &texts, &params, &momentum, &config).unwrap();
        config.loss_mode = LossMode::CicOnly;
        let cic_part = total_loss(&edges, &images, &texts, &params, &momentum, &config).unwrap();

        let itc_direct = itc_loss(&i_side, &images, &texts, &params, &momentum, &config).unwrap()
            + itc_loss(&j_side, &images, &texts, &params, &momentum, &config).unwrap();
        let cic_direct = cic_loss(&edges, &images, &texts, &params, &momentum, &config).unwrap();
        assert!((itc_part - itc_direct).abs() < 1e-12);
        assert!((cic_part - cic_direct).abs() < 1e-12);
        assert!((full - (itc_part + cic_part)).abs() < 1e-12);
    }

    #[test]
    fn single_degenerate_edge_with_hard_targets_costs_nothing() {
        let (images, texts, params, momentum, config) = toy_world();
        // One edge, alpha = 0: every contrast has a single candidate.
        let loss = total_loss(&[(0, 1)], &images, &texts, &params, &momentum, &config).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let config = ContrastConfig {
            output_dim: 3,
            hidden_dim: Some(4),
            alpha: 0.4,
            queue_size: 3,
            ..ContrastConfig::default()
        };
        let params = EncoderParams::init(3, 3, &config, &mut rng).unwrap();
        let mut momentum = MomentumState::new(&params, config.momentum, config.queue_size);
        // Distinct shadow params and a primed queue make the check cover
        // the full target machinery.
        momentum.shadow.log_tau += 0.1;
        momentum.shadow.image.layers[0].weight[[0, 0]] += 0.05;
        momentum.queue_image.push(array![1.0, 0.0, 0.0]);
        momentum.queue_text.push(array![0.0, 1.0, 0.0]);

        let ids: Vec<String> = (0..6).map(|i| format!("i{i}")).collect();
        let images = FeatureMatrix::new(
            ids.clone(),
            ndarray::Array2::from_shape_fn((6, 3), |(r, c)| ((r * 5 + 2 * c) as f32).sin()),
        )
        .unwrap();
        let texts = FeatureMatrix::new(
            ids,
            ndarray::Array2::from_shape_fn((6, 3), |(r, c)| ((r * 7 + 3 * c) as f32).cos()),
        )
        .unwrap();
        let edges = [(0usize, 3usize), (1, 4), (2, 5)];

        let (_, grads) =
            total_loss_with_grad(&edges, &images, &texts, &params, &momentum, &config).unwrap();

        // The normalization layer divides by a small prenorm magnitude, so
        // the surface is steep; a small step keeps truncation error below
        // the comparison tolerance.
        let step = 1e-6;
        let check = |set: &dyn Fn(&mut EncoderParams, f64), analytic: f64| {
            let mut plus = params.clone();
            set(&mut plus, step);
            let mut minus = params.clone();
            set(&mut minus, -step);
            let lp = total_loss(&edges, &images, &texts, &plus, &momentum, &config).unwrap();
            let lm = total_loss(&edges, &images, &texts, &minus, &momentum, &config).unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "numeric {numeric} vs analytic {analytic}"
            );
        };

        check(&|p, eps| p.log_tau += eps, grads.log_tau);
        check(
            &|p, eps| p.image.layers[0].weight[[1, 2]] += eps,
            grads.image[0].0[[1, 2]],
        );
        check(
            &|p, eps| p.image.layers[1].weight[[0, 1]] += eps,
            grads.image[1].0[[0, 1]],
        );
        check(&|p, eps| p.image.layers[0].bias[2] += eps, grads.image[0].1[2]);
        check(
            &|p, eps| p.text.layers[1].weight[[2, 0]] += eps,
            grads.text[1].0[[2, 0]],
        );
        check(&|p, eps| p.text.layers[1].bias[0] += eps, grads.text[1].1[0]);
    }
}

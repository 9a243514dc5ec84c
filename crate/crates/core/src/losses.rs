//! Symmetric batch-contrastive loss and the three training objectives built on
//! it: text-only pretraining of the projection, the cross-modal fine-tuning
//! loss, and the direct new-to-old baseline.
//!
//! Similarities are scaled by `exp(log_scale)`; the default log scale of
//! 2.6592 corresponds to a multiplier of ~14.29 (temperature 0.07).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XbtError};
use crate::layers::{phi_backward, phi_forward, ProjectionGrads, ProjectionParams};
use crate::tensor::{l2_normalize_rows, matmul, matmul_nt, matmul_tn, Matrix, Real, NORM_EPS};

pub const DEFAULT_LOG_SCALE: f64 = 2.6592;

#[derive(Clone, Debug)]
pub struct ContrastiveOutput<T: Real> {
    pub loss: T,
    pub grad_a: Matrix<T>,
    pub grad_b: Matrix<T>,
}

/// Gaussian perturbation applied to new-model text embeddings during
/// pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// Loss plus gradients for the projection parameters.
#[derive(Clone, Debug)]
pub struct PhiLossOutput<T: Real> {
    pub loss: T,
    pub phi_grads: ProjectionGrads<T>,
}

/// Loss plus gradients for the projection and for both new-side input batches.
#[derive(Clone, Debug)]
pub struct PairLossOutput<T: Real> {
    pub loss: T,
    pub phi_grads: ProjectionGrads<T>,
    pub grad_v_new: Matrix<T>,
    pub grad_w_new: Matrix<T>,
}

/// Cross-entropy of one logit row against `target`, with the softmax written
/// into `probs`. Max-subtracted so large logits stay finite.
fn softmax_xent<T: Real>(logits: &[T], target: usize, probs: &mut [T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        sum += *p;
    }
    let lse = max + sum.ln();
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - lse).exp();
    }
    lse - logits[target]
}

/// CLIP-style symmetric InfoNCE over a batch of aligned rows.
pub fn contrastive_loss<T: Real>(
    za: &Matrix<T>,
    zb: &Matrix<T>,
    log_scale: f64,
) -> Result<ContrastiveOutput<T>> {
    if za.shape() != zb.shape() {
        return Err(XbtError::shape(
            "contrastive_loss",
            format!("{:?} vs {:?}", za.shape(), zb.shape()),
        ));
    }
    let n = za.rows();
    if n == 0 {
        return Err(XbtError::Argument(
            "contrastive_loss on an empty batch".into(),
        ));
    }
    if !log_scale.is_finite() {
        return Err(XbtError::Argument(format!(
            "log_scale {log_scale} is not finite"
        )));
    }
    let scale = T::from_f64(log_scale.exp());
    let logits = matmul_nt(za, zb)?.scale(scale);
    let logits_t = logits.transpose();

    let mut row_probs = Matrix::zeros(n, n);
    let mut col_probs = Matrix::zeros(n, n);
    let mut row_sum = T::zero();
    let mut col_sum = T::zero();
    for i in 0..n {
        row_sum += softmax_xent(logits.row(i), i, row_probs.row_mut(i));
        col_sum += softmax_xent(logits_t.row(i), i, col_probs.row_mut(i));
    }
    let nt = T::from_f64(n as f64);
    let half = T::from_f64(0.5);
    let loss = (row_sum / nt + col_sum / nt) * half;

    // d loss / d logits_ij = ((P_row_ij - δ_ij) + (P_col_ji - δ_ij)) / 2n
    let inv_2n = T::one() / (nt + nt);
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { T::one() } else { T::zero() };
            let r = row_probs.get(i, j) - delta;
            let c = col_probs.get(j, i) - delta;
            g.set(i, j, (r + c) * inv_2n * scale);
        }
    }
    let grad_a = matmul(&g, zb)?;
    let grad_b = matmul_tn(&g, za)?;
    Ok(ContrastiveOutput {
        loss,
        grad_a,
        grad_b,
    })
}

fn check_rows(op: &'static str, a: &Matrix<impl Real>, b: &Matrix<impl Real>) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(XbtError::shape(
            op,
            format!("row counts differ: {} vs {}", a.rows(), b.rows()),
        ));
    }
    Ok(())
}

fn check_cols(op: &'static str, m: &Matrix<impl Real>, want: usize, what: &str) -> Result<()> {
    if m.cols() != want {
        return Err(XbtError::shape(
            op,
            format!("{what} has {} cols, expected {want}", m.cols()),
        ));
    }
    Ok(())
}

/// Adds `N(0, σ²)` noise elementwise and renormalizes rows. `σ = 0` returns the
/// input untouched.
pub fn perturb<T: Real>(x: &Matrix<T>, noise: &NoiseSpec) -> Result<Matrix<T>> {
    if !(noise.sigma >= 0.0) {
        return Err(XbtError::Argument(format!(
            "noise sigma {} < 0",
            noise.sigma
        )));
    }
    if noise.sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, noise.sigma).expect("sigma checked");
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let noisy = x.map(|v| v + T::from_f64(normal.sample(&mut rng)));
    Ok(l2_normalize_rows(&noisy, T::from_f64(NORM_EPS)))
}

/// Text-only pretraining objective: contrast projected (noised) new text
/// embeddings against old text embeddings of the same texts.
pub fn pretrain_loss<T: Real>(
    phi: &ProjectionParams<T>,
    w_new: &Matrix<T>,
    w_old: &Matrix<T>,
    noise: &NoiseSpec,
    log_scale: f64,
) -> Result<PhiLossOutput<T>> {
    const OP: &str = "pretrain_loss";
    check_rows(OP, w_new, w_old)?;
    check_cols(OP, w_new, phi.d_new(), "w_new")?;
    check_cols(OP, w_old, phi.d_old(), "w_old")?;
    let input = perturb(w_new, noise)?;
    let (projected, cache) = phi_forward(phi, &input, true)?;
    let c = contrastive_loss(&projected, w_old, log_scale)?;
    let (_, phi_grads) = phi_backward(phi, &cache, &c.grad_a)?;
    Ok(PhiLossOutput {
        loss: c.loss,
        phi_grads,
    })
}

/// Cross-modal objective: both modalities go through the same projection and
/// are contrasted against each other. Old-model embeddings are never involved.
pub fn xbt_loss<T: Real>(
    phi: &ProjectionParams<T>,
    v_new: &Matrix<T>,
    w_new: &Matrix<T>,
    log_scale: f64,
) -> Result<PairLossOutput<T>> {
    const OP: &str = "xbt_loss";
    check_rows(OP, v_new, w_new)?;
    check_cols(OP, v_new, phi.d_new(), "v_new")?;
    check_cols(OP, w_new, phi.d_new(), "w_new")?;
    let (v_bar, v_cache) = phi_forward(phi, v_new, true)?;
    let (w_bar, w_cache) = phi_forward(phi, w_new, true)?;
    let c = contrastive_loss(&v_bar, &w_bar, log_scale)?;
    let (grad_v_new, mut phi_grads) = phi_backward(phi, &v_cache, &c.grad_a)?;
    let (grad_w_new, w_grads) = phi_backward(phi, &w_cache, &c.grad_b)?;
    phi_grads.add_assign(&w_grads);
    Ok(PairLossOutput {
        loss: c.loss,
        phi_grads,
        grad_v_new,
        grad_w_new,
    })
}

/// Direct baseline: projected new image vs old text plus projected new text vs
/// old image. Old embeddings are constants.
pub fn direct_loss<T: Real>(
    phi: &ProjectionParams<T>,
    v_new: &Matrix<T>,
    w_new: &Matrix<T>,
    v_old: &Matrix<T>,
    w_old: &Matrix<T>,
    log_scale: f64,
) -> Result<PairLossOutput<T>> {
    const OP: &str = "direct_loss";
    check_rows(OP, v_new, w_new)?;
    check_rows(OP, v_new, v_old)?;
    check_rows(OP, v_new, w_old)?;
    check_cols(OP, v_new, phi.d_new(), "v_new")?;
    check_cols(OP, w_new, phi.d_new(), "w_new")?;
    check_cols(OP, v_old, phi.d_old(), "v_old")?;
    check_cols(OP, w_old, phi.d_old(), "w_old")?;
    let (v_bar, v_cache) = phi_forward(phi, v_new, true)?;
    let (w_bar, w_cache) = phi_forward(phi, w_new, true)?;
    let image_term = contrastive_loss(&v_bar, w_old, log_scale)?;
    let text_term = contrastive_loss(&w_bar, v_old, log_scale)?;
    let (grad_v_new, mut phi_grads) = phi_backward(phi, &v_cache, &image_term.grad_a)?;
    let (grad_w_new, w_grads) = phi_backward(phi, &w_cache, &text_term.grad_a)?;
    phi_grads.add_assign(&w_grads);
    Ok(PairLossOutput {
        loss: image_term.loss + text_term.loss,
        phi_grads,
        grad_v_new,
        grad_w_new,
    })
}

//! Low-rank residual adapters on the embedding itself:
//!
//! ```text
//! e' = normalize(e + (α/r) · (drop(e) · Aᵀ) · Bᵀ)
//! ```
//!
//! `B` starts at zero, so a fresh adapter is an exact identity on unit-norm
//! rows, and dropping the adapter restores the raw embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, XbtError};
use crate::layers::{normalize_backward, normalize_forward_keeping, NormalizeCache};
use crate::params::NamedParams;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix, Real, NORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Real> {
    /// `rank × dim`.
    pub a: Matrix<T>,
    /// `dim × rank`.
    pub b: Matrix<T>,
    pub alpha: f64,
    pub rank: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraGrads<T: Real> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct LoraCache<T: Real> {
    branch_input: Matrix<T>,
    hidden: Matrix<T>,
    mask_scale: Option<Matrix<T>>,
    normalize: NormalizeCache<T>,
}

impl<T: Real> LoraAdapter<T> {
    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    pub fn scaling(&self) -> T {
        T::from_f64(self.alpha / self.rank as f64)
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            a: self.a.cast(),
            b: self.b.cast(),
            alpha: self.alpha,
            rank: self.rank,
            dropout_p: self.dropout_p,
            seed: self.seed,
        }
    }

    /// Dense `d × d` matrix `(α/r)·B·A` equivalent to the low-rank branch.
    pub fn dense_delta(&self) -> Matrix<T> {
        matmul(&self.b, &self.a)
            .expect("adapter factors are conformable")
            .scale(self.scaling())
    }
}

impl<T: Real> LoraGrads<T> {
    pub fn zeros_like(ad: &LoraAdapter<T>) -> Self {
        LoraGrads {
            a: Matrix::zeros(ad.a.rows(), ad.a.cols()),
            b: Matrix::zeros(ad.b.rows(), ad.b.cols()),
        }
    }
}

impl<T: Real> NamedParams<T> for LoraAdapter<T> {
    fn named(&self) -> Vec<(String, &[T])> {
        vec![("a".into(), self.a.data()), ("b".into(), self.b.data())]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("a".into(), self.a.data_mut()),
            ("b".into(), self.b.data_mut()),
        ]
    }
}

impl<T: Real> NamedParams<T> for LoraGrads<T> {
    fn named(&self) -> Vec<(String, &[T])> {
        vec![("a".into(), self.a.data()), ("b".into(), self.b.data())]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("a".into(), self.a.data_mut()),
            ("b".into(), self.b.data_mut()),
        ]
    }
}

/// `A ~ N(0, 1/r)`, `B = 0`.
pub fn lora_init<T: Real>(
    dim: usize,
    rank: usize,
    alpha: f64,
    dropout_p: f64,
    seed: u64,
) -> Result<LoraAdapter<T>> {
    if rank == 0 || rank > dim {
        return Err(XbtError::Argument(format!(
            "LoRA rank {rank} must be in 1..={dim}"
        )));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(XbtError::Argument(format!(
            "LoRA dropout {dropout_p} must be in [0, 1)"
        )));
    }
    let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..rank * dim)
        .map(|_| T::from_f64(normal.sample(&mut rng)))
        .collect();
    Ok(LoraAdapter {
        a: Matrix::from_vec(rank, dim, a)?,
        b: Matrix::zeros(dim, rank),
        alpha,
        rank,
        dropout_p,
        seed,
    })
}

/// Pre-normalization low-rank delta `(α/r)·(x·Aᵀ)·Bᵀ` for the branch input `x`.
pub fn lora_delta<T: Real>(ad: &LoraAdapter<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let hidden = matmul_nt(x, &ad.a)?;
    Ok(matmul_nt(&hidden, &ad.b)?.scale(ad.scaling()))
}

/// Applies the adapter. `dropout_seed = Some(s)` selects training mode, where
/// inverted dropout with probability `dropout_p` hits the branch input.
pub fn lora_apply<T: Real>(
    ad: &LoraAdapter<T>,
    e: &Matrix<T>,
    dropout_seed: Option<u64>,
) -> Result<(Matrix<T>, LoraCache<T>)> {
    if e.cols() != ad.dim() {
        return Err(XbtError::shape(
            "lora_apply",
            format!("input has {} cols, adapter dim is {}", e.cols(), ad.dim()),
        ));
    }
    let mask_scale = match dropout_seed {
        Some(seed) if ad.dropout_p > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = T::from_f64(1.0 / (1.0 - ad.dropout_p));
            let data = (0..e.data().len())
                .map(|_| {
                    if rng.random::<f64>() < ad.dropout_p {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            Some(Matrix::from_vec(e.rows(), e.cols(), data)?)
        }
        _ => None,
    };
    let branch_input = match &mask_scale {
        Some(m) => Matrix::from_vec(
            e.rows(),
            e.cols(),
            e.data()
                .iter()
                .zip(m.data())
                .map(|(&x, &s)| x * s)
                .collect(),
        )?,
        None => e.clone(),
    };
    let hidden = matmul_nt(&branch_input, &ad.a)?;
    let delta = matmul_nt(&hidden, &ad.b)?.scale(ad.scaling());
    let pre = e.add(&delta)?;
    // Rows the branch leaves exactly unchanged are already unit-norm.
    let keep: Vec<bool> = delta
        .iter_rows()
        .map(|r| r.iter().all(|&x| x == T::zero()))
        .collect();
    let (out, normalize) = normalize_forward_keeping(&pre, T::from_f64(NORM_EPS), &keep);
    Ok((
        out,
        LoraCache {
            branch_input,
            hidden,
            mask_scale,
            normalize,
        },
    ))
}

/// Eval-mode application without a cache.
pub fn lora_forward<T: Real>(ad: &LoraAdapter<T>, e: &Matrix<T>) -> Result<Matrix<T>> {
    lora_apply(ad, e, None).map(|(y, _)| y)
}

pub fn lora_backward<T: Real>(
    ad: &LoraAdapter<T>,
    cache: &LoraCache<T>,
    upstream: &Matrix<T>,
) -> Result<(Matrix<T>, LoraGrads<T>)> {
    let g_pre = normalize_backward(&cache.normalize, upstream)?;
    let g_delta = g_pre.scale(ad.scaling());
    let grad_b = matmul_tn(&g_delta, &cache.hidden)?;
    let g_hidden = matmul(&g_delta, &ad.b)?;
    let grad_a = matmul_tn(&g_hidden, &cache.branch_input)?;
    let mut g_branch = matmul(&g_hidden, &ad.a)?;
    if let Some(mask) = &cache.mask_scale {
        for (g, &s) in g_branch.data_mut().iter_mut().zip(mask.data()) {
            *g *= s;
        }
    }
    let grad_e = g_pre.add(&g_branch)?;
    Ok((
        grad_e,
        LoraGrads {
            a: grad_a,
            b: grad_b,
        },
    ))
}

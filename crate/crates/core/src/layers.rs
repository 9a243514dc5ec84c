//! Linear, LayerNorm, GELU and row normalization with hand-written backward
//! passes, and the projection module built from them:
//!
//! ```text
//! Linear(d_new→h) → LN → GELU → Linear(h→h) → LN → GELU → Linear(h→d_old) → l2-normalize
//! ```
//!
//! with `h = 4·d_old`. There is no dropout anywhere in the projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XbtError};
use crate::params::NamedParams;
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, norm, Matrix, Real, NORM_EPS};

pub const LN_EPS: f64 = 1e-5;

/// Hidden width multiplier relative to the output embedding dimension.
pub const HIDDEN_MULTIPLIER: usize = 4;

// ---------------------------------------------------------------------------
// Linear

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T: Real> {
    /// `out_dim × in_dim`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads<T: Real> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct LinearCache<T: Real> {
    input: Matrix<T>,
}

impl<T: Real> LinearParams<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

impl<T: Real> LinearGrads<T> {
    fn zeros_like(p: &LinearParams<T>) -> Self {
        LinearGrads {
            weight: Matrix::zeros(p.weight.rows(), p.weight.cols()),
            bias: vec![T::zero(); p.bias.len()],
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.weight.add_assign(&other.weight);
        add_slice(&mut self.bias, &other.bias);
    }
}

/// `x · Wᵀ + b`.
pub fn linear_forward<T: Real>(
    x: &Matrix<T>,
    p: &LinearParams<T>,
) -> Result<(Matrix<T>, LinearCache<T>)> {
    if x.cols() != p.in_dim() {
        return Err(XbtError::shape(
            "linear_forward",
            format!("input has {} cols, layer expects {}", x.cols(), p.in_dim()),
        ));
    }
    let mut out = matmul_nt(x, &p.weight)?;
    for i in 0..out.rows() {
        add_slice(out.row_mut(i), &p.bias);
    }
    Ok((out, LinearCache { input: x.clone() }))
}

pub fn linear_backward<T: Real>(
    p: &LinearParams<T>,
    cache: &LinearCache<T>,
    upstream: &Matrix<T>,
) -> Result<(Matrix<T>, LinearGrads<T>)> {
    if upstream.shape() != (cache.input.rows(), p.out_dim()) {
        return Err(XbtError::shape(
            "linear_backward",
            format!("upstream {:?}", upstream.shape()),
        ));
    }
    let grad_x = matmul(upstream, &p.weight)?;
    let grad_w = matmul_tn(upstream, &cache.input)?;
    let mut grad_b = vec![T::zero(); p.out_dim()];
    for row in upstream.iter_rows() {
        add_slice(&mut grad_b, row);
    }
    Ok((
        grad_x,
        LinearGrads {
            weight: grad_w,
            bias: grad_b,
        },
    ))
}

// ---------------------------------------------------------------------------
// LayerNorm

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T: Real> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormGrads<T: Real> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T: Real> {
    x_hat: Matrix<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNormParams<T> {
    pub fn new(dim: usize, eps: T) -> Self {
        LayerNormParams {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

impl<T: Real> LayerNormGrads<T> {
    fn zeros(dim: usize) -> Self {
        LayerNormGrads {
            gamma: vec![T::zero(); dim],
            beta: vec![T::zero(); dim],
        }
    }

    fn add_assign(&mut self, other: &Self) {
        add_slice(&mut self.gamma, &other.gamma);
        add_slice(&mut self.beta, &other.beta);
    }
}

/// Per-row standardization with biased variance, `eps` inside the square root.
pub fn layer_norm_forward<T: Real>(
    x: &Matrix<T>,
    p: &LayerNormParams<T>,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let dim = p.dim();
    if x.cols() != dim {
        return Err(XbtError::shape(
            "layer_norm_forward",
            format!("input has {} cols, layer expects {dim}", x.cols()),
        ));
    }
    let n = T::from_f64(dim as f64);
    let mut out = Matrix::zeros(x.rows(), dim);
    let mut x_hat = Matrix::zeros(x.rows(), dim);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + p.eps).sqrt();
        inv_std.push(r);
        let xh = x_hat.row_mut(i);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * r;
        }
        let xh = x_hat.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = p.gamma[j] * xh[j] + p.beta[j];
        }
    }
    Ok((out, LayerNormCache { x_hat, inv_std }))
}

pub fn layer_norm_backward<T: Real>(
    p: &LayerNormParams<T>,
    cache: &LayerNormCache<T>,
    upstream: &Matrix<T>,
) -> Result<(Matrix<T>, LayerNormGrads<T>)> {
    let dim = p.dim();
    if upstream.shape() != cache.x_hat.shape() {
        return Err(XbtError::shape(
            "layer_norm_backward",
            format!("upstream {:?}", upstream.shape()),
        ));
    }
    let n = T::from_f64(dim as f64);
    let mut grads = LayerNormGrads::zeros(dim);
    let mut grad_x = Matrix::zeros(upstream.rows(), dim);
    let mut g_hat = vec![T::zero(); dim];
    for i in 0..upstream.rows() {
        let g = upstream.row(i);
        let xh = cache.x_hat.row(i);
        for j in 0..dim {
            grads.gamma[j] += g[j] * xh[j];
            grads.beta[j] += g[j];
            g_hat[j] = g[j] * p.gamma[j];
        }
        let mean_g = g_hat.iter().copied().sum::<T>() / n;
        let mean_gx = dot(&g_hat, xh) / n;
        let r = cache.inv_std[i];
        for (j, dx) in grad_x.row_mut(i).iter_mut().enumerate() {
            *dx = r * (g_hat[j] - mean_g - xh[j] * mean_gx);
        }
    }
    Ok((grad_x, grads))
}

// ---------------------------------------------------------------------------
// GELU (exact, erf-based)

fn std_normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x / T::from_f64(std::f64::consts::SQRT_2)).erf())
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    inv_sqrt_2pi * (-(x * x) * T::from_f64(0.5)).exp()
}

pub fn gelu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v * std_normal_cdf(v))
}

pub fn gelu_backward<T: Real>(x: &Matrix<T>, upstream: &Matrix<T>) -> Result<Matrix<T>> {
    if x.shape() != upstream.shape() {
        return Err(XbtError::shape(
            "gelu_backward",
            format!("{:?} vs {:?}", x.shape(), upstream.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| g * (std_normal_cdf(v) + v * std_normal_pdf(v)))
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

// ---------------------------------------------------------------------------
// Row l2-normalization with backward

#[derive(Clone, Debug)]
pub struct NormalizeCache<T: Real> {
    output: Matrix<T>,
    norms: Vec<T>,
    eps: T,
}

pub fn normalize_forward<T: Real>(x: &Matrix<T>, eps: T) -> (Matrix<T>, NormalizeCache<T>) {
    let norms = x.row_norms();
    let mut out = x.clone();
    for (i, &n) in norms.iter().enumerate() {
        let d = n.max(eps);
        for v in out.row_mut(i) {
            *v = *v / d;
        }
    }
    (
        out.clone(),
        NormalizeCache {
            output: out,
            norms,
            eps,
        },
    )
}

/// Like [`normalize_forward`], but rows flagged in `keep` are emitted
/// unchanged. Callers flag rows they know are already unit-norm so that the
/// output is bitwise equal to the input there; the cache still records the
/// actual norm so the backward pass stays exact.
pub(crate) fn normalize_forward_keeping<T: Real>(
    x: &Matrix<T>,
    eps: T,
    keep: &[bool],
) -> (Matrix<T>, NormalizeCache<T>) {
    let norms = x.row_norms();
    let mut out = x.clone();
    for (i, &n) in norms.iter().enumerate() {
        if keep[i] {
            continue;
        }
        let d = n.max(eps);
        for v in out.row_mut(i) {
            *v = *v / d;
        }
    }
    (
        out.clone(),
        NormalizeCache {
            output: out,
            norms,
            eps,
        },
    )
}

pub fn normalize_backward<T: Real>(
    cache: &NormalizeCache<T>,
    upstream: &Matrix<T>,
) -> Result<Matrix<T>> {
    if upstream.shape() != cache.output.shape() {
        return Err(XbtError::shape(
            "normalize_backward",
            format!("upstream {:?}", upstream.shape()),
        ));
    }
    let mut grad = Matrix::zeros(upstream.rows(), upstream.cols());
    for i in 0..upstream.rows() {
        let g = upstream.row(i);
        let n = cache.norms[i];
        let out = grad.row_mut(i);
        if n > cache.eps {
            let y = cache.output.row(i);
            let yg = dot(y, g);
            for j in 0..g.len() {
                out[j] = (g[j] - y[j] * yg) / n;
            }
        } else {
            for j in 0..g.len() {
                out[j] = g[j] / cache.eps;
            }
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Projection module

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T: Real> {
    pub lin1: LinearParams<T>,
    pub ln1: LayerNormParams<T>,
    pub lin2: LinearParams<T>,
    pub ln2: LayerNormParams<T>,
    pub lin3: LinearParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionGrads<T: Real> {
    pub lin1: LinearGrads<T>,
    pub ln1: LayerNormGrads<T>,
    pub lin2: LinearGrads<T>,
    pub ln2: LayerNormGrads<T>,
    pub lin3: LinearGrads<T>,
}

#[derive(Clone, Debug)]
pub struct PhiCache<T: Real> {
    lin1: LinearCache<T>,
    ln1: LayerNormCache<T>,
    act1_in: Matrix<T>,
    lin2: LinearCache<T>,
    ln2: LayerNormCache<T>,
    act2_in: Matrix<T>,
    lin3: LinearCache<T>,
    normalize: Option<NormalizeCache<T>>,
}

/// Shape summary used by checkpoints and config echoes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionShape {
    pub d_new: usize,
    pub d_old: usize,
    pub hidden: usize,
}

impl<T: Real> ProjectionParams<T> {
    pub fn d_new(&self) -> usize {
        self.lin1.in_dim()
    }

    pub fn d_old(&self) -> usize {
        self.lin3.out_dim()
    }

    pub fn hidden(&self) -> usize {
        self.lin1.out_dim()
    }

    pub fn shape(&self) -> ProjectionShape {
        ProjectionShape {
            d_new: self.d_new(),
            d_old: self.d_old(),
            hidden: self.hidden(),
        }
    }

    pub fn cast<U: Real>(&self) -> ProjectionParams<U> {
        let lin = |l: &LinearParams<T>| LinearParams {
            weight: l.weight.cast(),
            bias: l.bias.iter().map(|&b| U::from_f64(b.to_f64())).collect(),
        };
        let ln = |l: &LayerNormParams<T>| LayerNormParams {
            gamma: l.gamma.iter().map(|&b| U::from_f64(b.to_f64())).collect(),
            beta: l.beta.iter().map(|&b| U::from_f64(b.to_f64())).collect(),
            eps: U::from_f64(l.eps.to_f64()),
        };
        ProjectionParams {
            lin1: lin(&self.lin1),
            ln1: ln(&self.ln1),
            lin2: lin(&self.lin2),
            ln2: ln(&self.ln2),
            lin3: lin(&self.lin3),
        }
    }
}

impl<T: Real> ProjectionGrads<T> {
    pub fn zeros_like(p: &ProjectionParams<T>) -> Self {
        ProjectionGrads {
            lin1: LinearGrads::zeros_like(&p.lin1),
            ln1: LayerNormGrads::zeros(p.ln1.dim()),
            lin2: LinearGrads::zeros_like(&p.lin2),
            ln2: LayerNormGrads::zeros(p.ln2.dim()),
            lin3: LinearGrads::zeros_like(&p.lin3),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.lin1.add_assign(&other.lin1);
        self.ln1.add_assign(&other.ln1);
        self.lin2.add_assign(&other.lin2);
        self.ln2.add_assign(&other.ln2);
        self.lin3.add_assign(&other.lin3);
    }
}

macro_rules! projection_tensors {
    ($s:expr, $slice:ident) => {
        vec![
            ("lin1.weight".to_string(), $s.lin1.weight.$slice()),
            ("lin1.bias".to_string(), &$s.lin1.bias[..]),
            ("ln1.gamma".to_string(), &$s.ln1.gamma[..]),
            ("ln1.beta".to_string(), &$s.ln1.beta[..]),
            ("lin2.weight".to_string(), $s.lin2.weight.$slice()),
            ("lin2.bias".to_string(), &$s.lin2.bias[..]),
            ("ln2.gamma".to_string(), &$s.ln2.gamma[..]),
            ("ln2.beta".to_string(), &$s.ln2.beta[..]),
            ("lin3.weight".to_string(), $s.lin3.weight.$slice()),
            ("lin3.bias".to_string(), &$s.lin3.bias[..]),
        ]
    };
}

macro_rules! projection_tensors_mut {
    ($s:expr) => {
        vec![
            ("lin1.weight".to_string(), $s.lin1.weight.data_mut()),
            ("lin1.bias".to_string(), &mut $s.lin1.bias[..]),
            ("ln1.gamma".to_string(), &mut $s.ln1.gamma[..]),
            ("ln1.beta".to_string(), &mut $s.ln1.beta[..]),
            ("lin2.weight".to_string(), $s.lin2.weight.data_mut()),
            ("lin2.bias".to_string(), &mut $s.lin2.bias[..]),
            ("ln2.gamma".to_string(), &mut $s.ln2.gamma[..]),
            ("ln2.beta".to_string(), &mut $s.ln2.beta[..]),
            ("lin3.weight".to_string(), $s.lin3.weight.data_mut()),
            ("lin3.bias".to_string(), &mut $s.lin3.bias[..]),
        ]
    };
}

impl<T: Real> NamedParams<T> for ProjectionParams<T> {
    fn named(&self) -> Vec<(String, &[T])> {
        projection_tensors!(self, data)
    }

    fn named_mut(&mut self) -> Vec<(String, &mut [T])> {
        projection_tensors_mut!(self)
    }
}

impl<T: Real> NamedParams<T> for ProjectionGrads<T> {
    fn named(&self) -> Vec<(String, &[T])> {
        projection_tensors!(self, data)
    }

    fn named_mut(&mut self) -> Vec<(String, &mut [T])> {
        projection_tensors_mut!(self)
    }
}

fn uniform_linear<T: Real>(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> LinearParams<T> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data = (0..in_dim * out_dim)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    LinearParams {
        weight: Matrix::from_vec(out_dim, in_dim, data).expect("sized"),
        bias: vec![T::zero(); out_dim],
    }
}

/// Uniform `±1/√fan_in` weights, zero biases, unit gamma and zero beta.
pub fn phi_init<T: Real>(d_new: usize, d_old: usize, seed: u64) -> ProjectionParams<T> {
    phi_init_with_eps(d_new, d_old, seed, LN_EPS)
}

pub fn phi_init_with_eps<T: Real>(
    d_new: usize,
    d_old: usize,
    seed: u64,
    ln_eps: f64,
) -> ProjectionParams<T> {
    assert!(d_new >= 1 && d_old >= 1, "projection dims must be positive");
    let h = HIDDEN_MULTIPLIER * d_old;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = T::from_f64(ln_eps);
    let lin1 = uniform_linear(&mut rng, d_new, h);
    let lin2 = uniform_linear(&mut rng, h, h);
    let lin3 = uniform_linear(&mut rng, h, d_old);
    ProjectionParams {
        lin1,
        ln1: LayerNormParams::new(h, eps),
        lin2,
        ln2: LayerNormParams::new(h, eps),
        lin3,
    }
}

pub fn phi_forward<T: Real>(
    params: &ProjectionParams<T>,
    x: &Matrix<T>,
    normalize_output: bool,
) -> Result<(Matrix<T>, PhiCache<T>)> {
    if x.cols() != params.d_new() {
        return Err(XbtError::shape(
            "phi_forward",
            format!(
                "input has {} cols, projection expects {}",
                x.cols(),
                params.d_new()
            ),
        ));
    }
    let (h1, lin1) = linear_forward(x, &params.lin1)?;
    let (n1, ln1) = layer_norm_forward(&h1, &params.ln1)?;
    let a1 = gelu(&n1);
    let (h2, lin2) = linear_forward(&a1, &params.lin2)?;
    let (n2, ln2) = layer_norm_forward(&h2, &params.ln2)?;
    let a2 = gelu(&n2);
    let (h3, lin3) = linear_forward(&a2, &params.lin3)?;
    let (out, normalize) = if normalize_output {
        let (y, c) = normalize_forward(&h3, T::from_f64(NORM_EPS));
        (y, Some(c))
    } else {
        (h3, None)
    };
    Ok((
        out,
        PhiCache {
            lin1,
            ln1,
            act1_in: n1,
            lin2,
            ln2,
            act2_in: n2,
            lin3,
            normalize,
        },
    ))
}

/// Forward pass without keeping activations.
pub fn phi_apply<T: Real>(
    params: &ProjectionParams<T>,
    x: &Matrix<T>,
    normalize_output: bool,
) -> Result<Matrix<T>> {
    phi_forward(params, x, normalize_output).map(|(y, _)| y)
}

/// Returns the gradient with respect to the input and to every parameter.
pub fn phi_backward<T: Real>(
    params: &ProjectionParams<T>,
    cache: &PhiCache<T>,
    upstream: &Matrix<T>,
) -> Result<(Matrix<T>, ProjectionGrads<T>)> {
    let g = match &cache.normalize {
        Some(c) => normalize_backward(c, upstream)?,
        None => upstream.clone(),
    };
    let (g, lin3) = linear_backward(&params.lin3, &cache.lin3, &g)?;
    let g = gelu_backward(&cache.act2_in, &g)?;
    let (g, ln2) = layer_norm_backward(&params.ln2, &cache.ln2, &g)?;
    let (g, lin2) = linear_backward(&params.lin2, &cache.lin2, &g)?;
    let g = gelu_backward(&cache.act1_in, &g)?;
    let (g, ln1) = layer_norm_backward(&params.ln1, &cache.ln1, &g)?;
    let (grad_x, lin1) = linear_backward(&params.lin1, &cache.lin1, &g)?;
    Ok((
        grad_x,
        ProjectionGrads {
            lin1,
            ln1,
            lin2,
            ln2,
            lin3,
        },
    ))
}

fn add_slice<T: Real>(acc: &mut [T], other: &[T]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Mean of `norm(row)` over rows; a cheap health metric for logs.
pub fn mean_row_norm<T: Real>(m: &Matrix<T>) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    m.iter_rows().map(|r| norm(r).to_f64()).sum::<f64>() / m.rows() as f64
}

//! Dense row-major matrices and the numeric kernels every other module uses.
//!
//! Training runs in `f32`; gradient checks instantiate the same code with `f64`.
//! All reductions run in a fixed order (ascending index) so results are bitwise
//! reproducible across runs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Result, XbtError};

/// Default floor applied to row norms before division.
pub const NORM_EPS: f64 = 1e-12;

/// Floating-point element type for matrices and parameters.
pub trait Real:
    Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn erf(self) -> Self;

    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;

    /// Little-endian bytes of the value widened or narrowed to `f32`.
    fn to_le_f32_bytes(self) -> [u8; 4] {
        (self.to_f64() as f32).to_le_bytes()
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T: Real> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols >= 1, "matrix must have at least one column");
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if cols == 0 {
            return Err(XbtError::shape("Matrix::from_vec", "cols must be >= 1"));
        }
        if data.len() != rows * cols {
            return Err(XbtError::shape(
                "Matrix::from_vec",
                format!("{} elements for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Matrix::from_vec(rows.len(), cols, data).expect("valid literal")
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Gathers the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix<T>) -> Result<Self> {
        if self.cols != other.cols {
            return Err(XbtError::shape(
                "vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(XbtError::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Element type conversion (`f32` storage to `f64` verification and back).
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn row_norms(&self) -> Vec<T> {
        self.iter_rows().map(norm).collect()
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Matrix product with a fixed `k`-ascending accumulation per output element.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(XbtError::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, k_dim, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let a_row = &a.data[i * k_dim..(i + 1) * k_dim];
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for (k, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, i.e. all pairwise row dot products.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(XbtError::shape(
            "matmul_nt",
            format!("{}x{} against {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    matmul(a, &b.transpose())
}

/// `aᵀ · b`.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(XbtError::shape(
            "matmul_tn",
            format!("{}x{} against {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    matmul(&a.transpose(), b)
}

/// Divides each row by `max(‖row‖₂, eps)`. All-zero rows stay zero.
pub fn l2_normalize_rows<T: Real>(m: &Matrix<T>, eps: T) -> Matrix<T> {
    let mut out = m.clone();
    for row in out.data.chunks_exact_mut(m.cols) {
        let n = norm(row).max(eps);
        for x in row.iter_mut() {
            *x = *x / n;
        }
    }
    out
}

/// Cosine similarity of row-normalized inputs: `q · gᵀ`.
pub fn cosine_similarity<T: Real>(q: &Matrix<T>, g: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_nt(q, g)
}

/// Ordering used for ranking: higher score first, then lower index.
fn rank_order<T: Real>(scores: &[T], a: usize, b: usize) -> std::cmp::Ordering {
    let (sa, sb) = (scores[a].to_f64(), scores[b].to_f64());
    sb.total_cmp(&sa).then(a.cmp(&b))
}

/// Indices of the `k` largest entries in one score row, best first; ties go to
/// the lower index.
pub fn top_k_row<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    idx
}

/// Row-wise top-k selection over a score matrix.
pub fn top_k<T: Real>(scores: &Matrix<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > scores.cols {
        return Err(XbtError::Argument(format!(
            "top_k: k = {k} outside 1..={}",
            scores.cols
        )));
    }
    Ok(scores.iter_rows().map(|row| top_k_row(row, k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_product_is_exact() {
        let m = random(2, 5, 1);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn small_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![1.0f32], vec![1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop_bitwise() {
        let a = random(7, 5, 2).cast::<f32>();
        let b = random(5, 3, 3).cast::<f32>();
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f32;
                for k in 0..5 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(c.get(i, j).to_bits(), s.to_bits());
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(XbtError::Shape { .. })));
        assert!(cosine_similarity(&a, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn normalize_examples() {
        let m = Matrix::from_rows(&[vec![3.0f64, 4.0]]);
        let n = l2_normalize_rows(&m, NORM_EPS);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);

        let z = Matrix::from_rows(&[vec![0.0f32, 0.0, 0.0]]);
        assert_eq!(l2_normalize_rows(&z, 1e-12).data(), &[0.0, 0.0, 0.0]);

        let r = l2_normalize_rows(&random(5, 8, 4), NORM_EPS);
        for n in r.row_norms() {
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_examples() {
        let x = Matrix::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]);
        let s = cosine_similarity(&x, &x).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);

        let q = l2_normalize_rows(&random(4, 16, 5), NORM_EPS);
        let g = l2_normalize_rows(&random(6, 16, 6), NORM_EPS);
        let s = cosine_similarity(&q, &g).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let oracle: f64 = q.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum();
                assert!((s.get(i, j) - oracle).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn top_k_examples() {
        let s = Matrix::from_rows(&[vec![0.9f32, 0.1, 0.5]]);
        assert_eq!(top_k(&s, 2).unwrap(), vec![vec![0, 2]]);
        let tie = Matrix::from_rows(&[vec![0.5f32, 0.5]]);
        assert_eq!(top_k(&tie, 1).unwrap(), vec![vec![0]]);
        assert!(top_k(&tie, 0).is_err());
        assert!(top_k(&tie, 3).is_err());
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let s = random(10, 50, 7);
        let got = top_k(&s, 5).unwrap();
        for (i, row) in s.iter_rows().enumerate() {
            let mut order: Vec<usize> = (0..50).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(got[i], order[..5].to_vec());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
            proptest::collection::vec(-3.0f64..3.0, rows * cols)
                .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn identity_left_product(m in matrix(4, 6)) {
                prop_assert_eq!(matmul(&Matrix::identity(4), &m).unwrap(), m);
            }

            #[test]
            fn normalize_is_idempotent(m in matrix(5, 7)) {
                let once = l2_normalize_rows(&m, NORM_EPS);
                let twice = l2_normalize_rows(&once, NORM_EPS);
                for (i, row) in m.iter_rows().enumerate() {
                    if norm(row) > 1e-6 {
                        for (a, b) in once.row(i).iter().zip(twice.row(i)) {
                            prop_assert!((a - b).abs() < 1e-7);
                        }
                    }
                }
            }

            #[test]
            fn full_top_k_is_permutation(m in matrix(3, 9)) {
                for mut row in top_k(&m, 9).unwrap() {
                    row.sort_unstable();
                    prop_assert_eq!(row, (0..9).collect::<Vec<_>>());
                }
            }

            #[test]
            fn self_similarity_diagonal_is_one(m in matrix(6, 5)) {
                let x = l2_normalize_rows(&m, NORM_EPS);
                let s = cosine_similarity(&x, &x).unwrap();
                for i in 0..6 {
                    if norm(m.row(i)) > 1e-6 {
                        prop_assert!((s.get(i, i) - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }
}

//! Brute-force reference computations written without library helpers.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::random_unit_rows;
use super::Matrix;

/// Symmetric InfoNCE written from the definition: log-sum-exp per row and per
/// column, no shared code with the library.
pub fn loss_oracle(a: &Matrix<f64>, b: &Matrix<f64>, log_scale: f64) -> f64 {
    let n = a.rows();
    let t = log_scale.exp();
    let s = |i: usize, j: usize| -> f64 {
        t * (0..a.cols())
            .map(|k| a.get(i, k) * b.get(j, k))
            .sum::<f64>()
    };
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| s(i, j)).collect();
        let col: Vec<f64> = (0..n).map(|j| s(j, i)).collect();
        for (v, target) in [(row, s(i, i)), (col, s(i, i))] {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - target;
        }
    }
    total / (2.0 * n as f64)
}

/// Sort every gallery index by (score desc, index asc) and read off the first
/// relevant position.
pub fn recall_oracle(
    query: &Matrix<f32>,
    gallery: &Matrix<f32>,
    relevant: &[Vec<usize>],
    ks: &[usize],
) -> Vec<f64> {
    let mut hits = vec![0usize; ks.len()];
    for (q, rel) in relevant.iter().enumerate() {
        let scores: Vec<f32> = (0..gallery.rows())
            .map(|g| {
                let mut acc = 0.0f32;
                for k in 0..query.cols() {
                    acc += query.get(q, k) * gallery.get(g, k);
                }
                acc
            })
            .collect();
        let mut order: Vec<usize> = (0..gallery.rows()).collect();
        order.sort_by(|&x, &y| match scores[y].total_cmp(&scores[x]) {
            Ordering::Equal => x.cmp(&y),
            o => o,
        });
        let first = order.iter().position(|g| rel.contains(g)).unwrap();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first < k {
                *h += 1;
            }
        }
    }
    hits.iter()
        .map(|&h| 100.0 * h as f64 / relevant.len() as f64)
        .collect()
}

/// 100 images with 5 captions each. Captions are noisy copies of their image
/// so recall is neither 0 nor 100, and three captions duplicate a wrong image
/// to exercise the index tie-break.
pub fn retrieval_fixture() -> (Matrix<f32>, Matrix<f32>, Vec<usize>) {
    let images: Matrix<f32> = random_unit_rows(100, 16, 1).cast();
    let mut captions = Matrix::<f32>::zeros(500, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pair_of: Vec<usize> = (0..500).map(|c| c / 5).collect();
    for (c, &img) in pair_of.iter().enumerate() {
        let row: Vec<f32> = images
            .row(img)
            .iter()
            .map(|&x| x + rng.random_range(-0.4f32..0.4))
            .collect();
        let n = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        for (dst, x) in captions.row_mut(c).iter_mut().zip(row) {
            *dst = x / n;
        }
    }
    for c in [3usize, 77, 250] {
        let src = images.row(pair_of[c] + 1).to_vec();
        captions.row_mut(c).copy_from_slice(&src);
    }
    (images, captions, pair_of)
}

/// Relevant gallery indices per query for both directions.
pub fn relevance(pair_of: &[usize], n_images: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let t2i = pair_of.iter().map(|&i| vec![i]).collect();
    let i2t = (0..n_images)
        .map(|i| (0..pair_of.len()).filter(|&c| pair_of[c] == i).collect())
        .collect();
    (t2i, i2t)
}

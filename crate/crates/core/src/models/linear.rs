//! Ridge least-squares linear classifier on raw inputs.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::{Reducer, Sequential};
use crate::error::{arg_err, num_err, shape_err, Result};
use crate::feature_map::LocalMap;
use crate::linalg::{self, solve_spd, Layout};
use crate::mps::{lift_linear_classes, Mps};
use crate::tensor::DenseTensor;

const SINGULAR_JITTER: f64 = 1e-8;

/// `f^ℓ(x) = V^ℓ·x + b^ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.biases.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(shape_err!("input has {} entries, classifier expects {}", x.len(), self.input_dim()));
        }
        Ok(self.weights.iter().zip(&self.biases).map(|(v, b)| linalg::dot(v, x) + b).collect())
    }

    /// The same classifier as a label-indexed MPS over the affine map.
    pub fn to_mps(&self) -> Result<Mps> {
        lift_linear_classes(&self.weights, &self.biases, LocalMap::Affine)
    }
}

/// Minimize `(1/2n) Σ_j ‖V x_j + b − y_j‖² + (λ/2)‖V‖²` with one-hot `y_j`.
///
/// The bias is not penalized. A singular system at `λ = 0` is retried with a
/// small diagonal shift.
pub fn train_linear(inputs: &[Vec<f64>], labels: &[usize], classes: usize, lambda: f64) -> Result<LinearClassifier> {
    train_linear_with(inputs, labels, classes, lambda, &Sequential::default())
}

pub fn train_linear_with(
    inputs: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    lambda: f64,
    reducer: &dyn Reducer,
) -> Result<LinearClassifier> {
    let n = inputs.len();
    if n == 0 {
        return Err(arg_err!("empty training set"));
    }
    if labels.len() != n {
        return Err(shape_err!("{} inputs but {} labels", n, labels.len()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(arg_err!("ridge must be finite and non-negative, got {}", lambda));
    }
    if classes == 0 || labels.iter().any(|&l| l >= classes) {
        return Err(arg_err!("labels must lie in 0..{}", classes));
    }
    let dim = inputs[0].len();
    if let Some(i) = inputs.iter().position(|x| x.len() != dim) {
        return Err(shape_err!("input {} has {} entries, expected {}", i, inputs[i].len(), dim));
    }
    let m = dim + 1;
    let l = classes;
    // [XᵀX | XᵀY] for the design with a trailing constant column
    let stats = reducer.sum(n, m * m + m * l, &|r: Range<usize>, out: &mut [f64]| {
        let b = r.len();
        let mut x = Vec::with_capacity(b * m);
        let mut y = vec![0.0; b * l];
        for (i, j) in r.enumerate() {
            x.extend_from_slice(&inputs[j]);
            x.push(1.0);
            y[i * l + labels[j]] = 1.0;
        }
        let (gram, cross) = out.split_at_mut(m * m);
        linalg::gemm_with(m, b, m, 1.0, &x, Layout::transposed(m), &x, Layout::row_major(m), 1.0, gram);
        linalg::gemm_with(m, b, l, 1.0, &x, Layout::transposed(m), &y, Layout::row_major(l), 1.0, cross);
    });
    let inv_n = 1.0 / n as f64;
    let mut gram = DenseTensor::from_parts(vec![m, m], stats[..m * m].iter().map(|v| v * inv_n).collect());
    let cross = DenseTensor::from_parts(vec![m, l], stats[m * m..].iter().map(|v| v * inv_n).collect());
    for i in 0..dim {
        gram.data_mut()[i * m + i] += lambda;
    }
    let sol = match solve_spd(&gram, &cross)? {
        Some(s) => s,
        None => {
            log::warn!("normal equations are singular; adding {:e} to the diagonal", SINGULAR_JITTER);
            for i in 0..m {
                gram.data_mut()[i * m + i] += SINGULAR_JITTER;
            }
            solve_spd(&gram, &cross)?.ok_or_else(|| num_err!("normal equations are not positive definite"))?
        }
    };
    let weights = (0..l).map(|c| (0..dim).map(|i| sol.data()[i * l + c]).collect()).collect();
    let biases = (0..l).map(|c| sol.data()[dim * l + c]).collect();
    Ok(LinearClassifier { weights, biases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_map::{map_input, ScaleMode};
    use crate::mps::evaluate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scores_sum_to_one() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let labels: Vec<usize> = xs.iter().map(|x| usize::from(x[0] > 0.5)).collect();
        let clf = train_linear(&xs, &labels, 2, 0.0).unwrap();
        assert_eq!(clf.classes(), 2);
        for x in &xs {
            let s = clf.scores(x).unwrap();
            assert!((s[0] + s[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_columns_fall_back() {
        let xs = vec![vec![0.0, 0.2], vec![0.0, 0.8], vec![0.0, 0.4], vec![0.0, 0.9]];
        let clf = train_linear(&xs, &[0, 1, 0, 1], 2, 0.0).unwrap();
        assert!(clf.weights.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn huge_ridge_gives_majority_class() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0]).collect();
        let labels = [0, 0, 0, 0, 0, 0, 0, 1, 1, 2];
        let clf = train_linear(&xs, &labels, 3, 1e12).unwrap();
        for x in &xs {
            let s = clf.scores(x).unwrap();
            assert_eq!(crate::models::argmax(&s), 0);
        }
    }

    #[test]
    fn lift_reproduces_scores() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let clf = train_linear(&xs, &labels, 3, 0.1).unwrap();
        let w = clf.to_mps().unwrap();
        for x in &xs {
            let f = map_input(x, LocalMap::Affine, ScaleMode::UnitLocal).unwrap();
            let (a, b) = (clf.scores(x).unwrap(), evaluate(&w, &f).unwrap());
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(train_linear(&[], &[], 2, 0.0).is_err());
        assert!(train_linear(&[vec![0.1]], &[3], 2, 0.0).is_err());
        assert!(train_linear(&[vec![0.1], vec![0.1, 0.2]], &[0, 1], 2, 0.0).is_err());
        assert!(train_linear(&[vec![0.1]], &[0], 2, -1.0).is_err());
    }
}

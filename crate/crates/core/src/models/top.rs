//! Top tensor head `f^ℓ(x) = Σ w^ℓ_{t1 t2} e^c v1^{t1} v2^{t2}`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::{squared_error, Dataset, Reducer, Scorer, Sequential, TrainConfig};
use crate::error::{arg_err, num_err, shape_err, Result};
use crate::feature_map::ProductFeature;
use crate::linalg::{self, Layout};
use crate::tensor::DenseTensor;

const REFRESH_EVERY: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct TopTensor {
    weights: DenseTensor,
    trace: Vec<f64>,
}

impl TopTensor {
    /// Weights of shape `(L, t1, t2)`.
    pub fn new(weights: DenseTensor) -> Result<Self> {
        if weights.order() != 3 {
            return Err(shape_err!("top tensor must have order 3, got {}", weights.order()));
        }
        if weights.data().iter().any(|v| !v.is_finite()) {
            return Err(num_err!("top tensor has non-finite entries"));
        }
        Ok(Self { weights, trace: Vec::new() })
    }

    /// Same weights with a recorded cost trace.
    pub fn with_trace(mut self, trace: Vec<f64>) -> Self {
        self.trace = trace;
        self
    }

    pub fn zeros(classes: usize, t1: usize, t2: usize) -> Self {
        Self { weights: DenseTensor::zeros(vec![classes, t1, t2]), trace: Vec::new() }
    }

    pub fn weights(&self) -> &DenseTensor {
        &self.weights
    }

    /// Cost after each accepted optimizer step, starting with the initial cost.
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.weights.shape()[1], self.weights.shape()[2])
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        let (t1, t2) = self.dims();
        if data.site_dims() != [t1, t2] {
            return Err(shape_err!("top tensor dims ({}, {}) do not match features {:?}", t1, t2, data.site_dims()));
        }
        if data.classes() != self.classes() {
            return Err(shape_err!("top tensor has {} labels, dataset has {}", self.classes(), data.classes()));
        }
        Ok(())
    }
}

impl Scorer for TopTensor {
    fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    fn scores(&self, f: &ProductFeature) -> Result<Vec<f64>> {
        let (t1, t2) = self.dims();
        if f.site_dims() != [t1, t2] {
            return Err(shape_err!("feature dims {:?} do not match top tensor ({}, {})", f.site_dims(), t1, t2));
        }
        let l = self.classes();
        let mut out = vec![0.0; l];
        predict_rows(self.weights.data(), l, t1, t2, core::slice::from_ref(f), &mut out);
        Ok(out)
    }
}

/// Row `j` of `(v1 ⊗ v2)` batch factors: `e^c v1` and `v2`.
fn batch_factors(features: &[ProductFeature], t1: usize, t2: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(features.len() * t1);
    let mut b = Vec::with_capacity(features.len() * t2);
    for f in features {
        let s = f.scale_factor();
        a.extend(f.site(0).iter().map(|v| v * s));
        b.extend_from_slice(f.site(1));
    }
    (a, b)
}

/// Scores of a batch into `out` (`batch × L`).
fn predict_rows(w: &[f64], l: usize, t1: usize, t2: usize, features: &[ProductFeature], out: &mut [f64]) {
    let n = features.len();
    let (a, b) = batch_factors(features, t1, t2);
    // m[j, (ℓ, t1)] = Σ_t2 v2[j, t2] w[(ℓ, t1), t2]
    let mut m = vec![0.0; n * l * t1];
    linalg::gemm_with(n, t2, l * t1, 1.0, &b, Layout::row_major(t2), w, Layout::transposed(t2), 0.0, &mut m);
    for j in 0..n {
        for c in 0..l {
            out[j * l + c] = linalg::dot(&a[j * t1..(j + 1) * t1], &m[(j * l + c) * t1..(j * l + c + 1) * t1]);
        }
    }
}

/// `Σ_j r[j, ℓ] e^c v1 ⊗ v2` added into `grad` (`L × t1 × t2`).
fn gradient_rows(residual: &[f64], l: usize, t1: usize, t2: usize, features: &[ProductFeature], grad: &mut [f64]) {
    let n = features.len();
    let (a, b) = batch_factors(features, t1, t2);
    let mut ra = vec![0.0; n * l * t1];
    for j in 0..n {
        for c in 0..l {
            let r = residual[j * l + c];
            let dst = &mut ra[(j * l + c) * t1..(j * l + c + 1) * t1];
            dst.iter_mut().zip(&a[j * t1..(j + 1) * t1]).for_each(|(d, x)| *d = r * x);
        }
    }
    linalg::gemm_with(l * t1, n, t2, 1.0, &ra, Layout::transposed(l * t1), &b, Layout::row_major(t2), 1.0, grad);
}

struct Problem<'a> {
    data: &'a Dataset,
    reducer: &'a dyn Reducer,
    l: usize,
    t1: usize,
    t2: usize,
}

impl Problem<'_> {
    fn size(&self) -> usize {
        self.l * self.t1 * self.t2
    }

    fn predictions(&self, w: &[f64]) -> Vec<f64> {
        let (l, t1, t2) = (self.l, self.t1, self.t2);
        let mut out = vec![0.0; self.data.len() * l];
        let feats = self.data.features();
        self.reducer.fill(self.data.len(), l, &mut out, &|r: Range<usize>, slot: &mut [f64]| {
            predict_rows(w, l, t1, t2, &feats[r], slot)
        });
        out
    }

    fn residual(&self, pred: &[f64]) -> Vec<f64> {
        let l = self.l;
        let mut r = pred.to_vec();
        for (j, &y) in self.data.labels().iter().enumerate() {
            r[j * l + y] -= 1.0;
        }
        r
    }

    /// `(cost, gradient)` given the predictions of `w`.
    fn cost_grad(&self, w: &[f64], pred: &[f64], lambda: f64) -> (f64, Vec<f64>) {
        let (l, t1, t2) = (self.l, self.t1, self.t2);
        let n = self.data.len() as f64;
        let resid = self.residual(pred);
        let feats = self.data.features();
        let mut g = self.reducer.sum(self.data.len(), self.size(), &|r: Range<usize>, out: &mut [f64]| {
            gradient_rows(&resid[r.start * l..r.end * l], l, t1, t2, &feats[r], out)
        });
        g.iter_mut().zip(w).for_each(|(gi, wi)| *gi = *gi / n + lambda * wi);
        (self.cost(w, pred, lambda), g)
    }

    fn cost(&self, w: &[f64], pred: &[f64], lambda: f64) -> f64 {
        let l = self.l;
        let err: f64 = self.data.labels().iter().enumerate().map(|(j, &y)| squared_error(&pred[j * l..(j + 1) * l], y)).sum();
        err / (2.0 * self.data.len() as f64) + 0.5 * lambda * linalg::dot(w, w)
    }
}

/// Cost `(1/2n) Σ_j Σ_ℓ (f^ℓ(x_j) − y_j^ℓ)² + (λ/2)‖w‖²` and its gradient.
pub fn quadratic_cost(w: &TopTensor, data: &Dataset, lambda: f64) -> Result<(f64, DenseTensor)> {
    quadratic_cost_with(w, data, lambda, &Sequential::default())
}

pub fn quadratic_cost_with(w: &TopTensor, data: &Dataset, lambda: f64, reducer: &dyn Reducer) -> Result<(f64, DenseTensor)> {
    w.check(data)?;
    let (t1, t2) = w.dims();
    let p = Problem { data, reducer, l: w.classes(), t1, t2 };
    let pred = p.predictions(w.weights.data());
    let (cost, g) = p.cost_grad(w.weights.data(), &pred, lambda);
    Ok((cost, DenseTensor::from_parts(w.weights.shape().to_vec(), g)))
}

/// Polak–Ribière+ nonlinear conjugate gradient from zero weights.
///
/// Along a search direction the cost is exactly quadratic, so the step is the
/// closed-form minimizer. The direction resets to steepest descent every
/// `L·t1·t2` steps or when it stops being a descent direction.
pub fn train_top(data: &Dataset, cfg: &TrainConfig, reducer: &dyn Reducer) -> Result<TopTensor> {
    cfg.validate()?;
    let dims = data.site_dims();
    if dims.len() != 2 {
        return Err(arg_err!("top tensor training needs 2-site features, got {} sites", dims.len()));
    }
    let p = Problem { data, reducer, l: data.classes(), t1: dims[0], t2: dims[1] };
    let lambda = cfg.ridge;
    let n = data.len() as f64;
    let size = p.size();
    let restart_every = size;

    let mut w = vec![0.0; size];
    let mut pred = p.predictions(&w);
    let (mut cost, mut g) = p.cost_grad(&w, &pred, lambda);
    let mut d: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut trace = vec![cost];
    let mut since_restart = 0;

    for it in 0..cfg.max_iterations {
        let gnorm = libm::sqrt(linalg::dot(&g, &g));
        if gnorm < cfg.grad_tol {
            log::debug!("top tensor converged after {} iterations, |g| = {:e}", it, gnorm);
            break;
        }
        let mut slope = linalg::dot(&g, &d);
        if !(slope < 0.0) {
            d = g.iter().map(|x| -x).collect();
            slope = -gnorm * gnorm;
            since_restart = 0;
        }
        let pd = p.predictions(&d);
        let curvature = linalg::dot(&pd, &pd) / n + lambda * linalg::dot(&d, &d);
        if !(curvature > 0.0) {
            break;
        }
        let alpha = -slope / curvature;

        let w_new: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
        let pred_new = if (it + 1) % REFRESH_EVERY == 0 {
            p.predictions(&w_new)
        } else {
            pred.iter().zip(&pd).map(|(a, b)| a + alpha * b).collect()
        };
        let (cost_new, g_new) = p.cost_grad(&w_new, &pred_new, lambda);
        if !cost_new.is_finite() {
            return Err(num_err!("non-finite cost at iteration {}", it));
        }
        if cost_new > cost + 1e-12 * cost.abs().max(1.0) {
            if since_restart == 0 {
                log::debug!("line search stalled at iteration {}", it);
                break;
            }
            d = g.iter().map(|x| -x).collect();
            since_restart = 0;
            continue;
        }

        // β = max(0, g_new·(g_new − g) / g·g)
        let gg = linalg::dot(&g, &g);
        let beta = ((linalg::dot(&g_new, &g_new) - linalg::dot(&g_new, &g)) / gg).max(0.0);
        since_restart += 1;
        if since_restart >= restart_every {
            d = g_new.iter().map(|x| -x).collect();
            since_restart = 0;
        } else {
            d.iter_mut().zip(&g_new).for_each(|(di, gi)| *di = -gi + beta * *di);
        }
        w = w_new;
        pred = pred_new;
        cost = cost_new;
        g = g_new;
        trace.push(cost);
    }

    let weights = DenseTensor::from_parts(vec![p.l, p.t1, p.t2], w);
    Ok(TopTensor { weights, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_map::ScaleMode;
    use crate::models::{evaluate_accuracy, predict};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_site(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    fn random_data(r: &mut ChaCha8Rng, n: usize, t1: usize, t2: usize, l: usize) -> Dataset {
        let feats = (0..n)
            .map(|_| {
                let c = r.random_range(-0.5..0.5);
                ProductFeature::from_sites(&[random_site(r, t1), random_site(r, t2)], c, ScaleMode::Raw).unwrap()
            })
            .collect();
        let labels = (0..n).map(|_| r.random_range(0..l)).collect();
        Dataset::new(feats, labels, l).unwrap()
    }

    fn random_top(r: &mut ChaCha8Rng, l: usize, t1: usize, t2: usize) -> TopTensor {
        TopTensor::new(DenseTensor::new(vec![l, t1, t2], random_site(r, l * t1 * t2)).unwrap()).unwrap()
    }

    #[test]
    fn zero_weights_cost_half() {
        let data = random_data(&mut ChaCha8Rng::seed_from_u64(1), 6, 3, 2, 4);
        let (c, g) = quadratic_cost(&TopTensor::zeros(4, 3, 2), &data, 0.7).unwrap();
        assert!((c - 0.5).abs() < 1e-15);
        assert_eq!(g.shape(), &[4, 3, 2]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for case in 0..20 {
            let (l, t1, t2) = (1 + case % 3, 1 + case % 4, 2 + case % 3);
            let data = random_data(&mut r, 3 + case % 5, t1, t2, l);
            let lambda = if case % 2 == 0 { 0.0 } else { 0.3 };
            let w = random_top(&mut r, l, t1, t2);
            let (_, g) = quadratic_cost(&w, &data, lambda).unwrap();
            let h = 1e-5;
            let mut fd = vec![0.0; g.len()];
            for (i, slot) in fd.iter_mut().enumerate() {
                let mut plus = w.weights.clone();
                plus.data_mut()[i] += h;
                let mut minus = w.weights.clone();
                minus.data_mut()[i] -= h;
                let cp = quadratic_cost(&TopTensor::new(plus).unwrap(), &data, lambda).unwrap().0;
                let cm = quadratic_cost(&TopTensor::new(minus).unwrap(), &data, lambda).unwrap().0;
                *slot = (cp - cm) / (2.0 * h);
            }
            let diff: f64 = g.data().iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let scale = g.frobenius_norm().max(1e-12);
            assert!(diff / scale < 1e-6, "case {}: relative error {:e}", case, diff / scale);
        }
    }

    #[test]
    fn exact_fit_leaves_only_ridge() {
        // two samples on orthogonal basis states, L = 1
        let e = |i: usize| if i == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        let feats = vec![
            ProductFeature::from_sites(&[e(0), e(0)], 0.0, ScaleMode::Raw).unwrap(),
            ProductFeature::from_sites(&[e(1), e(1)], 0.0, ScaleMode::Raw).unwrap(),
        ];
        let data = Dataset::new(feats, vec![0, 0], 1).unwrap();
        // w = [[1, 0], [0, 1]] gives f = 1 on both
        let w = TopTensor::new(DenseTensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let (c, _) = quadratic_cost(&w, &data, 0.25).unwrap();
        assert!((c - 0.25 * 2.0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn separable_set_is_fit() {
        let e = |i: usize| if i == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            feats.push(ProductFeature::from_sites(&[e(a), e(b)], 0.0, ScaleMode::UnitLocal).unwrap());
            labels.push(a ^ b);
        }
        let data = Dataset::new(feats, labels, 2).unwrap();
        let cfg = TrainConfig { grad_tol: 1e-10, ..TrainConfig::default() };
        let top = train_top(&data, &cfg, &Sequential::default()).unwrap();
        let m = evaluate_accuracy(&top, &data, &Sequential::default()).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.cost < 1e-6);
        assert!(top.trace().windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn heavy_ridge_shrinks_weights() {
        let data = random_data(&mut ChaCha8Rng::seed_from_u64(3), 20, 3, 3, 2);
        let cfg = TrainConfig { ridge: 1e8, ..TrainConfig::default() };
        let top = train_top(&data, &cfg, &Sequential::default()).unwrap();
        assert!(top.weights().frobenius_norm() < 1e-6);
        assert!((top.trace().last().unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn matches_normal_equations() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let data = random_data(&mut r, 12, 2, 3, 2);
        let cfg = TrainConfig { grad_tol: 1e-12, max_iterations: 500, ..TrainConfig::default() };
        let top = train_top(&data, &cfg, &Sequential { chunk: 5 }).unwrap();
        // dense oracle: X (n×6), solve XᵀX w = XᵀY per label
        let n = data.len();
        let mut xtx = DenseTensor::zeros(vec![6, 6]);
        let mut xty = DenseTensor::zeros(vec![6, 2]);
        for (f, &y) in data.features().iter().zip(data.labels()) {
            let s = f.scale_factor();
            let x: Vec<f64> = f.site(0).iter().flat_map(|a| f.site(1).iter().map(move |b| a * b * s)).collect();
            for i in 0..6 {
                for j in 0..6 {
                    xtx.data_mut()[i * 6 + j] += x[i] * x[j];
                }
                xty.data_mut()[i * 2 + y] += x[i];
            }
        }
        let sol = linalg::solve_spd(&xtx, &xty).unwrap().unwrap();
        for c in 0..2 {
            for i in 0..6 {
                let got = top.weights().data()[c * 6 + i];
                assert!((got - sol.data()[i * 2 + c]).abs() < 1e-8, "{} vs {}", got, sol.data()[i * 2 + c]);
            }
        }
        let (c, _) = quadratic_cost(&top, &data, 0.0).unwrap();
        assert!(c <= 0.5 && n == 12);
    }

    #[test]
    fn scale_invariance_of_prediction() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let w = random_top(&mut r, 3, 2, 2);
        let f = ProductFeature::from_sites(&[random_site(&mut r, 2), random_site(&mut r, 2)], 0.0, ScaleMode::Raw).unwrap();
        let (label, s) = predict(&w, &f).unwrap();
        let (label2, s2) = predict(&w, &f.clone().with_log_scale(libm::log(3.0))).unwrap();
        assert_eq!(label, label2);
        for (a, b) in s.iter().zip(&s2) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        let scaled = TopTensor::new(w.weights().clone().scaled(5.0)).unwrap();
        assert_eq!(predict(&scaled, &f).unwrap().0, label);
    }

    #[test]
    fn reducer_chunking_is_consistent() {
        let data = random_data(&mut ChaCha8Rng::seed_from_u64(6), 33, 3, 2, 3);
        let cfg = TrainConfig { max_iterations: 20, ..TrainConfig::default() };
        let a = train_top(&data, &cfg, &Sequential { chunk: 4 }).unwrap();
        let b = train_top(&data, &cfg, &Sequential { chunk: 4 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_structure() {
        let feats = vec![ProductFeature::from_sites(&[vec![1.0], vec![1.0], vec![1.0]], 0.0, ScaleMode::Raw).unwrap()];
        let data = Dataset::new(feats, vec![0], 1).unwrap();
        assert!(matches!(train_top(&data, &TrainConfig::default(), &Sequential::default()), Err(crate::Error::Argument(_))));
        let data = random_data(&mut ChaCha8Rng::seed_from_u64(7), 3, 2, 2, 2);
        assert!(matches!(quadratic_cost(&TopTensor::zeros(3, 2, 2), &data, 0.0), Err(crate::Error::Shape(_))));
    }
}

//! Supervised heads on coarse-grained features.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{arg_err, shape_err, Result};
use crate::feature_map::ProductFeature;
use crate::mps::{evaluate, Mps};
use crate::tree::TreeNetwork;

mod curtain;
mod linear;
mod top;

pub use curtain::{init_top_mps, train_curtain, CurtainModel, CurtainReport};
pub use linear::{train_linear, train_linear_with, LinearClassifier};
pub use top::{quadratic_cost, quadratic_cost_with, train_top, TopTensor};

/// Chunked map-reduce over sample indices.
///
/// Implementations must split `0..n` into the same consecutive ranges for a
/// given `n` and combine partial results in range order, so results do not
/// depend on how ranges are scheduled.
pub trait Reducer: Sync {
    /// `Σ_chunks f(range)`, each call writing into a zeroed buffer of length `len`.
    fn sum(&self, n: usize, len: usize, f: &(dyn Fn(Range<usize>, &mut [f64]) + Sync)) -> Vec<f64>;

    /// Fill `out`, `width` values per index, one range at a time.
    fn fill(&self, n: usize, width: usize, out: &mut [f64], f: &(dyn Fn(Range<usize>, &mut [f64]) + Sync));
}

/// Single-threaded [`Reducer`].
#[derive(Debug, Clone, Copy)]
pub struct Sequential {
    pub chunk: usize,
}

impl Default for Sequential {
    fn default() -> Self {
        Self { chunk: DEFAULT_CHUNK }
    }
}

pub const DEFAULT_CHUNK: usize = 256;

/// Ranges of `0..n` of length `chunk` (the last may be shorter).
pub fn chunk_ranges(n: usize, chunk: usize) -> impl Iterator<Item = Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk)).map(move |i| i * chunk..((i + 1) * chunk).min(n))
}

impl Reducer for Sequential {
    fn sum(&self, n: usize, len: usize, f: &(dyn Fn(Range<usize>, &mut [f64]) + Sync)) -> Vec<f64> {
        let mut total = vec![0.0; len];
        let mut part = vec![0.0; len];
        for r in chunk_ranges(n, self.chunk) {
            part.iter_mut().for_each(|v| *v = 0.0);
            f(r, &mut part);
            total.iter_mut().zip(&part).for_each(|(t, p)| *t += p);
        }
        total
    }

    fn fill(&self, n: usize, width: usize, out: &mut [f64], f: &(dyn Fn(Range<usize>, &mut [f64]) + Sync)) {
        for r in chunk_ranges(n, self.chunk) {
            let slot = &mut out[r.start * width..r.end * width];
            f(r, slot);
        }
    }
}

/// Labelled product features sharing one site structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<ProductFeature>,
    labels: Vec<usize>,
    classes: usize,
    dims: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<ProductFeature>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(arg_err!("empty dataset"));
        }
        if features.len() != labels.len() {
            return Err(shape_err!("{} features but {} labels", features.len(), labels.len()));
        }
        if classes == 0 {
            return Err(arg_err!("class count must be positive"));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(arg_err!("label {} at sample {} exceeds class count {}", l, i, classes));
        }
        let dims = features[0].site_dims();
        if let Some(i) = features.iter().position(|f| f.site_dims() != dims) {
            return Err(shape_err!("sample {} has dims {:?}, expected {:?}", i, features[i].site_dims(), dims));
        }
        Ok(Self { features, labels, classes, dims })
    }

    /// Drop fully truncated samples, returning the filtered set and the dropped count.
    pub fn without_truncated(self) -> Result<(Self, usize)> {
        let before = self.features.len();
        let (features, labels): (Vec<_>, Vec<_>) =
            self.features.into_iter().zip(self.labels).filter(|(f, _)| !f.is_truncated()).unzip();
        let dropped = before - features.len();
        if dropped > 0 {
            log::warn!("dropping {} fully truncated samples", dropped);
        }
        if features.is_empty() {
            return Err(arg_err!("every sample is fully truncated"));
        }
        Ok((Self { features, labels, classes: self.classes, dims: self.dims }, dropped))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[ProductFeature] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn site_dims(&self) -> &[usize] {
        &self.dims
    }
}

/// Push every sample through all tree layers.
pub fn coarse_features(tree: &TreeNetwork, samples: &[ProductFeature]) -> Result<Vec<ProductFeature>> {
    samples.iter().map(|s| tree.apply(s)).collect()
}

/// A model producing one score per label for a feature.
pub trait Scorer: Sync {
    fn classes(&self) -> usize;
    fn scores(&self, f: &ProductFeature) -> Result<Vec<f64>>;
}

impl Scorer for Mps {
    fn classes(&self) -> usize {
        self.output_dim()
    }

    fn scores(&self, f: &ProductFeature) -> Result<Vec<f64>> {
        evaluate(self, f)
    }
}

/// Index of the largest score; ties go to the smallest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted label and scores.
pub fn predict(head: &dyn Scorer, f: &ProductFeature) -> Result<(usize, Vec<f64>)> {
    let s = head.scores(f)?;
    Ok((argmax(&s), s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// `(1/2n) Σ_j Σ_ℓ (f^ℓ(x_j) − y_j^ℓ)²`.
    pub cost: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub samples: usize,
}

/// Accuracy, unregularized cost and confusion matrix of `head` on `data`.
pub fn evaluate_accuracy(head: &dyn Scorer, data: &Dataset, reducer: &dyn Reducer) -> Result<Metrics> {
    let l = data.classes();
    if head.classes() != l {
        return Err(shape_err!("model has {} outputs, dataset has {} classes", head.classes(), l));
    }
    let n = data.len();
    let mut scores = vec![0.0; n * l];
    let failed = core::sync::atomic::AtomicBool::new(false);
    reducer.fill(n, l, &mut scores, &|r, out| {
        for (j, slot) in r.zip(out.chunks_mut(l)) {
            match head.scores(&data.features[j]) {
                Ok(s) => slot.copy_from_slice(&s),
                Err(_) => failed.store(true, core::sync::atomic::Ordering::Relaxed),
            }
        }
    });
    if failed.into_inner() {
        // surface the first error deterministically
        for f in &data.features {
            head.scores(f)?;
        }
    }
    Ok(metrics_from_scores(&scores, data.labels(), l))
}

/// Metrics from a flat `n × L` score buffer.
pub fn metrics_from_scores(scores: &[f64], labels: &[usize], l: usize) -> Metrics {
    let mut confusion = vec![vec![0u64; l]; l];
    let mut err = 0.0;
    for (s, &y) in scores.chunks(l).zip(labels) {
        confusion[y][argmax(s)] += 1;
        err += squared_error(s, y);
    }
    let n = labels.len();
    let correct: u64 = (0..l).map(|c| confusion[c][c]).sum();
    Metrics { accuracy: correct as f64 / n as f64, cost: err / (2.0 * n as f64), confusion, samples: n }
}

/// `Σ_ℓ (s_ℓ − δ_{ℓ,label})²`.
pub(crate) fn squared_error(scores: &[f64], label: usize) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let d = s - if k == label { 1.0 } else { 0.0 };
            d * d
        })
        .sum()
}

/// Optimizer settings shared by the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub ridge: f64,
    pub sweeps: usize,
    pub cg_max: usize,
    pub bond_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_iterations: 300, grad_tol: 1e-6, ridge: 0.0, sweeps: 30, cg_max: 50, bond_dim: 300, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.sweeps == 0 || self.cg_max == 0 || self.bond_dim == 0 {
            return Err(arg_err!("iteration, sweep, CG and bond counts must be positive"));
        }
        if !self.ridge.is_finite() || self.ridge < 0.0 {
            return Err(arg_err!("ridge must be finite and non-negative, got {}", self.ridge));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(arg_err!("gradient tolerance must be non-negative"));
        }
        Ok(())
    }
}

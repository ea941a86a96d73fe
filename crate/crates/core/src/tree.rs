//! Layer-by-layer construction of an isometric tree from reduced covariances.
//!
//! Each layer pairs sites `(2i, 2i+1)`, accumulates the reduced covariance of
//! every pair over the training features, keeps the dominant eigenvectors as
//! an isometry, and pushes every feature through the new layer before the
//! next one is built. An odd final site passes through unchanged.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, num_err, shape_err, Result};
use crate::feature_map::{norm, LocalMap, ProductFeature, ScaleMode};
use crate::linalg::{self, eig_truncated_with, Layout, Truncation};
use crate::mps::{Mps, WeightEnvironments};
use crate::tensor::DenseTensor;

/// Largest allowed orthonormality defect of an isometry.
pub const ISOMETRY_TOLERANCE: f64 = 1e-10;

/// Coarse-graining map `U[s1, s2, t]` with orthonormal columns over `(s1, s2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Isometry {
    tensor: DenseTensor,
    truncation_error: f64,
    spectrum: Vec<f64>,
}

impl Isometry {
    /// Wrap a `d1 × d2 × D` tensor. Checks shape and the isometric constraint.
    pub fn new(tensor: DenseTensor, truncation_error: f64, spectrum: Vec<f64>) -> Result<Self> {
        let &[d1, d2, dd] = tensor.shape() else {
            return Err(shape_err!("isometry must have order 3, got shape {:?}", tensor.shape()));
        };
        if dd > d1 * d2 {
            return Err(shape_err!("isometry output {} exceeds input {}x{}", dd, d1, d2));
        }
        if !(0.0..1.0).contains(&truncation_error) {
            return Err(arg_err!("truncation error {} outside [0, 1)", truncation_error));
        }
        let iso = Self { tensor, truncation_error, spectrum };
        let defect = iso.orthonormality_defect();
        if defect > ISOMETRY_TOLERANCE {
            return Err(num_err!("isometry columns not orthonormal (defect {:e})", defect));
        }
        Ok(iso)
    }

    /// The full-rank identity map from `d1 × d2` onto `d1·d2`.
    pub fn identity(d1: usize, d2: usize) -> Self {
        let n = d1 * d2;
        let tensor = DenseTensor::identity(n).reshape(vec![d1, d2, n]).expect("identity reshape");
        Self { tensor, truncation_error: 0.0, spectrum: Vec::new() }
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.tensor.shape()[0], self.tensor.shape()[1])
    }

    pub fn out_dim(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.tensor
    }

    /// Row-major `(d1·d2) × D` matrix view.
    pub fn matrix_data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn truncation_error(&self) -> f64 {
        self.truncation_error
    }

    /// Retained eigenvalues of the unit-trace pair covariance, descending.
    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// `max |UᵀU − I|` over all entries.
    pub fn orthonormality_defect(&self) -> f64 {
        let (d1, d2) = self.in_dims();
        let (rows, cols) = (d1 * d2, self.out_dim());
        let u = self.tensor.data();
        let mut g = vec![0.0; cols * cols];
        linalg::gemm_with(cols, rows, cols, 1.0, u, Layout::transposed(cols), u, Layout::row_major(cols), 0.0, &mut g);
        let mut worst = 0.0f64;
        for i in 0..cols {
            for j in 0..cols {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max(libm::fabs(g[i * cols + j] - want));
            }
        }
        worst
    }

    /// `Uᵀ (a ⊗ b)`.
    pub fn project(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let dd = self.out_dim();
        let u = self.tensor.data();
        let mut out = vec![0.0; dd];
        let d2 = b.len();
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (j, &bj) in b.iter().enumerate() {
                let w = ai * bj;
                if w == 0.0 {
                    continue;
                }
                let row = &u[(i * d2 + j) * dd..(i * d2 + j + 1) * dd];
                for (o, r) in out.iter_mut().zip(row) {
                    *o += w * r;
                }
            }
        }
        out
    }
}

/// One coarse-graining layer: isometry `i` merges sites `2i` and `2i+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeLayer {
    isometries: Vec<Isometry>,
    in_dims: Vec<usize>,
}

impl TreeLayer {
    pub fn new(in_dims: Vec<usize>, isometries: Vec<Isometry>) -> Result<Self> {
        if in_dims.len() < 2 {
            return Err(arg_err!("a layer needs at least two input sites"));
        }
        if isometries.len() != in_dims.len() / 2 {
            return Err(shape_err!(
                "{} input sites need {} isometries, got {}",
                in_dims.len(),
                in_dims.len() / 2,
                isometries.len()
            ));
        }
        for (i, iso) in isometries.iter().enumerate() {
            if iso.in_dims() != (in_dims[2 * i], in_dims[2 * i + 1]) {
                return Err(shape_err!(
                    "isometry {} expects {:?}, sites have ({}, {})",
                    i,
                    iso.in_dims(),
                    in_dims[2 * i],
                    in_dims[2 * i + 1]
                ));
            }
        }
        Ok(Self { isometries, in_dims })
    }

    pub fn isometries(&self) -> &[Isometry] {
        &self.isometries
    }

    pub fn in_dims(&self) -> &[usize] {
        &self.in_dims
    }

    pub fn out_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.isometries.iter().map(Isometry::out_dim).collect();
        if self.passthrough() {
            dims.push(*self.in_dims.last().unwrap());
        }
        dims
    }

    /// True when the last input site is unpaired and copied through.
    pub fn passthrough(&self) -> bool {
        self.in_dims.len() % 2 == 1
    }

    pub fn in_site_count(&self) -> usize {
        self.in_dims.len()
    }

    pub fn out_site_count(&self) -> usize {
        self.in_dims.len().div_ceil(2)
    }
}

/// Per-layer bookkeeping recorded while building.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerStats {
    /// Samples accumulated into each pair covariance.
    pub pair_samples: Vec<u64>,
    /// `ln Σ_j ‖Φ_j‖²` entering the layer.
    pub log_fidelity_in: f64,
    /// `ln Σ_j ‖Φ_j‖²` after the layer.
    pub log_fidelity_out: f64,
}

/// How many layers to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerCount {
    /// Keep halving until two sites remain.
    #[default]
    Full,
    Count(usize),
}

/// Stop accumulating a layer once every pair covariance stops moving.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    /// Frobenius distance between successive unit-trace covariances.
    pub tol: f64,
    /// Samples between checks.
    pub check_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub cutoff: f64,
    pub max_dim: Option<usize>,
    pub layers: LayerCount,
    pub convergence: Option<Convergence>,
    /// Weight of the prior covariance in `[0, 1]`; 0 is purely unsupervised.
    pub mu: f64,
    /// Samples per GEMM batch during accumulation.
    pub batch_size: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            cutoff: 1e-3,
            max_dim: None,
            layers: LayerCount::Full,
            convergence: None,
            mu: 0.0,
            batch_size: 256,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cutoff) {
            return Err(arg_err!("cutoff {} outside [0, 1)", self.cutoff));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(arg_err!("mixing parameter {} outside [0, 1]", self.mu));
        }
        if self.max_dim == Some(0) {
            return Err(arg_err!("max_dim must be at least 1"));
        }
        if self.layers == LayerCount::Count(0) {
            return Err(arg_err!("layer count must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(arg_err!("batch size must be at least 1"));
        }
        if let Some(c) = self.convergence {
            if !(c.tol > 0.0) || c.check_every == 0 {
                return Err(arg_err!("convergence check needs tol > 0 and check_every > 0"));
            }
        }
        Ok(())
    }

    pub(crate) fn truncation(&self) -> Truncation {
        Truncation { cutoff: self.cutoff, max_dim: self.max_dim, extend_degenerate: true }
    }
}

/// Metadata carried alongside the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMeta {
    pub cutoff: f64,
    pub max_dim: Option<usize>,
    pub map: LocalMap,
    pub scale_mode: ScaleMode,
    pub mu: f64,
    pub stats: Vec<LayerStats>,
}

/// A stack of layers, bottom first.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNetwork {
    layers: Vec<TreeLayer>,
    input_dims: Vec<usize>,
    meta: TreeMeta,
}

impl TreeNetwork {
    pub fn new(input_dims: Vec<usize>, layers: Vec<TreeLayer>, meta: TreeMeta) -> Result<Self> {
        if input_dims.is_empty() {
            return Err(arg_err!("tree needs at least one input site"));
        }
        let mut dims = input_dims.clone();
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_dims() != dims.as_slice() {
                return Err(shape_err!(
                    "layer {} expects dims {:?}, previous layer gives {:?}",
                    l,
                    layer.in_dims(),
                    dims
                ));
            }
            dims = layer.out_dims();
        }
        Ok(Self { layers, input_dims, meta })
    }

    pub fn layers(&self) -> &[TreeLayer] {
        &self.layers
    }

    pub fn meta(&self) -> &TreeMeta {
        &self.meta
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> Vec<usize> {
        self.layers.last().map(TreeLayer::out_dims).unwrap_or_else(|| self.input_dims.clone())
    }

    /// Output site dims after each layer.
    pub fn bond_profile(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(TreeLayer::out_dims).collect()
    }

    /// Worst isometry defect over the whole tree.
    pub fn max_orthonormality_defect(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.isometries())
            .map(Isometry::orthonormality_defect)
            .fold(0.0, f64::max)
    }

    /// Push one sample through every layer.
    pub fn apply(&self, sample: &ProductFeature) -> Result<ProductFeature> {
        let mut cur = sample.clone();
        for layer in &self.layers {
            cur = apply_layer(layer, &cur)?;
        }
        Ok(cur)
    }
}

/// Reduced covariance of one site pair, `Σ_j w_j (v_a v_aᵀ) ⊗ (v_b v_bᵀ)`.
///
/// Weights are stored relative to `exp(2·max_log_scale)`, where
/// `max_log_scale` is the largest effective log-scale seen so far; the
/// accumulator is rescaled whenever that reference grows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCovariance {
    dims: (usize, usize),
    matrix: Vec<f64>,
    weight_sum: f64,
    sample_count: u64,
    max_log_scale: f64,
}

impl PairCovariance {
    /// Empty accumulator, the identity of [`merge`].
    pub fn new(d1: usize, d2: usize) -> Self {
        let n = d1 * d2;
        Self {
            dims: (d1, d2),
            matrix: vec![0.0; n * n],
            weight_sum: 0.0,
            sample_count: 0,
            max_log_scale: f64::NEG_INFINITY,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    fn side(&self) -> usize {
        self.dims.0 * self.dims.1
    }

    /// Order-4 view `(s1, s2; s1', s2')`, relative to the reference scale.
    pub fn matrix(&self) -> DenseTensor {
        let (d1, d2) = self.dims;
        DenseTensor::from_parts(vec![d1, d2, d1, d2], self.matrix.clone())
    }

    /// Matricized `(s1 s2) × (s1' s2')` view, relative to the reference scale.
    pub fn matrix_2d(&self) -> DenseTensor {
        let n = self.side();
        DenseTensor::from_parts(vec![n, n], self.matrix.clone())
    }

    /// The covariance in absolute units, `matrix · exp(2·max_log_scale)`.
    pub fn absolute_matrix_2d(&self) -> DenseTensor {
        let s = if self.sample_count == 0 { 0.0 } else { libm::exp(2.0 * self.max_log_scale) };
        self.matrix_2d().scaled(s)
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn max_log_scale(&self) -> f64 {
        self.max_log_scale
    }

    pub fn trace(&self) -> f64 {
        let n = self.side();
        (0..n).map(|i| self.matrix[i * n + i]).sum()
    }

    fn rebase(&mut self, new_ref: f64) {
        if new_ref <= self.max_log_scale {
            return;
        }
        if self.sample_count > 0 {
            let f = libm::exp(2.0 * (self.max_log_scale - new_ref));
            self.matrix.iter_mut().for_each(|v| *v *= f);
            self.weight_sum *= f;
        }
        self.max_log_scale = new_ref;
    }

    /// Add one sample's contribution for sites `(2·pair, 2·pair + 1)`.
    pub fn accumulate(&mut self, sample: &ProductFeature, pair: usize) -> Result<()> {
        let (a, b) = pair_sites(sample, pair, self.dims)?;
        if sample.is_truncated() {
            return Ok(());
        }
        let log_scale = effective_log_scale(sample, &site_log_norms(sample), pair);
        if !log_scale.is_finite() {
            return Err(num_err!("non-finite sample weight for pair {}", pair));
        }
        self.rebase(log_scale);
        let w = libm::exp(2.0 * (log_scale - self.max_log_scale));
        let n = self.side();
        let x: Vec<f64> = kron(a, b);
        for i in 0..n {
            let wi = w * x[i];
            if wi == 0.0 {
                continue;
            }
            let row = &mut self.matrix[i * n..(i + 1) * n];
            for (r, xj) in row.iter_mut().zip(&x) {
                *r += wi * xj;
            }
        }
        self.weight_sum += w;
        self.sample_count += 1;
        Ok(())
    }

    /// Add a batch of weighted pair vectors with one GEMM.
    ///
    /// `rows` holds `k` row-major vectors of length `d1·d2`, `log_scales`
    /// their effective log-scales.
    fn accumulate_rows(&mut self, rows: &mut [f64], log_scales: &[f64]) {
        let n = self.side();
        let k = log_scales.len();
        if k == 0 {
            return;
        }
        let batch_max = log_scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.rebase(batch_max);
        let mut wsum = 0.0;
        for (r, &ls) in log_scales.iter().enumerate() {
            let s = libm::exp(ls - self.max_log_scale);
            wsum += s * s;
            rows[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= s);
        }
        linalg::gemm_with(n, k, n, 1.0, rows, Layout::transposed(n), rows, Layout::row_major(n), 1.0, &mut self.matrix);
        self.weight_sum += wsum;
        self.sample_count += k as u64;
    }

    /// Rescale by a positive factor (used by tests and shard weighting).
    pub fn scale(&mut self, factor: f64) {
        self.matrix.iter_mut().for_each(|v| *v *= factor);
        self.weight_sum *= factor;
    }
}

/// Sum of two accumulators after aligning them to the larger reference scale.
pub fn merge(a: &PairCovariance, b: &PairCovariance) -> Result<PairCovariance> {
    if a.dims != b.dims {
        return Err(shape_err!("merging pair covariances of dims {:?} and {:?}", a.dims, b.dims));
    }
    if b.sample_count == 0 {
        return Ok(a.clone());
    }
    if a.sample_count == 0 {
        return Ok(b.clone());
    }
    let reference = a.max_log_scale.max(b.max_log_scale);
    let fa = libm::exp(2.0 * (a.max_log_scale - reference));
    let fb = libm::exp(2.0 * (b.max_log_scale - reference));
    let matrix = a.matrix.iter().zip(&b.matrix).map(|(x, y)| fa * x + fb * y).collect();
    Ok(PairCovariance {
        dims: a.dims,
        matrix,
        weight_sum: fa * a.weight_sum + fb * b.weight_sum,
        sample_count: a.sample_count + b.sample_count,
        max_log_scale: reference,
    })
}

/// True when the unit-trace versions of the two accumulators are within `tol` in Frobenius norm.
pub fn converged(prev: &PairCovariance, cur: &PairCovariance, tol: f64) -> Result<bool> {
    if prev.dims != cur.dims {
        return Err(shape_err!("comparing pair covariances of dims {:?} and {:?}", prev.dims, cur.dims));
    }
    let (tp, tc) = (prev.trace(), cur.trace());
    if !(tp > 0.0) || !(tc > 0.0) {
        return Err(num_err!("cannot normalize a zero-trace covariance"));
    }
    let dist2: f64 = prev
        .matrix
        .iter()
        .zip(&cur.matrix)
        .map(|(p, c)| {
            let d = p / tp - c / tc;
            d * d
        })
        .sum();
    Ok(libm::sqrt(dist2) < tol)
}

fn pair_sites(sample: &ProductFeature, pair: usize, dims: (usize, usize)) -> Result<(&[f64], &[f64])> {
    if 2 * pair + 1 >= sample.site_count() {
        return Err(arg_err!("pair {} out of range for {} sites", pair, sample.site_count()));
    }
    let (a, b) = (sample.site(2 * pair), sample.site(2 * pair + 1));
    if (a.len(), b.len()) != dims {
        return Err(shape_err!(
            "pair {} has dims ({}, {}), accumulator expects {:?}",
            pair,
            a.len(),
            b.len(),
            dims
        ));
    }
    Ok((a, b))
}

fn kron(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect()
}

fn site_log_norms(sample: &ProductFeature) -> Vec<f64> {
    if sample.mode().unit_sites() {
        vec![0.0; sample.site_count()]
    } else {
        sample.sites().map(|s| libm::log(norm(s))).collect()
    }
}

/// `c + Σ_{k ∉ pair} ln‖v_k‖`: half the log of the weight multiplying the pair outer product.
fn effective_log_scale(sample: &ProductFeature, log_norms: &[f64], pair: usize) -> f64 {
    if !sample.mode().unit_sites() {
        let total: f64 = log_norms.iter().sum();
        sample.log_scale() + total - log_norms[2 * pair] - log_norms[2 * pair + 1]
    } else {
        sample.log_scale()
    }
}

/// All pair covariances of one layer, accumulated in a single pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAccumulator {
    in_dims: Vec<usize>,
    pairs: Vec<PairCovariance>,
}

impl LayerAccumulator {
    pub fn new(in_dims: &[usize]) -> Result<Self> {
        if in_dims.len() < 2 {
            return Err(arg_err!("layer accumulation needs at least two sites"));
        }
        let pairs = (0..in_dims.len() / 2)
            .map(|p| PairCovariance::new(in_dims[2 * p], in_dims[2 * p + 1]))
            .collect();
        Ok(Self { in_dims: in_dims.to_vec(), pairs })
    }

    pub fn in_dims(&self) -> &[usize] {
        &self.in_dims
    }

    pub fn pairs(&self) -> &[PairCovariance] {
        &self.pairs
    }

    pub fn sample_count(&self) -> u64 {
        self.pairs.first().map_or(0, PairCovariance::sample_count)
    }

    fn check_dims(&self, sample: &ProductFeature) -> Result<()> {
        if sample.site_dims() != self.in_dims {
            return Err(shape_err!(
                "sample dims {:?} do not match layer dims {:?}",
                sample.site_dims(),
                self.in_dims
            ));
        }
        Ok(())
    }

    pub fn accumulate(&mut self, sample: &ProductFeature) -> Result<()> {
        self.check_dims(sample)?;
        for (p, acc) in self.pairs.iter_mut().enumerate() {
            acc.accumulate(sample, p)?;
        }
        Ok(())
    }

    /// Accumulate a slice of samples, `batch` at a time through GEMM.
    pub fn accumulate_batch(&mut self, samples: &[ProductFeature], batch: usize) -> Result<()> {
        for s in samples {
            self.check_dims(s)?;
        }
        let batch = batch.max(1);
        for chunk in samples.chunks(batch) {
            let live: Vec<&ProductFeature> = chunk.iter().filter(|s| !s.is_truncated()).collect();
            if live.is_empty() {
                continue;
            }
            let norms: Vec<Vec<f64>> = live.iter().map(|s| site_log_norms(s)).collect();
            for (p, acc) in self.pairs.iter_mut().enumerate() {
                let n = acc.side();
                let mut rows = Vec::with_capacity(n * live.len());
                let mut scales = Vec::with_capacity(live.len());
                for (s, ln) in live.iter().zip(&norms) {
                    let ls = effective_log_scale(s, ln, p);
                    if !ls.is_finite() {
                        return Err(num_err!("non-finite sample weight for pair {}", p));
                    }
                    let (a, b) = (s.site(2 * p), s.site(2 * p + 1));
                    for &x in a {
                        rows.extend(b.iter().map(|&y| x * y));
                    }
                    scales.push(ls);
                }
                acc.accumulate_rows(&mut rows, &scales);
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.in_dims != other.in_dims {
            return Err(shape_err!("merging layer accumulators of dims {:?} and {:?}", self.in_dims, other.in_dims));
        }
        let pairs = self
            .pairs
            .iter()
            .zip(&other.pairs)
            .map(|(a, b)| merge(a, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { in_dims: self.in_dims.clone(), pairs })
    }

    /// True when every pair has converged relative to `prev`.
    pub fn converged(&self, prev: &Self, tol: f64) -> Result<bool> {
        for (a, b) in prev.pairs.iter().zip(&self.pairs) {
            if !converged(a, b, tol)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Diagonalize an accumulated pair covariance into an isometry.
pub fn solve_isometry(acc: &PairCovariance, cutoff: f64, max_dim: Option<usize>) -> Result<Isometry> {
    let rule = Truncation { cutoff, max_dim, extend_degenerate: true };
    if acc.sample_count() == 0 {
        return Err(arg_err!("cannot solve an isometry from an empty accumulator"));
    }
    let trace = acc.trace();
    if !(trace > 0.0) {
        return Err(num_err!("pair covariance has zero trace"));
    }
    let (d1, d2) = acc.dims();
    isometry_from_matrix(&acc.matrix_2d().scaled(1.0 / trace), d1, d2, &rule)
}

/// Diagonalize a `(d1·d2)²` symmetric PSD matrix into an isometry.
pub fn isometry_from_matrix(m: &DenseTensor, d1: usize, d2: usize, rule: &Truncation) -> Result<Isometry> {
    let eig = eig_truncated_with(m, rule)?;
    let total: f64 = eig.eigenvalues.iter().sum();
    let spectrum = if total > 0.0 {
        eig.retained_eigenvalues().iter().map(|v| v / total).collect()
    } else {
        eig.retained_eigenvalues().to_vec()
    };
    let kept = eig.kept;
    let tensor = eig.eigenvectors.reshape(vec![d1, d2, kept])?;
    Isometry::new(tensor, eig.truncation_error, spectrum)
}

/// Coarse-grain one sample through a layer.
pub fn apply_layer(layer: &TreeLayer, sample: &ProductFeature) -> Result<ProductFeature> {
    if sample.site_dims() != layer.in_dims() {
        return Err(shape_err!(
            "sample dims {:?} do not match layer dims {:?}",
            sample.site_dims(),
            layer.in_dims()
        ));
    }
    let out_dims = layer.out_dims();
    let mode = sample.mode();
    let mut values = Vec::with_capacity(out_dims.iter().sum());
    let mut offsets = Vec::with_capacity(out_dims.len() + 1);
    offsets.push(0);

    if sample.is_truncated() {
        for &d in &out_dims {
            values.push(1.0);
            values.extend(core::iter::repeat_n(0.0, d - 1));
            offsets.push(values.len());
        }
        return Ok(ProductFeature::from_parts(values, offsets, f64::NEG_INFINITY, mode));
    }

    let mut log_scale = sample.log_scale();
    let mut dead = false;
    for (p, iso) in layer.isometries().iter().enumerate() {
        let mut v = iso.project(sample.site(2 * p), sample.site(2 * p + 1));
        let n = norm(&v);
        if n == 0.0 || !n.is_finite() {
            dead = true;
            v.iter_mut().for_each(|x| *x = 0.0);
            v[0] = 1.0;
        } else if mode.unit_sites() {
            debug_assert!(n <= 1.0 + 1e-12);
            v.iter_mut().for_each(|x| *x /= n);
            log_scale += libm::log(n);
        }
        values.extend_from_slice(&v);
        offsets.push(values.len());
    }
    if layer.passthrough() {
        values.extend_from_slice(sample.site(sample.site_count() - 1));
        offsets.push(values.len());
    }
    if dead {
        log_scale = f64::NEG_INFINITY;
    }
    Ok(ProductFeature::from_parts(values, offsets, log_scale, mode))
}

/// `ln Σ_j ‖Φ_j‖²` over a set of samples (−∞ when all vanish).
pub fn log_fidelity(samples: &[ProductFeature]) -> f64 {
    log_sum_exp(samples.iter().map(|s| 2.0 * s.log_norm()))
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(values.map(|v| libm::exp(v - m)).sum::<f64>())
}

/// Incremental tree construction.
///
/// The sequential [`build_tree`] and the parallel driver in the std crate both
/// go through this type: accumulate a [`LayerAccumulator`] for the current
/// dims, solve one isometry per pair, push the layer, coarse-grain the samples,
/// and repeat while [`TreeBuilder::needs_layer`] holds.
#[derive(Debug, Clone)]
pub struct TreeBuilder {
    config: BuildConfig,
    map: LocalMap,
    scale_mode: ScaleMode,
    input_dims: Vec<usize>,
    dims: Vec<usize>,
    layers: Vec<TreeLayer>,
    stats: Vec<LayerStats>,
    prior: Option<Mps>,
    prior_norm_sq: f64,
}

impl TreeBuilder {
    pub fn new(
        config: BuildConfig,
        map: LocalMap,
        first: &ProductFeature,
        prior: Option<Mps>,
    ) -> Result<Self> {
        config.validate()?;
        let dims = first.site_dims();
        if config.mu > 0.0 && prior.is_none() {
            return Err(arg_err!("mixing parameter {} > 0 requires a prior MPS", config.mu));
        }
        let mut prior_norm_sq = 0.0;
        if let Some(w) = &prior {
            if w.site_dims() != dims {
                return Err(shape_err!(
                    "prior MPS site dims {:?} do not match sample dims {:?}",
                    w.site_dims(),
                    dims
                ));
            }
            prior_norm_sq = w.norm_sq();
            if config.mu > 0.0 && !(prior_norm_sq > 0.0) {
                return Err(num_err!("prior MPS has zero norm"));
            }
        }
        Ok(Self {
            config,
            map,
            scale_mode: first.mode(),
            input_dims: dims.clone(),
            dims,
            layers: Vec::new(),
            stats: Vec::new(),
            prior,
            prior_norm_sq,
        })
    }

    pub fn config(&self) -> &BuildConfig {
        &self.config
    }

    pub fn current_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[TreeLayer] {
        &self.layers
    }

    pub fn needs_layer(&self) -> bool {
        if self.dims.len() <= 2 {
            return false;
        }
        match self.config.layers {
            LayerCount::Full => true,
            LayerCount::Count(r) => self.layers.len() < r,
        }
    }

    pub fn new_accumulator(&self) -> Result<LayerAccumulator> {
        LayerAccumulator::new(&self.dims)
    }

    /// Cached environments of the (coarse-grained) prior, when mixing is on.
    pub fn prior_environments(&self) -> Option<WeightEnvironments> {
        match &self.prior {
            Some(w) if self.config.mu > 0.0 => Some(WeightEnvironments::new(w)),
            _ => None,
        }
    }

    /// The matrix whose dominant eigenvectors define pair `p`'s isometry:
    /// the unit-trace data covariance, mixed with the unit-trace prior
    /// covariance when `mu > 0`.
    pub fn pair_matrix(&self, acc: &PairCovariance, p: usize, env: Option<&WeightEnvironments>) -> Result<DenseTensor> {
        let mu = self.config.mu;
        let data = if mu < 1.0 {
            if acc.sample_count() == 0 {
                return Err(arg_err!("pair {} has no accumulated samples", p));
            }
            let tr = acc.trace();
            if !(tr > 0.0) {
                return Err(num_err!("pair {} covariance has zero trace", p));
            }
            Some(acc.matrix_2d().scaled(1.0 / tr))
        } else {
            None
        };
        if mu == 0.0 {
            return Ok(data.expect("data covariance"));
        }
        let (w, env) = match (&self.prior, env) {
            (Some(w), Some(env)) => (w, env),
            _ => return Err(arg_err!("mixing requires prior environments")),
        };
        let rho_w = env.pair_covariance(w, p)?;
        let side = acc.dims().0 * acc.dims().1;
        let mut mixed = rho_w.reshape(vec![side, side])?.scaled(mu / self.prior_norm_sq);
        if let Some(d) = data {
            mixed.axpy(1.0 - mu, &d)?;
        }
        Ok(mixed)
    }

    pub fn solve_pair(&self, acc: &PairCovariance, p: usize, env: Option<&WeightEnvironments>) -> Result<Isometry> {
        let m = self.pair_matrix(acc, p, env)?;
        let (d1, d2) = acc.dims();
        isometry_from_matrix(&m, d1, d2, &self.config.truncation())
    }

    /// Append a solved layer and coarse-grain the prior through it.
    pub fn push_layer(&mut self, isometries: Vec<Isometry>, acc: &LayerAccumulator) -> Result<&TreeLayer> {
        if acc.in_dims() != self.dims.as_slice() {
            return Err(shape_err!("accumulator dims {:?} do not match builder dims {:?}", acc.in_dims(), self.dims));
        }
        let layer = TreeLayer::new(self.dims.clone(), isometries)?;
        if let Some(w) = &self.prior {
            let coarse = crate::mps::coarsen(w, &layer)?;
            self.prior_norm_sq = coarse.norm_sq();
            self.prior = Some(coarse);
        }
        self.dims = layer.out_dims();
        self.stats.push(LayerStats {
            pair_samples: acc.pairs().iter().map(PairCovariance::sample_count).collect(),
            log_fidelity_in: f64::NAN,
            log_fidelity_out: f64::NAN,
        });
        self.layers.push(layer);
        Ok(self.layers.last().unwrap())
    }

    /// Record the fidelity of the samples before and after the last pushed layer.
    pub fn record_fidelity(&mut self, log_in: f64, log_out: f64) {
        if let Some(s) = self.stats.last_mut() {
            s.log_fidelity_in = log_in;
            s.log_fidelity_out = log_out;
        }
    }

    /// The prior after all layers pushed so far.
    pub fn coarse_prior(&self) -> Option<&Mps> {
        self.prior.as_ref()
    }

    pub fn finish(self) -> Result<TreeNetwork> {
        TreeNetwork::new(
            self.input_dims,
            self.layers,
            TreeMeta {
                cutoff: self.config.cutoff,
                max_dim: self.config.max_dim,
                map: self.map,
                scale_mode: self.scale_mode,
                mu: self.config.mu,
                stats: self.stats,
            },
        )
    }
}

/// Sequential tree build. `samples` are coarse-grained in place, so on
/// return they hold the top-level features.
pub fn build_tree(
    samples: &mut [ProductFeature],
    map: LocalMap,
    config: &BuildConfig,
    prior: Option<Mps>,
) -> Result<TreeNetwork> {
    let first = samples.first().ok_or_else(|| arg_err!("empty sample set"))?;
    let mut builder = TreeBuilder::new(config.clone(), map, first, prior)?;
    for s in samples.iter() {
        if s.site_dims() != builder.current_dims() {
            return Err(shape_err!("samples do not share a site structure"));
        }
    }
    while builder.needs_layer() {
        let acc = accumulate_layer(&builder, samples)?;
        let env = builder.prior_environments();
        let isometries = (0..acc.pairs().len())
            .map(|p| builder.solve_pair(&acc.pairs()[p], p, env.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let log_in = log_fidelity(samples);
        let layer = builder.push_layer(isometries, &acc)?.clone();
        for s in samples.iter_mut() {
            *s = apply_layer(&layer, s)?;
        }
        builder.record_fidelity(log_in, log_fidelity(samples));
    }
    builder.finish()
}

fn accumulate_layer(builder: &TreeBuilder, samples: &[ProductFeature]) -> Result<LayerAccumulator> {
    let cfg = builder.config();
    let mut acc = builder.new_accumulator()?;
    if builder.config().mu >= 1.0 {
        acc.accumulate_batch(&samples[..1], 1)?;
        return Ok(acc);
    }
    match cfg.convergence {
        None => acc.accumulate_batch(samples, cfg.batch_size)?,
        Some(conv) => {
            let mut prev: Option<LayerAccumulator> = None;
            for chunk in samples.chunks(conv.check_every) {
                acc.accumulate_batch(chunk, cfg.batch_size)?;
                if let Some(p) = &prev {
                    if acc.converged(p, conv.tol)? {
                        log::info!("layer covariances converged after {} samples", acc.sample_count());
                        break;
                    }
                }
                prev = Some(acc.clone());
            }
        }
    }
    Ok(acc)
}

//! Tensor-product feature maps kept in rank-1 (product) form.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, num_err, shape_err, Error, Result};
use crate::tensor::DenseTensor;

/// Inputs this far outside `[0, 1]` are clamped with a warning instead of rejected.
pub const CLAMP_SLACK: f64 = 1e-9;
/// Default element limit for [`dense_feature`].
pub const DENSE_LIMIT: usize = 1 << 20;

/// Per-component feature map `φ(x)` with `d = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LocalMap {
    /// `φ(x) = [1, x]`
    #[default]
    Affine,
    /// `φ(x) = [cos(πx/2), sin(πx/2)]`
    Trig,
}

impl LocalMap {
    pub const fn dim(self) -> usize {
        2
    }

    pub fn eval(self, x: f64) -> [f64; 2] {
        match self {
            LocalMap::Affine => [1.0, x],
            LocalMap::Trig => {
                let a = core::f64::consts::FRAC_PI_2 * x;
                [libm::cos(a), libm::sin(a)]
            }
        }
    }

    /// Coefficients `u` with `u·φ(x) = 1` for every `x`, if the map has a constant component.
    pub fn unit_functional(self) -> Option<[f64; 2]> {
        match self {
            LocalMap::Affine => Some([1.0, 0.0]),
            LocalMap::Trig => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LocalMap::Affine => "affine",
            LocalMap::Trig => "trig",
        }
    }
}

impl core::str::FromStr for LocalMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(LocalMap::Affine),
            "trig" => Ok(LocalMap::Trig),
            other => Err(arg_err!("unknown local map '{}'", other)),
        }
    }
}

/// How site vectors carry their scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScaleMode {
    /// Unit site vectors, norms folded into the log-scale.
    #[default]
    UnitLocal,
    /// Site vectors stored as produced, log-scale starts at 0.
    Raw,
    /// Unit site vectors with the initial norms dropped: every sample starts
    /// as a unit-norm feature vector. Coarse-graining losses still
    /// accumulate in the log-scale as in `UnitLocal`.
    Normalized,
}

impl ScaleMode {
    pub fn unit_sites(self) -> bool {
        !matches!(self, ScaleMode::Raw)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleMode::UnitLocal => "unit-local",
            ScaleMode::Raw => "raw",
            ScaleMode::Normalized => "normalized",
        }
    }
}

impl core::str::FromStr for ScaleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit-local" | "unit_local" => Ok(ScaleMode::UnitLocal),
            "raw" => Ok(ScaleMode::Raw),
            "normalized" => Ok(ScaleMode::Normalized),
            other => Err(arg_err!("unknown scale mode '{}'", other)),
        }
    }
}

/// A feature vector `e^c · (v_1 ⊗ v_2 ⊗ … ⊗ v_N)`.
///
/// Site vectors are stored back to back; site `k` occupies
/// `values[offsets[k]..offsets[k + 1]]`. A log-scale of `-inf` marks a sample
/// that was projected to zero by a coarse-graining layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductFeature {
    values: Vec<f64>,
    offsets: Vec<usize>,
    log_scale: f64,
    mode: ScaleMode,
}

impl ProductFeature {
    /// Assemble from explicit site vectors. In unit modes each site is
    /// normalized and the norms are folded into `log_scale`.
    pub fn from_sites(sites: &[Vec<f64>], log_scale: f64, mode: ScaleMode) -> Result<Self> {
        if sites.is_empty() {
            return Err(arg_err!("product feature needs at least one site"));
        }
        if log_scale.is_nan() || log_scale == f64::INFINITY {
            return Err(num_err!("invalid log-scale {}", log_scale));
        }
        let mut values = Vec::with_capacity(sites.iter().map(Vec::len).sum());
        let mut offsets = Vec::with_capacity(sites.len() + 1);
        offsets.push(0);
        let mut c = log_scale;
        for (k, s) in sites.iter().enumerate() {
            if s.is_empty() {
                return Err(shape_err!("site {} is empty", k));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(num_err!("non-finite entry in site {}", k));
            }
            if mode.unit_sites() {
                let norm = norm(s);
                if norm == 0.0 {
                    values.push(1.0);
                    values.extend(core::iter::repeat_n(0.0, s.len() - 1));
                    c = f64::NEG_INFINITY;
                } else {
                    values.extend(s.iter().map(|v| v / norm));
                    c += libm::log(norm);
                }
            } else {
                values.extend_from_slice(s);
            }
            offsets.push(values.len());
        }
        Ok(Self { values, offsets, log_scale: c, mode })
    }

    pub(crate) fn from_parts(values: Vec<f64>, offsets: Vec<usize>, log_scale: f64, mode: ScaleMode) -> Self {
        Self { values, offsets, log_scale, mode }
    }

    pub fn site_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn site(&self, k: usize) -> &[f64] {
        &self.values[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn site_dim(&self, k: usize) -> usize {
        self.offsets[k + 1] - self.offsets[k]
    }

    pub fn site_dims(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn sites(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.offsets.windows(2).map(move |w| &self.values[w[0]..w[1]])
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn mode(&self) -> ScaleMode {
        self.mode
    }

    /// True once a layer projected this sample onto zero.
    pub fn is_truncated(&self) -> bool {
        self.log_scale == f64::NEG_INFINITY
    }

    /// Natural log of the full feature norm, `c + Σ_k ln‖v_k‖`.
    pub fn log_norm(&self) -> f64 {
        if self.is_truncated() {
            return f64::NEG_INFINITY;
        }
        if self.mode.unit_sites() {
            return self.log_scale;
        }
        self.log_scale + self.sites().map(|s| libm::log(norm(s))).sum::<f64>()
    }

    /// `e^c`, the overall multiplier.
    pub fn scale_factor(&self) -> f64 {
        libm::exp(self.log_scale)
    }

    /// Same feature with the log-scale replaced.
    pub fn with_log_scale(mut self, log_scale: f64) -> Self {
        self.log_scale = log_scale;
        self
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    libm::sqrt(crate::linalg::dot(v, v))
}

/// Lift an input vector with entries in `[0, 1]` into product form.
pub fn map_input(x: &[f64], map: LocalMap, mode: ScaleMode) -> Result<ProductFeature> {
    if x.is_empty() {
        return Err(arg_err!("input vector is empty"));
    }
    let d = map.dim();
    let mut values = Vec::with_capacity(d * x.len());
    let mut offsets = Vec::with_capacity(x.len() + 1);
    offsets.push(0);
    // Neumaier-compensated sum of the log norms
    let (mut c, mut comp) = (0.0f64, 0.0f64);
    for (k, &raw) in x.iter().enumerate() {
        if !raw.is_finite() || raw < -CLAMP_SLACK || raw > 1.0 + CLAMP_SLACK {
            return Err(Error::Domain(alloc::format!("input entry {} = {} outside [0, 1]", k, raw)));
        }
        let xk = if (0.0..=1.0).contains(&raw) {
            raw
        } else {
            log::warn!("clamping input entry {} = {:e} into [0, 1]", k, raw);
            raw.clamp(0.0, 1.0)
        };
        let phi = map.eval(xk);
        if mode.unit_sites() {
            let n = libm::sqrt(phi[0] * phi[0] + phi[1] * phi[1]);
            values.push(phi[0] / n);
            values.push(phi[1] / n);
            let term = libm::log(n);
            let t = c + term;
            comp += if libm::fabs(c) >= libm::fabs(term) { (c - t) + term } else { (term - t) + c };
            c = t;
        } else {
            values.extend_from_slice(&phi);
        }
        offsets.push(values.len());
    }
    c += comp;
    if mode == ScaleMode::Normalized {
        c = 0.0;
    }
    Ok(ProductFeature { values, offsets, log_scale: c, mode })
}

/// Flatten a `height × width` image given as rows, first row first.
pub fn rasterize(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let width = rows.first().map(Vec::len).unwrap_or(0);
    if width == 0 {
        return Err(arg_err!("cannot rasterize an empty image"));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != width) {
        return Err(shape_err!("row {} has length {}, expected {}", r, rows[r].len(), width));
    }
    Ok(rows.iter().flat_map(|r| r.iter().copied()).collect())
}

/// Scale 8-bit pixel intensities to `[0, 1]`.
pub fn scale_pixels(pixels: &[u8]) -> Vec<f64> {
    pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
}

/// Expand a product feature into its explicit order-N tensor. Test and debugging aid.
pub fn dense_feature(f: &ProductFeature, limit: usize) -> Result<DenseTensor> {
    let dims = f.site_dims();
    let mut total: usize = 1;
    for &d in &dims {
        total = total
            .checked_mul(d)
            .filter(|&t| t <= limit)
            .ok_or_else(|| Error::Capacity(alloc::format!("dense feature of dims {:?} exceeds {}", dims, limit)))?;
    }
    let mut data = vec![f.scale_factor()];
    for s in f.sites() {
        let mut next = Vec::with_capacity(data.len() * s.len());
        for &a in &data {
            next.extend(s.iter().map(|&b| a * b));
        }
        data = next;
    }
    DenseTensor::new(dims, data)
}

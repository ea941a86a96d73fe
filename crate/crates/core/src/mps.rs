//! Matrix product states over product-feature sites.
//!
//! Tensor `k` has shape `(bond_k, site_dim_k, bond_{k+1})` with outer bonds
//! of size 1. A multi-output MPS carries its label index on the last tensor,
//! which then has shape `(bond_{N-1}, site_dim, 1, L)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::feature_map::{LocalMap, ProductFeature};
use crate::linalg::{self, Layout};
use crate::tensor::{contract, DenseTensor};
use crate::tree::TreeLayer;

#[derive(Debug, Clone, PartialEq)]
pub struct Mps {
    tensors: Vec<DenseTensor>,
    label_dim: Option<usize>,
}

impl Mps {
    pub fn new(tensors: Vec<DenseTensor>, label_dim: Option<usize>) -> Result<Self> {
        let n = tensors.len();
        if n == 0 {
            return Err(arg_err!("an MPS needs at least one tensor"));
        }
        let mut left = 1;
        for (k, t) in tensors.iter().enumerate() {
            let last = k + 1 == n;
            let want_order = if last && label_dim.is_some() { 4 } else { 3 };
            if t.order() != want_order {
                return Err(shape_err!("MPS tensor {} has order {}, expected {}", k, t.order(), want_order));
            }
            let s = t.shape();
            if s[0] != left {
                return Err(shape_err!("MPS tensor {} left bond {} does not match {}", k, s[0], left));
            }
            if last && s[2] != 1 {
                return Err(shape_err!("last MPS tensor must have right bond 1, got {}", s[2]));
            }
            if let (true, Some(l)) = (last, label_dim) {
                if s[3] != l {
                    return Err(shape_err!("label index has dim {}, expected {}", s[3], l));
                }
            }
            left = s[2];
        }
        Ok(Self { tensors, label_dim })
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.tensors
    }

    pub fn site_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn site_dims(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.shape()[1]).collect()
    }

    /// `N + 1` bond dims, including the trivial outer ones.
    pub fn bond_dims(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.tensors.iter().map(|t| t.shape()[0]).collect();
        b.push(1);
        b
    }

    pub fn label_dim(&self) -> Option<usize> {
        self.label_dim
    }

    /// Number of model outputs: the label dimension, or 1.
    pub fn output_dim(&self) -> usize {
        self.label_dim.unwrap_or(1)
    }

    /// Right bond of tensor `k` with the label folded in.
    pub(crate) fn fused_right(&self, k: usize) -> usize {
        let s = self.tensors[k].shape();
        if k + 1 == self.tensors.len() {
            self.output_dim()
        } else {
            s[2]
        }
    }

    /// Zero-filled MPS with the given shape (useful as a base for tests).
    pub fn zeros(site_dims: &[usize], bonds: &[usize], label_dim: Option<usize>) -> Result<Self> {
        if bonds.len() + 1 != site_dims.len() {
            return Err(arg_err!("{} sites need {} inner bonds", site_dims.len(), site_dims.len().saturating_sub(1)));
        }
        let tensors = (0..site_dims.len())
            .map(|k| tensor_shape(site_dims, bonds, label_dim, k))
            .map(DenseTensor::zeros)
            .collect();
        Self::new(tensors, label_dim)
    }

    /// Random MPS with entries uniform in `[-scale, scale]`. Inner bonds are
    /// capped at what the site dims (and label) on either side can support.
    pub fn random<R: Rng + ?Sized>(
        site_dims: &[usize],
        max_bond: usize,
        label_dim: Option<usize>,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bonds = capped_bonds(site_dims, max_bond, label_dim.unwrap_or(1));
        let mut mps = Self::zeros(site_dims, &bonds, label_dim)?;
        for t in mps.tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..=scale));
        }
        Ok(mps)
    }

    /// `Σ_ℓ ‖W^ℓ‖²`.
    pub fn norm_sq(&self) -> f64 {
        let mut env = vec![1.0];
        for k in 0..self.tensors.len() {
            env = left_step(&env, &self.tensors[k], self.tensors[k].shape()[0], self.tensors[k].shape()[1], self.fused_right(k));
        }
        env.iter().enumerate().filter(|(i, _)| i % (self.output_dim() + 1) == 0).map(|(_, v)| v).sum()
    }

    /// Explicit order-N tensor (with a trailing label index when present).
    /// Test oracle only; size grows as `Π d_k`.
    pub fn to_dense(&self) -> DenseTensor {
        let mut acc = DenseTensor::from_parts(vec![1], vec![1.0]);
        for t in &self.tensors {
            let order = acc.order();
            acc = contract(&acc, t, &[(order - 1, 0)]).expect("mps chain");
        }
        let mut shape = acc.shape().to_vec();
        shape.remove(self.tensors.len());
        acc.reshape(shape).expect("dense reshape")
    }

    /// Build a label-indexed MPS whose slice `ℓ` equals `parts[ℓ]` (direct sum of bonds).
    pub fn stack_labels(parts: &[Mps]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| arg_err!("no MPS to stack"))?;
        let dims = first.site_dims();
        if parts.iter().any(|p| p.site_dims() != dims || p.label_dim.is_some()) {
            return Err(shape_err!("stacked MPS must share site dims and carry no label"));
        }
        let n = dims.len();
        let l = parts.len();
        if n == 1 {
            let mut t = DenseTensor::zeros(vec![1, dims[0], 1, l]);
            for (c, p) in parts.iter().enumerate() {
                for s in 0..dims[0] {
                    t.data_mut()[s * l + c] = p.tensors[0].data()[s];
                }
            }
            return Self::new(vec![t], Some(l));
        }
        let bonds: Vec<Vec<usize>> = parts.iter().map(|p| p.bond_dims()).collect();
        let total: Vec<usize> = (0..=n).map(|k| bonds.iter().map(|b| b[k]).sum()).collect();
        let mut tensors = Vec::with_capacity(n);
        for k in 0..n {
            let d = dims[k];
            let (bl, br) = (if k == 0 { 1 } else { total[k] }, if k + 1 == n { 1 } else { total[k + 1] });
            let mut t = if k + 1 == n { DenseTensor::zeros(vec![bl, d, 1, l]) } else { DenseTensor::zeros(vec![bl, d, br]) };
            let (mut off_l, mut off_r) = (0, 0);
            for (c, p) in parts.iter().enumerate() {
                let src = &p.tensors[k];
                let (pl, pr) = (src.shape()[0], src.shape()[2]);
                for a in 0..pl {
                    for s in 0..d {
                        for b in 0..pr {
                            let v = src.data()[(a * d + s) * pr + b];
                            let row = if k == 0 { 0 } else { off_l + a };
                            if k + 1 == n {
                                t.data_mut()[(row * d + s) * l + c] = v;
                            } else {
                                let col = off_r + b;
                                t.data_mut()[(row * d + s) * br + col] = v;
                            }
                        }
                    }
                }
                off_l += pl;
                off_r += pr;
            }
            tensors.push(t);
        }
        Self::new(tensors, Some(l))
    }
}

fn tensor_shape(site_dims: &[usize], bonds: &[usize], label: Option<usize>, k: usize) -> Vec<usize> {
    let n = site_dims.len();
    let bl = if k == 0 { 1 } else { bonds[k - 1] };
    if k + 1 == n {
        match label {
            Some(l) => vec![bl, site_dims[k], 1, l],
            None => vec![bl, site_dims[k], 1],
        }
    } else {
        vec![bl, site_dims[k], bonds[k]]
    }
}

/// Inner bonds `min(max_bond, Π_{left} d, Π_{right} d · L)`.
pub(crate) fn capped_bonds(site_dims: &[usize], max_bond: usize, labels: usize) -> Vec<usize> {
    let n = site_dims.len();
    let mut bonds = vec![max_bond.max(1); n.saturating_sub(1)];
    let mut left = 1usize;
    for k in 0..n.saturating_sub(1) {
        left = left.saturating_mul(site_dims[k]);
        bonds[k] = bonds[k].min(left);
    }
    let mut right = labels;
    for k in (0..n.saturating_sub(1)).rev() {
        right = right.saturating_mul(site_dims[k + 1]);
        bonds[k] = bonds[k].min(right);
    }
    bonds
}

/// `E' = Σ_s A_sᵀ E A_s`, with `A` viewed as `(bl, d, br)` and `E` as `bl × bl`.
fn left_step(env: &[f64], a: &DenseTensor, bl: usize, d: usize, br: usize) -> Vec<f64> {
    // tmp[a', (s, b)] = Σ_a E[a, a'] A[a, (s, b)]
    let mut tmp = vec![0.0; bl * d * br];
    linalg::gemm_with(bl, bl, d * br, 1.0, env, Layout::transposed(bl), a.data(), Layout::row_major(d * br), 0.0, &mut tmp);
    // out[b, b'] = Σ_{a', s} A[a', s, b] tmp[a', s, b']
    let mut out = vec![0.0; br * br];
    linalg::gemm_with(br, bl * d, br, 1.0, a.data(), Layout::transposed(br), &tmp, Layout::row_major(br), 0.0, &mut out);
    out
}

/// `E' = Σ_s A_s E A_sᵀ`, with `E` as `br × br`.
fn right_step(env: &[f64], a: &DenseTensor, bl: usize, d: usize, br: usize) -> Vec<f64> {
    // tmp[(a, s), b'] = Σ_b A[(a, s), b] E[b, b']
    let mut tmp = vec![0.0; bl * d * br];
    linalg::gemm(bl * d, br, br, 1.0, a.data(), env, 0.0, &mut tmp);
    // out[a, a'] = Σ_{s, b'} tmp[a, (s, b')] A[a', (s, b')]
    let mut out = vec![0.0; bl * bl];
    linalg::gemm_with(bl, d * br, bl, 1.0, &tmp, Layout::row_major(d * br), a.data(), Layout::transposed(d * br), 0.0, &mut out);
    out
}

/// Left and right boundary environments of `W W†`, cached for pair reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEnvironments {
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
}

impl WeightEnvironments {
    /// `left[k]` contracts sites `< k`; `right[k]` contracts sites `>= k`
    /// (the label index summed on the last tensor).
    pub fn new(w: &Mps) -> Self {
        let n = w.site_count();
        let mut left = Vec::with_capacity(n + 1);
        left.push(vec![1.0]);
        for k in 0..n {
            let t = &w.tensors[k];
            let next = left_step(&left[k], t, t.shape()[0], t.shape()[1], w.fused_right(k));
            left.push(next);
        }
        let mut right = vec![Vec::new(); n + 1];
        let l = w.output_dim();
        let mut id = vec![0.0; l * l];
        (0..l).for_each(|i| id[i * l + i] = 1.0);
        right[n] = id;
        for k in (0..n).rev() {
            let t = &w.tensors[k];
            right[k] = right_step(&right[k + 1], t, t.shape()[0], t.shape()[1], w.fused_right(k));
        }
        Self { left, right }
    }

    /// Reduced `ρ_W` on sites `(2·pair, 2·pair + 1)` as an order-4 tensor `(s1, s2, s1', s2')`.
    pub fn pair_covariance(&self, w: &Mps, pair: usize) -> Result<DenseTensor> {
        let n = w.site_count();
        if 2 * pair + 1 >= n {
            return Err(arg_err!("pair {} out of range for an MPS of {} sites", pair, n));
        }
        let (i, j) = (2 * pair, 2 * pair + 1);
        let theta = two_site(w, i)?; // (bl, d1, d2, br)
        let (bl, d1, d2, br) = (theta.shape()[0], theta.shape()[1], theta.shape()[2], theta.shape()[3]);
        let lenv = DenseTensor::from_parts(vec![bl, bl], self.left[i].clone());
        let renv = DenseTensor::from_parts(vec![br, br], self.right[j + 1].clone());
        // (a', s1, s2, b)
        let y = contract(&lenv, &theta, &[(0, 0)])?;
        // (a', s1, s2, b')
        let y = contract(&y, &renv, &[(3, 0)])?;
        // (s1, s2, s1', s2')
        let rho = contract(&y, &theta, &[(0, 0), (3, 3)])?;
        debug_assert_eq!(rho.shape(), &[d1, d2, d1, d2]);
        Ok(rho)
    }
}

/// Merged tensor of sites `i, i+1` as `(bl, d1, d2, br_fused)`.
fn two_site(w: &Mps, i: usize) -> Result<DenseTensor> {
    let a = &w.tensors[i];
    let b = &w.tensors[i + 1];
    let (bl, d1, m) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (d2, br) = (b.shape()[1], w.fused_right(i + 1));
    let b3 = DenseTensor::from_parts(vec![m, d2, br], b.data().to_vec());
    let t = contract(&DenseTensor::from_parts(vec![bl, d1, m], a.data().to_vec()), &b3, &[(2, 0)])?;
    Ok(t)
}

/// Reduced covariance of `W W†` on one site pair (label summed).
pub fn pair_covariance_w(w: &Mps, pair: usize) -> Result<DenseTensor> {
    WeightEnvironments::new(w).pair_covariance(w, pair)
}

/// Contract the MPS with a product feature: `e^c · W·(v_1 ⊗ … ⊗ v_N)`.
pub fn evaluate(w: &Mps, f: &ProductFeature) -> Result<Vec<f64>> {
    if f.site_dims() != w.site_dims() {
        return Err(shape_err!("feature dims {:?} do not match MPS dims {:?}", f.site_dims(), w.site_dims()));
    }
    let mut carry = vec![1.0];
    for (k, t) in w.tensors.iter().enumerate() {
        let (bl, d, br) = (t.shape()[0], t.shape()[1], w.fused_right(k));
        let v = f.site(k);
        // m[a, b] = Σ_s A[a, s, b] v[s], then carry' = carry · m
        let mut next = vec![0.0; br];
        for a in 0..bl {
            let ca = carry[a];
            if ca == 0.0 {
                continue;
            }
            for (s, &vs) in v.iter().enumerate() {
                let coef = ca * vs;
                if coef == 0.0 {
                    continue;
                }
                let row = &t.data()[(a * d + s) * br..(a * d + s + 1) * br];
                for (o, r) in next.iter_mut().zip(row) {
                    *o += coef * r;
                }
            }
        }
        carry = next;
    }
    let scale = f.scale_factor();
    carry.iter_mut().for_each(|v| *v *= scale);
    Ok(carry)
}

/// MPS computing `Σ_n Σ_s V[n][s] φ^s(x_n) + bias` for a product feature of `φ(x)`.
///
/// Bond dimension 2: state 1 means "term not yet emitted", state 0 means
/// "term emitted". Propagating a state through a site multiplies by the
/// map's unit functional `u` (`u·φ(x) = 1`); switching from 1 to 0 emits
/// `V[n]·φ(x_n)`. The bias enters on the first tensor. Maps without a
/// constant component can only be lifted for a single site without bias.
pub fn lift_extended(v: &[Vec<f64>], bias: f64, map: LocalMap) -> Result<Mps> {
    let n = v.len();
    if n == 0 {
        return Err(arg_err!("cannot lift an empty classifier"));
    }
    let d = map.dim();
    if let Some(k) = v.iter().position(|row| row.len() != d) {
        return Err(arg_err!("row {} of V has length {}, map dimension is {}", k, v[k].len(), d));
    }
    if v.iter().flatten().any(|x| !x.is_finite()) || !bias.is_finite() {
        return Err(crate::error::num_err!("non-finite classifier weight"));
    }
    let unit = match map.unit_functional() {
        Some(u) => u,
        None if n == 1 && bias == 0.0 => [0.0; 2],
        None => return Err(arg_err!("local map '{}' has no constant component to carry a sum", map.name())),
    };
    if n == 1 {
        let data: Vec<f64> = (0..d).map(|s| v[0][s] + bias * unit[s]).collect();
        return Mps::new(vec![DenseTensor::new(vec![1, d, 1], data)?], None);
    }
    let mut tensors = Vec::with_capacity(n);
    // first: row "pending" of the interior tensor, bias added to the emitted column
    let mut first = DenseTensor::zeros(vec![1, d, 2]);
    for s in 0..d {
        first.data_mut()[s * 2] = v[0][s] + bias * unit[s];
        first.data_mut()[s * 2 + 1] = unit[s];
    }
    tensors.push(first);
    for row in &v[1..n - 1] {
        let mut t = DenseTensor::zeros(vec![2, d, 2]);
        for s in 0..d {
            // [a=0 emitted -> 0] u_s ; [a=1 pending -> 0] V_s ; [a=1 -> 1] u_s
            t.data_mut()[s * 2] = unit[s];
            t.data_mut()[(d + s) * 2] = row[s];
            t.data_mut()[(d + s) * 2 + 1] = unit[s];
        }
        tensors.push(t);
    }
    // last: column "emitted"
    let mut last = DenseTensor::zeros(vec![2, d, 1]);
    for s in 0..d {
        last.data_mut()[s] = unit[s];
        last.data_mut()[d + s] = v[n - 1][s];
    }
    tensors.push(last);
    Mps::new(tensors, None)
}

/// Lift `f(x) = V·x + bias` to an MPS over the affine map `φ(x) = [1, x]`.
pub fn lift_linear(v: &[f64], bias: f64, map: LocalMap) -> Result<Mps> {
    if map != LocalMap::Affine {
        return Err(arg_err!("linear lift requires the affine local map"));
    }
    let rows: Vec<Vec<f64>> = v.iter().map(|&x| vec![0.0, x]).collect();
    lift_extended(&rows, bias, map)
}

/// Lift one linear classifier per label and stack them under a label index.
pub fn lift_linear_classes(weights: &[Vec<f64>], biases: &[f64], map: LocalMap) -> Result<Mps> {
    if weights.len() != biases.len() {
        return Err(arg_err!("{} weight vectors but {} biases", weights.len(), biases.len()));
    }
    let parts = weights
        .iter()
        .zip(biases)
        .map(|(v, &b)| lift_linear(v, b, map))
        .collect::<Result<Vec<_>>>()?;
    Mps::stack_labels(&parts)
}

/// Contract each isometry of `layer` into the matching pair of MPS tensors.
pub fn coarsen(w: &Mps, layer: &TreeLayer) -> Result<Mps> {
    if w.site_dims() != layer.in_dims() {
        return Err(shape_err!("MPS dims {:?} do not match layer dims {:?}", w.site_dims(), layer.in_dims()));
    }
    let n = w.site_count();
    let mut tensors = Vec::with_capacity(layer.out_site_count());
    for (p, iso) in layer.isometries().iter().enumerate() {
        let i = 2 * p;
        let theta = two_site(w, i)?; // (bl, d1, d2, br)
        // (bl, br, t) -> (bl, t, br)
        let t = contract(&theta, iso.tensor(), &[(1, 0), (2, 1)])?.permute(&[0, 2, 1])?;
        let is_last = i + 2 == n;
        let t = match (is_last, w.label_dim) {
            (true, Some(l)) => {
                let s = t.shape().to_vec();
                t.reshape(vec![s[0], s[1], 1, l])?
            }
            _ => t,
        };
        tensors.push(t);
    }
    if layer.passthrough() {
        tensors.push(w.tensors[n - 1].clone());
    }
    Mps::new(tensors, w.label_dim)
}

//! Tree curtain: a partial tree with an MPS head trained by single-site ALS.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Reducer, Scorer, TrainConfig};
use crate::error::{arg_err, num_err, shape_err, Result};
use crate::feature_map::ProductFeature;
use crate::linalg::{self, Layout};
use crate::mps::{capped_bonds, evaluate, Mps};
use crate::tree::TreeNetwork;

const INIT_NOISE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct CurtainModel {
    tree: TreeNetwork,
    top: Mps,
}

impl CurtainModel {
    pub fn new(tree: TreeNetwork, top: Mps) -> Result<Self> {
        if top.site_dims() != tree.output_dims() {
            return Err(shape_err!("top MPS dims {:?} do not match tree outputs {:?}", top.site_dims(), tree.output_dims()));
        }
        if top.label_dim().is_none() {
            return Err(arg_err!("top MPS needs a label index"));
        }
        Ok(Self { tree, top })
    }

    pub fn tree(&self) -> &TreeNetwork {
        &self.tree
    }

    pub fn top(&self) -> &Mps {
        &self.top
    }

    pub fn into_parts(self) -> (TreeNetwork, Mps) {
        (self.tree, self.top)
    }

    /// Scores for an input-level feature.
    pub fn scores_input(&self, f: &ProductFeature) -> Result<Vec<f64>> {
        evaluate(&self.top, &self.tree.apply(f)?)
    }
}

/// Top MPS with inner bonds capped at `bond_dim`, each tensor the identity
/// on its bond routed through site state 0, plus seeded uniform noise.
pub fn init_top_mps(site_dims: &[usize], bond_dim: usize, classes: usize, seed: u64) -> Result<Mps> {
    let bonds = capped_bonds(site_dims, bond_dim, classes);
    let mut mps = Mps::zeros(site_dims, &bonds, Some(classes))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = site_dims.len();
    for (k, t) in mps.tensors_mut().iter_mut().enumerate() {
        let s = t.shape().to_vec();
        let (bl, d) = (s[0], s[1]);
        let br = if k + 1 == n { classes } else { s[2] };
        let data = t.data_mut();
        data.iter_mut().for_each(|v| *v = rng.random_range(-INIT_NOISE..=INIT_NOISE));
        for a in 0..bl.min(br) {
            data[(a * d) * br + a] += 1.0;
        }
    }
    Ok(mps)
}

/// Costs recorded during [`train_curtain`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurtainReport {
    /// Cost before the first solve, then after every local solve.
    pub local_costs: Vec<f64>,
    /// Cost at the end of each sweep.
    pub sweep_costs: Vec<f64>,
    /// Sites of each local solve, in order.
    pub solve_sites: Vec<usize>,
}

/// Per-sample environments of the current top MPS.
struct Environments {
    /// `left[k]`: `n × bl_k` contraction of sites `< k`, scaled by `e^c`.
    left: Vec<Vec<f64>>,
    /// `right[k]`: `n × (br_k × L)` contraction of sites `> k` with the label.
    right: Vec<Vec<f64>>,
}

/// `M_k(v)[a, b] = Σ_s A[a, s, b] v[s]`.
fn site_matrix(t: &[f64], bl: usize, d: usize, br: usize, v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for a in 0..bl {
        for (s, &vs) in v.iter().enumerate() {
            if vs == 0.0 {
                continue;
            }
            let row = &t[(a * d + s) * br..(a * d + s + 1) * br];
            out[a * br..(a + 1) * br].iter_mut().zip(row).for_each(|(o, r)| *o += vs * r);
        }
    }
}

struct Sweeper<'a> {
    data: &'a Dataset,
    reducer: &'a dyn Reducer,
    lambda: f64,
    classes: usize,
    n_sites: usize,
}

impl Sweeper<'_> {
    fn shape(&self, w: &Mps, k: usize) -> (usize, usize, usize) {
        let s = w.tensors()[k].shape();
        (s[0], s[1], w.fused_right(k))
    }

    fn init_envs(&self, w: &Mps) -> Environments {
        let n = self.data.len();
        let l = self.classes;
        let feats = self.data.features();
        let mut left = vec![Vec::new(); self.n_sites];
        left[0] = feats.iter().map(|f| f.scale_factor()).collect();
        let mut right = vec![Vec::new(); self.n_sites];
        let mut id = vec![0.0; n * l * l];
        for j in 0..n {
            (0..l).for_each(|c| id[j * l * l + c * l + c] = 1.0);
        }
        right[self.n_sites - 1] = id;
        for k in (1..self.n_sites).rev() {
            right[k - 1] = self.push_right(w, k, &right[k]);
        }
        Environments { left, right }
    }

    /// `right[k-1][j] = M_k(v_j) · right[k][j]`.
    fn push_right(&self, w: &Mps, k: usize, right_k: &[f64]) -> Vec<f64> {
        let (bl, d, br) = self.shape(w, k);
        let l = self.classes;
        let t = w.tensors()[k].data();
        let feats = self.data.features();
        let mut out = vec![0.0; self.data.len() * bl * l];
        self.reducer.fill(self.data.len(), bl * l, &mut out, &|r: Range<usize>, slot: &mut [f64]| {
            let mut m = vec![0.0; bl * br];
            for (i, j) in r.enumerate() {
                site_matrix(t, bl, d, br, feats[j].site(k), &mut m);
                let rk = &right_k[j * br * l..(j + 1) * br * l];
                linalg::gemm(bl, br, l, 1.0, &m, rk, 0.0, &mut slot[i * bl * l..(i + 1) * bl * l]);
            }
        });
        out
    }

    /// `left[k+1][j] = left[k][j] · M_k(v_j)`.
    fn push_left(&self, w: &Mps, k: usize, left_k: &[f64]) -> Vec<f64> {
        let (bl, d, br) = self.shape(w, k);
        let t = w.tensors()[k].data();
        let feats = self.data.features();
        let mut out = vec![0.0; self.data.len() * br];
        self.reducer.fill(self.data.len(), br, &mut out, &|r: Range<usize>, slot: &mut [f64]| {
            let mut m = vec![0.0; bl * br];
            for (i, j) in r.enumerate() {
                site_matrix(t, bl, d, br, feats[j].site(k), &mut m);
                linalg::gemm(1, bl, br, 1.0, &left_k[j * bl..(j + 1) * bl], &m, 0.0, &mut slot[i * br..(i + 1) * br]);
            }
        });
        out
    }
}

/// Local least-squares problem for one site tensor `X` (`(bl·d) × r`).
struct Local<'a> {
    sw: &'a Sweeper<'a>,
    k: usize,
    bl: usize,
    d: usize,
    r: usize,
    left: &'a [f64],
    right: &'a [f64],
}

impl Local<'_> {
    fn dim(&self) -> usize {
        self.bl * self.d * self.r
    }

    /// Batch rows `φ_j = left_j ⊗ v_j`.
    fn phi(&self, range: Range<usize>) -> Vec<f64> {
        let (bl, d) = (self.bl, self.d);
        let feats = self.sw.data.features();
        let mut phi = Vec::with_capacity(range.len() * bl * d);
        for j in range {
            let v = feats[j].site(self.k);
            for &la in &self.left[j * bl..(j + 1) * bl] {
                phi.extend(v.iter().map(|x| la * x));
            }
        }
        phi
    }

    /// Outputs `f_j = R_jᵀ Xᵀ φ_j` for a batch, with the rows `P = Φ X`.
    fn outputs(&self, x: &[f64], range: Range<usize>, phi: &[f64]) -> Vec<f64> {
        let (m, r, l) = (self.bl * self.d, self.r, self.sw.classes);
        let b = range.len();
        let mut p = vec![0.0; b * r];
        linalg::gemm(b, m, r, 1.0, phi, x, 0.0, &mut p);
        let mut f = vec![0.0; b * l];
        for (i, j) in range.enumerate() {
            let rj = &self.right[j * r * l..(j + 1) * r * l];
            linalg::gemm(1, r, l, 1.0, &p[i * r..(i + 1) * r], rj, 0.0, &mut f[i * l..(i + 1) * l]);
        }
        f
    }

    /// `Σ_j φ_j (R_j e_j)ᵀ` added into `out` for per-sample vectors `e_j` (length L).
    fn back(&self, e: &[f64], range: Range<usize>, phi: &[f64], out: &mut [f64]) {
        let (m, r, l) = (self.bl * self.d, self.r, self.sw.classes);
        let b = range.len();
        let mut q = vec![0.0; b * r];
        for (i, j) in range.enumerate() {
            let rj = &self.right[j * r * l..(j + 1) * r * l];
            linalg::gemm_with(r, l, 1, 1.0, rj, Layout::row_major(l), &e[i * l..(i + 1) * l], Layout::row_major(1), 0.0, &mut q[i * r..(i + 1) * r]);
        }
        linalg::gemm_with(m, b, r, 1.0, phi, Layout::transposed(m), &q, Layout::row_major(r), 1.0, out);
    }

    /// `H x = (1/n) Σ_j φ_j (R_j R_jᵀ Xᵀ φ_j)ᵀ + λ x`.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.sw.data.len();
        let mut out = self.sw.reducer.sum(n, self.dim(), &|range: Range<usize>, acc: &mut [f64]| {
            let phi = self.phi(range.clone());
            let f = self.outputs(x, range.clone(), &phi);
            self.back(&f, range, &phi, acc);
        });
        out.iter_mut().zip(x).for_each(|(o, xi)| *o = *o / n as f64 + self.sw.lambda * xi);
        out
    }

    /// `(1/n) Σ_j φ_j (R_j y_j)ᵀ`.
    fn rhs(&self) -> Vec<f64> {
        let n = self.sw.data.len();
        let l = self.sw.classes;
        let labels = self.sw.data.labels();
        let mut out = self.sw.reducer.sum(n, self.dim(), &|range: Range<usize>, acc: &mut [f64]| {
            let phi = self.phi(range.clone());
            let mut y = vec![0.0; range.len() * l];
            for (i, j) in range.clone().enumerate() {
                y[i * l + labels[j]] = 1.0;
            }
            self.back(&y, range, &phi, acc);
        });
        out.iter_mut().for_each(|o| *o /= n as f64);
        out
    }

    /// `(1/2n) Σ_j ‖f_j − y_j‖²` with site tensor `x`.
    fn data_cost(&self, x: &[f64]) -> f64 {
        let n = self.sw.data.len();
        let l = self.sw.classes;
        let labels = self.sw.data.labels();
        let s = self.sw.reducer.sum(n, 1, &|range: Range<usize>, acc: &mut [f64]| {
            let phi = self.phi(range.clone());
            let f = self.outputs(x, range.clone(), &phi);
            for (i, j) in range.enumerate() {
                acc[0] += super::squared_error(&f[i * l..(i + 1) * l], labels[j]);
            }
        });
        s[0] / (2.0 * n as f64)
    }

    /// Linear CG on `H x = b` from `x0`, at most `max_iter` steps.
    fn solve(&self, x0: &[f64], max_iter: usize, tol: f64) -> Vec<f64> {
        let b = self.rhs();
        let mut x = x0.to_vec();
        let hx = self.apply(&x);
        let mut r: Vec<f64> = b.iter().zip(&hx).map(|(bi, hi)| bi - hi).collect();
        let mut p = r.clone();
        let mut rr = linalg::dot(&r, &r);
        for _ in 0..max_iter {
            if libm::sqrt(rr) < tol {
                break;
            }
            let hp = self.apply(&p);
            let php = linalg::dot(&p, &hp);
            if !(php > 0.0) {
                break;
            }
            let alpha = rr / php;
            x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
            r.iter_mut().zip(&hp).for_each(|(ri, hi)| *ri -= alpha * hi);
            let rr_new = linalg::dot(&r, &r);
            let beta = rr_new / rr;
            p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
            rr = rr_new;
        }
        x
    }
}

/// Single-site alternating least squares on the top MPS.
///
/// Each sweep solves sites left to right, then right to left back to site 1.
/// The cost is `(1/2n) Σ_j Σ_ℓ (f^ℓ − y^ℓ)² + (λ/2) Σ_k ‖A_k‖²`; every local
/// solve minimizes it over one tensor by linear CG started from the current
/// tensor, so it never increases.
pub fn train_curtain(
    model: CurtainModel,
    data: &Dataset,
    cfg: &TrainConfig,
    reducer: &dyn Reducer,
) -> Result<(CurtainModel, CurtainReport)> {
    cfg.validate()?;
    let (tree, mut w) = model.into_parts();
    if data.site_dims() != w.site_dims().as_slice() {
        return Err(shape_err!("features {:?} do not match top MPS {:?}", data.site_dims(), w.site_dims()));
    }
    if data.classes() != w.output_dim() {
        return Err(shape_err!("top MPS has {} labels, dataset has {}", w.output_dim(), data.classes()));
    }
    let n_sites = w.site_count();
    let sw = Sweeper { data, reducer, lambda: cfg.ridge, classes: data.classes(), n_sites };
    let mut env = sw.init_envs(&w);
    let mut report = CurtainReport::default();
    let mut norms: Vec<f64> = w.tensors().iter().map(|t| linalg::dot(t.data(), t.data())).collect();

    let mut order: Vec<(usize, bool)> = (0..n_sites).map(|k| (k, true)).collect();
    order.extend((1..n_sites.saturating_sub(1)).rev().map(|k| (k, false)));

    for sweep in 0..cfg.sweeps {
        for &(k, rightward) in &order {
            let (bl, d, r) = sw.shape(&w, k);
            let local = Local { sw: &sw, k, bl, d, r, left: &env.left[k], right: &env.right[k] };
            let other: f64 = norms.iter().enumerate().filter(|(m, _)| *m != k).map(|(_, v)| v).sum();
            let penalty = |x: &[f64]| 0.5 * cfg.ridge * (other + linalg::dot(x, x));
            let x0 = w.tensors()[k].data().to_vec();
            let before = local.data_cost(&x0) + penalty(&x0);
            if report.local_costs.is_empty() {
                report.local_costs.push(before);
            }
            let x = local.solve(&x0, cfg.cg_max, cfg.grad_tol);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(num_err!("non-finite local solution at site {} in sweep {}", k, sweep));
            }
            let after = local.data_cost(&x) + penalty(&x);
            let (x, after) = if after <= before {
                (x, after)
            } else {
                log::debug!("site {} solve raised the cost by {:e}; keeping the previous tensor", k, after - before);
                (x0, before)
            };
            norms[k] = linalg::dot(&x, &x);
            w.tensors_mut()[k].data_mut().copy_from_slice(&x);
            report.local_costs.push(after);
            report.solve_sites.push(k);

            if rightward && k + 1 < n_sites {
                env.left[k + 1] = sw.push_left(&w, k, &env.left[k]);
            }
            if k > 0 && (!rightward || k + 1 == n_sites) {
                env.right[k - 1] = sw.push_right(&w, k, &env.right[k]);
            }
        }
        let cost = *report.local_costs.last().unwrap();
        log::info!("sweep {}: cost {:.6e}", sweep + 1, cost);
        report.sweep_costs.push(cost);
    }
    Ok((CurtainModel { tree, top: w }, report))
}

impl Scorer for CurtainModel {
    fn classes(&self) -> usize {
        self.top.output_dim()
    }

    /// Scores for a feature already coarse-grained by the tree.
    fn scores(&self, f: &ProductFeature) -> Result<Vec<f64>> {
        evaluate(&self.top, f)
    }
}

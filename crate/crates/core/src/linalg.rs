//! Matrix kernels: GEMM, Hermitian eigendecomposition with truncation, SPD solves.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{arg_err, num_err, shape_err, Result};
use crate::tensor::DenseTensor;

/// Eigenvalues at or below this fraction of the trace are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-14;
/// Negative eigenvalues down to this fraction of the trace are roundoff and get clamped silently.
pub const NEGATIVE_TOLERANCE: f64 = 1e-10;
/// Relative gap below which two eigenvalues count as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-12;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Layout of a matrix operand stored in a flat slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Self { row_stride: cols, col_stride: 1 }
    }
    /// The transpose of a row-major `rows × cols` buffer, viewed as `cols × rows`.
    pub const fn transposed(cols: usize) -> Self {
        Self { row_stride: 1, col_stride: cols }
    }
    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
        }
    }
}

/// `c = alpha * a·b + beta * c` with all operands row-major;
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    gemm_with(m, k, n, alpha, a, Layout::row_major(k), b, Layout::row_major(n), beta, c);
}

/// General strided GEMM into a row-major `m×n` output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_with(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(la.span(m, k) <= a.len(), "gemm: lhs buffer too small");
    assert!(lb.span(k, n) <= b.len(), "gemm: rhs buffer too small");
    assert!(m * n <= c.len(), "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every offset matrixmultiply will touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Full Hermitian eigendecomposition of a symmetric matrix.
///
/// Eigenvalues come back sorted descending; column `i` of the returned
/// row-major `n×n` buffer is the eigenvector for eigenvalue `i`, signed so
/// that its largest-magnitude component is positive.
pub fn symmetric_eigen(m: &DenseTensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c) = m.matrix_dims()?;
    if n != c {
        return Err(shape_err!("eigendecomposition of non-square {}x{} matrix", n, c));
    }
    let mat = DMatrix::from_row_slice(n, n, m.data());
    let eig = mat
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| num_err!("eigensolver failed to converge on a {}x{} matrix", n, n))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = alloc::vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        let pivot = (0..n).fold(0, |best, r| if v[r].abs() > v[best].abs() { r } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for row in 0..n {
            vectors[row * n + col] = sign * v[row];
        }
    }
    if values.iter().chain(&vectors).any(|v| !v.is_finite()) {
        return Err(num_err!("eigensolver produced non-finite output on a {}x{} matrix", n, n));
    }
    Ok((values, vectors))
}

/// Truncation rule for [`eig_truncated_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    /// Keep the fewest eigenvectors whose discarded weight fraction is below this.
    pub cutoff: f64,
    /// Hard cap on retained columns; `None` is unlimited.
    pub max_dim: Option<usize>,
    /// Grow the retained set to cover a whole degenerate multiplet at the boundary.
    pub extend_degenerate: bool,
}

impl Truncation {
    pub fn new(cutoff: f64, max_dim: Option<usize>) -> Self {
        Self { cutoff, max_dim, extend_degenerate: false }
    }
}

/// Truncated eigendecomposition of a PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    /// Full spectrum, clamped to be non-negative, sorted descending.
    pub eigenvalues: Vec<f64>,
    /// `n × kept` matrix whose columns are the retained eigenvectors.
    pub eigenvectors: DenseTensor,
    /// Discarded eigenvalue weight over total weight (0 for a zero matrix).
    pub truncation_error: f64,
    pub kept: usize,
}

impl EigenResult {
    pub fn retained_eigenvalues(&self) -> &[f64] {
        &self.eigenvalues[..self.kept]
    }
}

/// Diagonalize a symmetric PSD matrix and keep its dominant eigenvectors.
///
/// The kept count is the smallest `D` with
/// `sum(p_i, i >= D) / sum(p_i) < cutoff`, then clamped to `max_dim`.
/// Eigenvalues at or below `1e-14 × trace` are never kept unless nothing
/// else would be, in which case exactly one column is retained.
pub fn eig_truncated(m: &DenseTensor, cutoff: f64, max_dim: Option<usize>) -> Result<EigenResult> {
    eig_truncated_with(m, &Truncation::new(cutoff, max_dim))
}

pub fn eig_truncated_with(m: &DenseTensor, rule: &Truncation) -> Result<EigenResult> {
    let (n, c) = m.matrix_dims()?;
    if n != c {
        return Err(shape_err!("eigendecomposition of non-square {}x{} matrix", n, c));
    }
    if !(0.0..1.0).contains(&rule.cutoff) {
        return Err(arg_err!("cutoff {} outside [0, 1)", rule.cutoff));
    }
    if rule.max_dim == Some(0) {
        return Err(arg_err!("max_dim must be at least 1"));
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(num_err!("non-finite entry in {}x{} matrix", n, n));
    }
    let scale = m.data().iter().fold(1.0f64, |acc, v| acc.max(libm::fabs(*v)));
    let asym = m.asymmetry()?;
    if asym > 1e-8 * scale {
        return Err(arg_err!("matrix not symmetric: max asymmetry {:e}", asym));
    }
    let mut sym = m.clone();
    sym.symmetrize()?;

    let (mut values, vectors) = symmetric_eigen(&sym)?;
    let trace: f64 = values.iter().sum();
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < -NEGATIVE_TOLERANCE * libm::fabs(trace) {
                log::warn!("clamping eigenvalue {:e} (trace {:e})", v, trace);
            }
            *v = 0.0;
        }
    }
    // suffix[i] = sum of values[i..], summed from the small end
    let mut suffix = alloc::vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + values[i];
    }
    let total = suffix[0];

    let kept = if total <= 0.0 {
        1
    } else {
        let floor = EIGEN_FLOOR * total;
        let positive = values.iter().take_while(|&&v| v > floor).count();
        let mut d = (1..=positive)
            .find(|&d| suffix[d] / total < rule.cutoff)
            .unwrap_or(positive)
            .max(1);
        if rule.extend_degenerate {
            while d < positive && values[d - 1] - values[d] < DEGENERACY_GAP * total {
                d += 1;
            }
        }
        match rule.max_dim {
            Some(cap) => d.min(cap),
            None => d,
        }
    }
    .min(n);
    let truncation_error = if total > 0.0 { suffix[kept] / total } else { 0.0 };

    let mut cols = alloc::vec![0.0; n * kept];
    for row in 0..n {
        cols[row * kept..(row + 1) * kept].copy_from_slice(&vectors[row * n..row * n + kept]);
    }
    Ok(EigenResult {
        eigenvalues: values,
        eigenvectors: DenseTensor::from_parts(alloc::vec![n, kept], cols),
        truncation_error,
        kept,
    })
}

/// Solve `a·x = b` for symmetric positive definite `a` (`n×n`) and `b` (`n×k`).
/// Returns `None` when the Cholesky factorization breaks down.
pub fn solve_spd(a: &DenseTensor, b: &DenseTensor) -> Result<Option<DenseTensor>> {
    let (n, c) = a.matrix_dims()?;
    let (bn, k) = b.matrix_dims()?;
    if n != c || bn != n {
        return Err(shape_err!("spd solve of {}x{} with rhs {}x{}", n, c, bn, k));
    }
    let am = DMatrix::from_row_slice(n, n, a.data());
    let bm = DMatrix::from_row_slice(n, k, b.data());
    let Some(chol) = am.cholesky() else {
        return Ok(None);
    };
    let x = chol.solve(&bm);
    let mut out = alloc::vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            out[i * k + j] = x[(i, j)];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    Ok(Some(DenseTensor::from_parts(alloc::vec![n, k], out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    fn diag(values: &[f64]) -> DenseTensor {
        let n = values.len();
        let mut m = DenseTensor::zeros(vec![n, n]);
        for (i, v) in values.iter().enumerate() {
            m.data_mut()[i * n + i] = *v;
        }
        m
    }

    fn random_psd(n: usize, seed: u64) -> DenseTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m = vec![0.0; n * n];
        gemm_with(n, n, n, 1.0, &a, Layout::row_major(n), &a, Layout::transposed(n), 0.0, &mut m);
        DenseTensor::new(vec![n, n], m).unwrap()
    }

    #[test]
    fn cutoff_picks_smallest_count() {
        let r = eig_truncated(&diag(&[0.6, 0.3, 0.08, 0.02]), 0.05, None).unwrap();
        assert_eq!(r.kept, 3);
        assert!((r.truncation_error - 0.02).abs() < 1e-15);
        assert_eq!(r.eigenvectors.shape(), &[4, 3]);
    }

    #[test]
    fn zero_eigenvalues_never_kept() {
        let r = eig_truncated(&diag(&[1.0, 0.0, 0.0]), 0.5, None).unwrap();
        assert_eq!(r.kept, 1);
        assert_eq!(r.truncation_error, 0.0);
        let r = eig_truncated(&diag(&[1.0, 0.0, 0.0]), 0.0, None).unwrap();
        assert_eq!(r.kept, 1);
    }

    #[test]
    fn zero_matrix_keeps_one() {
        let r = eig_truncated(&DenseTensor::zeros(vec![3, 3]), 0.1, None).unwrap();
        assert_eq!(r.kept, 1);
        assert_eq!(r.truncation_error, 0.0);
    }

    #[test]
    fn max_dim_clamps_and_recomputes_error() {
        let r = eig_truncated(&diag(&[0.6, 0.3, 0.08, 0.02]), 0.05, Some(1)).unwrap();
        assert_eq!(r.kept, 1);
        assert!((r.truncation_error - 0.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_extension() {
        let m = diag(&[0.4, 0.3, 0.3]);
        let plain = eig_truncated(&m, 0.35, None).unwrap();
        assert_eq!(plain.kept, 2);
        let rule = Truncation { cutoff: 0.35, max_dim: None, extend_degenerate: true };
        assert_eq!(eig_truncated_with(&m, &rule).unwrap().kept, 3);
    }

    #[test]
    fn full_reconstruction_of_random_psd() {
        let m = random_psd(6, 11);
        let r = eig_truncated(&m, 0.0, None).unwrap();
        assert_eq!(r.kept, 6);
        let u = r.eigenvectors.data();
        let mut rec = vec![0.0; 36];
        for i in 0..6 {
            for j in 0..6 {
                rec[i * 6 + j] = (0..6).map(|k| u[i * 6 + k] * r.eigenvalues[k] * u[j * 6 + k]).sum();
            }
        }
        let err: f64 = rec.iter().zip(m.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        assert!(libm::sqrt(err) / m.frobenius_norm() < 1e-10);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        let r = DenseTensor::zeros(vec![2, 3]);
        assert!(matches!(eig_truncated(&r, 0.1, None), Err(crate::Error::Shape(_))));
        let a = DenseTensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(eig_truncated(&a, 0.1, None), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn spd_solve() {
        let a = DenseTensor::matrix(2, 2, vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        let b = DenseTensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let x = solve_spd(&a, &b).unwrap().unwrap();
        assert!((x.data()[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((x.data()[1] - 7.0 / 11.0).abs() < 1e-14);
        let singular = DenseTensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(solve_spd(&singular, &b).unwrap().is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn spectrum_sums_to_trace_and_columns_orthonormal(n in 1usize..8, seed in 0u64..1000) {
                let m = random_psd(n, seed);
                let r = eig_truncated(&m, 0.0, None).unwrap();
                let total: f64 = r.eigenvalues.iter().sum();
                let tr = m.trace().unwrap();
                prop_assert!((total - tr).abs() <= 1e-8 * tr.abs().max(1e-300));
                prop_assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
                let k = r.kept;
                let u = r.eigenvectors.data();
                for a in 0..k {
                    for b in 0..k {
                        let g: f64 = (0..n).map(|i| u[i * k + a] * u[i * k + b]).sum();
                        let want = if a == b { 1.0 } else { 0.0 };
                        prop_assert!((g - want).abs() < 1e-10);
                    }
                }
            }
        }
    }
}

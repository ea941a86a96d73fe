//! Dense real tensors in row-major order.
//!
//! The last index runs fastest. Every flattening in this crate (matricization,
//! reshapes, serialized payloads) follows that convention, so reshaping a
//! matricized tensor back to its original shape is the identity.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::linalg;

/// Multi-index array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Build a tensor from a shape and row-major values.
    ///
    /// Rejects zero dimensions, a length mismatch, and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero dimension in shape {:?}", shape));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(crate::error::num_err!("non-finite value at flat position {}", i));
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for internal use where length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape, vec![0.0; len])
    }

    /// Order-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(arg_err!(
                "index of order {} for tensor of order {}",
                index.len(),
                self.shape.len()
            ));
        }
        let mut flat = 0;
        for (k, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            if i >= d {
                return Err(arg_err!("index {} out of range {} on axis {}", i, d, k));
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let flat = self.flat_index(index)?;
        self.data[flat] = value;
        Ok(())
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Reorder axes: axis `k` of the result is axis `perm[k]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.order();
        if perm.len() != n {
            return Err(arg_err!("permutation length {} for order {}", perm.len(), n));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(arg_err!("invalid permutation {:?}", perm));
            }
            seen[p] = true;
        }
        if perm.iter().enumerate().all(|(k, &p)| k == p) {
            return Ok(self.clone());
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; n];
        let mut src = 0usize;
        for _ in 0..self.len() {
            out.push(self.data[src]);
            // odometer increment, last axis fastest
            for ax in (0..n).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, out))
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(mut self, alpha: f64) -> Self {
        self.scale(alpha);
        self
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("axpy shapes {:?} vs {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err!("dot shapes {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(linalg::dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(linalg::dot(&self.data, &self.data))
    }

    pub fn trace(&self) -> Result<f64> {
        let (r, c) = self.matrix_dims()?;
        if r != c {
            return Err(shape_err!("trace of non-square {}x{} matrix", r, c));
        }
        Ok((0..r).map(|i| self.data[i * r + i]).sum())
    }

    /// `(rows, cols)` of an order-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err!("expected a matrix, got shape {:?}", s)),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        self.matrix_dims()?;
        self.permute(&[1, 0])
    }

    /// Largest absolute asymmetry `|m_ij - m_ji|` of a square matrix.
    pub fn asymmetry(&self) -> Result<f64> {
        let (r, c) = self.matrix_dims()?;
        if r != c {
            return Err(shape_err!("non-square {}x{} matrix", r, c));
        }
        let mut worst = 0.0f64;
        for i in 0..r {
            for j in (i + 1)..r {
                worst = worst.max(libm::fabs(self.data[i * r + j] - self.data[j * r + i]));
            }
        }
        Ok(worst)
    }

    /// Replace a square matrix by `(m + mᵀ)/2`.
    pub fn symmetrize(&mut self) -> Result<()> {
        let (r, c) = self.matrix_dims()?;
        if r != c {
            return Err(shape_err!("non-square {}x{} matrix", r, c));
        }
        for i in 0..r {
            for j in (i + 1)..r {
                let avg = 0.5 * (self.data[i * r + j] + self.data[j * r + i]);
                self.data[i * r + j] = avg;
                self.data[j * r + i] = avg;
            }
        }
        Ok(())
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

/// Sum over paired indices of `a` and `b`.
///
/// The result carries the uncontracted indices of `a` in their original order
/// followed by those of `b`. An empty pair list gives the outer product.
pub fn contract(a: &DenseTensor, b: &DenseTensor, pairs: &[(usize, usize)]) -> Result<DenseTensor> {
    let mut used_a = vec![false; a.order()];
    let mut used_b = vec![false; b.order()];
    for &(ia, ib) in pairs {
        if ia >= a.order() || ib >= b.order() {
            return Err(arg_err!(
                "pair ({}, {}) out of range for orders {} and {}",
                ia,
                ib,
                a.order(),
                b.order()
            ));
        }
        if used_a[ia] || used_b[ib] {
            return Err(arg_err!("index repeated in pair list {:?}", pairs));
        }
        used_a[ia] = true;
        used_b[ib] = true;
        if a.shape[ia] != b.shape[ib] {
            return Err(shape_err!(
                "contracted dims differ: a[{}]={} vs b[{}]={}",
                ia,
                a.shape[ia],
                ib,
                b.shape[ib]
            ));
        }
    }
    let free_a: Vec<usize> = (0..a.order()).filter(|&i| !used_a[i]).collect();
    let free_b: Vec<usize> = (0..b.order()).filter(|&i| !used_b[i]).collect();

    let perm_a: Vec<usize> = free_a.iter().copied().chain(pairs.iter().map(|p| p.0)).collect();
    let perm_b: Vec<usize> = pairs.iter().map(|p| p.1).chain(free_b.iter().copied()).collect();
    let pa = a.permute(&perm_a)?;
    let pb = b.permute(&perm_b)?;

    let m: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let k: usize = pairs.iter().map(|p| a.shape[p.0]).product();
    let n: usize = free_b.iter().map(|&i| b.shape[i]).product();
    let mut out = vec![0.0; m * n];
    linalg::gemm(m, k, n, 1.0, &pa.data, &pb.data, 0.0, &mut out);

    let shape: Vec<usize> = free_a
        .iter()
        .map(|&i| a.shape[i])
        .chain(free_b.iter().map(|&i| b.shape[i]))
        .collect();
    Ok(DenseTensor::from_parts(shape, out))
}

/// Flatten `t` into a matrix whose row index runs over `row_indices`
/// (row-major in the listed order) and whose column index runs over the
/// remaining indices in their original order.
pub fn matricize(t: &DenseTensor, row_indices: &[usize]) -> Result<DenseTensor> {
    let mut is_row = vec![false; t.order()];
    for &r in row_indices {
        if r >= t.order() {
            return Err(arg_err!("row index {} out of range for order {}", r, t.order()));
        }
        if is_row[r] {
            return Err(arg_err!("row index {} repeated", r));
        }
        is_row[r] = true;
    }
    let cols: Vec<usize> = (0..t.order()).filter(|&i| !is_row[i]).collect();
    let perm: Vec<usize> = row_indices.iter().copied().chain(cols.iter().copied()).collect();
    let p = t.permute(&perm)?;
    let nr: usize = row_indices.iter().map(|&i| t.shape[i]).product();
    let nc: usize = cols.iter().map(|&i| t.shape[i]).product();
    Ok(DenseTensor::from_parts(vec![nr, nc], p.data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> DenseTensor {
        DenseTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_vector() {
        let r = contract(&DenseTensor::identity(2), &t(&[2], &[3.0, 4.0]), &[(1, 0)]).unwrap();
        assert_eq!(r, t(&[2], &[3.0, 4.0]));
    }

    #[test]
    fn outer_product() {
        let r = contract(&t(&[2], &[1.0, 2.0]), &t(&[2], &[5.0, 7.0]), &[]).unwrap();
        assert_eq!(r, t(&[2, 2], &[5.0, 7.0, 10.0, 14.0]));
    }

    #[test]
    fn matrix_times_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = contract(&a, &DenseTensor::identity(2), &[(1, 0)]).unwrap();
        assert_eq!(r, a);
    }

    #[test]
    fn contract_errors() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(contract(&a, &b, &[(1, 0)]), Err(crate::Error::Shape(_))));
        assert!(matches!(contract(&a, &b, &[(0, 0), (0, 1)]), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn contract_full_is_scalar() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = contract(&a, &a, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(r.shape(), &[] as &[usize]);
        assert_eq!(r.data(), &[30.0]);
    }

    #[test]
    fn matricize_shapes_and_positions() {
        let x = DenseTensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(matricize(&x, &[0, 1]).unwrap().shape(), &[6, 4]);

        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matricize(&m, &[0]).unwrap(), m);

        let mut z = DenseTensor::zeros(vec![2, 2, 2, 2]);
        z.set(&[1, 0, 1, 0], 1.0).unwrap();
        let mm = matricize(&z, &[0, 1]).unwrap();
        assert_eq!(mm.get(&[2, 2]).unwrap(), 1.0);
        assert_eq!(mm.data().iter().sum::<f64>(), 1.0);

        assert!(matches!(matricize(&z, &[4]), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn matricize_then_reshape_round_trips() {
        let x = DenseTensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let m = matricize(&x, &[0, 1]).unwrap();
        assert_eq!(m.reshape(vec![2, 3, 4]).unwrap(), x);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let x = DenseTensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.get(&[k, i, j]).unwrap(), x.get(&[i, j, k]).unwrap());
                }
            }
        }
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseTensor::new(vec![0], vec![]).is_err());
        assert!(DenseTensor::new(vec![1], vec![f64::NAN]).is_err());
    }
}

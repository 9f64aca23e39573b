//! Dense row-major `f64` tensors.
//!
//! Most of the crate only needs rank-1 and rank-2 arrays, so the kernels here
//! are written for matrices; higher ranks are representable but only the
//! elementwise operations accept them.

use std::fmt;

use super::DiffError;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize, DiffError> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(DiffError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, DiffError> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(DiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::matrix(rows, cols, data)
    }

    /// Panics when `data.len() != rows * cols`; use [`Tensor::new`] for fallible construction.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` for a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), DiffError> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(DiffError::Rank {
                expected: 2,
                shape: other.to_vec(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, DiffError> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(DiffError::DataLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, DiffError> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<(), DiffError> {
        if self.shape != other.shape {
            return Err(DiffError::ShapeMismatch {
                op: "elementwise",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, DiffError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, DiffError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, DiffError> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64, DiffError> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<(), DiffError> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self, DiffError> {
        let (r, c) = self.dims2()?;
        Ok(Self::from_fn(c, r, |i, j| self.data[j * c + i]))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, DiffError> {
        matmul_t(self, false, other, false)
    }

    /// Matrix-vector product for a rank-2 `self` and a rank-1 `v`.
    pub fn matvec(&self, v: &Self) -> Result<Self, DiffError> {
        let col = v.clone().reshape(&[v.len(), 1])?;
        let out = self.matmul(&col)?;
        let n = out.len();
        out.reshape(&[n])
    }

    /// Outer product `a bᵀ` of two vectors.
    pub fn outer(a: &Self, b: &Self) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a.data[i] * b.data[j])
    }

    /// Rows selected by index, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::matrix(idx.len(), c, data)
    }

    /// Stacks equally wide matrices vertically.
    pub fn vstack(parts: &[&Self]) -> Result<Self, DiffError> {
        let c = parts.first().map(|p| p.cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.dims2()?;
            if pc != c {
                return Err(DiffError::ShapeMismatch {
                    op: "vstack",
                    left: vec![rows, c],
                    right: p.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[rows, c], data)
    }
}

/// `op(a) · op(b)` where `op` optionally transposes. Backed by a blocked GEMM kernel.
pub fn matmul_t(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor, DiffError> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(DiffError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![0.0; m * n];
    // SAFETY: strides and extents describe the owned buffers exactly; `out` is
    // freshly allocated with m*n elements and row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor::matrix(m, n, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let n = b.cols();
        Tensor::from_fn(m, n, |i, j| (0..k).map(|t| a.at(i, t) * b.at(t, j)).sum())
    }

    #[test]
    fn identity_and_scalar_products() {
        let x = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
        let p = Tensor::matrix(1, 1, vec![2.0])
            .matmul(&Tensor::matrix(1, 1, vec![3.0]))
            .unwrap();
        assert_eq!(p.data(), &[6.0]);
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let a = Tensor::from_fn(7, 5, |i, j| ((i * 31 + j * 17) % 11) as f64 / 3.0 - 1.5);
        let b = Tensor::from_fn(5, 4, |i, j| ((i * 13 + j * 7) % 5) as f64 - 2.0);
        let want = naive(&a, &b);
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        for got in [
            matmul_t(&a, false, &b, false).unwrap(),
            matmul_t(&at, true, &b, false).unwrap(),
            matmul_t(&a, false, &bt, true).unwrap(),
            matmul_t(&at, true, &bt, true).unwrap(),
        ] {
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            a.matmul(&Tensor::zeros(&[2, 3])),
            Err(DiffError::ShapeMismatch { op: "matmul", .. })
        ));
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }
}

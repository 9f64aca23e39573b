//! Fixed simplex equiangular-tight-frame classifier heads.
//!
//! A head is a `K x d` matrix whose rows are unit vectors with pairwise inner
//! product `-1/(K-1)`. Heads are built once from a seed and never trained.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::diff::Tensor;
use crate::rng::seeded;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EtfError {
    #[error("ETF head needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("unsupported ETF dimension: d = {d} must be >= K = {k}")]
    UnsupportedDimension { k: usize, d: usize },
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("matrix is {rows}x{cols}, not a valid ETF: max Gram deviation {deviation:e}")]
    NotEtf {
        rows: usize,
        cols: usize,
        deviation: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EtfClassifier {
    m: Tensor,
}

impl EtfClassifier {
    /// Rows `sqrt(K/(K-1)) * U (e_k - 1/K)` where `U` (`d x K`) has orthonormal
    /// columns from the QR factorisation of a seeded Gaussian matrix.
    pub fn new(classes: usize, dim: usize, seed: u64) -> Result<Self, EtfError> {
        if classes < 2 {
            return Err(EtfError::TooFewClasses(classes));
        }
        if dim < classes {
            return Err(EtfError::UnsupportedDimension { k: classes, d: dim });
        }
        let mut rng = seeded(seed);
        let g = DMatrix::<f64>::from_fn(dim, classes, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let k = classes as f64;
        let c = (k / (k - 1.0)).sqrt();
        let m = Tensor::from_fn(classes, dim, |row, j| {
            // column `row` of U minus the mean of U's columns
            let mean: f64 = (0..classes).map(|t| q[(j, t)]).sum::<f64>() / k;
            c * (q[(j, row)] - mean)
        });
        Ok(Self { m })
    }

    /// Wraps an existing matrix after checking the Gram structure.
    pub fn from_matrix(m: Tensor, tol: f64) -> Result<Self, EtfError> {
        let (rows, cols) = m.dims2().map_err(|_| EtfError::NotEtf {
            rows: 0,
            cols: 0,
            deviation: f64::INFINITY,
        })?;
        if rows < 2 {
            return Err(EtfError::TooFewClasses(rows));
        }
        let (ok, deviation) = gram_check(&m, tol);
        if !ok {
            return Err(EtfError::NotEtf {
                rows,
                cols,
                deviation,
            });
        }
        Ok(Self { m })
    }

    pub fn classes(&self) -> usize {
        self.m.rows()
    }

    pub fn dim(&self) -> usize {
        self.m.cols()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    /// Class vector `m_k`.
    pub fn class_vector(&self, k: usize) -> &[f64] {
        self.m.row(k)
    }

    /// Logits `M x` for a single feature vector.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes())
            .map(|k| self.m.row(k).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Mᵀ (p - e_y)`, the gradient of `CE(Mx, y)` with respect to `x` when
    /// `p = softmax(Mx)`.
    pub fn ce_delta(&self, probs: &[f64], y: usize) -> Result<Vec<f64>, EtfError> {
        let k = self.classes();
        if probs.len() != k {
            return Err(EtfError::InvalidProbabilities(format!(
                "length {} for {k} classes",
                probs.len()
            )));
        }
        if y >= k {
            return Err(EtfError::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(EtfError::InvalidProbabilities("negative or non-finite entry".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(EtfError::InvalidProbabilities(format!("sums to {s}")));
        }
        let mut out = vec![0.0; self.dim()];
        for (c, &p) in probs.iter().enumerate() {
            let w = if c == y { p - 1.0 } else { p };
            for (o, &m) in out.iter_mut().zip(self.m.row(c)) {
                *o += w * m;
            }
        }
        Ok(out)
    }
}

/// Checks unit diagonal and `-1/(K-1)` off-diagonal of `M Mᵀ`; returns the
/// verdict and the largest deviation.
pub fn gram_check(m: &Tensor, tol: f64) -> (bool, f64) {
    let Ok((k, _)) = m.dims2() else {
        return (false, f64::INFINITY);
    };
    if k < 2 {
        return (false, f64::INFINITY);
    }
    let off = -1.0 / (k as f64 - 1.0);
    let mut dev: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let g: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { off };
            dev = dev.max((g - want).abs());
        }
    }
    (dev <= tol, dev)
}

/// Row-wise softmax of a logit vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `CE(z, y)` for a single logit vector.
pub fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
}

//! Operation count of the closed-form reconciliation gradient for a single
//! linear+ReLU block `y = σ(Wx)`, `W ∈ ℝ^{m×n}`, with the upstream
//! gradients held constant:
//!
//! ```text
//! A = u ⊙ σ'(Wx)        m       multiplies
//! B = WᵀA − g           (2m−1)n + n
//! ∇W = A Bᵀ             mn
//! ```

use rand_distr::{Distribution, StandardNormal};

use crate::diff::{rel_err, DiffError, Tape, Tensor};
use crate::rng::seeded;

/// Scalar arithmetic counter.
#[derive(Default)]
struct Ops(u64);

impl Ops {
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.0 += 1;
        a * b
    }

    fn add(&mut self, a: f64, b: f64) -> f64 {
        self.0 += 1;
        a + b
    }

    fn sub(&mut self, a: f64, b: f64) -> f64 {
        self.0 += 1;
        a - b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub m: usize,
    pub n: usize,
    /// Counted scalar operations.
    pub counted: u64,
    /// `3mn + m`
    pub predicted: u64,
    /// Relative deviation from the AD gradient.
    pub grad_err: f64,
}

/// Closed-form gradient of `½‖WᵀA − g‖²` in `W`, `A = u ⊙ mask`, and the
/// number of scalar operations it took. `w` is `m x n`.
fn closed_form(w: &Tensor, u: &[f64], mask: &[f64], g: &[f64], ops: &mut Ops) -> Tensor {
    let (m, n) = (w.rows(), w.cols());
    let a: Vec<f64> = (0..m).map(|i| ops.mul(u[i], mask[i])).collect();
    let b: Vec<f64> = (0..n)
        .map(|j| {
            let mut s = ops.mul(w.at(0, j), a[0]);
            for i in 1..m {
                let t = ops.mul(w.at(i, j), a[i]);
                s = ops.add(s, t);
            }
            ops.sub(s, g[j])
        })
        .collect();
    Tensor::from_fn(m, n, |i, j| ops.mul(a[i], b[j]))
}

/// Same gradient by reverse-mode differentiation with `A` a constant.
fn ad_gradient(w: &Tensor, a: &[f64], g: &[f64]) -> Result<Tensor, DiffError> {
    let tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let av = tape.constant(Tensor::matrix(1, a.len(), a.to_vec()));
    let gv = tape.constant(Tensor::matrix(1, g.len(), g.to_vec()));
    let r = av.matmul(wv)?.sub(gv)?;
    let loss = r.mul(r)?.sum()?.scale(0.5)?;
    Ok(tape.grad(loss, &[wv])?.remove(0))
}

pub fn check_flops_claim(m: usize, n: usize, seed: u64) -> Result<FlopsReport, DiffError> {
    if m == 0 || n == 0 {
        return Err(DiffError::InvalidShape(vec![m, n]));
    }
    let mut rng = seeded(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let w = Tensor::from_fn(m, n, |_, _| draw());
    let x: Vec<f64> = (0..n).map(|_| draw()).collect();
    let u: Vec<f64> = (0..m).map(|_| draw()).collect();
    let g: Vec<f64> = (0..n).map(|_| draw()).collect();
    // σ'(Wx) comes from the forward pass and is not counted
    let mask: Vec<f64> = (0..m)
        .map(|i| {
            let z: f64 = w.row(i).iter().zip(&x).map(|(a, b)| a * b).sum();
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let mut ops = Ops::default();
    let grad = closed_form(&w, &u, &mask, &g, &mut ops);
    let a: Vec<f64> = u.iter().zip(&mask).map(|(p, q)| p * q).collect();
    let reference = ad_gradient(&w, &a, &g)?;
    Ok(FlopsReport {
        m,
        n,
        counted: ops.0,
        predicted: (3 * m * n + m) as u64,
        grad_err: rel_err(&grad, &reference),
    })
}

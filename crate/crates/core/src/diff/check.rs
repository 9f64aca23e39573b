//! Gradient-checking helpers.

use super::{DiffError, Tape, Tensor, Var};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Jacobian of `forward` at `x` (a vector), one row per output component.
/// `forward` receives `x` as a `1 x d_in` row.
pub fn jacobian<F>(forward: F, x: &Tensor) -> Result<Tensor, DiffError>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, DiffError>,
{
    let tape = Tape::new();
    let n = x.len();
    let xv = tape.leaf(x.clone().reshape(&[1, n])?);
    let y = forward(xv)?;
    let shape = y.shape();
    let m: usize = shape.iter().product();
    let mut rows = Vec::with_capacity(m * n);
    for i in 0..m {
        let mut e = Tensor::zeros(&shape);
        e.data_mut()[i] = 1.0;
        let pick = y.mul(tape.constant(e))?.sum()?;
        rows.extend(tape.grad(pick, &[xv])?.remove(0).into_data());
    }
    Tensor::new(&[m, n], rows)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; `0` when both vanish.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).expect("rel_err shape").norm();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest [`rel_err`] over paired tensors.
pub fn max_rel_err(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(x, y)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| t.norm_sq(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
        let c = finite_diff_grad(|_| 3.5, &x, 1e-5);
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn jacobian_of_linear_and_relu() {
        let w = Tensor::from_fn(3, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let x = Tensor::vector(vec![0.3, -0.2, 0.9, -1.1]);
        let wc = w.clone();
        let j = jacobian(
            move |x| {
                let wv = x.tape().constant(wc.clone());
                x.matmul_t(false, wv, true)
            },
            &x,
        )
        .unwrap();
        assert_eq!(j, w);

        let j = jacobian(|x| x.relu(), &x).unwrap();
        let want = Tensor::from_fn(4, 4, |i, k| {
            if i == k && x.data()[i] > 0.0 {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(j, want);
    }
}

//! Two-layer least-squares testbed with exactly computable smoothness and
//! PL constants, and the layer-wise iteration analysed by the convergence
//! theorem.
//!
//! With `u = vec θ₁` and `v = vec θ₂`, the losses are
//!
//! ```text
//! L₁(u)    = ½‖K u − b₁‖²
//! L₂(u, v) = ½‖J₁ u + J₂ v − c‖²
//! ```
//!
//! The network instance linearises `x₂ = θ₂θ₁x₀` around a reference point
//! `(θ₁ʳ, θ₂ʳ)`: `x₂ ≈ θ₂ʳθ₁x₀ + θ₂θ₁ʳx₀ − θ₂ʳθ₁ʳx₀`. The product itself is
//! bilinear, so no global Lipschitz or PL constant would exist for it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use super::TheoryError;
use crate::rng::seeded;

/// Default tolerance for a bound check.
pub const SLACK: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct NetworkParts {
    pub x0: DVector<f64>,
    pub a1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub a2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub theta1_ref: DMatrix<f64>,
    pub theta2_ref: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct QuadraticTestbed {
    /// `(d₀, d₁, d₂)`
    pub dims: (usize, usize, usize),
    pub k: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub j1: DMatrix<f64>,
    pub j2: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Starting iterate `(vec θ₁, vec θ₂)`.
    pub u0: DVector<f64>,
    pub v0: DVector<f64>,
    /// Present for the linearised-network instance.
    pub parts: Option<NetworkParts>,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn normal(rng: &mut crate::rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn full_column_rank(a: &DMatrix<f64>) -> bool {
    let s = a.clone().svd(false, false).singular_values;
    let max = s.max();
    max > 0.0 && s.min() > 1e-10 * max && a.nrows() >= a.ncols()
}

impl QuadraticTestbed {
    /// Linearised two-layer network; `A₁`, `A₂` have one more row than
    /// columns.
    pub fn linearized(d0: usize, d1: usize, d2: usize, seed: u64) -> Result<Self, TheoryError> {
        let mut rng = seeded(seed);
        let parts = NetworkParts {
            x0: gaussian(d0, 1, 1.0, &mut rng).column(0).into(),
            a1: gaussian(d1 + 1, d1, 1.0 / ((d1 + 1) as f64).sqrt(), &mut rng),
            b1: gaussian(d1 + 1, 1, 1.0, &mut rng).column(0).into(),
            a2: gaussian(d2 + 1, d2, 1.0 / ((d2 + 1) as f64).sqrt(), &mut rng),
            b2: gaussian(d2 + 1, 1, 1.0, &mut rng).column(0).into(),
            theta1_ref: gaussian(d1, d0, 1.0 / (d0 as f64).sqrt(), &mut rng),
            theta2_ref: gaussian(d2, d1, 1.0 / (d1 as f64).sqrt(), &mut rng),
        };
        let u0 = gaussian(d1 * d0, 1, 1.0, &mut rng).column(0).into();
        let v0 = gaussian(d2 * d1, 1, 1.0, &mut rng).column(0).into();
        Self::from_parts(parts, u0, v0)
    }

    pub fn from_parts(p: NetworkParts, u0: DVector<f64>, v0: DVector<f64>) -> Result<Self, TheoryError> {
        let (d0, d1, d2) = (p.x0.len(), p.theta1_ref.nrows(), p.theta2_ref.nrows());
        if p.x0.norm() == 0.0 {
            return Err(TheoryError::InvalidTestbed("x₀ = 0".into()));
        }
        if !full_column_rank(&p.a1) || !full_column_rank(&p.a2) {
            return Err(TheoryError::InvalidTestbed("loss matrices are rank deficient".into()));
        }
        let x0t = p.x0.transpose();
        let h = &p.theta1_ref * &p.x0;
        let k = &p.a1 * x0t.kronecker(&DMatrix::identity(d1, d1));
        let j1 = &p.a2 * x0t.kronecker(&p.theta2_ref);
        let j2 = &p.a2 * h.transpose().kronecker(&DMatrix::identity(d2, d2));
        let c = &p.b2 + &p.a2 * (&p.theta2_ref * &h);
        Ok(Self {
            dims: (d0, d1, d2),
            k,
            b1: p.b1.clone(),
            j1,
            j2,
            c,
            u0,
            v0,
            parts: Some(p),
        })
    }

    /// `L₂(u, v) = L₁(u) + ½‖G v − g‖²`: the second loss depends on `θ₁`
    /// exactly as the first one does, so `ε ≡ 0`.
    pub fn shared_head(n1: usize, n2: usize, seed: u64) -> Result<Self, TheoryError> {
        let mut rng = seeded(seed);
        let k = gaussian(n1 + 1, n1, 1.0 / ((n1 + 1) as f64).sqrt(), &mut rng);
        let g = gaussian(n2 + 1, n2, 1.0 / ((n2 + 1) as f64).sqrt(), &mut rng);
        if !full_column_rank(&k) || !full_column_rank(&g) {
            return Err(TheoryError::InvalidTestbed("loss matrices are rank deficient".into()));
        }
        let b1: DVector<f64> = gaussian(n1 + 1, 1, 1.0, &mut rng).column(0).into();
        let gb: DVector<f64> = gaussian(n2 + 1, 1, 1.0, &mut rng).column(0).into();
        let m = n1 + n2 + 2;
        let mut j1 = DMatrix::zeros(m, n1);
        j1.view_mut((0, 0), (n1 + 1, n1)).copy_from(&k);
        let mut j2 = DMatrix::zeros(m, n2);
        j2.view_mut((n1 + 1, 0), (n2 + 1, n2)).copy_from(&g);
        let mut c = DVector::zeros(m);
        c.rows_mut(0, n1 + 1).copy_from(&b1);
        c.rows_mut(n1 + 1, n2 + 1).copy_from(&gb);
        Ok(Self {
            dims: (1, n1, n2),
            k,
            b1,
            j1,
            j2,
            c,
            u0: gaussian(n1, 1, 1.0, &mut rng).column(0).into(),
            v0: gaussian(n2, 1, 1.0, &mut rng).column(0).into(),
            parts: None,
        })
    }

    pub fn n1(&self) -> usize {
        self.j1.ncols()
    }

    pub fn n2(&self) -> usize {
        self.j2.ncols()
    }

    fn residual2(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.j1 * u + &self.j2 * v - &self.c
    }

    pub fn loss1(&self, u: &DVector<f64>) -> f64 {
        0.5 * (&self.k * u - &self.b1).norm_squared()
    }

    pub fn loss2(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        0.5 * self.residual2(u, v).norm_squared()
    }

    pub fn grad1_loss1(&self, u: &DVector<f64>) -> DVector<f64> {
        self.k.tr_mul(&(&self.k * u - &self.b1))
    }

    /// `(∇_{θ₁} L₂, ∇_{θ₂} L₂)`
    pub fn grad_loss2(&self, u: &DVector<f64>, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let r = self.residual2(u, v);
        (self.j1.tr_mul(&r), self.j2.tr_mul(&r))
    }

    /// Joint Jacobian `[J₁ J₂]`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.c.len(), self.n1() + self.n2());
        j.columns_mut(0, self.n1()).copy_from(&self.j1);
        j.columns_mut(self.n1(), self.n2()).copy_from(&self.j2);
        j
    }

    /// Least-squares optimum of `L₂`.
    pub fn loss2_star(&self) -> f64 {
        let j = self.jacobian();
        let z = j
            .clone()
            .svd(true, true)
            .solve(&self.c, 1e-12)
            .expect("SVD with both factors");
        0.5 * (j * z - &self.c).norm_squared()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremConstants {
    pub mu: f64,
    pub l1: f64,
    pub l2: f64,
    pub l: f64,
    pub eta1: f64,
    pub eta2: f64,
}

impl TheoremConstants {
    pub fn alpha(&self) -> f64 {
        self.eta1 / 2.0
    }

    /// Largest admissible `η₁`.
    pub fn eta1_max(&self) -> f64 {
        let (l1, l2, l) = (self.l1, self.l2, self.l);
        (((l1 * l1 + 8.0 * l * l).sqrt() - l1) / (4.0 * l * l))
            .min(2.0 / self.mu)
            .min(1.0 / (2.0 * l2))
    }

    /// Open-closed interval `(lo, hi]` for `η₂` given `η₁`.
    pub fn eta2_range(&self) -> (f64, f64) {
        let s = (1.0 - 2.0 * self.l2 * self.eta1).max(0.0).sqrt();
        (((1.0 - s) / self.l2).max(0.0), (1.0 + s) / self.l2)
    }

    /// Picks `η₁ = f₁ · η₁max` and `η₂ = lo + f₂ (hi − lo)`.
    pub fn with_rates(mut self, f1: f64, f2: f64) -> Self {
        self.eta1 = f1 * self.eta1_max();
        let (lo, hi) = self.eta2_range();
        self.eta2 = lo + f2 * (hi - lo);
        self
    }

    /// Whether the rates satisfy the theorem's conditions.
    pub fn admissible(&self) -> bool {
        let (lo, hi) = self.eta2_range();
        let am = self.alpha() * self.mu;
        self.eta1 > 0.0
            && self.eta1 <= self.eta1_max()
            && self.eta2 > lo
            && self.eta2 <= hi
            && am > 0.0
            && am < 1.0
    }
}

fn sym_eigs(h: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(h.clone()).eigenvalues
}

/// Spectral norm of a symmetric PSD matrix by power iteration.
pub fn power_iteration_norm(h: &DMatrix<f64>, iters: usize) -> f64 {
    let n = h.nrows();
    let mut x = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618).sin() * 0.5);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let y = h * &x;
        let norm = y.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = x.dot(&y) / x.norm_squared();
        x = y / norm;
    }
    lambda
}

/// Exact constants from eigendecompositions of the Hessian `JᵀJ` and its
/// diagonal blocks; `μ = 2 λ⁺_min(JᵀJ)`, the PL constant of least squares.
/// Rates are placed inside the admissible region (`η₁` at 90% of its cap,
/// `η₂` at the centre of its interval).
pub fn estimate_constants(tb: &QuadraticTestbed) -> Result<TheoremConstants, TheoryError> {
    let j = tb.jacobian();
    let h = j.tr_mul(&j);
    let eig = sym_eigs(&h);
    let l = eig.max();
    if !(l > 0.0) {
        return Err(TheoryError::InvalidTestbed("zero Hessian".into()));
    }
    let mu = 2.0
        * eig
            .iter()
            .copied()
            .filter(|&e| e > 1e-10 * l)
            .fold(f64::INFINITY, f64::min);
    let l1 = sym_eigs(&tb.j1.tr_mul(&tb.j1)).max();
    let l2 = sym_eigs(&tb.j2.tr_mul(&tb.j2)).max();
    if !(l1 > 0.0) || !(l2 > 0.0) {
        return Err(TheoryError::InvalidTestbed("a layer does not affect the loss".into()));
    }
    Ok(TheoremConstants {
        mu,
        l1,
        l2,
        l,
        eta1: 0.0,
        eta2: 0.0,
    }
    .with_rates(0.9, 0.5))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsTrace {
    /// `‖ε⁽ⁱ⁾‖²` for each iteration.
    pub eps_sq: Vec<f64>,
    /// `L₂⁽ⁱ'ⁱ⁾`, one more entry than `eps_sq`.
    pub loss2: Vec<f64>,
    pub loss2_star: f64,
    /// Set when the iteration produced non-finite values and stopped.
    pub diverged: bool,
}

/// One layer-wise iteration: `θ₁` descends `L₁`, then `θ₂` descends `L₂`
/// evaluated at the new `θ₁`.
pub fn layerwise_iteration(
    tb: &QuadraticTestbed,
    eta1: f64,
    eta2: f64,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let u1 = u - eta1 * tb.grad1_loss1(u);
    let (_, g2) = tb.grad_loss2(&u1, v);
    let v1 = v - eta2 * g2;
    (u1, v1)
}

pub fn run_two_layer_local(tb: &QuadraticTestbed, k: &TheoremConstants, iters: usize) -> EpsTrace {
    let (mut u, mut v) = (tb.u0.clone(), tb.v0.clone());
    let mut trace = EpsTrace {
        eps_sq: Vec::with_capacity(iters),
        loss2: vec![tb.loss2(&u, &v)],
        loss2_star: tb.loss2_star(),
        diverged: false,
    };
    for _ in 0..iters {
        let eps = tb.grad_loss2(&u, &v).0 - tb.grad1_loss1(&u);
        (u, v) = layerwise_iteration(tb, k.eta1, k.eta2, &u, &v);
        let l = tb.loss2(&u, &v);
        if !l.is_finite() || !eps.norm_squared().is_finite() {
            trace.diverged = true;
            break;
        }
        trace.eps_sq.push(eps.norm_squared());
        trace.loss2.push(l);
    }
    trace
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    /// `rhs − lhs` of the one-step bound per iteration.
    pub step_margins: Vec<f64>,
    /// `rhs − lhs` of the unrolled bound per iteration.
    pub unrolled_margins: Vec<f64>,
    pub violations: usize,
}

impl BoundCheck {
    pub fn min_margin(&self) -> f64 {
        self.step_margins
            .iter()
            .chain(&self.unrolled_margins)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates both sides of
/// `L₂⁽ⁱ⁺¹⁾ − L₂* ≤ (1−αμ)(L₂⁽ⁱ⁾ − L₂*) + α‖ε⁽ⁱ⁾‖²` and of its unrolled
/// form at every iteration.
pub fn check_theorem_bound(trace: &EpsTrace, k: &TheoremConstants) -> BoundCheck {
    let (a, rho) = (k.alpha(), 1.0 - k.alpha() * k.mu);
    let star = trace.loss2_star;
    let mut unrolled = trace.loss2[0] - star;
    let mut out = BoundCheck {
        step_margins: Vec::with_capacity(trace.eps_sq.len()),
        unrolled_margins: Vec::with_capacity(trace.eps_sq.len()),
        violations: 0,
    };
    for (i, &e) in trace.eps_sq.iter().enumerate() {
        let lhs = trace.loss2[i + 1] - star;
        let step = rho * (trace.loss2[i] - star) + a * e - lhs;
        unrolled = rho * unrolled + a * e;
        let unr = unrolled - lhs;
        out.violations += (step < -SLACK) as usize + (unr < -SLACK) as usize;
        out.step_margins.push(step);
        out.unrolled_margins.push(unr);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaCheck {
    /// Lower-bound lemma: `lhs − rhs` per point.
    pub descent_margins: Vec<f64>,
    /// Upper-bound lemma: `rhs − lhs` per point.
    pub gradient_margins: Vec<f64>,
    pub violations: usize,
}

/// Evaluates both per-iteration lemmas at the given iterates `(u, v)`.
pub fn check_descent_lemmas(
    tb: &QuadraticTestbed,
    k: &TheoremConstants,
    points: &[(DVector<f64>, DVector<f64>)],
) -> LemmaCheck {
    let mut out = LemmaCheck {
        descent_margins: Vec::with_capacity(points.len()),
        gradient_margins: Vec::with_capacity(points.len()),
        violations: 0,
    };
    let (e1, e2) = (k.eta1, k.eta2);
    for (u, v) in points {
        let g1 = tb.grad1_loss1(u);
        let (g21, g22) = tb.grad_loss2(u, v);
        let eps = &g21 - &g1;
        let (u1, v1) = layerwise_iteration(tb, e1, e2, u, v);
        let g2_mid = tb.grad_loss2(&u1, v).1;
        let (n_g1, n_mid, cross) = (g1.norm_squared(), g2_mid.norm_squared(), g1.dot(&eps));

        let drop = tb.loss2(u, v) - tb.loss2(&u1, &v1);
        let lower = e2 * (1.0 - k.l2 * e2 / 2.0) * n_mid + e1 * cross + e1 * (1.0 - k.l1 * e1 / 2.0) * n_g1;
        let dm = drop - lower;

        let lhs = g21.norm_squared() + g22.norm_squared() - eps.norm_squared();
        let upper = (2.0 * (k.l * e1).powi(2) + 1.0) * n_g1 + 2.0 * n_mid + 2.0 * cross;
        let gm = upper - lhs;

        out.violations += (dm < -SLACK) as usize + (gm < -SLACK) as usize;
        out.descent_margins.push(dm);
        out.gradient_margins.push(gm);
    }
    out
}

/// Gaussian iterates around the testbed's starting point.
pub fn sample_points(tb: &QuadraticTestbed, n: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let u = &tb.u0 + DVector::from_fn(tb.n1(), |_, _| normal(&mut rng));
            let v = &tb.v0 + DVector::from_fn(tb.n2(), |_, _| normal(&mut rng));
            (u, v)
        })
        .collect()
}

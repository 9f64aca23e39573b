//! Exact-equivalence and one-step-improvement checks on small networks with
//! fixed ETF heads.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use super::TheoryError;
use crate::diff::{max_rel_err, Tape, Tensor};
use crate::etf::{cross_entropy, softmax, EtfClassifier};
use crate::localnet::{Activation, AuxHead, Block, Layer, LocalModule, NetError};
use crate::rng::{derive, seeded, Rng};

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// How each module's local objective is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalObjective {
    /// Module `k` is scored by every downstream module (frozen) and the last
    /// head, so consecutive input/output gradients coincide exactly.
    Composed,
    /// Module `k` is scored by its own independent ETF head.
    IndependentHeads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    /// Relative deviation of each module's local gradient from the global
    /// one, worst over its weight and bias.
    pub per_module: Vec<f64>,
    pub max_deviation: f64,
    /// Largest raw reconciliation value between neighbours.
    pub max_sgr: f64,
}

const EQUIV_CLASSES: usize = 3;
const EQUIV_BATCH: usize = 8;

fn equivalence_modules(widths: &[usize], act: Activation, seed: u64) -> Result<Vec<LocalModule>, NetError> {
    let mut rng = seeded(derive(seed, 1));
    widths
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let mut layer = Layer::init(w[0], w[1], act, derive(seed, 100 + k as u64));
            // keep pre-activations off the ReLU kink
            for b in layer.bias.data_mut() {
                *b = rng.random_range(-0.3..0.3);
            }
            let head = EtfClassifier::new(EQUIV_CLASSES, w[1], derive(seed, 200 + k as u64))?;
            LocalModule::new(Block { layers: vec![layer] }, AuxHead::EtfFixed(head))
        })
        .collect()
}

/// Compares every module's local parameter gradient with the end-to-end
/// gradient of the last head's loss. `widths = [d_in, w_1, ..., w_L]`.
pub fn check_head_equivalence(
    widths: &[usize],
    act: Activation,
    objective: LocalObjective,
    seed: u64,
) -> Result<EquivalenceReport, NetError> {
    if widths.len() < 3 {
        return Err(NetError::Widths("need at least two modules".into()));
    }
    if widths[1..].iter().any(|&w| w < EQUIV_CLASSES) {
        return Err(NetError::Widths(format!("widths must be >= {EQUIV_CLASSES}")));
    }
    let modules = equivalence_modules(widths, act, seed)?;
    let mut rng = seeded(derive(seed, 2));
    let x = Tensor::from_fn(EQUIV_BATCH, widths[0], |_, _| normal(&mut rng));
    let y: Vec<usize> = (0..EQUIV_BATCH).map(|i| i % EQUIV_CLASSES).collect();
    let last = modules.len() - 1;

    // end-to-end reference
    let global = {
        let tape = Tape::new();
        let bound: Vec<_> = modules.iter().map(|m| m.bind(&tape)).collect();
        let mut h = tape.constant(x.clone());
        for (m, p) in modules.iter().zip(&bound) {
            h = m.block_forward_var(h, p)?;
        }
        let loss = modules[last].head_forward_var(h, &bound[last])?.softmax_cross_entropy(&y)?;
        let vars: Vec<_> = bound.iter().flat_map(|p| p.vars[..2].to_vec()).collect();
        tape.grad(loss, &vars)?
    };

    let mut inputs = vec![x];
    for m in &modules[..last] {
        let next = m.forward(inputs.last().unwrap())?;
        inputs.push(next);
    }

    let mut per_module = Vec::with_capacity(modules.len());
    let mut delta_in = Vec::with_capacity(modules.len());
    let mut delta_out = Vec::with_capacity(modules.len());
    for (k, m) in modules.iter().enumerate() {
        let tape = Tape::new();
        let xin = tape.leaf(inputs[k].clone());
        let p = m.bind(&tape);
        let out = m.block_forward_var(xin, &p)?;
        let logits = match objective {
            LocalObjective::IndependentHeads => m.head_forward_var(out, &p)?,
            LocalObjective::Composed => {
                let mut h = out;
                for down in &modules[k + 1..] {
                    h = down.block_forward_var(h, &down.bind_frozen(&tape))?;
                }
                modules[last].head_forward_var(h, &modules[last].bind_frozen(&tape))?
            }
        };
        let loss = logits.softmax_cross_entropy(&y)?;
        let mut g = tape.grad(loss, &[p.vars[0], p.vars[1], xin, out])?;
        delta_out.push(g.pop().unwrap());
        delta_in.push(g.pop().unwrap());
        per_module.push(max_rel_err(&g, &global[2 * k..2 * k + 2]));
    }
    let max_sgr = (1..modules.len())
        .map(|k| 0.5 * delta_in[k].sub(&delta_out[k - 1]).map(|t| t.norm_sq()).unwrap_or(f64::NAN))
        .fold(0.0, f64::max);
    Ok(EquivalenceReport {
        max_deviation: per_module.iter().copied().fold(0.0, f64::max),
        per_module,
        max_sgr,
    })
}

/// State of the two-layer linear model `x₂ = θ₂θ₁x₀` on one sample.
#[derive(Clone, Debug)]
pub struct GainState {
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
    pub theta1: DMatrix<f64>,
    pub theta2: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub y: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainOutcome {
    /// Inference loss after a plain step.
    pub loss_plain: f64,
    /// Inference loss after a step that also descends the reconciliation
    /// loss.
    pub loss_sgr: f64,
    /// Same, but with the reconciliation gradient taken through the
    /// dependence of `δx₂` on `θ₂` as well.
    pub loss_sgr_exact: f64,
    /// `x̂₂' = x₂' − β δx₂`.
    pub beta: f64,
    /// `½‖δx₁ − θ₂ᵀδx₂‖²` before the step.
    pub sgr: f64,
    /// True-class logit of layer 2 exceeds that of layer 1.
    pub logit_order: bool,
}

fn ce_delta(m: &DMatrix<f64>, x: &DVector<f64>, y: usize) -> DVector<f64> {
    let mut p = DVector::from_vec(softmax((m * x).as_slice()));
    p[y] -= 1.0;
    m.tr_mul(&p)
}

fn ce(m: &DMatrix<f64>, x: &DVector<f64>, y: usize) -> f64 {
    cross_entropy((m * x).as_slice(), y)
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Gradient of `½‖δx₁ − θ₂ᵀ δx₂(θ₂)‖²` in `θ₂`, differentiating through
/// the softmax inside `δx₂`.
fn exact_sgr_grad(s: &GainState, x1: &DVector<f64>, dx1: &DVector<f64>) -> DMatrix<f64> {
    let d = x1.len();
    let tape = Tape::new();
    let th = tape.leaf(Tensor::matrix(s.theta2.nrows(), d, s.theta2.transpose().as_slice().to_vec()));
    let x = tape.constant(Tensor::matrix(1, d, x1.as_slice().to_vec()));
    let m2 = tape.constant(Tensor::matrix(s.m2.nrows(), s.m2.ncols(), s.m2.transpose().as_slice().to_vec()));
    let tgt = tape.constant(Tensor::matrix(1, d, dx1.as_slice().to_vec()));
    let grad = (|| {
        let x2 = x.matmul_t(false, th, true)?;
        let loss = x2.matmul_t(false, m2, true)?.softmax_cross_entropy(&[s.y])?;
        let dx2 = tape.grad_graph(loss, &[x2])?.remove(0);
        let r = tgt.sub(dx2.matmul(th)?)?;
        let sgr = r.mul(r)?.sum()?.scale(0.5)?;
        tape.grad(sgr, &[th])
    })()
    .expect("shapes fixed by construction")
    .remove(0);
    DMatrix::from_row_slice(grad.rows(), grad.cols(), grad.data())
}

/// One step of both layers from `s`, with and without the reconciliation
/// term. `θ₂` takes its same-pass gradient `δx₂ x₁ᵀ`; the reconciliation
/// gradient treats `δx₁` and `δx₂` as constants.
pub fn gain_step(s: &GainState, eta: f64) -> GainOutcome {
    let x1 = &s.theta1 * &s.x0;
    let x2 = &s.theta2 * &x1;
    let dx1 = ce_delta(&s.m1, &x1, s.y);
    let dx2 = ce_delta(&s.m2, &x2, s.y);
    let r = &dx1 - s.theta2.tr_mul(&dx2);

    let theta1n = &s.theta1 - eta * &dx1 * s.x0.transpose();
    let x1n = &theta1n * &s.x0;
    let theta2n = &s.theta2 - eta * &dx2 * x1.transpose();
    let theta2s = &theta2n + eta * &dx2 * r.transpose();
    let theta2e = &theta2n - eta * exact_sgr_grad(s, &x1, &dx1);

    let z1 = &s.m1 * &x1;
    let z2 = &s.m2 * &x2;
    GainOutcome {
        loss_plain: ce(&s.m2, &(&theta2n * &x1n), s.y),
        loss_sgr: ce(&s.m2, &(&theta2s * &x1n), s.y),
        loss_sgr_exact: ce(&s.m2, &(&theta2e * &x1n), s.y),
        beta: -eta * r.dot(&x1n),
        sgr: 0.5 * r.norm_squared(),
        logit_order: z2[s.y] > z1[s.y],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainConfig {
    pub classes: usize,
    pub dim: usize,
    pub eta: f64,
    /// Admission threshold on the reconciliation loss.
    pub sgr_threshold: f64,
    pub target_admitted: usize,
    /// Give up after this many draws.
    pub max_draws: usize,
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 16,
            eta: 0.05,
            sgr_threshold: 1e-3,
            target_admitted: 500,
            max_draws: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainReport {
    pub draws: usize,
    pub admitted: usize,
    pub improved: usize,
    pub fraction: f64,
    /// Fraction improved when the reconciliation gradient is exact.
    pub exact_fraction: f64,
    pub betas: Vec<f64>,
}

/// A confident, nearly reconciled starting point: layer 1 maps `x₀` onto
/// a scaled class vector, layer 2 carries it to the matching class vector
/// of its own head, both perturbed by Gaussian noise.
pub fn gain_draw(m1: &DMatrix<f64>, m2: &DMatrix<f64>, rng: &mut Rng) -> GainState {
    let (k, d) = m1.shape();
    let y = rng.random_range(0..k);
    let x0 = DVector::from_fn(d, |_, _| normal(rng));
    let c1: f64 = rng.random_range(2.0..8.0);
    let c2: f64 = rng.random_range(2.0..8.0);
    let noise = 0.3 / (d as f64).sqrt();
    let m1y = m1.row(y).transpose();
    let m2y = m2.row(y).transpose();
    let theta1 = c1 * &m1y * x0.transpose() / x0.norm_squared() + DMatrix::from_fn(d, d, |_, _| noise * normal(rng));
    let theta2 = (c2 / c1) * &m2y * m1y.transpose() + DMatrix::from_fn(d, d, |_, _| noise * normal(rng));
    GainState {
        m1: m1.clone(),
        m2: m2.clone(),
        theta1,
        theta2,
        x0,
        y,
    }
}

pub fn check_reconciliation_gain(cfg: &GainConfig, seed: u64) -> Result<GainReport, TheoryError> {
    let etf = |tag| {
        EtfClassifier::new(cfg.classes, cfg.dim, derive(seed, tag))
            .map(|e| to_dmatrix(e.matrix()))
            .map_err(|e| TheoryError::InvalidTestbed(e.to_string()))
    };
    let (m1, m2) = (etf(1)?, etf(2)?);
    let mut rng = seeded(derive(seed, 3));
    let mut rep = GainReport {
        draws: 0,
        admitted: 0,
        improved: 0,
        fraction: 0.0,
        exact_fraction: 0.0,
        betas: Vec::new(),
    };
    let mut exact = 0;
    while rep.admitted < cfg.target_admitted && rep.draws < cfg.max_draws {
        rep.draws += 1;
        let s = gain_draw(&m1, &m2, &mut rng);
        let o = gain_step(&s, cfg.eta);
        if !o.logit_order || o.sgr >= cfg.sgr_threshold {
            continue;
        }
        rep.admitted += 1;
        rep.improved += (o.loss_sgr <= o.loss_plain) as usize;
        exact += (o.loss_sgr_exact <= o.loss_plain) as usize;
        rep.betas.push(o.beta);
    }
    if rep.admitted > 0 {
        rep.fraction = rep.improved as f64 / rep.admitted as f64;
        rep.exact_fraction = exact as f64 / rep.admitted as f64;
    }
    Ok(rep)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EtfLemmaReport {
    pub draws: usize,
    pub violations: usize,
    /// Smallest observed `CE(Mx) − CE(Mx̂)`.
    pub min_decrease: f64,
}

/// Draws `(x, y, p, η)` with every `pᵢ ∈ (0,1)` and `η ∈ (0,1]`, steps
/// `x̂ = x − η Mᵀ(p − e_y)` and checks the loss strictly decreases.
pub fn check_etf_lemma(classes: usize, dim: usize, draws: usize, seed: u64) -> Result<EtfLemmaReport, TheoryError> {
    let mut rng = seeded(seed);
    let mut rep = EtfLemmaReport {
        draws,
        violations: 0,
        min_decrease: f64::INFINITY,
    };
    for i in 0..draws {
        let head = EtfClassifier::new(classes, dim, derive(seed, i as u64))
            .map_err(|e| TheoryError::InvalidTestbed(e.to_string()))?;
        let x: Vec<f64> = (0..dim).map(|_| 2.0 * normal(&mut rng)).collect();
        let y = rng.random_range(0..classes);
        let w: Vec<f64> = (0..classes).map(|_| (1.5 * normal(&mut rng)).exp()).collect();
        let total: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / total).collect();
        let eta = 1.0 - rng.random_range(0.0..1.0);
        let dx = head.ce_delta(&p, y).map_err(|e| TheoryError::InvalidTestbed(e.to_string()))?;
        let xh: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a - eta * b).collect();
        let dec = cross_entropy(&head.logits(&x), y) - cross_entropy(&head.logits(&xh), y);
        rep.violations += !(dec > 0.0) as usize;
        rep.min_decrease = rep.min_decrease.min(dec);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composed_objective_reproduces_global_gradient() {
        let lin = check_head_equivalence(&[5, 4, 3], Activation::Identity, LocalObjective::Composed, 0).unwrap();
        assert!(lin.max_deviation <= 1e-10, "{lin:?}");
        let relu = check_head_equivalence(&[6, 8, 7, 5, 4], Activation::Relu, LocalObjective::Composed, 1).unwrap();
        assert!(relu.max_deviation <= 1e-8, "{relu:?}");
        assert!(relu.max_sgr < 1e-28);
        // the top module's two objectives are the same function
        assert!(relu.per_module[3] == 0.0);
    }

    #[test]
    fn independent_heads_do_not() {
        let r = check_head_equivalence(&[6, 8, 7, 5], Activation::Relu, LocalObjective::IndependentHeads, 2).unwrap();
        assert!(r.max_deviation > 0.1, "{r:?}");
        assert!(r.max_sgr > 1e-6);
    }

    #[test]
    fn equivalence_rejects_single_module() {
        assert!(check_head_equivalence(&[4, 4], Activation::Relu, LocalObjective::Composed, 0).is_err());
    }

    fn sample_state(seed: u64) -> GainState {
        let m1 = to_dmatrix(EtfClassifier::new(4, 6, 1).unwrap().matrix());
        let m2 = to_dmatrix(EtfClassifier::new(4, 6, 2).unwrap().matrix());
        gain_draw(&m1, &m2, &mut seeded(seed))
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let o = gain_step(&sample_state(3), 0.0);
        assert_eq!(o.loss_plain, o.loss_sgr);
        assert_eq!(o.loss_plain, o.loss_sgr_exact);
        assert_eq!(o.beta, 0.0);
    }

    #[test]
    fn saturated_second_layer_makes_the_extra_step_vanish() {
        let mut s = sample_state(4);
        // huge true-class margin: δx₂ underflows to zero
        s.theta2 = 1e4 * s.m2.row(s.y).transpose() * s.m1.row(s.y);
        s.theta1 = 10.0 * s.m1.row(s.y).transpose() * s.x0.transpose() / s.x0.norm_squared();
        let o = gain_step(&s, 0.1);
        assert!((o.loss_plain - o.loss_sgr).abs() <= 1e-12);
    }

    #[test]
    fn beta_matches_the_feature_shift() {
        let s = sample_state(5);
        let eta = 0.05;
        let o = gain_step(&s, eta);
        let x1 = &s.theta1 * &s.x0;
        let dx2 = ce_delta(&s.m2, &(&s.theta2 * &x1), s.y);
        let dx1 = ce_delta(&s.m1, &x1, s.y);
        let r = &dx1 - s.theta2.tr_mul(&dx2);
        let x1n = (&s.theta1 - eta * &dx1 * s.x0.transpose()) * &s.x0;
        let shift = eta * &dx2 * r.transpose() * &x1n;
        assert!((&shift + o.beta * &dx2).norm() <= 1e-12 * (1.0 + shift.norm()));
    }

    #[test]
    fn exact_reconciliation_gradient_matches_finite_differences() {
        let s = sample_state(6);
        let x1 = &s.theta1 * &s.x0;
        let dx1 = ce_delta(&s.m1, &x1, s.y);
        let g = exact_sgr_grad(&s, &x1, &dx1);
        let f = |t: &DMatrix<f64>| {
            let dx2 = ce_delta(&s.m2, &(t * &x1), s.y);
            0.5 * (&dx1 - t.tr_mul(&dx2)).norm_squared()
        };
        let h = 1e-6;
        for (i, j) in [(0, 0), (2, 3), (5, 1)] {
            let (mut up, mut dn) = (s.theta2.clone(), s.theta2.clone());
            up[(i, j)] += h;
            dn[(i, j)] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g[(i, j)]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[(i, j)]);
        }
    }

    #[test]
    fn gain_statistic_on_a_small_run() {
        let cfg = GainConfig {
            target_admitted: 100,
            ..GainConfig::default()
        };
        let r = check_reconciliation_gain(&cfg, 11).unwrap();
        assert_eq!(r.admitted, 100);
        assert!(r.fraction >= 0.9, "{r:?}");
        assert!(r.betas.iter().filter(|&&b| b >= 0.0).count() >= 90);
    }

    #[test]
    fn etf_lemma_holds() {
        let r = check_etf_lemma(10, 12, 200, 0).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.min_decrease > 0.0);
    }
}

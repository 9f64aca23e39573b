//! The full verification suite: one row per (check, seed) with a signed
//! margin (non-negative means the claim held) and a pass flag.

use std::fmt::Write as _;
use std::path::Path;

use super::flops::check_flops_claim;
use super::props::{check_etf_lemma, check_head_equivalence, check_reconciliation_gain, LocalObjective, GainConfig};
use super::quadratic::{
    check_descent_lemmas, check_theorem_bound, estimate_constants, run_two_layer_local, sample_points,
    QuadraticTestbed, SLACK,
};
use super::TheoryError;
use crate::localnet::Activation;
use crate::rng::derive;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub seed: u64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub theorem_seeds: usize,
    pub theorem_iters: usize,
    pub lemma_seeds: usize,
    pub lemma_points: usize,
    pub etf_draws: usize,
    pub gain: GainConfig,
    pub equivalence_tol: f64,
    pub flops_sizes: Vec<(usize, usize)>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            theorem_seeds: 20,
            theorem_iters: 1000,
            lemma_seeds: 10,
            lemma_points: 200,
            etf_draws: 1000,
            gain: GainConfig::default(),
            equivalence_tol: 1e-8,
            flops_sizes: vec![(8, 4), (32, 16), (128, 64)],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
}

/// Testbed dimensions `(d₀, d₁, d₂)` for the convergence runs.
const DIMS: (usize, usize, usize) = (3, 3, 3);
/// Widths for the exact-equivalence check; depth `L` uses the first `L+1`.
const EQUIV_WIDTHS: [usize; 5] = [12, 16, 12, 10, 8];

impl SuiteReport {
    fn push(&mut self, check: &str, seed: u64, margin: f64, pass: bool) {
        self.rows.push(CheckRow {
            check: check.into(),
            seed,
            margin,
            pass: pass && !margin.is_nan(),
        });
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    /// `check,seed,margin,pass`; margins in shortest round-trip form.
    pub fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        w.write_record(["check", "seed", "margin", "pass"])?;
        for r in &self.rows {
            w.write_record([r.check.clone(), r.seed.to_string(), format!("{:e}", r.margin), r.pass.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per check: row count, passes, worst margin.
    pub fn summary(&self) -> String {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.check.as_str()) {
                names.push(&r.check);
            }
        }
        let mut s = String::new();
        for name in names {
            let rows: Vec<_> = self.rows.iter().filter(|r| r.check == name).collect();
            let ok = rows.iter().filter(|r| r.pass).count();
            let worst = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
            let _ = writeln!(
                s,
                "{:<22} {:>4}/{:<4} worst margin {:>12.4e}  {}",
                name,
                ok,
                rows.len(),
                worst,
                if ok == rows.len() { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

pub fn theorem_checks(cfg: &SuiteConfig, seed: u64, rep: &mut SuiteReport) -> Result<(), TheoryError> {
    for i in 0..cfg.theorem_seeds {
        let s = derive(seed, 1000 + i as u64);
        let tb = QuadraticTestbed::linearized(DIMS.0, DIMS.1, DIMS.2, s)?;
        let k = estimate_constants(&tb)?;
        let tr = run_two_layer_local(&tb, &k, cfg.theorem_iters);
        let c = check_theorem_bound(&tr, &k);
        let complete = !tr.diverged && tr.eps_sq.len() == cfg.theorem_iters && k.admissible();
        let step = c.step_margins.iter().copied().fold(f64::INFINITY, f64::min);
        let unrolled = c.unrolled_margins.iter().copied().fold(f64::INFINITY, f64::min);
        rep.push("theorem_step", s, step, complete && step >= -SLACK);
        rep.push("theorem_unrolled", s, unrolled, complete && unrolled >= -SLACK);
    }
    // no discrepancy: pure geometric contraction
    for i in 0..5 {
        let s = derive(seed, 1500 + i);
        let tb = QuadraticTestbed::shared_head(6, 5, s)?;
        let k = estimate_constants(&tb)?;
        let tr = run_two_layer_local(&tb, &k, cfg.theorem_iters);
        let rho = 1.0 - k.alpha() * k.mu;
        let star = tr.loss2_star;
        let margin = tr
            .loss2
            .windows(2)
            .filter(|w| w[0] - star > 1e-8)
            .map(|w| rho + 1e-12 - (w[1] - star) / (w[0] - star))
            .fold(f64::INFINITY, f64::min);
        let eps = tr.eps_sq.iter().copied().fold(0.0, f64::max);
        rep.push("contraction", s, margin, !tr.diverged && margin >= 0.0 && eps < 1e-20);
    }
    Ok(())
}

pub fn lemma_checks(cfg: &SuiteConfig, seed: u64, rep: &mut SuiteReport) -> Result<(), TheoryError> {
    for i in 0..cfg.lemma_seeds {
        let s = derive(seed, 2000 + i as u64);
        let tb = QuadraticTestbed::linearized(DIMS.0, DIMS.1, DIMS.2, s)?;
        let k = estimate_constants(&tb)?;
        let pts = sample_points(&tb, cfg.lemma_points, derive(s, 1));
        let c = check_descent_lemmas(&tb, &k, &pts);
        let d = c.descent_margins.iter().copied().fold(f64::INFINITY, f64::min);
        let g = c.gradient_margins.iter().copied().fold(f64::INFINITY, f64::min);
        rep.push("lemma_descent", s, d, d >= -SLACK);
        rep.push("lemma_gradient", s, g, g >= -SLACK);
    }
    let s = derive(seed, 2500);
    let e = check_etf_lemma(10, 16, cfg.etf_draws, s)?;
    rep.push("etf_lemma", s, e.min_decrease, e.violations == 0);
    Ok(())
}

pub fn equivalence_checks(cfg: &SuiteConfig, seed: u64, rep: &mut SuiteReport) -> Result<(), TheoryError> {
    let net = |e: crate::localnet::NetError| TheoryError::InvalidTestbed(e.to_string());
    for depth in 2..=4 {
        let widths = &EQUIV_WIDTHS[..=depth];
        for (act, name) in [(Activation::Identity, "equivalence_linear"), (Activation::Relu, "equivalence_relu")] {
            let s = derive(seed, 3000 + depth as u64);
            let r = check_head_equivalence(widths, act, LocalObjective::Composed, s).map_err(net)?;
            let margin = cfg.equivalence_tol - r.max_deviation;
            rep.push(&format!("{name}_L{depth}"), s, margin, margin >= 0.0);
        }
    }
    // negative control: unrelated heads must not reproduce the gradient
    let s = derive(seed, 3100);
    let r = check_head_equivalence(&EQUIV_WIDTHS[..4], Activation::Relu, LocalObjective::IndependentHeads, s).map_err(net)?;
    rep.push("equivalence_control", s, r.max_deviation - 1e-3, r.max_deviation > 1e-3);
    Ok(())
}

pub fn gain_checks(cfg: &SuiteConfig, seed: u64, rep: &mut SuiteReport) -> Result<(), TheoryError> {
    let s = derive(seed, 4000);
    let r = check_reconciliation_gain(&cfg.gain, s)?;
    let margin = r.fraction - 0.95;
    rep.push("reconciliation_gain", s, margin, r.admitted >= cfg.gain.target_admitted && margin >= 0.0);
    Ok(())
}

pub fn flops_checks(cfg: &SuiteConfig, seed: u64, rep: &mut SuiteReport) -> Result<(), TheoryError> {
    for &(m, n) in &cfg.flops_sizes {
        let s = derive(seed, 5000 + (m * 1000 + n) as u64);
        let r = check_flops_claim(m, n, s).map_err(|e| TheoryError::InvalidTestbed(e.to_string()))?;
        let count_gap = 0.0 - (r.counted as i64 - r.predicted as i64).abs() as f64;
        rep.push(&format!("flops_count_{m}x{n}"), s, count_gap, count_gap == 0.0);
        rep.push(&format!("flops_grad_{m}x{n}"), s, 1e-9 - r.grad_err, r.grad_err <= 1e-9);
    }
    Ok(())
}

pub fn run_suite(cfg: &SuiteConfig, seed: u64) -> Result<SuiteReport, TheoryError> {
    let mut rep = SuiteReport::default();
    theorem_checks(cfg, seed, &mut rep)?;
    lemma_checks(cfg, seed, &mut rep)?;
    equivalence_checks(cfg, seed, &mut rep)?;
    gain_checks(cfg, seed, &mut rep)?;
    flops_checks(cfg, seed, &mut rep)?;
    Ok(rep)
}

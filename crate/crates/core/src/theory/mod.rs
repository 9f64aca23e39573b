//! Numerical checks of the convergence theory on problems whose constants
//! are exactly computable.

pub mod flops;
pub mod props;
pub mod quadratic;
pub mod suite;

use thiserror::Error;

pub use flops::{check_flops_claim, FlopsReport};
pub use props::{check_etf_lemma, check_head_equivalence, check_reconciliation_gain, LocalObjective, EquivalenceReport, GainConfig, GainReport};
pub use quadratic::{
    check_descent_lemmas, check_theorem_bound, estimate_constants, run_two_layer_local, sample_points,
    BoundCheck, EpsTrace, LemmaCheck, QuadraticTestbed, TheoremConstants,
};
pub use suite::{run_suite, CheckRow, SuiteConfig, SuiteReport};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid testbed: {0}")]
    InvalidTestbed(String),
}

//! Synthetic experiments: data generation, the trial runner, estimators and
//! brute-force oracles.

pub mod dgp;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod runner;

pub use dgp::{CostModel, Dgp, DgpKind};
pub use metrics::{fcr_estimate, miscov_estimate, summarize, Summary, UnitOutcome};
pub use oracle::{
    oracle_reference_set, permutation_invariance_check, reference_mismatches,
    weak_fcr_counterexample,
};
pub use runner::{evaluate_split, run_trials, Experiment, TrialRecord};

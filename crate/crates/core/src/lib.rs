//! Selection-conditional conformal prediction.
//!
//! Given calibration data and a data-dependent selection of test units, the
//! sets built here cover the outcome of each selected unit with probability
//! `1 - alpha` conditional on that unit having been selected.

pub mod error;
pub mod harness;
pub mod io;
pub mod jomi;
pub mod pipeline;
pub mod predsel;
pub mod pvalues;
pub mod quantile;
pub mod report;
pub mod rules;
pub mod score;
pub mod set;
pub mod split;
pub mod unit;

pub use error::{JomiError, Result};
pub use pipeline::{Method, Pipeline, Prepared, References, RuleSpec, TaxonomySpec};
pub use quantile::{conformal_quantile, randomized_membership, SetMode, VThreshold};
pub use score::ScoreFamily;
pub use set::{Interval, IntervalUnion, PredictionSet, SetKind};
pub use split::scp_set;
pub use unit::{DataView, Dataset, ScoreSource, Unit};

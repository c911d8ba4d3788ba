//! Vanilla split conformal prediction.

use crate::error::Result;
use crate::quantile::{deterministic_threshold, VThreshold};
use crate::score::ScoreFamily;
use crate::set::PredictionSet;
use crate::unit::Unit;

/// Inverts `V(x, y)` against a score cutoff.
pub fn invert(unit: &Unit, family: ScoreFamily, th: VThreshold) -> Result<PredictionSet> {
    family.sublevel(unit, th.value, !th.inclusive)
}

/// `{y: V(x, y) <= Quantile(1 - alpha; calib_scores ∪ {inf})}`.
pub fn scp_set(
    unit: &Unit,
    calib_scores: &[f64],
    family: ScoreFamily,
    alpha: f64,
) -> Result<PredictionSet> {
    family.check(unit)?;
    invert(unit, family, deterministic_threshold(calib_scores, alpha)?)
}

/// Scores of all calibration units at their observed outcomes.
pub fn calibration_scores(calib: &[Unit], family: ScoreFamily) -> Result<Vec<f64>> {
    calib
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let y = u.y.ok_or(crate::error::JomiError::MissingOutcome(i))?;
            family.score(u, y)
        })
        .collect()
}

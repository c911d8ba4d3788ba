//! Nonconformity score families and their exact sublevel-set inversion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, JomiError, Result};
use crate::set::{Interval, IntervalUnion, PredictionSet, SetKind};
use crate::unit::Unit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFamily {
    /// `|y - mu_hat|`
    AbsResidual,
    /// `|y - mu_hat| / sigma_hat`
    ScaledResidual,
    /// `max(q_lo - y, y - q_hi)`
    Cqr,
    /// `y (1 - mu_hat) + (1 - y) mu_hat` for `y` in {0, 1}
    Binary,
    /// Deterministic adaptive prediction sets over `class_probs`.
    Aps,
}

impl ScoreFamily {
    pub const ALL: [ScoreFamily; 5] = [
        ScoreFamily::AbsResidual,
        ScoreFamily::ScaledResidual,
        ScoreFamily::Cqr,
        ScoreFamily::Binary,
        ScoreFamily::Aps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreFamily::AbsResidual => "abs_residual",
            ScoreFamily::ScaledResidual => "scaled_residual",
            ScoreFamily::Cqr => "cqr",
            ScoreFamily::Binary => "binary",
            ScoreFamily::Aps => "aps",
        }
    }

    pub fn set_kind(self) -> SetKind {
        match self {
            ScoreFamily::Binary | ScoreFamily::Aps => SetKind::Labels,
            _ => SetKind::Intervals,
        }
    }

    pub fn is_finite(self) -> bool {
        self.set_kind() == SetKind::Labels
    }

    fn need(self, v: Option<f64>, field: &'static str) -> Result<f64> {
        v.ok_or(JomiError::ScoreFamilyMismatch {
            family: self.name(),
            field,
        })
    }

    /// Verifies that `unit` carries every field this family reads.
    pub fn check(self, unit: &Unit) -> Result<()> {
        match self {
            ScoreFamily::AbsResidual | ScoreFamily::Binary => {
                self.need(unit.mu_hat, "mu_hat")?;
            }
            ScoreFamily::ScaledResidual => {
                self.need(unit.mu_hat, "mu_hat")?;
                let s = self.need(unit.sigma_hat, "sigma_hat")?;
                if !(s > 0.0) {
                    return Err(invalid(format!(
                        "unit `{}`: sigma_hat must be positive",
                        unit.id
                    )));
                }
            }
            ScoreFamily::Cqr => {
                self.need(unit.q_lo, "q_lo")?;
                self.need(unit.q_hi, "q_hi")?;
            }
            ScoreFamily::Aps => {
                if unit.class_probs.is_none() {
                    return Err(JomiError::ScoreFamilyMismatch {
                        family: self.name(),
                        field: "class_probs",
                    });
                }
            }
        }
        Ok(())
    }

    /// The label alphabet, for finite families.
    pub fn labels(self, unit: &Unit) -> Result<Vec<usize>> {
        match self {
            ScoreFamily::Binary => Ok(vec![0, 1]),
            ScoreFamily::Aps => {
                let probs = unit
                    .class_probs
                    .as_ref()
                    .ok_or(JomiError::ScoreFamilyMismatch {
                        family: self.name(),
                        field: "class_probs",
                    })?;
                Ok((0..probs.len()).collect())
            }
            _ => Err(JomiError::Unsupported(format!(
                "{} has a continuous outcome space",
                self.name()
            ))),
        }
    }

    /// The whole outcome space for `unit`.
    pub fn universe(self, unit: &Unit) -> Result<PredictionSet> {
        if self.is_finite() {
            Ok(PredictionSet::Labels(self.labels(unit)?))
        } else {
            Ok(PredictionSet::Intervals(IntervalUnion::real_line()))
        }
    }

    pub fn score(self, unit: &Unit, y: f64) -> Result<f64> {
        match self {
            ScoreFamily::AbsResidual => Ok((y - self.need(unit.mu_hat, "mu_hat")?).abs()),
            ScoreFamily::ScaledResidual => {
                let mu = self.need(unit.mu_hat, "mu_hat")?;
                let s = self.need(unit.sigma_hat, "sigma_hat")?;
                Ok((y - mu).abs() / s)
            }
            ScoreFamily::Cqr => {
                let lo = self.need(unit.q_lo, "q_lo")?;
                let hi = self.need(unit.q_hi, "q_hi")?;
                Ok((lo - y).max(y - hi))
            }
            ScoreFamily::Binary => {
                let mu = self.need(unit.mu_hat, "mu_hat")?;
                if y != 0.0 && y != 1.0 {
                    return Err(invalid(format!("binary outcome must be 0 or 1, got {y}")));
                }
                Ok(y * (1.0 - mu) + (1.0 - y) * mu)
            }
            ScoreFamily::Aps => {
                let label = as_label(y)?;
                let probs = unit
                    .class_probs
                    .as_ref()
                    .ok_or(JomiError::ScoreFamilyMismatch {
                        family: self.name(),
                        field: "class_probs",
                    })?;
                aps_scores(probs)
                    .get(label)
                    .copied()
                    .ok_or_else(|| invalid(format!("label {label} outside alphabet")))
            }
        }
    }

    /// `{y: V(x, y) <= t}`, or `{y: V(x, y) < t}` when `strict`.
    pub fn sublevel(self, unit: &Unit, t: f64, strict: bool) -> Result<PredictionSet> {
        if t.is_nan() {
            return Err(invalid("NaN threshold"));
        }
        let closed = !strict;
        let interval = |lo: f64, hi: f64| {
            PredictionSet::Intervals(IntervalUnion::single(Interval::new(lo, hi, closed, closed)))
        };
        match self {
            ScoreFamily::AbsResidual => {
                let mu = self.need(unit.mu_hat, "mu_hat")?;
                Ok(interval(mu - t, mu + t))
            }
            ScoreFamily::ScaledResidual => {
                let mu = self.need(unit.mu_hat, "mu_hat")?;
                let s = self.need(unit.sigma_hat, "sigma_hat")?;
                if t.is_infinite() {
                    return Ok(interval(mu - t, mu + t));
                }
                Ok(interval(mu - t * s, mu + t * s))
            }
            ScoreFamily::Cqr => {
                let lo = self.need(unit.q_lo, "q_lo")?;
                let hi = self.need(unit.q_hi, "q_hi")?;
                Ok(interval(lo - t, hi + t))
            }
            ScoreFamily::Binary | ScoreFamily::Aps => {
                let mut keep = Vec::new();
                for label in self.labels(unit)? {
                    let v = self.score(unit, label as f64)?;
                    if v < t || (!strict && v == t) {
                        keep.push(label);
                    }
                }
                Ok(PredictionSet::Labels(keep))
            }
        }
    }
}

impl fmt::Display for ScoreFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreFamily {
    type Err = JomiError;

    fn from_str(s: &str) -> Result<Self> {
        ScoreFamily::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown score family `{s}`")))
    }
}

fn as_label(y: f64) -> Result<usize> {
    if y >= 0.0 && y.fract() == 0.0 && y < usize::MAX as f64 {
        Ok(y as usize)
    } else {
        Err(invalid(format!(
            "class label must be a nonnegative integer, got {y}"
        )))
    }
}

/// APS score of every label: the probability mass ranked at or above it,
/// ranking by descending probability with ties broken by label index.
fn aps_scores(probs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut acc = 0.0;
    for k in order {
        acc += probs[k];
        out[k] = acc;
    }
    out
}

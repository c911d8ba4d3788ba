//! Calibration and test records and read-only views over them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, JomiError, Result};

/// One calibration or test record.
///
/// Holds precomputed model outputs only; whether a unit is a calibration or
/// a test record is determined by which side of a [`Dataset`] it sits on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    /// Observed outcome. Required for calibration units; for test units it is
    /// only used for evaluation and is never read by selection rules.
    pub y: Option<f64>,
    pub mu_hat: Option<f64>,
    pub q_lo: Option<f64>,
    pub q_hi: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub class_probs: Option<Vec<f64>>,
    pub threshold_c: Option<f64>,
    pub cost: Option<f64>,
    pub sel_score: Option<f64>,
}

impl Unit {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Self::default()
        }
    }

    pub fn with_y(mut self, y: f64) -> Self {
        self.y = Some(y);
        self
    }

    pub fn with_mu_hat(mut self, mu_hat: f64) -> Self {
        self.mu_hat = Some(mu_hat);
        self
    }

    pub fn with_quantiles(mut self, lo: f64, hi: f64) -> Self {
        self.q_lo = Some(lo);
        self.q_hi = Some(hi);
        self
    }

    pub fn with_sigma_hat(mut self, sigma: f64) -> Self {
        self.sigma_hat = Some(sigma);
        self
    }

    pub fn with_class_probs(mut self, probs: Vec<f64>) -> Self {
        self.class_probs = Some(probs);
        self
    }

    pub fn with_threshold(mut self, c: f64) -> Self {
        self.threshold_c = Some(c);
        self
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = Some(cost);
        self
    }

    pub fn with_sel_score(mut self, s: f64) -> Self {
        self.sel_score = Some(s);
        self
    }

    /// Checks the class probability vector, when present.
    pub fn validate(&self) -> Result<()> {
        if let Some(probs) = &self.class_probs {
            if probs.is_empty() {
                return Err(invalid(format!("unit `{}`: empty class_probs", self.id)));
            }
            if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(invalid(format!(
                    "unit `{}`: class probabilities must be nonnegative",
                    self.id
                )));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(invalid(format!(
                    "unit `{}`: class probabilities sum to {total}, expected 1",
                    self.id
                )));
            }
        }
        if let Some(cost) = self.cost {
            if !(cost >= 0.0) {
                return Err(invalid(format!("unit `{}`: negative cost", self.id)));
            }
        }
        Ok(())
    }
}

/// Read access to a calibration/test split.
///
/// Selection rules see data only through this trait. The `y` field of units
/// returned by [`DataView::calib_unit`] and [`DataView::test_unit`] must not
/// be read; calibration outcomes come from [`DataView::calib_outcome`], which
/// yields the hypothesized outcome at a swapped position.
pub trait DataView {
    fn n_calib(&self) -> usize;
    fn n_test(&self) -> usize;
    fn calib_unit(&self, i: usize) -> &Unit;
    fn calib_outcome(&self, i: usize) -> Option<f64>;
    fn test_unit(&self, j: usize) -> &Unit;
}

/// Calibration and test units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub calib: Vec<Unit>,
    pub test: Vec<Unit>,
}

impl Dataset {
    /// Builds a dataset, checking that every calibration unit carries an outcome.
    pub fn new(calib: Vec<Unit>, test: Vec<Unit>) -> Result<Self> {
        for (i, u) in calib.iter().enumerate() {
            if u.y.is_none() {
                return Err(JomiError::MissingOutcome(i));
            }
            u.validate()?;
        }
        for u in &test {
            u.validate()?;
        }
        Ok(Self { calib, test })
    }

    pub fn n(&self) -> usize {
        self.calib.len()
    }

    pub fn m(&self) -> usize {
        self.test.len()
    }

    pub fn calib_y(&self, i: usize) -> Result<f64> {
        self.calib[i].y.ok_or(JomiError::MissingOutcome(i))
    }
}

impl DataView for Dataset {
    fn n_calib(&self) -> usize {
        self.calib.len()
    }

    fn n_test(&self) -> usize {
        self.test.len()
    }

    fn calib_unit(&self, i: usize) -> &Unit {
        &self.calib[i]
    }

    fn calib_outcome(&self, i: usize) -> Option<f64> {
        self.calib[i].y
    }

    fn test_unit(&self, j: usize) -> &Unit {
        &self.test[j]
    }
}

/// Which unit field supplies a covariate selection score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    SelScore,
    MuHat,
}

impl ScoreSource {
    pub fn value(self, unit: &Unit) -> Result<f64> {
        let (v, field) = match self {
            ScoreSource::SelScore => (unit.sel_score, "sel_score"),
            ScoreSource::MuHat => (unit.mu_hat, "mu_hat"),
        };
        v.ok_or_else(|| invalid(format!("unit `{}` is missing `{field}`", unit.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_units_need_outcomes() {
        let err = Dataset::new(vec![Unit::new("a")], vec![]).unwrap_err();
        assert!(matches!(err, JomiError::MissingOutcome(0)));
    }

    #[test]
    fn class_probs_must_sum_to_one() {
        let u = Unit::new("a").with_class_probs(vec![0.5, 0.6]);
        assert!(u.validate().is_err());
        let u = Unit::new("a").with_class_probs(vec![0.25, 0.75]);
        assert!(u.validate().is_ok());
        let u = Unit::new("a").with_class_probs(vec![-0.25, 1.25]);
        assert!(u.validate().is_err());
    }
}

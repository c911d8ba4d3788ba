//! Synthetic data generating processes. Calibration and test units are
//! drawn i.i.d. from the same law.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::rng::{stream, Role};
use crate::error::{invalid, Result};
use crate::unit::{Dataset, Unit};

/// Upper standard normal quantile at 0.95; the synthetic quantile
/// regressors report `mu -/+ Z90 * sigma`.
pub const Z90: f64 = 1.644_853_626_951_472_2;

/// Cost formulas for knapsack experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostModel {
    /// `exp(3 mu) + 2 |sin mu| + Exp(1)`
    Dpp,
    /// `exp(3 mu / mu_bar) + |sin mu| + Exp(1) - 1 + Unif(0, 1)`, floored at 0.
    Dti { mu_bar: f64 },
}

impl CostModel {
    /// Returns the cost and whether it was floored.
    pub fn draw<R: Rng + ?Sized>(&self, mu: f64, rng: &mut R) -> (f64, bool) {
        let e: f64 = Exp1.sample(rng);
        match *self {
            CostModel::Dpp => ((3.0 * mu).exp() + 2.0 * mu.sin().abs() + e, false),
            CostModel::Dti { mu_bar } => {
                let u: f64 = rng.random();
                let raw = (3.0 * mu / mu_bar).exp() + mu.sin().abs() + e - 1.0 + u;
                if raw < 0.0 {
                    (0.0, true)
                } else {
                    (raw, false)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpKind {
    /// `X ~ N(0,1)`, `Y = X + noise * eps`.
    Homoscedastic { noise: f64 },
    /// `X ~ N(0,1)`, `Y = X + noise * (1 + |X|) * eps`.
    Heteroscedastic { noise: f64 },
    /// `X ~ N(0,1)`, `P(Y = 1 | X) = 1 / (1 + exp(-slope X))`.
    LogisticBinary { slope: f64 },
}

/// A regression or classification law plus the fixed side information the
/// rules read (thresholds `c` and costs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dgp {
    pub law: DgpKind,
    /// Threshold `c` attached to every unit; `0.5` is used for binary data
    /// when absent.
    #[serde(default)]
    pub threshold_c: Option<f64>,
    #[serde(default)]
    pub cost: Option<CostModel>,
}

/// One generated split.
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: Dataset,
    /// Costs floored at zero.
    pub floored_costs: usize,
}

impl Dgp {
    pub fn heteroscedastic() -> Self {
        Self {
            law: DgpKind::Heteroscedastic { noise: 1.0 },
            threshold_c: Some(1.0),
            cost: Some(CostModel::Dti { mu_bar: 3.0 }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.law {
            DgpKind::Homoscedastic { noise } | DgpKind::Heteroscedastic { noise } => {
                noise > 0.0 && noise.is_finite()
            }
            DgpKind::LogisticBinary { slope } => slope.is_finite(),
        };
        if !ok {
            return Err(invalid(format!("invalid dgp parameters {:?}", self.law)));
        }
        if let Some(CostModel::Dti { mu_bar }) = self.cost {
            if !(mu_bar > 0.0 && mu_bar.is_finite()) {
                return Err(invalid("mu_bar must be positive"));
            }
        }
        Ok(())
    }

    fn unit<R: Rng + ?Sized, C: Rng + ?Sized>(
        &self,
        id: String,
        rng: &mut R,
        cost_rng: &mut C,
        floored: &mut usize,
    ) -> Unit {
        let x: f64 = StandardNormal.sample(rng);
        let mut u = match self.law {
            DgpKind::Homoscedastic { noise } | DgpKind::Heteroscedastic { noise } => {
                let sigma = match self.law {
                    DgpKind::Heteroscedastic { .. } => noise * (1.0 + x.abs()),
                    _ => noise,
                };
                let eps: f64 = StandardNormal.sample(rng);
                Unit::new(id)
                    .with_y(x + sigma * eps)
                    .with_mu_hat(x)
                    .with_sigma_hat(sigma)
                    .with_quantiles(x - Z90 * sigma, x + Z90 * sigma)
                    .with_sel_score(x)
            }
            DgpKind::LogisticBinary { slope } => {
                let p = 1.0 / (1.0 + (-slope * x).exp());
                let y = f64::from(u8::from(rng.random::<f64>() < p));
                Unit::new(id)
                    .with_y(y)
                    .with_mu_hat(p)
                    .with_class_probs(vec![1.0 - p, p])
                    .with_sel_score(p)
            }
        };
        let c = match (self.threshold_c, self.law) {
            (Some(c), _) => Some(c),
            (None, DgpKind::LogisticBinary { .. }) => Some(0.5),
            _ => None,
        };
        if let Some(c) = c {
            u = u.with_threshold(c);
        }
        if let Some(model) = self.cost {
            let (l, f) = model.draw(u.mu_hat.unwrap_or(0.0), cost_rng);
            *floored += usize::from(f);
            u = u.with_cost(l);
        }
        u
    }

    /// Draws `n` calibration and `m` test units for one trial.
    pub fn generate(&self, n: usize, m: usize, master_seed: u64, trial: u64) -> Result<Generated> {
        self.validate()?;
        let mut rng = stream(master_seed, trial, Role::Data);
        let mut cost_rng = stream(master_seed, trial, Role::Cost);
        let mut floored = 0;
        let calib = (0..n)
            .map(|i| self.unit(format!("c{i}"), &mut rng, &mut cost_rng, &mut floored))
            .collect();
        let test = (0..m)
            .map(|j| self.unit(format!("t{j}"), &mut rng, &mut cost_rng, &mut floored))
            .collect();
        Ok(Generated {
            data: Dataset::new(calib, test)?,
            floored_costs: floored,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible() {
        let d = Dgp::heteroscedastic();
        let a = d.generate(20, 5, 11, 4).unwrap();
        let b = d.generate(20, 5, 11, 4).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, d.generate(20, 5, 11, 5).unwrap().data);
        for u in a.data.calib.iter().chain(&a.data.test) {
            assert!(u.cost.unwrap() >= 0.0);
            assert_eq!(u.threshold_c, Some(1.0));
        }
    }

    #[test]
    fn binary_units_carry_probabilities() {
        let d = Dgp {
            law: DgpKind::LogisticBinary { slope: 2.0 },
            threshold_c: None,
            cost: None,
        };
        let g = d.generate(10, 3, 1, 0).unwrap();
        for u in &g.data.test {
            let p = u.class_probs.as_ref().unwrap();
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert_eq!(u.threshold_c, Some(0.5));
        }
    }

    #[test]
    fn dti_costs_floor_at_zero() {
        let mut rng = stream(0, 0, Role::Cost);
        let model = CostModel::Dti { mu_bar: 1.0 };
        let mut floored = 0;
        for _ in 0..2000 {
            let (l, f) = model.draw(-5.0, &mut rng);
            assert!(l >= 0.0);
            floored += usize::from(f);
        }
        assert!(floored > 0);
    }
}

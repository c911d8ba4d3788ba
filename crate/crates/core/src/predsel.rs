//! Selection driven by properties of a first-stage conformal set.
//!
//! The first stage uses its own score `S` and cutoff `eta`; a unit is
//! selected when a rule `L(x, eta)` holds for its first-stage set
//! `{y: S(x, y) <= eta}`. The second stage builds a conservative set from
//! two quantiles, one for outcomes below and one for outcomes above the band
//! where the first-stage cutoff can move.

use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, JomiError, Result};
use crate::jomi::{SelectionRule, Taxonomy};
use crate::quantile::{conformal_quantile, conformal_rank};
use crate::rules::SelectionResult;
use crate::score::ScoreFamily;
use crate::set::{PredictionSet, SetKind};
use crate::unit::{DataView, Unit};

/// Order statistics of the first-stage calibration scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrelimCalibration {
    pub k: usize,
    pub eta: f64,
    pub eta_minus: f64,
    pub eta_plus: f64,
    /// Calibration scores equal to `eta`; the strict cutoffs treat them as
    /// outside the open branches.
    pub ties_at_eta: usize,
    /// First-stage scores `S(X_i, Y_i)` in calibration order.
    pub scores: Vec<f64>,
}

/// `K = ceil((1 - beta)(n + 1))`; `eta` is the `K`-th smallest score and
/// `eta_minus`/`eta_plus` its neighbours, `-inf`/`+inf` past the ends.
pub fn prelim_calibrate(scores: &[f64], beta: f64) -> Result<PrelimCalibration> {
    check_alpha(beta)?;
    let n = scores.len();
    let k = conformal_rank(1.0 - beta, n + 1);
    if k > n {
        return Err(JomiError::BetaTooSmall { k, n });
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(PrelimCalibration {
        k,
        eta: s[k - 1],
        eta_minus: if k >= 2 { s[k - 2] } else { f64::NEG_INFINITY },
        eta_plus: s.get(k).copied().unwrap_or(f64::INFINITY),
        ties_at_eta: s.iter().filter(|&&v| v == s[k - 1]).count(),
        scores: scores.to_vec(),
    })
}

/// A property of the first-stage set `{y: S(x, y) <= eta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrelimRule {
    /// Total length (or label count) at most `lambda`.
    LengthLe { lambda: f64 },
    /// Supremum at most `bound`.
    UpperLe { bound: f64 },
    /// Infimum at least `bound`.
    LowerGe { bound: f64 },
    /// Exactly one label.
    Singleton,
}

impl PrelimRule {
    /// `L(x, eta)`.
    pub fn eval(&self, unit: &Unit, family: ScoreFamily, eta: f64) -> Result<bool> {
        let set = family.sublevel(unit, eta, false)?;
        Ok(match (self, &set) {
            (PrelimRule::LengthLe { lambda }, s) => s.size() <= *lambda,
            (PrelimRule::UpperLe { bound }, PredictionSet::Intervals(u)) => u.sup() <= *bound,
            (PrelimRule::UpperLe { bound }, PredictionSet::Labels(l)) => {
                l.last().is_none_or(|&x| x as f64 <= *bound)
            }
            (PrelimRule::LowerGe { bound }, PredictionSet::Intervals(u)) => u.inf() >= *bound,
            (PrelimRule::LowerGe { bound }, PredictionSet::Labels(l)) => {
                l.first().is_none_or(|&x| x as f64 >= *bound)
            }
            (PrelimRule::Singleton, PredictionSet::Labels(l)) => l.len() == 1,
            (PrelimRule::Singleton, PredictionSet::Intervals(u)) => {
                u.segments().len() == 1 && u.measure() == 0.0
            }
        })
    }
}

/// `{j: L(X_{n+j}, eta) = 1}`.
pub fn ps_select(
    test: &[&Unit],
    rule: &PrelimRule,
    family: ScoreFamily,
    calib: &PrelimCalibration,
) -> Result<SelectionResult> {
    let mut selected = Vec::new();
    for (j, u) in test.iter().enumerate() {
        if rule.eval(u, family, calib.eta)? {
            selected.push(j);
        }
    }
    Ok(SelectionResult {
        selected,
        threshold: Some(calib.eta),
        backend: None,
    })
}

/// Preliminary-set selection as a [`SelectionRule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrelimSelection {
    pub rule: PrelimRule,
    pub family: ScoreFamily,
    pub beta: f64,
}

impl PrelimSelection {
    pub fn calibrate(&self, data: &dyn DataView) -> Result<PrelimCalibration> {
        let scores = (0..data.n_calib())
            .map(|i| {
                let y = data.calib_outcome(i).ok_or(JomiError::MissingOutcome(i))?;
                self.family.score(data.calib_unit(i), y)
            })
            .collect::<Result<Vec<_>>>()?;
        prelim_calibrate(&scores, self.beta)
    }

    pub fn select_detail(
        &self,
        data: &dyn DataView,
    ) -> Result<(SelectionResult, PrelimCalibration)> {
        let cal = self.calibrate(data)?;
        let test: Vec<&Unit> = (0..data.n_test()).map(|j| data.test_unit(j)).collect();
        Ok((ps_select(&test, &self.rule, self.family, &cal)?, cal))
    }
}

impl SelectionRule for PrelimSelection {
    fn select(&self, data: &dyn DataView) -> Result<Vec<usize>> {
        Ok(self.select_detail(data)?.0.selected)
    }

    fn name(&self) -> &str {
        "prelim"
    }
}

/// The two second-stage quantiles of one selected unit and the reference
/// sets they come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsQuantiles {
    pub q1: f64,
    pub q2: f64,
    pub refs1: Vec<usize>,
    pub refs2: Vec<usize>,
}

/// Selection flags `L(X_{n+l}, eta)` of every test unit at one cutoff.
fn flags_at(data: &dyn DataView, sel: &PrelimSelection, eta: f64) -> Result<Vec<bool>> {
    (0..data.n_test())
        .map(|l| sel.rule.eval(data.test_unit(l), sel.family, eta))
        .collect()
}

/// Per-unit inputs shared by every selected unit: for each of
/// `eta_minus`, `eta`, `eta_plus`, the calibration rule flags and the test
/// flags.
pub struct PsContext {
    pub cal: PrelimCalibration,
    pub selection: SelectionResult,
    calib_flags: [Vec<bool>; 3],
    test_flags: [Vec<bool>; 3],
}

impl PsContext {
    pub fn new(data: &dyn DataView, sel: &PrelimSelection) -> Result<Self> {
        let (selection, cal) = sel.select_detail(data)?;
        let etas = [cal.eta_minus, cal.eta, cal.eta_plus];
        let mut calib_flags: [Vec<bool>; 3] = Default::default();
        let mut test_flags: [Vec<bool>; 3] = Default::default();
        for (k, &e) in etas.iter().enumerate() {
            calib_flags[k] = (0..data.n_calib())
                .map(|i| sel.rule.eval(data.calib_unit(i), sel.family, e))
                .collect::<Result<_>>()?;
            test_flags[k] = flags_at(data, sel, e)?;
        }
        Ok(Self {
            cal,
            selection,
            calib_flags,
            test_flags,
        })
    }

    fn swapped_ok(&self, e: usize, j: usize, taxonomy: &Taxonomy) -> bool {
        if taxonomy.is_all() {
            return true;
        }
        let set: Vec<usize> = (0..self.test_flags[e].len())
            .filter(|&l| l == j || self.test_flags[e][l])
            .collect();
        taxonomy.contains(&set)
    }

    /// Reference sets and quantiles for selected unit `j`. `second_scores`
    /// are the second-stage scores `V_i` of the calibration units.
    pub fn quantiles(
        &self,
        j: usize,
        second_scores: &[f64],
        taxonomy: &Taxonomy,
        alpha: f64,
    ) -> Result<PsQuantiles> {
        check_alpha(alpha)?;
        let s = &self.cal.scores;
        // cutoff index: 0 = eta_minus, 1 = eta, 2 = eta_plus
        let branch = |split: f64, low: usize, high: usize| -> Vec<usize> {
            let ok_low = self.swapped_ok(low, j, taxonomy);
            let ok_high = self.swapped_ok(high, j, taxonomy);
            (0..s.len())
                .filter(|&i| {
                    if s[i] <= split {
                        ok_low && self.calib_flags[low][i]
                    } else {
                        ok_high && self.calib_flags[high][i]
                    }
                })
                .collect()
        };
        let refs1 = branch(self.cal.eta_minus, 1, 0);
        let refs2 = branch(self.cal.eta, 2, 1);
        let pool = |r: &[usize]| r.iter().map(|&i| second_scores[i]).collect::<Vec<_>>();
        Ok(PsQuantiles {
            q1: conformal_quantile(1.0 - alpha, &pool(&refs1), true)?,
            q2: conformal_quantile(1.0 - alpha, &pool(&refs2), true)?,
            refs1,
            refs2,
        })
    }
}

/// `{eta- <= S <= eta+} ∪ {S < eta-, V <= q1} ∪ {S > eta+, V <= q2}`.
pub fn ps_set(
    unit: &Unit,
    q: &PsQuantiles,
    cal: &PrelimCalibration,
    first: ScoreFamily,
    second: ScoreFamily,
) -> Result<PredictionSet> {
    if first.set_kind() != second.set_kind() {
        return Err(crate::error::invalid(
            "first- and second-stage families must share an outcome space",
        ));
    }
    let upto_plus = first.sublevel(unit, cal.eta_plus, false)?;
    let below_minus = first.sublevel(unit, cal.eta_minus, true)?;
    let band = upto_plus.difference(&below_minus)?;
    let universe = if first.set_kind() == SetKind::Labels {
        first.universe(unit)?
    } else {
        second.universe(unit)?
    };
    let above_plus = universe.difference(&upto_plus)?;
    let low = below_minus.intersect(&second.sublevel(unit, q.q1, false)?)?;
    let high = above_plus.intersect(&second.sublevel(unit, q.q2, false)?)?;
    band.union(&low)?.union(&high)
}

/// Pointwise membership in [`ps_set`], evaluated from the scores directly.
pub fn ps_contains(
    unit: &Unit,
    y: f64,
    q: &PsQuantiles,
    cal: &PrelimCalibration,
    first: ScoreFamily,
    second: ScoreFamily,
) -> Result<bool> {
    let s = first.score(unit, y)?;
    let v = second.score(unit, y)?;
    Ok((cal.eta_minus <= s && s <= cal.eta_plus)
        || (s < cal.eta_minus && v <= q.q1)
        || (s > cal.eta_plus && v <= q.q2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jomi::reference_set_generic;
    use crate::quantile::deterministic_threshold;
    use crate::unit::Dataset;
    use proptest::prelude::*;

    #[test]
    fn calibration_order_statistics() {
        let c = prelim_calibrate(&[5.0, 1.0, 4.0, 2.0, 3.0], 0.4).unwrap();
        assert_eq!((c.k, c.eta, c.eta_minus, c.eta_plus), (4, 4.0, 3.0, 5.0));
        let c = prelim_calibrate(&[1.0, 2.0, 3.0, 4.0], 0.2).unwrap();
        assert_eq!((c.k, c.eta_plus), (4, f64::INFINITY));
        let c = prelim_calibrate(&[2.0; 6], 0.5).unwrap();
        assert_eq!((c.eta_minus, c.eta, c.eta_plus, c.ties_at_eta), (2.0, 2.0, 2.0, 6));
        assert!(matches!(
            prelim_calibrate(&[1.0, 2.0], 0.1),
            Err(JomiError::BetaTooSmall { k: 3, n: 2 })
        ));
    }

    #[test]
    fn selection_examples() {
        let cal = PrelimCalibration {
            k: 1,
            eta: 1.0,
            eta_minus: f64::NEG_INFINITY,
            eta_plus: 2.0,
            ties_at_eta: 1,
            scores: vec![],
        };
        let a = Unit::new("a").with_quantiles(0.0, 2.0);
        let b = Unit::new("b").with_quantiles(0.0, 6.0);
        let r = ps_select(
            &[&a, &b],
            &PrelimRule::LengthLe { lambda: 5.0 },
            ScoreFamily::Cqr,
            &cal,
        )
        .unwrap();
        assert_eq!(r.selected, vec![0]);
        let r = ps_select(
            &[&a, &b],
            &PrelimRule::UpperLe {
                bound: f64::INFINITY,
            },
            ScoreFamily::Cqr,
            &cal,
        )
        .unwrap();
        assert_eq!(r.selected, vec![0, 1]);
        // binary: S(x, 1) = 0.1 <= eta = 0.3 < S(x, 0) = 0.9
        let cal = PrelimCalibration { eta: 0.3, ..cal };
        let u = Unit::new("u").with_mu_hat(0.9);
        let r = ps_select(&[&u], &PrelimRule::Singleton, ScoreFamily::Binary, &cal).unwrap();
        assert_eq!(r.selected, vec![0]);
    }

    #[test]
    fn cqr_band_has_two_segments() {
        let cal = PrelimCalibration {
            k: 2,
            eta: 0.5,
            eta_minus: 0.2,
            eta_plus: 0.8,
            ties_at_eta: 1,
            scores: vec![],
        };
        let u = Unit::new("u").with_quantiles(0.0, 3.0).with_mu_hat(1.5);
        let q = PsQuantiles {
            q1: -1.0,
            q2: -1.0,
            refs1: vec![],
            refs2: vec![],
        };
        let s = ps_set(&u, &q, &cal, ScoreFamily::Cqr, ScoreFamily::AbsResidual).unwrap();
        assert_eq!(s.to_string(), "-0.8:-0.2;3.2:3.8");
        let q = PsQuantiles {
            q1: f64::INFINITY,
            q2: f64::INFINITY,
            ..q
        };
        let s = ps_set(&u, &q, &cal, ScoreFamily::Cqr, ScoreFamily::AbsResidual).unwrap();
        assert_eq!(s.to_string(), "-inf:inf");
    }

    fn instance(seed: &[(f64, f64, f64)], test: &[(f64, f64)]) -> Dataset {
        Dataset::new(
            seed.iter()
                .enumerate()
                .map(|(k, &(mu, s, y))| {
                    Unit::new(format!("c{k}"))
                        .with_mu_hat(mu)
                        .with_sigma_hat(s)
                        .with_y(y)
                })
                .collect(),
            test.iter()
                .enumerate()
                .map(|(k, &(mu, s))| Unit::new(format!("t{k}")).with_mu_hat(mu).with_sigma_hat(s))
                .collect(),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn conservative_set_contains_exact_set(
            calib in proptest::collection::vec((-1.0f64..1.0, 0.5f64..2.0, -3.0f64..3.0), 8..20),
            test in proptest::collection::vec((-1.0f64..1.0, 0.5f64..2.0), 1..4),
            lambda in 2.0f64..8.0, beta in 0.2f64..0.6, alpha in 0.1f64..0.5, fixed in any::<bool>()) {
            let d = instance(&calib, &test);
            let sel = PrelimSelection { rule: PrelimRule::LengthLe { lambda }, family: ScoreFamily::ScaledResidual, beta };
            prop_assume!(sel.calibrate(&d).is_ok());
            let ctx = PsContext::new(&d, &sel).unwrap();
            let second = ScoreFamily::AbsResidual;
            let v: Vec<f64> = d.calib.iter().map(|u| second.score(u, u.y.unwrap()).unwrap()).collect();
            let tax = if fixed { Taxonomy::FixedSize(ctx.selection.selected.len()) } else { Taxonomy::All };
            for &j in &ctx.selection.selected {
                let q = ctx.quantiles(j, &v, &tax, alpha).unwrap();
                let u = &d.test[j];
                let set = ps_set(u, &q, &ctx.cal, sel.family, second).unwrap();
                for g in 0..=80 {
                    let y = -6.0 + 0.15 * f64::from(g);
                    let r = reference_set_generic(j, Some(y), &sel, &tax, &d).unwrap();
                    let pool: Vec<f64> = r.indices.iter().map(|&i| v[i]).collect();
                    let exact = deterministic_threshold(&pool, alpha).unwrap().accepts(second.score(u, y).unwrap());
                    let cons = ps_contains(u, y, &q, &ctx.cal, sel.family, second).unwrap();
                    let s = sel.family.score(u, y).unwrap();
                    prop_assert!(!exact || cons, "y={} not in conservative set", y);
                    if cons && !exact {
                        prop_assert!(ctx.cal.eta_minus <= s && s <= ctx.cal.eta_plus);
                    }
                    let sv = second.score(u, y).unwrap();
                    let near = [ctx.cal.eta_minus, ctx.cal.eta_plus].iter().any(|e| (s - e).abs() < 1e-9)
                        || [q.q1, q.q2].iter().any(|e| (sv - e).abs() < 1e-9);
                    if !near {
                        prop_assert_eq!(set.contains(y), cons);
                    }
                }
            }
        }
    }
}

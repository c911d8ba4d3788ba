//! The generic engine: swapped datasets, reference sets for arbitrary
//! permutation-invariant selection rules, and set assembly.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{JomiError, Result};
use crate::quantile::{SetMode, VThreshold};
use crate::score::ScoreFamily;
use crate::set::{Interval, PredictionSet};
use crate::split::invert;
use crate::unit::{DataView, Dataset, Unit};

/// A selection rule over a calibration/test split.
///
/// Implementations must be invariant to permutations of the calibration
/// units; the engine cannot check this in general (see
/// [`crate::harness::permutation_invariance_check`]).
pub trait SelectionRule: Send + Sync {
    /// Sorted indices of the selected test units.
    fn select(&self, data: &dyn DataView) -> Result<Vec<usize>>;

    /// True when the rule never reads calibration outcomes, so reference
    /// sets do not depend on the hypothesized outcome.
    fn covariate_only(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        "custom"
    }
}

/// Wraps a closure as a [`SelectionRule`].
pub struct FnRule<F> {
    pub f: F,
    pub covariate_only: bool,
}

impl<F> FnRule<F>
where
    F: Fn(&dyn DataView) -> Result<Vec<usize>> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self {
            f,
            covariate_only: false,
        }
    }
}

impl<F> SelectionRule for FnRule<F>
where
    F: Fn(&dyn DataView) -> Result<Vec<usize>> + Send + Sync,
{
    fn select(&self, data: &dyn DataView) -> Result<Vec<usize>> {
        let mut s = (self.f)(data)?;
        s.sort_unstable();
        s.dedup();
        Ok(s)
    }

    fn covariate_only(&self) -> bool {
        self.covariate_only
    }
}

/// Dataset with calibration unit `i` and test unit `j` exchanged.
///
/// Calibration position `i` reads as test unit `j` carrying outcome `y`;
/// test position `j` reads as calibration unit `i`.
#[derive(Clone, Copy)]
pub struct SwapView<'a> {
    pub base: &'a dyn DataView,
    pub i: usize,
    pub j: usize,
    pub y: Option<f64>,
}

impl<'a> SwapView<'a> {
    pub fn new(base: &'a dyn DataView, i: usize, j: usize, y: Option<f64>) -> Self {
        Self { base, i, j, y }
    }

    /// Copies the swapped data out. The unit moved into the test slot keeps
    /// its outcome; the unit moved into calibration carries `y`.
    pub fn materialize(&self) -> Dataset {
        let calib = (0..self.base.n_calib())
            .map(|k| {
                let mut u = self.calib_unit(k).clone();
                u.y = self.calib_outcome(k);
                u
            })
            .collect();
        let test = (0..self.base.n_test())
            .map(|l| self.test_unit(l).clone())
            .collect();
        Dataset { calib, test }
    }
}

impl DataView for SwapView<'_> {
    fn n_calib(&self) -> usize {
        self.base.n_calib()
    }

    fn n_test(&self) -> usize {
        self.base.n_test()
    }

    fn calib_unit(&self, k: usize) -> &Unit {
        if k == self.i {
            self.base.test_unit(self.j)
        } else {
            self.base.calib_unit(k)
        }
    }

    fn calib_outcome(&self, k: usize) -> Option<f64> {
        if k == self.i {
            self.y
        } else {
            self.base.calib_outcome(k)
        }
    }

    fn test_unit(&self, l: usize) -> &Unit {
        if l == self.j {
            self.base.calib_unit(self.i)
        } else {
            self.base.test_unit(l)
        }
    }
}

/// The family of admissible selection sets.
#[derive(Clone, Default)]
pub enum Taxonomy {
    #[default]
    All,
    FixedSize(usize),
    Explicit(Vec<Vec<usize>>),
    Predicate(Arc<dyn Fn(&[usize]) -> bool + Send + Sync>),
}

impl Taxonomy {
    /// Membership of a sorted index set.
    pub fn contains(&self, set: &[usize]) -> bool {
        match self {
            Taxonomy::All => true,
            Taxonomy::FixedSize(r) => set.len() == *r,
            Taxonomy::Explicit(sets) => sets.iter().any(|s| {
                let mut s = s.clone();
                s.sort_unstable();
                s.dedup();
                s == set
            }),
            Taxonomy::Predicate(f) => f(set),
        }
    }

    pub fn is_all(&self) -> bool {
        matches!(self, Taxonomy::All)
    }
}

impl fmt::Debug for Taxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Taxonomy::All => f.write_str("All"),
            Taxonomy::FixedSize(r) => write!(f, "FixedSize({r})"),
            Taxonomy::Explicit(s) => write!(f, "Explicit({s:?})"),
            Taxonomy::Predicate(_) => f.write_str("Predicate(..)"),
        }
    }
}

/// Calibration units exchangeable with test unit `test_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub indices: Vec<usize>,
    pub test_index: usize,
    /// The hypothesized outcome, or `None` when the set does not depend on it.
    pub y: Option<f64>,
}

/// Evaluates the rule on every swap `(i, j)` and keeps `i` when `j` stays
/// selected and the swapped selection lies in the taxonomy.
pub fn reference_set_generic(
    j: usize,
    y: Option<f64>,
    rule: &dyn SelectionRule,
    taxonomy: &Taxonomy,
    data: &dyn DataView,
) -> Result<ReferenceSet> {
    let mut indices = Vec::new();
    for i in 0..data.n_calib() {
        let view = SwapView::new(data, i, j, y);
        let sel = rule.select(&view).map_err(|e| JomiError::RuleEvaluation {
            i,
            j,
            source: Box::new(e),
        })?;
        if sel.binary_search(&j).is_ok() && taxonomy.contains(&sel) {
            indices.push(i);
        }
    }
    Ok(ReferenceSet {
        indices,
        test_index: j,
        y,
    })
}

/// Calibration scores `V_i` restricted to `indices`.
pub fn gather(scores: &[f64], indices: &[usize]) -> Vec<f64> {
    indices.iter().map(|&i| scores[i]).collect()
}

/// Set for a finite outcome space: every label is tested against its own
/// reference set.
#[allow(clippy::too_many_arguments)]
pub fn jomi_set_finite(
    j: usize,
    rule: &dyn SelectionRule,
    taxonomy: &Taxonomy,
    family: ScoreFamily,
    alpha: f64,
    mode: SetMode,
    data: &Dataset,
    calib_scores: &[f64],
) -> Result<PredictionSet> {
    let unit = &data.test[j];
    let labels = family.labels(unit)?;
    let shared = if rule.covariate_only() {
        Some(reference_set_generic(j, None, rule, taxonomy, data)?)
    } else {
        None
    };
    let mut keep = Vec::new();
    for label in labels {
        let y = label as f64;
        let refs = match &shared {
            Some(r) => r.clone(),
            None => reference_set_generic(j, Some(y), rule, taxonomy, data)?,
        };
        let th = mode.threshold(&gather(calib_scores, &refs.indices), alpha)?;
        if th.accepts(family.score(unit, y)?) {
            keep.push(label);
        }
    }
    Ok(PredictionSet::Labels(keep))
}

/// The pieces `(-inf, b1], (b1, b2], ..., (bk, inf)` cut by `breakpoints`.
pub fn pieces(breakpoints: &[f64]) -> Result<Vec<Interval>> {
    let sorted = breakpoints.windows(2).all(|w| w[0] < w[1]);
    if !sorted || breakpoints.iter().any(|b| !b.is_finite()) {
        return Err(JomiError::InvalidPartition);
    }
    let mut out = Vec::with_capacity(breakpoints.len() + 1);
    let mut lo = f64::NEG_INFINITY;
    for &b in breakpoints {
        out.extend(Interval::new(lo, b, false, true));
        lo = b;
    }
    out.extend(Interval::new(lo, f64::INFINITY, false, false));
    Ok(out)
}

/// Assembles a set whose reference pool is constant on each piece.
/// `thresholds[p]` is the score cutoff on the `p`-th piece, lowest first.
pub fn jomi_set_piecewise(
    unit: &Unit,
    family: ScoreFamily,
    breakpoints: &[f64],
    thresholds: &[VThreshold],
) -> Result<PredictionSet> {
    let ps = pieces(breakpoints)?;
    if thresholds.len() != ps.len() {
        return Err(JomiError::InvalidPartition);
    }
    family.check(unit)?;
    let mut out: Option<PredictionSet> = None;
    for (piece, th) in ps.iter().zip(thresholds) {
        let part = invert(unit, family, *th)?.restrict(piece);
        out = Some(match out {
            None => part,
            Some(acc) => acc.union(&part)?,
        });
    }
    Ok(out.expect("at least one piece"))
}

/// Piecewise set from per-piece reference score pools.
pub fn jomi_set_from_pools(
    unit: &Unit,
    family: ScoreFamily,
    breakpoints: &[f64],
    pools: &[Vec<f64>],
    alpha: f64,
    mode: SetMode,
) -> Result<PredictionSet> {
    let ths = pools
        .iter()
        .map(|p| mode.threshold(p, alpha))
        .collect::<Result<Vec<_>>>()?;
    jomi_set_piecewise(unit, family, breakpoints, &ths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantile::deterministic_threshold;
    use crate::set::IntervalUnion;

    fn th(v: f64) -> VThreshold {
        VThreshold {
            value: v,
            inclusive: true,
        }
    }

    #[test]
    fn piecewise_two_branch() {
        let u = Unit::new("t").with_mu_hat(0.0);
        let s =
            jomi_set_piecewise(&u, ScoreFamily::AbsResidual, &[1.0], &[th(0.5), th(2.0)]).unwrap();
        assert_eq!(s.to_string(), "-0.5:0.5;1o:2");
        let u = Unit::new("t").with_mu_hat(5.0);
        let s = jomi_set_piecewise(
            &u,
            ScoreFamily::AbsResidual,
            &[0.0],
            &[th(f64::INFINITY), th(1.0)],
        )
        .unwrap();
        assert_eq!(s.to_string(), "-inf:0;4:6");
        let u = Unit::new("t").with_mu_hat(0.0);
        let s = jomi_set_piecewise(&u, ScoreFamily::AbsResidual, &[], &[th(3.0)]).unwrap();
        assert_eq!(s.to_string(), "-3:3");
    }

    #[test]
    fn piecewise_matches_grid() {
        let u = Unit::new("t").with_mu_hat(0.3);
        let bps = [-1.0, 0.5];
        let ths = [th(0.7), th(2.0), th(0.2)];
        let s = jomi_set_piecewise(&u, ScoreFamily::AbsResidual, &bps, &ths).unwrap();
        for k in 0..=10_000 {
            let y = -5.0 + k as f64 * 1e-3;
            let p = bps.iter().filter(|&&b| y > b).count();
            let want = (y - 0.3).abs() <= ths[p].value;
            assert_eq!(s.contains(y), want, "y={y}");
        }
    }

    #[test]
    fn bad_partitions_are_rejected() {
        let u = Unit::new("t").with_mu_hat(0.0);
        let r = jomi_set_piecewise(&u, ScoreFamily::AbsResidual, &[1.0, 1.0], &[th(1.0); 3]);
        assert!(matches!(r, Err(JomiError::InvalidPartition)));
        let r = jomi_set_piecewise(&u, ScoreFamily::AbsResidual, &[2.0, 1.0], &[th(1.0); 3]);
        assert!(matches!(r, Err(JomiError::InvalidPartition)));
        let r = jomi_set_piecewise(&u, ScoreFamily::AbsResidual, &[1.0], &[th(1.0)]);
        assert!(matches!(r, Err(JomiError::InvalidPartition)));
    }

    #[test]
    fn randomized_single_reference() {
        let u = Unit::new("t").with_mu_hat(0.0);
        let s = jomi_set_from_pools(
            &u,
            ScoreFamily::AbsResidual,
            &[],
            &[vec![1.0]],
            0.5,
            SetMode::Randomized(0.2),
        )
        .unwrap();
        assert!(s.contains(0.5));
        assert!(!s.contains(1.5));
        let s = jomi_set_from_pools(
            &u,
            ScoreFamily::AbsResidual,
            &[],
            &[vec![]],
            0.1,
            SetMode::Randomized(0.3),
        )
        .unwrap();
        assert_eq!(s, PredictionSet::Intervals(IntervalUnion::real_line()));
    }

    fn toy() -> Dataset {
        let calib = [0.05, 0.2, 0.7]
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                Unit::new(format!("c{k}"))
                    .with_sel_score(s)
                    .with_y(k as f64)
                    .with_mu_hat(0.0)
            })
            .collect();
        let test = [0.9, 0.5, 0.1]
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                Unit::new(format!("t{k}"))
                    .with_sel_score(s)
                    .with_mu_hat(0.0)
            })
            .collect();
        Dataset::new(calib, test).unwrap()
    }

    fn top2() -> FnRule<impl Fn(&dyn DataView) -> Result<Vec<usize>> + Send + Sync> {
        FnRule::new(|d: &dyn DataView| {
            let mut idx: Vec<usize> = (0..d.n_test()).collect();
            idx.sort_by(|&a, &b| {
                d.test_unit(b)
                    .sel_score
                    .unwrap()
                    .total_cmp(&d.test_unit(a).sel_score.unwrap())
            });
            idx.truncate(2);
            Ok(idx)
        })
    }

    #[test]
    fn generic_top_two() {
        let d = toy();
        let r = reference_set_generic(0, None, &top2(), &Taxonomy::All, &d).unwrap();
        assert_eq!(r.indices, vec![1, 2]);
        let none = FnRule::new(|_: &dyn DataView| Ok(vec![]));
        assert!(reference_set_generic(0, None, &none, &Taxonomy::All, &d)
            .unwrap()
            .indices
            .is_empty());
        let all = FnRule::new(|d: &dyn DataView| Ok((0..d.n_test()).collect()));
        assert_eq!(
            reference_set_generic(2, None, &all, &Taxonomy::All, &d)
                .unwrap()
                .indices,
            vec![0, 1, 2]
        );
        let never = Taxonomy::Explicit(vec![vec![5]]);
        assert!(reference_set_generic(2, None, &all, &never, &d)
            .unwrap()
            .indices
            .is_empty());
    }

    #[test]
    fn swap_is_an_involution() {
        let mut d = toy();
        d.test[1].y = Some(4.0);
        for i in 0..3 {
            for j in 0..3 {
                let once = SwapView::new(&d, i, j, d.test[j].y).materialize();
                let twice = SwapView::new(&once, i, j, once.test[j].y).materialize();
                assert_eq!(twice, d);
            }
        }
    }

    #[test]
    fn rule_errors_carry_context() {
        let d = toy();
        let bad = FnRule::new(|_: &dyn DataView| Err(JomiError::TopKTies));
        let e = reference_set_generic(1, None, &bad, &Taxonomy::All, &d).unwrap_err();
        assert!(matches!(e, JomiError::RuleEvaluation { i: 0, j: 1, .. }));
    }

    #[test]
    fn finite_sets_use_per_label_references() {
        let mut d = toy();
        for u in d.test.iter_mut() {
            u.mu_hat = Some(0.9);
        }
        for (u, y) in d.calib.iter_mut().zip([0.0, 1.0, 1.0]) {
            u.y = Some(y);
            u.mu_hat = Some(0.8);
        }
        let scores = crate::split::calibration_scores(&d.calib, ScoreFamily::Binary).unwrap();
        let s = jomi_set_finite(
            0,
            &top2(),
            &Taxonomy::All,
            ScoreFamily::Binary,
            0.4,
            SetMode::Deterministic,
            &d,
            &scores,
        )
        .unwrap();
        let refs = gather(&scores, &[1, 2]);
        let t = deterministic_threshold(&refs, 0.4).unwrap();
        let want: Vec<usize> = [0usize, 1]
            .into_iter()
            .filter(|&l| t.accepts(ScoreFamily::Binary.score(&d.test[0], l as f64).unwrap()))
            .collect();
        assert_eq!(s, PredictionSet::Labels(want));
    }
}

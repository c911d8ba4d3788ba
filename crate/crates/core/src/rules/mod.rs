//! Covariate-dependent selection rules and their closed-form reference sets.
//!
//! Every threshold ranges over the pooled score set of calibration and test
//! units, and both selection and reference sets use strict `>` against it.
//! For these rules a swap that keeps `j` selected leaves the selected index
//! set unchanged, so the taxonomy check reduces to `Ŝ ∈ 𝔖`.

pub mod knapsack;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, JomiError, Result};
use crate::jomi::{SelectionRule, Taxonomy};
use crate::quantile::conformal_rank;
use crate::unit::{DataView, ScoreSource};

pub use knapsack::{knapsack_select, KnapsackBackend, KnapsackObjective, KnapsackRule};

/// A selection and, where the rule has one, the score threshold behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    pub threshold: Option<f64>,
    pub backend: Option<KnapsackBackend>,
}

impl SelectionResult {
    fn above(scores: &[f64], t: f64) -> Self {
        SelectionResult {
            selected: strictly_above(scores, t),
            threshold: Some(t),
            backend: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Highest,
    Lowest,
}

impl Direction {
    fn orient(self, s: f64) -> f64 {
        match self {
            Direction::Highest => s,
            Direction::Lowest => -s,
        }
    }
}

pub fn strictly_above(scores: &[f64], t: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > t)
        .map(|(k, _)| k)
        .collect()
}

/// Reference indices for rules whose swapped selection equals `selected`.
pub fn threshold_reference(
    calib_scores: &[f64],
    t: f64,
    selected: &[usize],
    taxonomy: &Taxonomy,
) -> Vec<usize> {
    if taxonomy.contains(selected) {
        strictly_above(calib_scores, t)
    } else {
        Vec::new()
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Top-K: the threshold is the `(m - K)`-th smallest test score, and `-inf`
/// when `K = m`.
pub fn topk_select(test_scores: &[f64], k: usize) -> Result<SelectionResult> {
    let m = test_scores.len();
    if k == 0 || k > m {
        return Err(invalid(format!(
            "top-K needs 1 <= K <= m, got K = {k}, m = {m}"
        )));
    }
    let s = sorted(test_scores);
    if s.windows(2).any(|w| w[0] == w[1]) {
        return Err(JomiError::TopKTies);
    }
    let t = if k == m {
        f64::NEG_INFINITY
    } else {
        s[m - k - 1]
    };
    Ok(SelectionResult::above(test_scores, t))
}

pub fn topk_reference(calib_scores: &[f64], threshold: f64) -> Vec<usize> {
    strictly_above(calib_scores, threshold)
}

/// `inf{t in pooled: #{pooled <= t} >= q (n + m)}`, `+inf` when empty.
pub fn jq_threshold(calib_scores: &[f64], test_scores: &[f64], q: f64) -> f64 {
    let mut pooled = calib_scores.to_vec();
    pooled.extend_from_slice(test_scores);
    pooled.sort_by(f64::total_cmp);
    let k = conformal_rank(q, pooled.len());
    pooled.get(k - 1).copied().unwrap_or(f64::INFINITY)
}

/// `inf{t in pooled: #{calib <= t} >= q n}`, `+inf` when empty.
///
/// The count only changes at calibration scores, so the infimum over the
/// pooled set is a calibration order statistic.
pub fn cq_threshold(calib_scores: &[f64], q: f64) -> f64 {
    let s = sorted(calib_scores);
    let k = conformal_rank(q, s.len());
    s.get(k - 1).copied().unwrap_or(f64::INFINITY)
}

pub fn jq_select_and_reference(
    calib_scores: &[f64],
    test_scores: &[f64],
    q: f64,
) -> Result<(SelectionResult, Vec<usize>)> {
    check_q(q)?;
    let t = jq_threshold(calib_scores, test_scores, q);
    Ok((
        SelectionResult::above(test_scores, t),
        strictly_above(calib_scores, t),
    ))
}

pub fn cq_select_and_reference(
    calib_scores: &[f64],
    test_scores: &[f64],
    q: f64,
) -> Result<(SelectionResult, Vec<usize>)> {
    check_q(q)?;
    let t = cq_threshold(calib_scores, q);
    Ok((
        SelectionResult::above(test_scores, t),
        strictly_above(calib_scores, t),
    ))
}

pub(crate) fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("q must lie in (0, 1), got {q}")))
    }
}

pub fn taxonomy_contains(taxonomy: &Taxonomy, candidate: &[usize]) -> bool {
    taxonomy.contains(candidate)
}

pub(crate) fn read_scores(
    data: &dyn DataView,
    source: ScoreSource,
    dir: Direction,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let calib = (0..data.n_calib())
        .map(|i| source.value(data.calib_unit(i)).map(|s| dir.orient(s)))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..data.n_test())
        .map(|j| source.value(data.test_unit(j)).map(|s| dir.orient(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok((calib, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKRule {
    pub k: usize,
    pub direction: Direction,
    pub source: ScoreSource,
}

impl TopKRule {
    pub fn select_detail(&self, data: &dyn DataView) -> Result<SelectionResult> {
        let (_, test) = read_scores(data, self.source, self.direction)?;
        topk_select(&test, self.k)
    }

    /// Selection plus the shared reference set of every selected unit.
    pub fn fast_path(
        &self,
        data: &dyn DataView,
        taxonomy: &Taxonomy,
    ) -> Result<(SelectionResult, Vec<usize>)> {
        let (calib, test) = read_scores(data, self.source, self.direction)?;
        let sel = topk_select(&test, self.k)?;
        let t = sel.threshold.unwrap_or(f64::NEG_INFINITY);
        let refs = threshold_reference(&calib, t, &sel.selected, taxonomy);
        Ok((sel, refs))
    }
}

impl SelectionRule for TopKRule {
    fn select(&self, data: &dyn DataView) -> Result<Vec<usize>> {
        Ok(self.select_detail(data)?.selected)
    }

    fn covariate_only(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "topk"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileKind {
    Joint,
    Calib,
}

/// Selects test units above the `q`-th quantile of the pooled scores
/// ([`QuantileKind::Joint`]) or of the calibration scores alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileRule {
    pub q: f64,
    pub kind: QuantileKind,
    pub source: ScoreSource,
}

impl QuantileRule {
    pub fn fast_path(
        &self,
        data: &dyn DataView,
        taxonomy: &Taxonomy,
    ) -> Result<(SelectionResult, Vec<usize>)> {
        let (calib, test) = read_scores(data, self.source, Direction::Highest)?;
        let (sel, refs) = match self.kind {
            QuantileKind::Joint => jq_select_and_reference(&calib, &test, self.q)?,
            QuantileKind::Calib => cq_select_and_reference(&calib, &test, self.q)?,
        };
        let refs = if taxonomy.contains(&sel.selected) {
            refs
        } else {
            Vec::new()
        };
        Ok((sel, refs))
    }
}

impl SelectionRule for QuantileRule {
    fn select(&self, data: &dyn DataView) -> Result<Vec<usize>> {
        Ok(self.fast_path(data, &Taxonomy::All)?.0.selected)
    }

    fn covariate_only(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        match self.kind {
            QuantileKind::Joint => "joint_quantile",
            QuantileKind::Calib => "calib_quantile",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jomi::reference_set_generic;
    use crate::unit::{Dataset, Unit};
    use proptest::prelude::*;

    fn data(calib: &[f64], test: &[f64]) -> Dataset {
        let c = calib
            .iter()
            .enumerate()
            .map(|(k, &s)| Unit::new(format!("c{k}")).with_sel_score(s).with_y(0.0))
            .collect();
        let t = test
            .iter()
            .enumerate()
            .map(|(k, &s)| Unit::new(format!("t{k}")).with_sel_score(s))
            .collect();
        Dataset::new(c, t).unwrap()
    }

    #[test]
    fn topk_examples() {
        let r = topk_select(&[0.9, 0.5, 0.1], 2).unwrap();
        assert_eq!((r.threshold, r.selected), (Some(0.1), vec![0, 1]));
        assert_eq!(topk_select(&[3.0, 1.0], 1).unwrap().selected, vec![0]);
        let r = topk_select(&[0.3, 0.1, 0.2], 3).unwrap();
        assert_eq!(r.selected, vec![0, 1, 2]);
        assert_eq!(topk_reference(&[0.05, 0.2, 0.7], 0.1), vec![1, 2]);
        assert_eq!(topk_reference(&[0.05, 0.2], f64::NEG_INFINITY), vec![0, 1]);
        assert!(topk_reference(&[0.05, 0.06], 0.1).is_empty());
        assert!(matches!(
            topk_select(&[1.0, 1.0], 1),
            Err(JomiError::TopKTies)
        ));
    }

    #[test]
    fn topk_generic_example() {
        let d = data(&[0.05, 0.2, 0.7], &[0.9, 0.5, 0.1]);
        let rule = TopKRule {
            k: 2,
            direction: Direction::Highest,
            source: ScoreSource::SelScore,
        };
        let g = reference_set_generic(0, None, &rule, &Taxonomy::All, &d).unwrap();
        let (_, fast) = rule.fast_path(&d, &Taxonomy::All).unwrap();
        assert_eq!(g.indices, vec![1, 2]);
        assert_eq!(fast, g.indices);
    }

    #[test]
    fn quantile_examples() {
        let (s, r) = jq_select_and_reference(&[1.0, 2.0, 3.0, 4.0], &[0.5, 2.5], 0.5).unwrap();
        assert_eq!(
            (s.threshold, s.selected, r),
            (Some(2.0), vec![1], vec![2, 3])
        );
        let (s, r) = cq_select_and_reference(&[1.0, 2.0, 3.0, 4.0], &[2.5, 0.5], 0.5).unwrap();
        assert_eq!(
            (s.threshold, s.selected, r),
            (Some(2.0), vec![0], vec![2, 3])
        );
        let (s, _) = jq_select_and_reference(&[1.0, 2.0], &[0.5, 3.0], 1e-9).unwrap();
        assert_eq!((s.threshold, s.selected), (Some(0.5), vec![1]));
    }

    fn distinct(v: Vec<f64>) -> bool {
        let mut s = v;
        s.sort_by(f64::total_cmp);
        s.windows(2).all(|w| w[0] != w[1])
    }

    proptest! {
        #[test]
        fn closed_forms_match_generic(
            calib in proptest::collection::vec(-3.0f64..3.0, 1..15),
            test in proptest::collection::vec(-3.0f64..3.0, 1..7),
            q in 0.05f64..0.95, kfrac in 0.0f64..1.0, lowest in any::<bool>(), fixed in any::<bool>()) {
            let mut all = calib.clone();
            all.extend(&test);
            prop_assume!(distinct(all));
            let d = data(&calib, &test);
            let m = test.len();
            let k = 1 + ((kfrac * m as f64) as usize).min(m - 1);
            let dir = if lowest { Direction::Lowest } else { Direction::Highest };
            let rules: Vec<Box<dyn Fn(&Taxonomy) -> (Vec<usize>, Vec<usize>)>> = vec![
                Box::new(|tax: &Taxonomy| {
                    let r = TopKRule { k, direction: dir, source: ScoreSource::SelScore };
                    let (s, refs) = r.fast_path(&d, tax).unwrap();
                    (s.selected, refs)
                }),
                Box::new(|tax: &Taxonomy| {
                    let r = QuantileRule { q, kind: QuantileKind::Joint, source: ScoreSource::SelScore };
                    let (s, refs) = r.fast_path(&d, tax).unwrap();
                    (s.selected, refs)
                }),
                Box::new(|tax: &Taxonomy| {
                    let r = QuantileRule { q, kind: QuantileKind::Calib, source: ScoreSource::SelScore };
                    let (s, refs) = r.fast_path(&d, tax).unwrap();
                    (s.selected, refs)
                }),
            ];
            let generic: Vec<Box<dyn SelectionRule>> = vec![
                Box::new(TopKRule { k, direction: dir, source: ScoreSource::SelScore }),
                Box::new(QuantileRule { q, kind: QuantileKind::Joint, source: ScoreSource::SelScore }),
                Box::new(QuantileRule { q, kind: QuantileKind::Calib, source: ScoreSource::SelScore }),
            ];
            for (fast, rule) in rules.iter().zip(&generic) {
                let (sel, _) = fast(&Taxonomy::All);
                let tax = if fixed { Taxonomy::FixedSize(sel.len()) } else { Taxonomy::All };
                let (_, refs) = fast(&tax);
                for &j in &sel {
                    let g = reference_set_generic(j, None, rule.as_ref(), &tax, &d).unwrap();
                    prop_assert_eq!(&g.indices, &refs);
                }
            }
        }

        #[test]
        fn monotone_transform_invariance(
            calib in proptest::collection::vec(-3.0f64..3.0, 1..15),
            test in proptest::collection::vec(-3.0f64..3.0, 2..7), q in 0.05f64..0.95) {
            let mut all = calib.clone();
            all.extend(&test);
            prop_assume!(distinct(all));
            let f = |v: &[f64]| v.iter().map(|x| x.exp() * 3.0 - 1.0).collect::<Vec<_>>();
            let (a, ra) = jq_select_and_reference(&calib, &test, q).unwrap();
            let (b, rb) = jq_select_and_reference(&f(&calib), &f(&test), q).unwrap();
            prop_assert_eq!((a.selected, ra), (b.selected, rb));
            let (a, ra) = cq_select_and_reference(&calib, &test, q).unwrap();
            let (b, rb) = cq_select_and_reference(&f(&calib), &f(&test), q).unwrap();
            prop_assert_eq!((a.selected, ra), (b.selected, rb));
            let a = topk_select(&test, 1).unwrap();
            let b = topk_select(&f(&test), 1).unwrap();
            prop_assert_eq!(a.selected, b.selected);
        }
    }
}

//! Selection-conditional miscoverage, FCR and their standard errors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{JomiError, Result};

/// Outcome of one selected unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitOutcome {
    pub test_index: usize,
    pub covered: bool,
    /// Lebesgue measure for interval sets, label count otherwise.
    pub size: f64,
    pub segments: usize,
    /// `|R̂|` at the realized outcome.
    pub ref_size: usize,
}

/// `sum_j P(j in S, miss) / sum_j P(j in S)`: total misses over total
/// selections.
pub fn miscov_estimate(trials: &[&[UnitOutcome]]) -> Result<f64> {
    let (miss, sel) = counts(trials);
    if sel == 0 {
        return Err(JomiError::UndefinedMiscoverage);
    }
    Ok(miss as f64 / sel as f64)
}

fn counts(trials: &[&[UnitOutcome]]) -> (usize, usize) {
    trials.iter().fold((0, 0), |(miss, sel), t| {
        (
            miss + t.iter().filter(|u| !u.covered).count(),
            sel + t.len(),
        )
    })
}

/// Mean over test indices of the per-index conditional miscoverage,
/// skipping indices never selected.
pub fn miscov_per_index(trials: &[&[UnitOutcome]]) -> Result<f64> {
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for u in trials.iter().flat_map(|t| t.iter()) {
        let e = per.entry(u.test_index).or_default();
        e.0 += usize::from(!u.covered);
        e.1 += 1;
    }
    if per.is_empty() {
        return Err(JomiError::UndefinedMiscoverage);
    }
    Ok(per.values().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / per.len() as f64)
}

/// Mean over trials of `#missed / max(|S|, 1)`.
pub fn fcr_estimate(trials: &[&[UnitOutcome]]) -> f64 {
    if trials.is_empty() {
        return 0.0;
    }
    trials
        .iter()
        .map(|t| t.iter().filter(|u| !u.covered).count() as f64 / t.len().max(1) as f64)
        .sum::<f64>()
        / trials.len() as f64
}

/// Standard error of the miscoverage ratio around the hypothesized value
/// `p0`: the larger of the binomial SE and the trial-clustered SE, since
/// units of one trial share their calibration data.
pub fn miscov_se(trials: &[&[UnitOutcome]], p0: f64) -> f64 {
    let (_, sel) = counts(trials);
    if sel == 0 {
        return f64::NAN;
    }
    let binom = (p0 * (1.0 - p0) / sel as f64).sqrt();
    let ss: f64 = trials
        .iter()
        .map(|t| {
            let miss = t.iter().filter(|u| !u.covered).count() as f64;
            let r = miss - p0 * t.len() as f64;
            r * r
        })
        .sum();
    binom.max(ss.sqrt() / sel as f64)
}

/// Standard error of a trial mean.
pub fn mean_se(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Aggregate statistics of one method at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub selections: usize,
    /// `None` when nothing was ever selected.
    pub miscov: Option<f64>,
    pub miscov_per_index: Option<f64>,
    /// Standard error of `miscov` around `alpha`.
    pub miscov_se: Option<f64>,
    pub fcr: f64,
    pub fcr_se: Option<f64>,
    /// Mean size over sets of finite size.
    pub mean_size: Option<f64>,
    /// Sets of infinite measure, excluded from `mean_size`.
    pub infinite_sets: usize,
    pub mean_ref_size: Option<f64>,
    /// Mean of `1 / (1 + |R̂|)`, the slack of deterministic sets.
    pub mean_inv_ref: Option<f64>,
    pub mean_segments: Option<f64>,
    /// Histogram of `|S|` over trials.
    pub selection_sizes: BTreeMap<usize, usize>,
}

pub fn summarize(trials: &[&[UnitOutcome]], alpha: f64) -> Summary {
    let units: Vec<&UnitOutcome> = trials.iter().flat_map(|t| t.iter()).collect();
    let mean = |f: &dyn Fn(&UnitOutcome) -> f64| {
        if units.is_empty() {
            None
        } else {
            Some(units.iter().map(|u| f(u)).sum::<f64>() / units.len() as f64)
        }
    };
    let mut selection_sizes = BTreeMap::new();
    for t in trials {
        *selection_sizes.entry(t.len()).or_insert(0) += 1;
    }
    let fdp: Vec<f64> = trials
        .iter()
        .map(|t| t.iter().filter(|u| !u.covered).count() as f64 / t.len().max(1) as f64)
        .collect();
    let miscov = miscov_estimate(trials).ok();
    Summary {
        trials: trials.len(),
        selections: units.len(),
        miscov,
        miscov_per_index: miscov_per_index(trials).ok(),
        miscov_se: miscov.map(|_| miscov_se(trials, alpha)),
        fcr: fcr_estimate(trials),
        fcr_se: Some(mean_se(&fdp)).filter(|v| v.is_finite()),
        mean_size: {
            let finite: Vec<f64> = units
                .iter()
                .map(|u| u.size)
                .filter(|s| s.is_finite())
                .collect();
            (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
        },
        infinite_sets: units.iter().filter(|u| !u.size.is_finite()).count(),
        mean_ref_size: mean(&|u| u.ref_size as f64),
        mean_inv_ref: mean(&|u| 1.0 / (1.0 + u.ref_size as f64)),
        mean_segments: mean(&|u| u.segments as f64),
        selection_sizes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(j: usize, covered: bool) -> UnitOutcome {
        UnitOutcome {
            test_index: j,
            covered,
            size: 1.0,
            segments: 1,
            ref_size: 3,
        }
    }

    #[test]
    fn miscov_counts_joint_frequencies() {
        let t1 = [o(1, false)];
        let t2 = [o(1, true), o(2, true)];
        let v = miscov_estimate(&[&t1, &t2]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(miscov_estimate(&[&t2]).unwrap(), 0.0);
        assert_eq!(miscov_estimate(&[&t1]).unwrap(), 1.0);
        assert!(matches!(
            miscov_estimate(&[&[]]),
            Err(JomiError::UndefinedMiscoverage)
        ));
        // index 1 misses half the time, index 2 never
        assert!((miscov_per_index(&[&t1, &t2]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fcr_is_a_trial_mean() {
        assert_eq!(fcr_estimate(&[&[], &[]]), 0.0);
        let t = [o(0, true), o(1, false)];
        assert_eq!(fcr_estimate(&[&t]), 0.5);
        assert_eq!(fcr_estimate(&[&t, &[]]), 0.25);
    }

    #[test]
    fn summary_histogram() {
        let t1 = [o(0, true)];
        let s = summarize(&[&t1, &[], &t1], 0.1);
        assert_eq!(s.selection_sizes, BTreeMap::from([(0, 1), (1, 2)]));
        assert_eq!(s.miscov, Some(0.0));
        assert_eq!(s.mean_inv_ref, Some(0.25));
    }
}

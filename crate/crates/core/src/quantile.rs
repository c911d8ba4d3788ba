//! Conformal quantiles and the rank rules that turn a reference pool into a
//! score threshold.

use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, invalid, JomiError, Result};

/// `ceil(level * n)`, snapping products within 1e-9 of an integer so that
/// e.g. `0.9 * 10` is 9 and not 10.
pub fn conformal_rank(level: f64, n: usize) -> usize {
    let x = level * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 { r } else { x.ceil() };
    k.max(1.0) as usize
}

/// The `ceil(level * N)`-th smallest element of `scores`, optionally
/// augmented with `+inf` (in which case `N = scores.len() + 1`).
pub fn conformal_quantile(level: f64, scores: &[f64], augment_with_infinity: bool) -> Result<f64> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(invalid(format!(
            "quantile level must lie in (0, 1], got {level}"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN score"));
    }
    let n = scores.len() + usize::from(augment_with_infinity);
    if n == 0 {
        return Err(JomiError::EmptyScorePool);
    }
    let k = conformal_rank(level, n);
    if k > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut buf = scores.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*v)
}

/// As [`conformal_quantile`] for input that is already sorted ascending.
pub fn conformal_quantile_sorted(
    level: f64,
    sorted: &[f64],
    augment_with_infinity: bool,
) -> Result<f64> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(invalid(format!(
            "quantile level must lie in (0, 1], got {level}"
        )));
    }
    let n = sorted.len() + usize::from(augment_with_infinity);
    if n == 0 {
        return Err(JomiError::EmptyScorePool);
    }
    let k = conformal_rank(level, n);
    Ok(sorted.get(k - 1).copied().unwrap_or(f64::INFINITY))
}

/// Randomized rank test: `v` passes when
/// `(#{V_i < v} + u (1 + #{V_i = v})) / (1 + |refs|) <= 1 - alpha`.
pub fn randomized_membership(v: f64, ref_scores: &[f64], u: f64, alpha: f64) -> bool {
    let below = ref_scores.iter().filter(|&&s| s < v).count();
    let ties = ref_scores.iter().filter(|&&s| s == v).count();
    randomized_statistic(below, ties, ref_scores.len(), u) <= 1.0 - alpha
}

fn randomized_statistic(below: usize, ties: usize, pool: usize, u: f64) -> f64 {
    (below as f64 + u * (1 + ties) as f64) / (1 + pool) as f64
}

/// A score cutoff: the accepted region is `V <= value` or `V < value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VThreshold {
    pub value: f64,
    pub inclusive: bool,
}

impl VThreshold {
    pub const EVERYTHING: VThreshold = VThreshold {
        value: f64::INFINITY,
        inclusive: true,
    };

    pub fn accepts(&self, v: f64) -> bool {
        v < self.value || (self.inclusive && v == self.value)
    }
}

/// Deterministic rule: `V <= Quantile(1 - alpha; refs ∪ {inf})`.
pub fn deterministic_threshold(ref_scores: &[f64], alpha: f64) -> Result<VThreshold> {
    check_alpha(alpha)?;
    Ok(VThreshold {
        value: conformal_quantile(1.0 - alpha, ref_scores, true)?,
        inclusive: true,
    })
}

/// Converts the randomized rank test into a score cutoff.
///
/// The test statistic is nondecreasing in `v`, so the accepted region is a
/// lower set of the real line. Scanning the distinct reference values finds
/// its supremum and whether the supremum itself is accepted.
pub fn randomized_threshold(ref_scores: &[f64], u: f64, alpha: f64) -> Result<VThreshold> {
    check_alpha(alpha)?;
    if !(0.0..=1.0).contains(&u) {
        return Err(invalid(format!("u must lie in [0, 1], got {u}")));
    }
    let mut sorted = ref_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    randomized_threshold_sorted(&sorted, u, alpha)
}

pub fn randomized_threshold_sorted(sorted: &[f64], u: f64, alpha: f64) -> Result<VThreshold> {
    let n = sorted.len();
    let level = 1.0 - alpha;
    let pass = |below: usize, ties: usize| randomized_statistic(below, ties, n, u) <= level;
    // Walk the open gaps and atoms left to right; the first failure ends
    // the accepted region.
    let mut k = 0;
    while k < n {
        let v = sorted[k];
        if !pass(k, 0) {
            // the gap just below v already fails
            return Ok(VThreshold {
                value: if k == 0 {
                    f64::NEG_INFINITY
                } else {
                    sorted[k - 1]
                },
                inclusive: k > 0,
            });
        }
        let mut e = k;
        while e < n && sorted[e] == v {
            e += 1;
        }
        if !pass(k, e - k) {
            return Ok(VThreshold {
                value: v,
                inclusive: false,
            });
        }
        k = e;
    }
    if pass(n, 0) {
        Ok(VThreshold::EVERYTHING)
    } else {
        Ok(VThreshold {
            value: sorted.last().copied().unwrap_or(f64::NEG_INFINITY),
            inclusive: n > 0,
        })
    }
}

/// Threshold under either set construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SetMode {
    Deterministic,
    Randomized(f64),
}

impl SetMode {
    pub fn threshold(self, ref_scores: &[f64], alpha: f64) -> Result<VThreshold> {
        match self {
            SetMode::Deterministic => deterministic_threshold(ref_scores, alpha),
            SetMode::Randomized(u) => randomized_threshold(ref_scores, u, alpha),
        }
    }
}

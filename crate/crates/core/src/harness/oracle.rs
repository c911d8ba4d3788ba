//! Brute-force oracles. Nothing here shares code with the virtual swap
//! views or the closed-form reference sets.

use rand::seq::SliceRandom;
use rand::Rng;

use super::metrics::{fcr_estimate, UnitOutcome};
use super::rng::{stream, Role};
use crate::error::{check_alpha, Result};
use crate::jomi::{ReferenceSet, SelectionRule, Taxonomy};
use crate::pipeline::{Pipeline, References};
use crate::unit::{Dataset, Unit};

/// Reference set of test unit `j` at outcome `y`, computed by copying the
/// whole dataset for every swap and rerunning the rule from scratch.
pub fn oracle_reference_set(
    j: usize,
    y: Option<f64>,
    rule: &dyn SelectionRule,
    taxonomy: &Taxonomy,
    data: &Dataset,
) -> Result<ReferenceSet> {
    let mut indices = Vec::new();
    for i in 0..data.n() {
        let mut calib: Vec<Unit> = data.calib.clone();
        let mut test: Vec<Unit> = data.test.clone();
        let mut moved = data.test[j].clone();
        moved.y = y;
        test[j] = calib[i].clone();
        calib[i] = moved;
        let swapped = Dataset { calib, test };
        let sel = rule.select(&swapped)?;
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

/// Whether the rule returns the same selection under `n_perms` random
/// shuffles of the calibration units.
pub fn permutation_invariance_check<R: Rng + ?Sized>(
    rule: &dyn SelectionRule,
    data: &Dataset,
    n_perms: usize,
    rng: &mut R,
) -> Result<bool> {
    let base = rule.select(data)?;
    for _ in 0..n_perms {
        let mut calib = data.calib.clone();
        calib.shuffle(rng);
        let shuffled = Dataset {
            calib,
            test: data.test.clone(),
        };
        if rule.select(&shuffled)? != base {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Compares the specialized reference sets of every selected unit with
/// [`oracle_reference_set`]. Returns `(compared, mismatches)`; prelim rules
/// have no exact specialized sets and compare nothing.
pub fn reference_mismatches(pipeline: &Pipeline, data: &Dataset) -> Result<(usize, usize)> {
    let scores = pipeline.calibration_scores(data)?;
    let prep = pipeline.prepare(data, &scores)?;
    let taxonomy = pipeline.taxonomy.resolve(&prep.selected);
    let rule = pipeline.rule.build();
    let (mut compared, mut mismatches) = (0, 0);
    for (idx, &j) in prep.selected.iter().enumerate() {
        let checks: Vec<(f64, &Vec<usize>)> = match pipeline.references(&prep, idx) {
            References::Uniform(r) => vec![(data.test[j].y.unwrap_or(0.0), r)],
            References::TwoBranch { c, above, below } => {
                vec![(c + 1.0, above), (*c, below), (c - 1.0, below)]
            }
            References::Prelim { .. } => Vec::new(),
        };
        for (y, fast) in checks {
            compared += 1;
            if &oracle_reference_set(j, Some(y), rule.as_ref(), &taxonomy, data)?.indices != fast {
                mismatches += 1;
            }
        }
    }
    Ok((compared, mismatches))
}

/// Estimates from the two-unit construction whose sets meet weak
/// selection-conditional coverage yet have FCR `2 alpha / (1 + alpha)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakFcrEstimate {
    /// Coverage given selection, per test unit.
    pub weak_coverage: [f64; 2],
    pub fcr: f64,
}

/// Selects `{1, 2}` with probability `1 - 2a/(1+a)` and each singleton with
/// probability `a/(1+a)`; both sets are the whole line under `{1, 2}` and
/// empty otherwise.
pub fn weak_fcr_counterexample(
    alpha: f64,
    trials: usize,
    master_seed: u64,
) -> Result<WeakFcrEstimate> {
    check_alpha(alpha)?;
    let single = alpha / (1.0 + alpha);
    let records: Vec<Vec<UnitOutcome>> = (0..trials as u64)
        .map(|t| {
            let u: f64 = stream(master_seed, t, Role::Selection).random();
            let (sel, covered): (&[usize], bool) = if u < single {
                (&[0], false)
            } else if u < 2.0 * single {
                (&[1], false)
            } else {
                (&[0, 1], true)
            };
            sel.iter()
                .map(|&j| UnitOutcome {
                    test_index: j,
                    covered,
                    size: if covered { f64::INFINITY } else { 0.0 },
                    segments: usize::from(covered),
                    ref_size: 0,
                })
                .collect()
        })
        .collect();
    let views: Vec<&[UnitOutcome]> = records.iter().map(Vec::as_slice).collect();
    let mut weak = [0.0; 2];
    for (j, w) in weak.iter_mut().enumerate() {
        let (cov, sel) = views
            .iter()
            .flat_map(|t| t.iter())
            .filter(|u| u.test_index == j)
            .fold((0usize, 0usize), |(c, s), u| {
                (c + usize::from(u.covered), s + 1)
            });
        *w = if sel == 0 {
            f64::NAN
        } else {
            cov as f64 / sel as f64
        };
    }
    Ok(WeakFcrEstimate {
        weak_coverage: weak,
        fcr: fcr_estimate(&views),
    })
}

//! Monte Carlo trial runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::Dgp;
use super::metrics::{summarize, Summary, UnitOutcome};
use super::oracle::permutation_invariance_check;
use super::rng::{stream, Role};
use crate::error::{check_alpha, invalid, JomiError, Result};
use crate::pipeline::{Method, Pipeline};
use crate::set::PredictionSet;
use crate::unit::Dataset;
use rand::Rng;

/// A full simulation: law, pipeline, methods and levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub dgp: Dgp,
    pub pipeline: Pipeline,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub trials: usize,
    pub master_seed: u64,
    /// Keep the constructed sets in the records.
    #[serde(default)]
    pub keep_sets: bool,
}

/// Sets of one method at one level within a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRecord {
    pub method: Method,
    pub alpha: f64,
    /// Aligned with `TrialRecord::selected`.
    pub units: Vec<UnitOutcome>,
    pub sets: Option<Vec<PredictionSet>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub selected: Vec<usize>,
    pub in_taxonomy: bool,
    /// Selected units with `y <= c`, when thresholds are present.
    pub null_selected: Option<usize>,
    pub floored_costs: usize,
    /// Ordered by method, then level, as configured.
    pub results: Vec<MethodRecord>,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.n == 0 || self.m == 0 {
            return Err(invalid("n and m must be positive"));
        }
        if self.methods.is_empty() || self.alphas.is_empty() {
            return Err(invalid("at least one method and one alpha are required"));
        }
        for &a in &self.alphas {
            check_alpha(a)?;
        }
        for m in &self.methods {
            m.check_rule(&self.pipeline.rule)?;
        }
        self.pipeline.rule.validate(self.n, self.m)
    }

    fn trial(&self, t: usize) -> Result<TrialRecord> {
        let g = self
            .dgp
            .generate(self.n, self.m, self.master_seed, t as u64)?;
        let mut urng = stream(self.master_seed, t as u64, Role::Uniform);
        // one draw per test index, so u_j does not depend on the selection
        let uniforms: Vec<f64> = (0..self.m).map(|_| urng.random()).collect();
        let mut rec = evaluate_split(
            &self.pipeline,
            &self.methods,
            &self.alphas,
            &g.data,
            &uniforms,
            self.keep_sets,
        )?;
        rec.trial = t;
        rec.floored_costs = g.floored_costs;
        Ok(rec)
    }
}

/// Selection and sets of one split whose test outcomes are known.
/// `uniforms[j]` is the draw of test unit `j` for randomized sets.
pub fn evaluate_split(
    pipeline: &Pipeline,
    methods: &[Method],
    alphas: &[f64],
    data: &Dataset,
    uniforms: &[f64],
    keep_sets: bool,
) -> Result<TrialRecord> {
    pipeline.validate(data)?;
    if uniforms.len() != data.m() {
        return Err(invalid("one uniform draw per test unit is required"));
    }
    let scores = pipeline.calibration_scores(data)?;
    let prep = pipeline.prepare(data, &scores)?;
    let null_selected = prep
        .selected
        .iter()
        .map(|&j| {
            let u = &data.test[j];
            Some(usize::from(u.y? <= u.threshold_c?))
        })
        .sum::<Option<usize>>();
    let mut results = Vec::with_capacity(methods.len() * alphas.len());
    for &method in methods {
        for &alpha in alphas {
            let mut units = Vec::with_capacity(prep.selected.len());
            let mut sets = Vec::new();
            for (idx, &j) in prep.selected.iter().enumerate() {
                let out = pipeline.set(&prep, idx, method, alpha, uniforms[j], data)?;
                let y = data.test[j].y.ok_or(JomiError::MissingOutcome(j))?;
                units.push(UnitOutcome {
                    test_index: j,
                    covered: out.set.contains(y),
                    size: out.set.size(),
                    segments: out.set.segment_count(),
                    ref_size: match method {
                        Method::Vanilla => data.n(),
                        _ => pipeline.ref_size_at(&prep, idx, y, data)?,
                    },
                });
                if keep_sets {
                    sets.push(out.set);
                }
            }
            results.push(MethodRecord {
                method,
                alpha,
                units,
                sets: keep_sets.then_some(sets),
            });
        }
    }
    Ok(TrialRecord {
        trial: 0,
        selected: prep.selected,
        in_taxonomy: prep.in_taxonomy,
        null_selected,
        floored_costs: 0,
        results,
    })
}

/// Runs every trial. Records come back in trial order whatever the thread
/// count; `threads = None` uses the global pool.
pub fn run_trials(exp: &Experiment, threads: Option<usize>) -> Result<Vec<TrialRecord>> {
    exp.validate()?;
    if exp.trials == 0 {
        return Ok(Vec::new());
    }
    let first = exp.dgp.generate(exp.n, exp.m, exp.master_seed, 0)?;
    let rule = exp.pipeline.rule.build();
    let mut rng = stream(exp.master_seed, 0, Role::Selection);
    if !permutation_invariance_check(rule.as_ref(), &first.data, 3, &mut rng)? {
        return Err(invalid(format!(
            "rule `{}` changes its selection when calibration units are reordered",
            rule.name()
        )));
    }
    let go = || {
        (0..exp.trials)
            .into_par_iter()
            .map(|t| exp.trial(t))
            .collect::<Result<Vec<_>>>()
    };
    match threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| invalid(format!("thread pool: {e}")))?
            .install(go),
        None => go(),
    }
}

/// Summary of one `(method, alpha)` slot across all trials.
pub fn summarize_slot(records: &[TrialRecord], slot: usize) -> Summary {
    let views: Vec<&[UnitOutcome]> = records
        .iter()
        .map(|r| r.results[slot].units.as_slice())
        .collect();
    let alpha = records.first().map_or(f64::NAN, |r| r.results[slot].alpha);
    summarize(&views, alpha)
}

/// Mean false discovery proportion of the selection, counting `y <= c` as
/// null. `None` when thresholds are absent.
pub fn selection_fdr(records: &[TrialRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for r in records {
        total += r.null_selected? as f64 / r.selected.len().max(1) as f64;
    }
    Some(total / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{RuleSpec, TaxonomySpec};
    use crate::rules::Direction;
    use crate::score::ScoreFamily;
    use crate::unit::ScoreSource;

    fn exp(trials: usize) -> Experiment {
        Experiment {
            dgp: Dgp::heteroscedastic(),
            pipeline: Pipeline {
                rule: RuleSpec::TopK {
                    k: 3,
                    direction: Direction::Highest,
                    source: ScoreSource::SelScore,
                },
                taxonomy: TaxonomySpec::All,
                family: ScoreFamily::AbsResidual,
            },
            methods: vec![Method::Vanilla, Method::Jomi],
            alphas: vec![0.2],
            n: 30,
            m: 10,
            trials,
            master_seed: 5,
            keep_sets: true,
        }
    }

    #[test]
    fn zero_trials_is_empty() {
        assert!(run_trials(&exp(0), None).unwrap().is_empty());
    }

    #[test]
    fn thread_count_does_not_change_records() {
        let a = run_trials(&exp(12), Some(1)).unwrap();
        let b = run_trials(&exp(12), Some(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].selected.len(), 3);
        for r in &a {
            for m in &r.results {
                for (u, s) in m.units.iter().zip(m.sets.as_ref().unwrap()) {
                    assert_eq!(u.segments, s.segment_count());
                }
            }
        }
    }

    #[test]
    fn infeasible_config_fails_early() {
        let mut e = exp(5);
        e.pipeline.rule = RuleSpec::TopK {
            k: 11,
            direction: Direction::Highest,
            source: ScoreSource::SelScore,
        };
        assert!(run_trials(&e, None).is_err());
    }
}

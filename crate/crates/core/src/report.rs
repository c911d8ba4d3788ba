//! Result documents of `evaluate` and `oracle-check` runs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::metrics::{summarize, Summary, UnitOutcome};
use crate::harness::runner::{selection_fdr, TrialRecord};
use crate::pipeline::Method;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub alpha: f64,
    pub summary: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NoTrials,
    ChecksFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// An assertion evaluated against the summaries of one method at every
/// configured level. `sigmas` scales the standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// `|miscov - alpha| <= sigmas * SE`.
    MiscovWithin { method: Method, sigmas: f64 },
    /// `alpha - mean(1/(1+|R|)) - sigmas * SE <= miscov <= alpha + sigmas * SE`.
    MiscovBand { method: Method, sigmas: f64 },
    /// `FCR <= alpha + sigmas * SE`.
    FcrAtMost { method: Method, sigmas: f64 },
}

impl Assertion {
    pub fn check(&self, summaries: &[MethodSummary]) -> Vec<Check> {
        let (method, sigmas, kind) = match *self {
            Assertion::MiscovWithin { method, sigmas } => (method, sigmas, "miscov_within"),
            Assertion::MiscovBand { method, sigmas } => (method, sigmas, "miscov_band"),
            Assertion::FcrAtMost { method, sigmas } => (method, sigmas, "fcr_at_most"),
        };
        summaries
            .iter()
            .filter(|s| s.method == method)
            .map(|s| {
                let name = format!("{kind}:{method}:alpha={}", s.alpha);
                let a = s.alpha;
                let sm = &s.summary;
                let (passed, detail) = match (self, sm.miscov, sm.miscov_se) {
                    (Assertion::FcrAtMost { .. }, _, _) => {
                        let se = sm.fcr_se.unwrap_or(0.0);
                        let hi = a + sigmas * se;
                        (sm.fcr <= hi, format!("fcr {} <= {hi}", sm.fcr))
                    }
                    (_, Some(v), Some(se)) => {
                        let slack = match self {
                            Assertion::MiscovBand { .. } => sm.mean_inv_ref.unwrap_or(0.0),
                            _ => 0.0,
                        };
                        let lo = a - slack - sigmas * se;
                        let hi = a + sigmas * se;
                        (lo <= v && v <= hi, format!("miscov {v} in [{lo}, {hi}]"))
                    }
                    _ => (false, "no unit was ever selected".to_string()),
                };
                Check {
                    name,
                    passed,
                    detail,
                }
            })
            .collect()
    }
}

/// Machine-readable outcome of a run. Contains no timing, so equal inputs
/// give byte-identical documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub status: Status,
    pub trials: usize,
    pub summaries: Vec<MethodSummary>,
    /// Mean fraction of selected units with `y <= c`.
    pub selection_fdr: Option<f64>,
    pub floored_costs: usize,
    pub checks: Vec<Check>,
}

impl ResultDocument {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: "jomi".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            status: Status::Ok,
            trials: 0,
            summaries: Vec::new(),
            selection_fdr: None,
            floored_costs: 0,
            checks: Vec::new(),
        }
    }

    /// Fills summaries from trial records and evaluates the assertions.
    pub fn with_records(mut self, records: &[TrialRecord], assertions: &[Assertion]) -> Self {
        self.trials = records.len();
        if records.is_empty() {
            self.status = Status::NoTrials;
            return self;
        }
        let slots = records[0].results.len();
        self.summaries = (0..slots)
            .map(|k| {
                let views: Vec<&[UnitOutcome]> = records
                    .iter()
                    .map(|r| r.results[k].units.as_slice())
                    .collect();
                let alpha = records[0].results[k].alpha;
                MethodSummary {
                    method: records[0].results[k].method,
                    alpha,
                    summary: summarize(&views, alpha),
                }
            })
            .collect();
        self.selection_fdr = selection_fdr(records);
        self.floored_costs = records.iter().map(|r| r.floored_costs).sum();
        for a in assertions {
            let checks = a.check(&self.summaries);
            self.checks.extend(checks);
        }
        self.finish()
    }

    /// Sets the status from the checks.
    pub fn finish(mut self) -> Self {
        if self.status != Status::NoTrials && self.checks.iter().any(|c| !c.passed) {
            self.status = Status::ChecksFailed;
        }
        self
    }

    pub fn passed(&self) -> bool {
        self.status != Status::ChecksFailed
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("documents serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| crate::error::invalid(format!("result document: {e}")))
    }
}

/// One row of the per-unit detail table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub trial: usize,
    pub method: Method,
    pub alpha: f64,
    pub test_index: usize,
    pub covered: bool,
    pub size: f64,
    pub segments: usize,
    pub ref_size: usize,
}

pub fn detail_rows(records: &[TrialRecord]) -> Vec<DetailRow> {
    let mut rows = Vec::new();
    for r in records {
        for m in &r.results {
            for u in &m.units {
                rows.push(DetailRow {
                    trial: r.trial,
                    method: m.method,
                    alpha: m.alpha,
                    test_index: u.test_index,
                    covered: u.covered,
                    size: u.size,
                    segments: u.segments,
                    ref_size: u.ref_size,
                });
            }
        }
    }
    rows
}

pub fn write_detail<W: Write>(writer: W, rows: &[DetailRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detail<R: Read>(reader: R) -> Result<Vec<DetailRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Recomputes the summary of `(method, alpha)` from detail rows over
/// `trials` trials.
pub fn summary_from_detail(
    rows: &[DetailRow],
    trials: usize,
    method: Method,
    alpha: f64,
) -> Summary {
    let mut per: Vec<Vec<UnitOutcome>> = vec![Vec::new(); trials];
    for r in rows
        .iter()
        .filter(|r| r.method == method && r.alpha == alpha)
    {
        per[r.trial].push(UnitOutcome {
            test_index: r.test_index,
            covered: r.covered,
            size: r.size,
            segments: r.segments,
            ref_size: r.ref_size,
        });
    }
    let views: Vec<&[UnitOutcome]> = per.iter().map(Vec::as_slice).collect();
    summarize(&views, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dgp::Dgp;
    use crate::harness::runner::{run_trials, Experiment};
    use crate::pipeline::{Pipeline, RuleSpec, TaxonomySpec};
    use crate::rules::Direction;
    use crate::score::ScoreFamily;
    use crate::unit::ScoreSource;

    fn exp() -> Experiment {
        Experiment {
            dgp: Dgp::heteroscedastic(),
            pipeline: Pipeline {
                rule: RuleSpec::TopK {
                    k: 4,
                    direction: Direction::Highest,
                    source: ScoreSource::SelScore,
                },
                taxonomy: TaxonomySpec::All,
                family: ScoreFamily::AbsResidual,
            },
            methods: vec![Method::Vanilla, Method::JomiRand],
            alphas: vec![0.1, 0.3],
            n: 40,
            m: 12,
            trials: 30,
            master_seed: 9,
            keep_sets: false,
        }
    }

    #[test]
    fn summaries_recompute_from_detail() {
        let e = exp();
        let recs = run_trials(&e, Some(1)).unwrap();
        let doc = ResultDocument::new("evaluate", serde_json::Value::Null).with_records(&recs, &[]);
        let mut csv = Vec::new();
        write_detail(&mut csv, &detail_rows(&recs)).unwrap();
        let rows = read_detail(csv.as_slice()).unwrap();
        for s in &doc.summaries {
            assert_eq!(
                summary_from_detail(&rows, recs.len(), s.method, s.alpha),
                s.summary
            );
        }
    }

    #[test]
    fn json_round_trip() {
        let recs = run_trials(&exp(), Some(1)).unwrap();
        let a = [Assertion::MiscovBand {
            method: Method::Vanilla,
            sigmas: 3.0,
        }];
        let doc =
            ResultDocument::new("evaluate", serde_json::json!({"k": 1})).with_records(&recs, &a);
        assert_eq!(doc.checks.len(), 2);
        let back = ResultDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_json(), doc.to_json());
    }

    #[test]
    fn no_trials_marker() {
        let doc = ResultDocument::new("evaluate", serde_json::Value::Null).with_records(&[], &[]);
        assert_eq!(doc.status, Status::NoTrials);
        assert!(doc.passed());
        assert!(doc.to_json().contains("\"no_trials\""));
    }
}

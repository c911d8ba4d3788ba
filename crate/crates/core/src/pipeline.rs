//! End-to-end construction: selection, reference sets and prediction sets
//! for every selected test unit of one calibration/test split.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, JomiError, Result};
use crate::io::PredictRow;
use crate::jomi::{jomi_set_piecewise, reference_set_generic, SelectionRule, Taxonomy};
use crate::predsel::{
    ps_set, PrelimCalibration, PrelimRule, PrelimSelection, PsContext, PsQuantiles,
};
use crate::pvalues::{PScore, PValueRule, Procedure};
use crate::quantile::{conformal_quantile_sorted, randomized_threshold_sorted, VThreshold};
use crate::rules::{
    Direction, KnapsackObjective, KnapsackRule, QuantileKind, QuantileRule, TopKRule,
};
use crate::score::ScoreFamily;
use crate::set::PredictionSet;
use crate::split::{calibration_scores, invert};
use crate::unit::{DataView, Dataset, ScoreSource};

/// Serializable description of a built-in selection rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    SelectAll,
    TopK {
        k: usize,
        #[serde(default)]
        direction: Direction,
        #[serde(default)]
        source: ScoreSource,
    },
    JointQuantile {
        q: f64,
        #[serde(default)]
        source: ScoreSource,
    },
    CalibQuantile {
        q: f64,
        #[serde(default)]
        source: ScoreSource,
    },
    Knapsack {
        budget: f64,
        #[serde(default)]
        objective: KnapsackObjective,
        #[serde(default = "default_scale")]
        scale: f64,
        #[serde(default)]
        source: ScoreSource,
    },
    FixedPValue {
        q: f64,
        #[serde(default)]
        score: PScore,
        #[serde(default = "mu_hat")]
        source: ScoreSource,
    },
    Bh {
        q: f64,
        #[serde(default)]
        score: PScore,
        #[serde(default = "mu_hat")]
        source: ScoreSource,
    },
    Prelim {
        rule: PrelimRule,
        family: ScoreFamily,
        beta: f64,
    },
}

fn default_scale() -> f64 {
    100.0
}

fn mu_hat() -> ScoreSource {
    ScoreSource::MuHat
}

struct SelectAll;

impl SelectionRule for SelectAll {
    fn select(&self, data: &dyn DataView) -> Result<Vec<usize>> {
        Ok((0..data.n_test()).collect())
    }

    fn covariate_only(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "select_all"
    }
}

impl RuleSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RuleSpec::SelectAll => "select_all",
            RuleSpec::TopK { .. } => "topk",
            RuleSpec::JointQuantile { .. } => "joint_quantile",
            RuleSpec::CalibQuantile { .. } => "calib_quantile",
            RuleSpec::Knapsack { .. } => "knapsack",
            RuleSpec::FixedPValue { .. } => "fixed_pvalue",
            RuleSpec::Bh { .. } => "bh",
            RuleSpec::Prelim { .. } => "prelim",
        }
    }

    /// The rule as a trait object, for the generic engine.
    pub fn build(&self) -> Box<dyn SelectionRule> {
        match *self {
            RuleSpec::SelectAll => Box::new(SelectAll),
            RuleSpec::TopK {
                k,
                direction,
                source,
            } => Box::new(TopKRule {
                k,
                direction,
                source,
            }),
            RuleSpec::JointQuantile { q, source } => Box::new(QuantileRule {
                q,
                kind: QuantileKind::Joint,
                source,
            }),
            RuleSpec::CalibQuantile { q, source } => Box::new(QuantileRule {
                q,
                kind: QuantileKind::Calib,
                source,
            }),
            RuleSpec::Knapsack {
                budget,
                objective,
                scale,
                source,
            } => Box::new(KnapsackRule {
                budget,
                objective,
                scale,
                source,
            }),
            RuleSpec::FixedPValue { q, score, source } => Box::new(PValueRule {
                q,
                procedure: Procedure::Fixed,
                score,
                source,
            }),
            RuleSpec::Bh { q, score, source } => Box::new(PValueRule {
                q,
                procedure: Procedure::Bh,
                score,
                source,
            }),
            RuleSpec::Prelim { rule, family, beta } => {
                Box::new(PrelimSelection { rule, family, beta })
            }
        }
    }

    pub fn is_prelim(&self) -> bool {
        matches!(self, RuleSpec::Prelim { .. })
    }

    /// Parameter checks that do not need data, plus `m`-dependent ones.
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let q_ok = |q: f64| {
            if q > 0.0 && q < 1.0 {
                Ok(())
            } else {
                Err(invalid(format!("q must lie in (0, 1), got {q}")))
            }
        };
        match self {
            RuleSpec::SelectAll => Ok(()),
            RuleSpec::TopK { k, .. } => {
                if *k == 0 || *k > m {
                    Err(invalid(format!(
                        "top-K needs 1 <= K <= m, got K = {k}, m = {m}"
                    )))
                } else {
                    Ok(())
                }
            }
            RuleSpec::JointQuantile { q, .. }
            | RuleSpec::CalibQuantile { q, .. }
            | RuleSpec::FixedPValue { q, .. }
            | RuleSpec::Bh { q, .. } => q_ok(*q),
            RuleSpec::Knapsack { budget, scale, .. } => {
                if *budget > 0.0 && *scale > 0.0 {
                    Ok(())
                } else {
                    Err(invalid("knapsack budget and scale must be positive"))
                }
            }
            RuleSpec::Prelim { beta, .. } => {
                crate::error::check_alpha(*beta)?;
                let k = crate::quantile::conformal_rank(1.0 - beta, n + 1);
                if k > n {
                    Err(JomiError::BetaTooSmall { k, n })
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// How the taxonomy is chosen for a split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum TaxonomySpec {
    #[default]
    All,
    /// Partition by selection size: the taxonomy is `{S: |S| = |Ŝ|}`.
    SizeOfSelection,
    FixedSize(usize),
    Explicit(Vec<Vec<usize>>),
}

impl TaxonomySpec {
    pub fn resolve(&self, selected: &[usize]) -> Taxonomy {
        match self {
            TaxonomySpec::All => Taxonomy::All,
            TaxonomySpec::SizeOfSelection => Taxonomy::FixedSize(selected.len()),
            TaxonomySpec::FixedSize(r) => Taxonomy::FixedSize(*r),
            TaxonomySpec::Explicit(s) => Taxonomy::Explicit(s.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Split conformal on the full calibration set, ignoring selection.
    Vanilla,
    Jomi,
    JomiRand,
    /// Conservative set for preliminary-set selection.
    Ps,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::Jomi, Method::JomiRand, Method::Ps];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Jomi => "jomi",
            Method::JomiRand => "jomi_rand",
            Method::Ps => "ps",
        }
    }

    pub fn check_rule(self, rule: &RuleSpec) -> Result<()> {
        match (self, rule.is_prelim()) {
            (Method::Ps, false) => Err(invalid("method `ps` requires a prelim rule")),
            (Method::Jomi | Method::JomiRand, true) => Err(invalid(format!(
                "method `{}` is not available for prelim rules; use `ps`",
                self.name()
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = JomiError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method `{s}`")))
    }
}

/// Reference sets of one selected unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum References {
    /// The same set for every hypothesized outcome.
    Uniform(Vec<usize>),
    /// `above` applies to `y > c`, `below` to `y <= c`.
    TwoBranch {
        c: f64,
        above: Vec<usize>,
        below: Vec<usize>,
    },
    /// Pools of the two conservative quantiles.
    Prelim {
        below: Vec<usize>,
        above: Vec<usize>,
    },
}

/// Per-unit data for set construction.
#[derive(Debug, Clone)]
struct UnitPools {
    refs: References,
    /// Indices into `Prepared::pools`: `[below/uniform, above/uniform]`.
    pools: [usize; 2],
}

/// Selection and reference sets of one split, reusable across methods and
/// miscoverage levels.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub selected: Vec<usize>,
    /// Whether `Ŝ` lies in the taxonomy. When it does not, every reference
    /// set is empty and every set is the whole outcome space.
    pub in_taxonomy: bool,
    pub pvalues: Option<Vec<f64>>,
    pub prelim: Option<PrelimCalibration>,
    units: Vec<UnitPools>,
    /// Sorted calibration score pools; pool 0 is the full calibration set.
    pools: Vec<Vec<f64>>,
}

/// One constructed set with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SetOutcome {
    pub set: PredictionSet,
    /// Reference set sizes `[below, above]`; equal for y-independent sets.
    pub ref_sizes: [usize; 2],
}

/// Builds selections, reference sets and prediction sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pipeline {
    pub rule: RuleSpec,
    pub taxonomy: TaxonomySpec,
    /// Second-stage (set) score family.
    pub family: ScoreFamily,
}

fn sorted_pool(scores: &[f64], idx: &[usize]) -> Vec<f64> {
    let mut p: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    p.sort_by(f64::total_cmp);
    p
}

impl Pipeline {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        self.rule.validate(data.n(), data.m())?;
        for u in data.calib.iter().chain(&data.test) {
            self.family.check(u)?;
            if let RuleSpec::Prelim { family, .. } = &self.rule {
                family.check(u)?;
                if family.set_kind() != self.family.set_kind() {
                    return Err(invalid(
                        "first- and second-stage families must share an outcome space",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Selection and specialized reference sets. `calib_scores` are the
    /// second-stage scores of the calibration units.
    pub fn prepare(&self, data: &Dataset, calib_scores: &[f64]) -> Result<Prepared> {
        let mut pools = vec![sorted_pool(
            calib_scores,
            &(0..data.n()).collect::<Vec<_>>(),
        )];
        let mut units = Vec::new();
        let mut pvalues = None;
        let mut prelim = None;
        let selected;
        let in_taxonomy;
        let mut add_pool = |idx: &[usize]| {
            pools.push(sorted_pool(calib_scores, idx));
            pools.len() - 1
        };
        match &self.rule {
            RuleSpec::SelectAll
            | RuleSpec::TopK { .. }
            | RuleSpec::JointQuantile { .. }
            | RuleSpec::CalibQuantile { .. } => {
                let (sel, refs) = match self.rule {
                    RuleSpec::SelectAll => {
                        ((0..data.m()).collect::<Vec<_>>(), (0..data.n()).collect())
                    }
                    RuleSpec::TopK {
                        k,
                        direction,
                        source,
                    } => {
                        let (s, r) = TopKRule {
                            k,
                            direction,
                            source,
                        }
                        .fast_path(data, &Taxonomy::All)?;
                        (s.selected, r)
                    }
                    RuleSpec::JointQuantile { q, source } => {
                        let r = QuantileRule {
                            q,
                            kind: QuantileKind::Joint,
                            source,
                        };
                        let (s, r) = r.fast_path(data, &Taxonomy::All)?;
                        (s.selected, r)
                    }
                    RuleSpec::CalibQuantile { q, source } => {
                        let r = QuantileRule {
                            q,
                            kind: QuantileKind::Calib,
                            source,
                        };
                        let (s, r) = r.fast_path(data, &Taxonomy::All)?;
                        (s.selected, r)
                    }
                    _ => unreachable!(),
                };
                in_taxonomy = self.taxonomy.resolve(&sel).contains(&sel);
                let refs = if in_taxonomy { refs } else { Vec::new() };
                let p = add_pool(&refs);
                for _ in &sel {
                    units.push(UnitPools {
                        refs: References::Uniform(refs.clone()),
                        pools: [p, p],
                    });
                }
                selected = sel;
            }
            RuleSpec::Knapsack {
                budget,
                objective,
                scale,
                source,
            } => {
                let rule = KnapsackRule {
                    budget: *budget,
                    objective: *objective,
                    scale: *scale,
                    source: *source,
                };
                let sel = rule.select_detail(data)?.selected;
                let tax = self.taxonomy.resolve(&sel);
                in_taxonomy = tax.contains(&sel);
                let refs = match objective {
                    KnapsackObjective::Count => rule.greedy_references(data, &sel, &tax)?,
                    KnapsackObjective::Reward => sel
                        .iter()
                        .map(|&j| {
                            reference_set_generic(j, None, &rule, &tax, data).map(|r| r.indices)
                        })
                        .collect::<Result<_>>()?,
                };
                for r in refs {
                    let p = add_pool(&r);
                    units.push(UnitPools {
                        refs: References::Uniform(r),
                        pools: [p, p],
                    });
                }
                selected = sel;
            }
            RuleSpec::FixedPValue { q, score, source } | RuleSpec::Bh { q, score, source } => {
                let procedure = if matches!(self.rule, RuleSpec::Bh { .. }) {
                    Procedure::Bh
                } else {
                    Procedure::Fixed
                };
                let rule = PValueRule {
                    q: *q,
                    procedure,
                    score: *score,
                    source: *source,
                };
                let sel = rule.select(data)?;
                let tax = self.taxonomy.resolve(&sel);
                let fp = rule.fast_path(data, &tax)?;
                in_taxonomy = tax.contains(&sel);
                for (&j, [above, below]) in sel.iter().zip(fp.references) {
                    let c = data.test[j]
                        .threshold_c
                        .ok_or_else(|| invalid("missing threshold `c`"))?;
                    let pb = add_pool(&below);
                    let pa = add_pool(&above);
                    units.push(UnitPools {
                        refs: References::TwoBranch { c, above, below },
                        pools: [pb, pa],
                    });
                }
                pvalues = Some(fp.pvalues);
                selected = sel;
            }
            RuleSpec::Prelim { rule, family, beta } => {
                let ps = PrelimSelection {
                    rule: *rule,
                    family: *family,
                    beta: *beta,
                };
                let ctx = PsContext::new(data, &ps)?;
                let sel = ctx.selection.selected.clone();
                let tax = self.taxonomy.resolve(&sel);
                in_taxonomy = tax.contains(&sel);
                for &j in &sel {
                    // alpha does not affect the reference sets
                    let q = ctx.quantiles(j, calib_scores, &tax, 0.5)?;
                    let pb = add_pool(&q.refs1);
                    let pa = add_pool(&q.refs2);
                    units.push(UnitPools {
                        refs: References::Prelim {
                            below: q.refs1,
                            above: q.refs2,
                        },
                        pools: [pb, pa],
                    });
                }
                prelim = Some(ctx.cal);
                selected = sel;
            }
        }
        Ok(Prepared {
            selected,
            in_taxonomy,
            pvalues,
            prelim,
            units,
            pools,
        })
    }

    /// Set for the `idx`-th selected unit. `u` is that unit's uniform draw,
    /// read only by [`Method::JomiRand`].
    pub fn set(
        &self,
        prep: &Prepared,
        idx: usize,
        method: Method,
        alpha: f64,
        u: f64,
        data: &Dataset,
    ) -> Result<SetOutcome> {
        crate::error::check_alpha(alpha)?;
        method.check_rule(&self.rule)?;
        let j = prep.selected[idx];
        let unit = &data.test[j];
        let th = |pool: usize| -> Result<VThreshold> {
            let p = &prep.pools[pool];
            match method {
                Method::JomiRand => randomized_threshold_sorted(p, u, alpha),
                _ => Ok(VThreshold {
                    value: conformal_quantile_sorted(1.0 - alpha, p, true)?,
                    inclusive: true,
                }),
            }
        };
        if method == Method::Vanilla {
            let n = prep.pools[0].len();
            return Ok(SetOutcome {
                set: invert(unit, self.family, th(0)?)?,
                ref_sizes: [n, n],
            });
        }
        let up = &prep.units[idx];
        let sizes = [prep.pools[up.pools[0]].len(), prep.pools[up.pools[1]].len()];
        let set = match &up.refs {
            References::Uniform(_) => {
                jomi_set_piecewise(unit, self.family, &[], &[th(up.pools[0])?])?
            }
            References::TwoBranch { c, .. } => jomi_set_piecewise(
                unit,
                self.family,
                &[*c],
                &[th(up.pools[0])?, th(up.pools[1])?],
            )?,
            References::Prelim { below, above } => {
                let RuleSpec::Prelim { family: first, .. } = &self.rule else {
                    unreachable!()
                };
                let cal = prep.prelim.as_ref().expect("prelim calibration");
                let q = PsQuantiles {
                    q1: th(up.pools[0])?.value,
                    q2: th(up.pools[1])?.value,
                    refs1: below.clone(),
                    refs2: above.clone(),
                };
                ps_set(unit, &q, cal, *first, self.family)?
            }
        };
        Ok(SetOutcome {
            set,
            ref_sizes: sizes,
        })
    }

    /// Size of the reference set that applies at outcome `y`.
    pub fn ref_size_at(
        &self,
        prep: &Prepared,
        idx: usize,
        y: f64,
        data: &Dataset,
    ) -> Result<usize> {
        let up = &prep.units[idx];
        Ok(match &up.refs {
            References::Uniform(r) => r.len(),
            References::TwoBranch { c, above, below } => {
                if y > *c {
                    above.len()
                } else {
                    below.len()
                }
            }
            References::Prelim { below, above } => {
                let RuleSpec::Prelim { family, .. } = &self.rule else {
                    unreachable!()
                };
                let cal = prep.prelim.as_ref().expect("prelim calibration");
                let s = family.score(&data.test[prep.selected[idx]], y)?;
                if s <= cal.eta {
                    below.len()
                } else {
                    above.len()
                }
            }
        })
    }

    /// The specialized reference sets of the `idx`-th selected unit.
    pub fn references<'a>(&self, prep: &'a Prepared, idx: usize) -> &'a References {
        &prep.units[idx].refs
    }

    /// One row per test unit. `uniforms[j]` is read by
    /// [`Method::JomiRand`] only.
    pub fn predict(
        &self,
        method: Method,
        alpha: f64,
        data: &Dataset,
        uniforms: &[f64],
    ) -> Result<Vec<PredictRow>> {
        self.validate(data)?;
        method.check_rule(&self.rule)?;
        if uniforms.len() != data.m() {
            return Err(invalid("one uniform draw per test unit is required"));
        }
        let scores = self.calibration_scores(data)?;
        let prep = self.prepare(data, &scores)?;
        let mut rows: Vec<PredictRow> = data
            .test
            .iter()
            .enumerate()
            .map(|(j, u)| PredictRow {
                id: u.id.clone(),
                selected: false,
                p_value: prep.pvalues.as_ref().map(|p| p[j]),
                set: String::new(),
                n_segments: None,
                ref_size: None,
                ref_size_below: None,
                ref_size_above: None,
            })
            .collect();
        for (idx, &j) in prep.selected.iter().enumerate() {
            let out = self.set(&prep, idx, method, alpha, uniforms[j], data)?;
            let row = &mut rows[j];
            row.selected = true;
            row.set = out.set.to_string();
            row.n_segments = Some(out.set.segment_count());
            match (method, self.references(&prep, idx)) {
                (Method::Vanilla, _) | (_, References::Uniform(_)) => {
                    row.ref_size = Some(out.ref_sizes[0])
                }
                _ => {
                    row.ref_size_below = Some(out.ref_sizes[0]);
                    row.ref_size_above = Some(out.ref_sizes[1]);
                }
            }
        }
        Ok(rows)
    }

    pub fn calibration_scores(&self, data: &Dataset) -> Result<Vec<f64>> {
        calibration_scores(&data.calib, self.family)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jomi::jomi_set_finite;
    use crate::quantile::SetMode;
    use crate::unit::Unit;

    fn binary_data() -> Dataset {
        let calib = (0..12)
            .map(|k| {
                let mu = 0.05 + 0.08 * f64::from(k);
                Unit::new(format!("c{k}"))
                    .with_mu_hat(mu)
                    .with_y(f64::from(k % 3 == 0))
                    .with_threshold(0.5)
                    .with_sel_score(mu)
            })
            .collect();
        let test = (0..4)
            .map(|k| {
                let mu = 0.113 + 0.27 * f64::from(k);
                Unit::new(format!("t{k}"))
                    .with_mu_hat(mu)
                    .with_threshold(0.5)
                    .with_sel_score(mu)
            })
            .collect();
        Dataset::new(calib, test).unwrap()
    }

    #[test]
    fn finite_pvalue_sets_match_generic_engine() {
        let d = binary_data();
        for rule in [
            RuleSpec::FixedPValue {
                q: 0.4,
                score: PScore::Difference,
                source: ScoreSource::MuHat,
            },
            RuleSpec::Bh {
                q: 0.5,
                score: PScore::Difference,
                source: ScoreSource::MuHat,
            },
            RuleSpec::TopK {
                k: 2,
                direction: Direction::Highest,
                source: ScoreSource::SelScore,
            },
        ] {
            let p = Pipeline {
                rule: rule.clone(),
                taxonomy: TaxonomySpec::All,
                family: ScoreFamily::Binary,
            };
            let scores = p.calibration_scores(&d).unwrap();
            let prep = p.prepare(&d, &scores).unwrap();
            let r = rule.build();
            for (idx, &j) in prep.selected.iter().enumerate() {
                for alpha in [0.2, 0.5] {
                    let fast = p.set(&prep, idx, Method::Jomi, alpha, 0.0, &d).unwrap().set;
                    let slow = jomi_set_finite(
                        j,
                        r.as_ref(),
                        &Taxonomy::All,
                        ScoreFamily::Binary,
                        alpha,
                        SetMode::Deterministic,
                        &d,
                        &scores,
                    )
                    .unwrap();
                    assert_eq!(fast, slow, "{rule:?} j={j} alpha={alpha}");
                }
            }
        }
    }

    #[test]
    fn methods_are_checked_against_rules() {
        let topk = RuleSpec::TopK {
            k: 1,
            direction: Direction::Highest,
            source: ScoreSource::SelScore,
        };
        assert!(Method::Ps.check_rule(&topk).is_err());
        let pr = RuleSpec::Prelim {
            rule: PrelimRule::Singleton,
            family: ScoreFamily::Binary,
            beta: 0.2,
        };
        assert!(Method::Jomi.check_rule(&pr).is_err());
        assert!(Method::Vanilla.check_rule(&pr).is_ok());
    }

    #[test]
    fn rule_spec_json_shape() {
        let r: RuleSpec = serde_json_like();
        assert_eq!(
            r,
            RuleSpec::TopK {
                k: 3,
                direction: Direction::Lowest,
                source: ScoreSource::SelScore
            }
        );
    }

    fn serde_json_like() -> RuleSpec {
        serde_json::from_str(r#"{"kind":"top_k","k":3,"direction":"lowest"}"#).unwrap()
    }
}

//! Budget-constrained selection.
//!
//! Two backends: a threshold-greedy rule that keeps every unit scoring at
//! least `mu`, with `mu` the smallest score whose cumulative cost fits the
//! budget, and an exact 0/1 knapsack DP over integerized costs.

use serde::{Deserialize, Serialize};

use super::SelectionResult;
use crate::error::{invalid, JomiError, Result};
use crate::jomi::{SelectionRule, Taxonomy};
use crate::unit::{DataView, ScoreSource, Unit};

/// Largest DP table (items x capacity cells) we are willing to allocate.
pub const MAX_DP_CELLS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnapsackObjective {
    /// Select as many high-scoring units as the budget allows (greedy).
    #[default]
    Count,
    /// Maximize total score subject to the budget (exact DP).
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnapsackBackend {
    ThresholdGreedy,
    ExactDp,
}

fn check_inputs(scores: &[f64], costs: &[f64], budget: f64) -> Result<()> {
    if scores.len() != costs.len() {
        return Err(invalid("scores and costs differ in length"));
    }
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(invalid(format!("budget must be positive, got {budget}")));
    }
    if costs.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(invalid("costs must be finite and nonnegative"));
    }
    Ok(())
}

/// Threshold-greedy selection; `threshold` is the cutoff `mu` (selection is
/// `score >= mu`), absent when nothing fits.
pub fn greedy_select(scores: &[f64], costs: &[f64], budget: f64) -> Result<SelectionResult> {
    check_inputs(scores, costs, budget)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut mu = None;
    for (pos, &k) in order.iter().enumerate() {
        acc += costs[k];
        let group_end = order
            .get(pos + 1)
            .is_none_or(|&next| scores[next] != scores[k]);
        if group_end {
            if acc <= budget {
                mu = Some(scores[k]);
            } else {
                break;
            }
        }
    }
    let selected = match mu {
        Some(mu) => (0..scores.len()).filter(|&k| scores[k] >= mu).collect(),
        None => Vec::new(),
    };
    Ok(SelectionResult {
        selected,
        threshold: mu,
        backend: Some(KnapsackBackend::ThresholdGreedy),
    })
}

fn integerize(x: f64, scale: f64, up: bool) -> f64 {
    let v = x * scale;
    let r = v.round();
    if (v - r).abs() <= 1e-9 {
        r
    } else if up {
        v.ceil()
    } else {
        v.floor()
    }
}

/// Exact DP maximizing the summed reward of the chosen items. Costs are
/// rounded up and the budget down on a grid of `1 / scale`, so the chosen
/// set is always feasible for the original costs.
pub fn dp_select(
    rewards: &[f64],
    costs: &[f64],
    budget: f64,
    scale: f64,
) -> Result<SelectionResult> {
    check_inputs(rewards, costs, budget)?;
    if !(scale > 0.0) {
        return Err(invalid("cost scale must be positive"));
    }
    let cap = integerize(budget, scale, false);
    let m = rewards.len();
    if cap * (m as f64 + 1.0) > MAX_DP_CELLS as f64 {
        return Err(JomiError::Unsupported(format!(
            "knapsack DP over {m} items and capacity {cap} exceeds {MAX_DP_CELLS} cells"
        )));
    }
    let cap = cap as usize;
    let w: Vec<usize> = costs
        .iter()
        .map(|&c| integerize(c, scale, true) as usize)
        .collect();
    let mut best = vec![0.0f64; cap + 1];
    let mut take = vec![false; m * (cap + 1)];
    for k in 0..m {
        if !(rewards[k] > 0.0) || w[k] > cap {
            continue;
        }
        for b in (w[k]..=cap).rev() {
            let cand = best[b - w[k]] + rewards[k];
            if cand > best[b] {
                best[b] = cand;
                take[k * (cap + 1) + b] = true;
            }
        }
    }
    let mut selected = Vec::new();
    let mut b = cap;
    for k in (0..m).rev() {
        if take[k * (cap + 1) + b] {
            selected.push(k);
            b -= w[k];
        }
    }
    selected.reverse();
    Ok(SelectionResult {
        selected,
        threshold: None,
        backend: Some(KnapsackBackend::ExactDp),
    })
}

pub fn knapsack_select(
    scores: &[f64],
    costs: &[f64],
    budget: f64,
    objective: KnapsackObjective,
    scale: f64,
) -> Result<SelectionResult> {
    match objective {
        KnapsackObjective::Count => greedy_select(scores, costs, budget),
        KnapsackObjective::Reward => dp_select(scores, costs, budget, scale),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnapsackRule {
    pub budget: f64,
    pub objective: KnapsackObjective,
    /// Cost grid resolution of the DP backend.
    pub scale: f64,
    pub source: ScoreSource,
}

fn cost_of(u: &Unit) -> Result<f64> {
    u.cost
        .ok_or_else(|| invalid(format!("unit `{}` is missing `cost`", u.id)))
}

impl KnapsackRule {
    pub fn select_detail(&self, data: &dyn DataView) -> Result<SelectionResult> {
        let m = data.n_test();
        let mut scores = Vec::with_capacity(m);
        let mut costs = Vec::with_capacity(m);
        for l in 0..m {
            let u = data.test_unit(l);
            scores.push(self.source.value(u)?);
            costs.push(cost_of(u)?);
        }
        knapsack_select(&scores, &costs, self.budget, self.objective, self.scale)
    }

    /// Reference sets of the greedy backend for every selected unit, without
    /// rerunning the rule on each swap when the taxonomy is vacuous.
    pub fn greedy_references(
        &self,
        data: &dyn DataView,
        selected: &[usize],
        taxonomy: &Taxonomy,
    ) -> Result<Vec<Vec<usize>>> {
        if self.objective != KnapsackObjective::Count {
            return Err(invalid(
                "closed-form references exist only for the greedy backend",
            ));
        }
        let m = data.n_test();
        let test: Vec<(f64, f64)> = (0..m)
            .map(|l| {
                let u = data.test_unit(l);
                Ok((self.source.value(u)?, cost_of(u)?))
            })
            .collect::<Result<_>>()?;
        let calib: Vec<(f64, f64)> = (0..data.n_calib())
            .map(|i| {
                let u = data.calib_unit(i);
                Ok((self.source.value(u)?, cost_of(u)?))
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(selected.len());
        for &j in selected {
            if !taxonomy.is_all() {
                let r = crate::jomi::reference_set_generic(j, None, self, taxonomy, data)?;
                out.push(r.indices);
                continue;
            }
            // others sorted by descending score, costs accumulated in that order
            let mut others: Vec<(f64, f64)> = test
                .iter()
                .enumerate()
                .filter(|&(l, _)| l != j)
                .map(|(_, &p)| p)
                .collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut prefix = Vec::with_capacity(others.len() + 1);
            prefix.push(0.0);
            let mut acc = 0.0;
            for o in &others {
                acc += o.1;
                prefix.push(acc);
            }
            let refs = calib
                .iter()
                .enumerate()
                .filter(|&(_, &(s, c))| {
                    let a = others.partition_point(|o| o.0 > s);
                    let ties = others[a..].iter().take_while(|o| o.0 == s).count();
                    if ties == 0 {
                        prefix[a] + c <= self.budget
                    } else {
                        let mut acc = prefix[a] + c;
                        for o in &others[a..a + ties] {
                            acc += o.1;
                        }
                        acc <= self.budget
                    }
                })
                .map(|(i, _)| i)
                .collect();
            out.push(refs);
        }
        Ok(out)
    }
}

impl SelectionRule for KnapsackRule {
    fn select(&self, data: &dyn DataView) -> Result<Vec<usize>> {
        Ok(self.select_detail(data)?.selected)
    }

    fn covariate_only(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "knapsack"
    }
}

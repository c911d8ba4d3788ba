//! Conformal p-values and selection by thresholding them, either at a fixed
//! level or with Benjamini-Hochberg.
//!
//! Each calibration unit contributes `Ŝ_i = S(X_i, c_i)` and the null flag
//! `Y_i <= c_i`; each test unit contributes `Ŝ_{n+j} = S(X_{n+j}, c_{n+j})`.
//! Comparisons are done on integer counts, and the p-value form and the
//! threshold form of each rule share one comparison helper so that they
//! agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, JomiError, Result};
use crate::jomi::{SelectionRule, Taxonomy};
use crate::rules::{check_q, SelectionResult};
use crate::unit::{DataView, ScoreSource, Unit};

/// The selection score `S(x, y)`, nonincreasing in `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PScore {
    /// `S(x, y) = s(x) - y`
    #[default]
    Difference,
    /// `S(x, y) = s(x) - M 1{y > c}` with `M` exceeding twice the largest
    /// `|s(x)|`. Makes the conformal p-value equal its dominating p-value.
    Clipped,
}

impl PScore {
    /// `Ŝ = S(x, c)`.
    pub fn at_threshold(self, s: f64, c: f64) -> f64 {
        match self {
            PScore::Difference => s - c,
            PScore::Clipped => s,
        }
    }

    /// `S(x, y)` for a unit with threshold `c`; `big_m` is only read by
    /// the clipped score.
    pub fn at_outcome(self, s: f64, y: f64, c: f64, big_m: f64) -> f64 {
        match self {
            PScore::Difference => s - y,
            PScore::Clipped => {
                if y > c {
                    s - big_m
                } else {
                    s
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Fixed,
    Bh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueInputs {
    pub calib_shat: Vec<f64>,
    pub calib_null: Vec<bool>,
    pub test_shat: Vec<f64>,
}

fn threshold_of(u: &Unit) -> Result<f64> {
    u.threshold_c
        .ok_or_else(|| invalid(format!("unit `{}` is missing threshold `c`", u.id)))
}

impl PValueInputs {
    pub fn from_view(data: &dyn DataView, score: PScore, source: ScoreSource) -> Result<Self> {
        let n = data.n_calib();
        let mut calib_shat = Vec::with_capacity(n);
        let mut calib_null = Vec::with_capacity(n);
        for i in 0..n {
            let u = data.calib_unit(i);
            let c = threshold_of(u)?;
            calib_shat.push(score.at_threshold(source.value(u)?, c));
            let y = data.calib_outcome(i).ok_or(JomiError::MissingOutcome(i))?;
            calib_null.push(y <= c);
        }
        let test_shat = (0..data.n_test())
            .map(|j| {
                let u = data.test_unit(j);
                Ok(score.at_threshold(source.value(u)?, threshold_of(u)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            calib_shat,
            calib_null,
            test_shat,
        })
    }

    pub fn n(&self) -> usize {
        self.calib_shat.len()
    }

    pub fn m(&self) -> usize {
        self.test_shat.len()
    }

    /// `#{i: Ŝ_i >= t, Y_i <= c_i}`
    pub fn nulls_at_or_above(&self, t: f64) -> usize {
        self.calib_shat
            .iter()
            .zip(&self.calib_null)
            .filter(|&(&s, &null)| null && s >= t)
            .count()
    }
}

pub fn conf_pvalue(inputs: &PValueInputs, j: usize) -> f64 {
    let count = inputs.nulls_at_or_above(inputs.test_shat[j]);
    (1 + count) as f64 / (inputs.n() + 1) as f64
}

/// `(u (1 + #{null, Ŝ_i = Ŝ_{n+j}}) + #{null, Ŝ_i > Ŝ_{n+j}}) / (n + 1)`.
pub fn conf_pvalue_randomized(inputs: &PValueInputs, j: usize, u: f64) -> f64 {
    let t = inputs.test_shat[j];
    let (mut eq, mut gt) = (0usize, 0usize);
    for (&s, &null) in inputs.calib_shat.iter().zip(&inputs.calib_null) {
        if null {
            if s == t {
                eq += 1;
            } else if s > t {
                gt += 1;
            }
        }
    }
    (u * (1 + eq) as f64 + gt as f64) / (inputs.n() + 1) as f64
}

fn fixed_ok(numer: usize, n: usize, q: f64) -> bool {
    numer as f64 <= q * (n + 1) as f64
}

fn bh_ok(numer: usize, r: usize, n: usize, m: usize, q: f64) -> bool {
    (numer * m) as f64 <= q * ((n + 1) * r.max(1)) as f64
}

/// Distinct pooled score values in descending order with the counts the
/// threshold conditions need.
struct PooledScan {
    values: Vec<f64>,
    nulls_ge: Vec<usize>,
    tests_ge: Vec<usize>,
}

impl PooledScan {
    fn new(inputs: &PValueInputs) -> Self {
        let mut ev: Vec<(f64, u8)> = Vec::with_capacity(inputs.n() + inputs.m());
        for (&s, &null) in inputs.calib_shat.iter().zip(&inputs.calib_null) {
            ev.push((s, u8::from(null)));
        }
        for &s in &inputs.test_shat {
            ev.push((s, 2));
        }
        ev.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut values = Vec::new();
        let mut nulls_ge = Vec::new();
        let mut tests_ge = Vec::new();
        let (mut nn, mut nt) = (0, 0);
        for (k, &(s, kind)) in ev.iter().enumerate() {
            match kind {
                1 => nn += 1,
                2 => nt += 1,
                _ => {}
            }
            if ev.get(k + 1).is_none_or(|next| next.0 != s) {
                values.push(s);
                nulls_ge.push(nn);
                tests_ge.push(nt);
            }
        }
        Self {
            values,
            nulls_ge,
            tests_ge,
        }
    }

    /// Smallest pooled value satisfying `cond(N(t), #{test >= t})`.
    fn inf(&self, mut cond: impl FnMut(f64, usize, usize) -> bool) -> f64 {
        let mut best = f64::INFINITY;
        for d in 0..self.values.len() {
            if cond(self.values[d], self.nulls_ge[d], self.tests_ge[d]) {
                best = self.values[d];
            }
        }
        best
    }
}

fn above_threshold(scores: &[f64], t: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&j| scores[j] >= t).collect()
}

pub fn fixed_select(inputs: &PValueInputs, q: f64) -> Result<SelectionResult> {
    check_q(q)?;
    let n = inputs.n();
    let by_p: Vec<usize> = (0..inputs.m())
        .filter(|&j| fixed_ok(1 + inputs.nulls_at_or_above(inputs.test_shat[j]), n, q))
        .collect();
    let t = PooledScan::new(inputs).inf(|_, nulls, _| fixed_ok(1 + nulls, n, q));
    let by_t = above_threshold(&inputs.test_shat, t);
    if by_p != by_t {
        return Err(JomiError::Consistency(format!(
            "fixed-level selection: p-value form {by_p:?} != threshold form {by_t:?}"
        )));
    }
    Ok(SelectionResult {
        selected: by_p,
        threshold: Some(t),
        backend: None,
    })
}

pub fn bh_select(inputs: &PValueInputs, q: f64) -> Result<SelectionResult> {
    check_q(q)?;
    let (n, m) = (inputs.n(), inputs.m());
    let numer: Vec<usize> = inputs
        .test_shat
        .iter()
        .map(|&s| 1 + inputs.nulls_at_or_above(s))
        .collect();
    let mut sorted = numer.clone();
    sorted.sort_unstable();
    let kstar = (1..=m)
        .rev()
        .find(|&k| bh_ok(sorted[k - 1], k, n, m, q))
        .unwrap_or(0);
    let by_p: Vec<usize> = if kstar == 0 {
        Vec::new()
    } else {
        (0..m)
            .filter(|&j| bh_ok(numer[j], kstar, n, m, q))
            .collect()
    };
    let t = PooledScan::new(inputs).inf(|_, nulls, tests| bh_ok(1 + nulls, tests, n, m, q));
    let by_t = above_threshold(&inputs.test_shat, t);
    if by_p != by_t {
        return Err(JomiError::Consistency(format!(
            "BH selection: p-value form {by_p:?} != threshold form {by_t:?}"
        )));
    }
    Ok(SelectionResult {
        selected: by_p,
        threshold: Some(t),
        backend: None,
    })
}

/// `table[k][l]`: the swap threshold for hypothesized-null indicator `k`
/// (`k = 1` iff `y <= c_{n+j}`) and calibration non-null indicator `l`.
pub type ThresholdTable = [[f64; 2]; 2];

struct Thresholds {
    scan: PooledScan,
    n: usize,
    m: usize,
    q: f64,
}

impl Thresholds {
    fn table(&self, procedure: Procedure, shat_j: f64) -> ThresholdTable {
        let mut out = [[f64::INFINITY; 2]; 2];
        for (k, row) in out.iter_mut().enumerate() {
            for (l, cell) in row.iter_mut().enumerate() {
                *cell = self.scan.inf(|t, nulls, tests| {
                    let own = usize::from(shat_j >= t);
                    let numer = l + nulls + k * own;
                    match procedure {
                        Procedure::Fixed => fixed_ok(numer, self.n, self.q),
                        Procedure::Bh => bh_ok(numer, 1 + tests - own, self.n, self.m, self.q),
                    }
                });
            }
        }
        out
    }
}

pub fn fixed_thresholds(inputs: &PValueInputs, j: usize, q: f64) -> ThresholdTable {
    Thresholds {
        scan: PooledScan::new(inputs),
        n: inputs.n(),
        m: inputs.m(),
        q,
    }
    .table(Procedure::Fixed, inputs.test_shat[j])
}

pub fn bh_thresholds(inputs: &PValueInputs, j: usize, q: f64) -> ThresholdTable {
    Thresholds {
        scan: PooledScan::new(inputs),
        n: inputs.n(),
        m: inputs.m(),
        q,
    }
    .table(Procedure::Bh, inputs.test_shat[j])
}

/// `[R^0, R^1]`: `R^0` applies to hypothesized `y > c_{n+j}`, `R^1` to
/// `y <= c_{n+j}`.
pub fn pvalue_references(
    inputs: &PValueInputs,
    j: usize,
    table: &ThresholdTable,
    taxonomy: &Taxonomy,
) -> [Vec<usize>; 2] {
    let swapped_ok = |t: f64| {
        if taxonomy.is_all() {
            return true;
        }
        let sel: Vec<usize> = (0..inputs.m())
            .filter(|&l| l == j || inputs.test_shat[l] >= t)
            .collect();
        taxonomy.contains(&sel)
    };
    let mut out: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (k, refs) in out.iter_mut().enumerate() {
        let t_null = table[k][0];
        let t_alt = table[k][1];
        let ok_null = swapped_ok(t_null);
        let ok_alt = swapped_ok(t_alt);
        *refs = (0..inputs.n())
            .filter(|&i| {
                let s = inputs.calib_shat[i];
                if inputs.calib_null[i] {
                    ok_null && s >= t_null
                } else {
                    ok_alt && s >= t_alt
                }
            })
            .collect();
    }
    out
}

/// Selection by conformal p-values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PValueRule {
    pub q: f64,
    pub procedure: Procedure,
    pub score: PScore,
    pub source: ScoreSource,
}

/// Selection, p-values and two-branch reference sets of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PValueFastPath {
    pub selection: SelectionResult,
    pub pvalues: Vec<f64>,
    /// Aligned with `selection.selected`.
    pub references: Vec<[Vec<usize>; 2]>,
    pub tables: Vec<ThresholdTable>,
}

impl PValueRule {
    pub fn inputs(&self, data: &dyn DataView) -> Result<PValueInputs> {
        PValueInputs::from_view(data, self.score, self.source)
    }

    pub fn select_inputs(&self, inputs: &PValueInputs) -> Result<SelectionResult> {
        match self.procedure {
            Procedure::Fixed => fixed_select(inputs, self.q),
            Procedure::Bh => bh_select(inputs, self.q),
        }
    }

    pub fn fast_path(&self, data: &dyn DataView, taxonomy: &Taxonomy) -> Result<PValueFastPath> {
        let inputs = self.inputs(data)?;
        let selection = self.select_inputs(&inputs)?;
        let pvalues = (0..inputs.m()).map(|j| conf_pvalue(&inputs, j)).collect();
        let th = Thresholds {
            scan: PooledScan::new(&inputs),
            n: inputs.n(),
            m: inputs.m(),
            q: self.q,
        };
        let mut references = Vec::with_capacity(selection.selected.len());
        let mut tables = Vec::with_capacity(selection.selected.len());
        for &j in &selection.selected {
            let table = th.table(self.procedure, inputs.test_shat[j]);
            references.push(pvalue_references(&inputs, j, &table, taxonomy));
            tables.push(table);
        }
        Ok(PValueFastPath {
            selection,
            pvalues,
            references,
            tables,
        })
    }
}

impl SelectionRule for PValueRule {
    fn select(&self, data: &dyn DataView) -> Result<Vec<usize>> {
        Ok(self.select_inputs(&self.inputs(data)?)?.selected)
    }

    fn name(&self) -> &str {
        match self.procedure {
            Procedure::Fixed => "fixed_pvalue",
            Procedure::Bh => "bh",
        }
    }
}

/// Upper bound on the clipped score's `M` for a dataset: one more than twice
/// the largest `|s(x)|`.
pub fn clip_constant(data: &dyn DataView, source: ScoreSource) -> Result<f64> {
    let mut sup = 0.0f64;
    for i in 0..data.n_calib() {
        sup = sup.max(source.value(data.calib_unit(i))?.abs());
    }
    for j in 0..data.n_test() {
        sup = sup.max(source.value(data.test_unit(j))?.abs());
    }
    Ok(2.0 * sup + 1.0)
}

/// `(1 + #{i: S(X_i, Y_i) >= Ŝ_{n+j}}) / (n + 1)`, which dominates the
/// conformal p-value of test unit `j`.
pub fn dominating_pvalue(
    data: &dyn DataView,
    j: usize,
    score: PScore,
    source: ScoreSource,
) -> Result<f64> {
    let big_m = clip_constant(data, source)?;
    let tu = data.test_unit(j);
    let shat = score.at_threshold(source.value(tu)?, threshold_of(tu)?);
    let mut count = 0;
    for i in 0..data.n_calib() {
        let u = data.calib_unit(i);
        let y = data.calib_outcome(i).ok_or(JomiError::MissingOutcome(i))?;
        if score.at_outcome(source.value(u)?, y, threshold_of(u)?, big_m) >= shat {
            count += 1;
        }
    }
    Ok((1 + count) as f64 / (data.n_calib() + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jomi::reference_set_generic;
    use crate::unit::Dataset;
    use proptest::prelude::*;

    fn inputs(calib: &[(f64, bool)], test: &[f64]) -> PValueInputs {
        PValueInputs {
            calib_shat: calib.iter().map(|p| p.0).collect(),
            calib_null: calib.iter().map(|p| p.1).collect(),
            test_shat: test.to_vec(),
        }
    }

    #[test]
    fn pvalue_examples() {
        let inp = inputs(
            &[(3.0, true), (1.0, true), (2.0, false), (5.0, true)],
            &[2.5, 9.0, -1.0],
        );
        assert!((conf_pvalue(&inp, 0) - 3.0 / 5.0).abs() < 1e-15);
        assert!((conf_pvalue(&inp, 1) - 1.0 / 5.0).abs() < 1e-15);
        let all = inputs(&[(3.0, true), (1.0, true)], &[0.5]);
        assert_eq!(conf_pvalue(&all, 0), 1.0);
        // one extra null tie at 2.5; n = 5 so the denominator is 6
        let tied = inputs(
            &[
                (3.0, true),
                (1.0, true),
                (2.0, false),
                (5.0, true),
                (2.5, true),
            ],
            &[2.5],
        );
        let p = conf_pvalue_randomized(&tied, 0, 0.5);
        assert!((p - (0.5 * 2.0 + 2.0) / 6.0).abs() < 1e-15);
        assert!((conf_pvalue_randomized(&tied, 0, 1.0) - conf_pvalue(&tied, 0)).abs() < 1e-15);
        assert!((conf_pvalue_randomized(&inp, 0, 0.3) - 2.3 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn fixed_selection_examples() {
        // n = 9: p-values 0.6, 0.1, 0.4 from null counts 5, 0, 3
        let mut calib: Vec<(f64, bool)> = (0..9).map(|k| (f64::from(k), true)).collect();
        calib[0].1 = false;
        calib[1].1 = false;
        calib[2].1 = false;
        calib[3].1 = false;
        let inp = inputs(&calib, &[4.0, 9.5, 6.0]);
        let p: Vec<f64> = (0..3).map(|j| conf_pvalue(&inp, j)).collect();
        assert!(
            (p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.1).abs() < 1e-12 && (p[2] - 0.4).abs() < 1e-12
        );
        assert_eq!(fixed_select(&inp, 0.2).unwrap().selected, vec![1]);
        assert_eq!(fixed_select(&inp, 0.95).unwrap().selected, vec![0, 1, 2]);
        assert!(fixed_select(&inp, 0.05).unwrap().selected.is_empty());
    }

    #[test]
    fn bh_examples() {
        // n = 99 so p = (1 + count) / 100: counts 1, 4, 29 give 0.02, 0.05, 0.30
        let mut calib: Vec<(f64, bool)> = (0..99).map(|k| (f64::from(k), true)).collect();
        calib.iter_mut().take(40).for_each(|c| c.1 = false);
        let inp = inputs(&calib, &[97.5, 94.5, 69.5]);
        let p: Vec<f64> = (0..3).map(|j| conf_pvalue(&inp, j)).collect();
        assert!(
            (p[0] - 0.02).abs() < 1e-12
                && (p[1] - 0.05).abs() < 1e-12
                && (p[2] - 0.30).abs() < 1e-12
        );
        assert_eq!(bh_select(&inp, 0.2).unwrap().selected, vec![0, 1]);
        assert!(bh_select(&inp, 0.01).unwrap().selected.is_empty());
        assert_eq!(bh_select(&inp, 0.95).unwrap().selected, vec![0, 1, 2]);
    }

    #[test]
    fn single_test_unit_bh_is_fixed() {
        let calib: Vec<(f64, bool)> = (0..10).map(|k| (f64::from(k), k % 3 != 0)).collect();
        for s in [-1.0, 4.5, 8.5, 11.0] {
            let inp = inputs(&calib, &[s]);
            for q in [0.1, 0.3, 0.6] {
                assert_eq!(
                    fixed_select(&inp, q).unwrap().selected,
                    bh_select(&inp, q).unwrap().selected
                );
                assert_eq!(fixed_thresholds(&inp, 0, q), bh_thresholds(&inp, 0, q));
            }
        }
    }

    #[test]
    fn threshold_table_brute_force() {
        // six units, q (n + 1) = 1.5
        let inp = inputs(&[(0.3, true), (1.2, false), (2.0, true)], &[1.5, 0.1, 2.4]);
        let q = 1.5 / 4.0;
        let table = fixed_thresholds(&inp, 0, q);
        let mut pooled = inp.calib_shat.clone();
        pooled.extend(&inp.test_shat);
        for k in 0..2 {
            for l in 0..2 {
                let want = pooled
                    .iter()
                    .copied()
                    .filter(|&t| {
                        let c =
                            l + inp.nulls_at_or_above(t) + k * usize::from(inp.test_shat[0] >= t);
                        c as f64 <= 1.5
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(table[k][l], want, "k={k} l={l}");
            }
            assert!(table[k][1] >= table[k][0]);
        }
    }

    fn dataset(calib: &[(f64, f64, f64)], test: &[(f64, f64)]) -> Dataset {
        Dataset::new(
            calib
                .iter()
                .enumerate()
                .map(|(k, &(mu, y, c))| {
                    Unit::new(format!("c{k}"))
                        .with_mu_hat(mu)
                        .with_y(y)
                        .with_threshold(c)
                })
                .collect(),
            test.iter()
                .enumerate()
                .map(|(k, &(mu, c))| Unit::new(format!("t{k}")).with_mu_hat(mu).with_threshold(c))
                .collect(),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn two_form_references_match_generic(
            calib in proptest::collection::vec((-2.0f64..2.0, -2.5f64..2.5), 1..25),
            test in proptest::collection::vec(-2.0f64..2.0, 1..6),
            q in 0.05f64..0.9, bh in any::<bool>(), fixed in any::<bool>(), clipped in any::<bool>()) {
            let d = dataset(&calib.iter().map(|&(m, y)| (m, y, 0.0)).collect::<Vec<_>>(),
                            &test.iter().map(|&m| (m, 0.0)).collect::<Vec<_>>());
            let rule = PValueRule {
                q,
                procedure: if bh { Procedure::Bh } else { Procedure::Fixed },
                score: if clipped { PScore::Clipped } else { PScore::Difference },
                source: ScoreSource::MuHat,
            };
            let sel = rule.select(&d).unwrap();
            let tax = if fixed { Taxonomy::FixedSize(sel.len()) } else { Taxonomy::All };
            let fast = rule.fast_path(&d, &tax).unwrap();
            prop_assert_eq!(&fast.selection.selected, &sel);
            for (idx, &j) in sel.iter().enumerate() {
                for (y, k) in [(1.0, 0usize), (-1.0, 1usize)] {
                    let g = reference_set_generic(j, Some(y), &rule, &tax, &d).unwrap();
                    prop_assert_eq!(&g.indices, &fast.references[idx][k]);
                }
            }
        }

        #[test]
        fn pvalue_dominance(calib in proptest::collection::vec((-2.0f64..2.0, -2.5f64..2.5, -1.0f64..1.0), 1..25),
                            test in proptest::collection::vec((-2.0f64..2.0, -1.0f64..1.0), 1..6)) {
            let d = dataset(&calib, &test);
            for score in [PScore::Difference, PScore::Clipped] {
                let inp = PValueInputs::from_view(&d, score, ScoreSource::MuHat).unwrap();
                for j in 0..test.len() {
                    let p = conf_pvalue(&inp, j);
                    let pbar = dominating_pvalue(&d, j, score, ScoreSource::MuHat).unwrap();
                    prop_assert!(p <= pbar);
                    if score == PScore::Clipped {
                        prop_assert_eq!(p, pbar);
                    }
                }
            }
        }
    }
}

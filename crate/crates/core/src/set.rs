//! Prediction sets: finite label sets and unions of disjoint real intervals.
//!
//! Text form, used by the sets file:
//! - intervals: `lo:hi` segments joined by `;`. An endpoint followed by `o`
//!   is open, e.g. `-0.5:0.5;1o:2` is `[-0.5, 0.5] ∪ (1, 2]`. Infinite
//!   endpoints are written `-inf` / `inf` and are always open.
//! - labels: `l1|l2|...`.
//! - the empty set of either kind is the empty string.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A nonempty interval of the real line. Infinite endpoints are open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    /// Builds an interval, returning `None` when it would be empty.
    pub fn new(lo: f64, hi: f64, lo_closed: bool, hi_closed: bool) -> Option<Self> {
        if lo.is_nan() || hi.is_nan() {
            return None;
        }
        let lo_closed = lo_closed && lo.is_finite();
        let hi_closed = hi_closed && hi.is_finite();
        let nonempty = lo < hi || (lo == hi && lo_closed && hi_closed);
        nonempty.then_some(Self {
            lo,
            hi,
            lo_closed,
            hi_closed,
        })
    }

    pub fn closed(lo: f64, hi: f64) -> Option<Self> {
        Self::new(lo, hi, true, true)
    }

    pub fn open(lo: f64, hi: f64) -> Option<Self> {
        Self::new(lo, hi, false, false)
    }

    pub fn real_line() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            lo_closed: false,
            hi_closed: false,
        }
    }

    pub fn contains(&self, y: f64) -> bool {
        let above = if self.lo_closed {
            y >= self.lo
        } else {
            y > self.lo
        };
        let below = if self.hi_closed {
            y <= self.hi
        } else {
            y < self.hi
        };
        above && below
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let (lo, lo_closed) = match self.lo.partial_cmp(&other.lo) {
            Some(Ordering::Greater) => (self.lo, self.lo_closed),
            Some(Ordering::Less) => (other.lo, other.lo_closed),
            _ => (self.lo, self.lo_closed && other.lo_closed),
        };
        let (hi, hi_closed) = match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Less) => (self.hi, self.hi_closed),
            Some(Ordering::Greater) => (other.hi, other.hi_closed),
            _ => (self.hi, self.hi_closed && other.hi_closed),
        };
        Interval::new(lo, hi, lo_closed, hi_closed)
    }

    // Orders by lower endpoint, closed before open at equal values.
    fn cmp_lo(&self, other: &Interval) -> Ordering {
        self.lo
            .partial_cmp(&other.lo)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.lo_closed.cmp(&self.lo_closed))
    }
}

/// A finite union of pairwise disjoint, maximal intervals sorted by lower endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalUnion {
    segments: Vec<Interval>,
}

impl IntervalUnion {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn real_line() -> Self {
        Self {
            segments: vec![Interval::real_line()],
        }
    }

    pub fn single(interval: Option<Interval>) -> Self {
        Self::from_intervals(interval)
    }

    /// Normalizes an arbitrary collection of intervals. Intervals are fused
    /// only when their union is connected, so the result is exact.
    pub fn from_intervals(intervals: impl IntoIterator<Item = Interval>) -> Self {
        let mut items: Vec<Interval> = intervals.into_iter().collect();
        items.sort_by(|a, b| a.cmp_lo(b));
        let mut segments: Vec<Interval> = Vec::with_capacity(items.len());
        for it in items {
            if let Some(last) = segments.last_mut() {
                let connected =
                    last.hi > it.lo || (last.hi == it.lo && (last.hi_closed || it.lo_closed));
                if connected {
                    match it.hi.partial_cmp(&last.hi) {
                        Some(Ordering::Greater) => {
                            last.hi = it.hi;
                            last.hi_closed = it.hi_closed;
                        }
                        Some(Ordering::Equal) => last.hi_closed |= it.hi_closed,
                        _ => {}
                    }
                    continue;
                }
            }
            segments.push(it);
        }
        Self { segments }
    }

    pub fn segments(&self) -> &[Interval] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn contains(&self, y: f64) -> bool {
        self.segments.iter().any(|s| s.contains(y))
    }

    /// Lebesgue measure; `inf` when any segment is unbounded.
    pub fn measure(&self) -> f64 {
        self.segments.iter().map(Interval::length).sum()
    }

    pub fn union(&self, other: &IntervalUnion) -> IntervalUnion {
        IntervalUnion::from_intervals(self.segments.iter().chain(other.segments.iter()).copied())
    }

    pub fn intersect(&self, other: &IntervalUnion) -> IntervalUnion {
        let mut out = Vec::new();
        for a in &self.segments {
            for b in &other.segments {
                if let Some(c) = a.intersect(b) {
                    out.push(c);
                }
            }
        }
        IntervalUnion::from_intervals(out)
    }

    pub fn intersect_interval(&self, interval: &Interval) -> IntervalUnion {
        IntervalUnion::from_intervals(self.segments.iter().filter_map(|s| s.intersect(interval)))
    }

    pub fn complement(&self) -> IntervalUnion {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut lo = f64::NEG_INFINITY;
        let mut lo_closed = false;
        for s in &self.segments {
            if let Some(gap) = Interval::new(lo, s.lo, lo_closed, !s.lo_closed) {
                out.push(gap);
            }
            lo = s.hi;
            lo_closed = !s.hi_closed;
        }
        if let Some(gap) = Interval::new(lo, f64::INFINITY, lo_closed, false) {
            out.push(gap);
        }
        IntervalUnion { segments: out }
    }

    pub fn difference(&self, other: &IntervalUnion) -> IntervalUnion {
        self.intersect(&other.complement())
    }

    pub fn inf(&self) -> f64 {
        self.segments.first().map_or(f64::INFINITY, |s| s.lo)
    }

    pub fn sup(&self) -> f64 {
        self.segments.last().map_or(f64::NEG_INFINITY, |s| s.hi)
    }
}

/// The output of every set-construction routine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PredictionSet {
    /// Sorted, unique class labels.
    Labels(Vec<usize>),
    Intervals(IntervalUnion),
}

/// Which variant a serialized set should be parsed as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetKind {
    Labels,
    Intervals,
}

impl PredictionSet {
    pub fn labels(mut labels: Vec<usize>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        PredictionSet::Labels(labels)
    }

    pub fn kind(&self) -> SetKind {
        match self {
            PredictionSet::Labels(_) => SetKind::Labels,
            PredictionSet::Intervals(_) => SetKind::Intervals,
        }
    }

    pub fn contains(&self, y: f64) -> bool {
        match self {
            PredictionSet::Labels(ls) => {
                y >= 0.0 && y.fract() == 0.0 && ls.binary_search(&(y as usize)).is_ok()
            }
            PredictionSet::Intervals(u) => u.contains(y),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            PredictionSet::Labels(ls) => ls.is_empty(),
            PredictionSet::Intervals(u) => u.is_empty(),
        }
    }

    /// Cardinality for label sets, total length for intervals.
    pub fn size(&self) -> f64 {
        match self {
            PredictionSet::Labels(ls) => ls.len() as f64,
            PredictionSet::Intervals(u) => u.measure(),
        }
    }

    /// Number of maximal connected segments (labels count one each).
    pub fn segment_count(&self) -> usize {
        match self {
            PredictionSet::Labels(ls) => ls.len(),
            PredictionSet::Intervals(u) => u.segments().len(),
        }
    }

    /// Keeps the members lying in `interval`; labels are compared as reals.
    pub fn restrict(&self, interval: &Interval) -> PredictionSet {
        match self {
            PredictionSet::Labels(ls) => PredictionSet::Labels(
                ls.iter()
                    .copied()
                    .filter(|&l| interval.contains(l as f64))
                    .collect(),
            ),
            PredictionSet::Intervals(u) => PredictionSet::Intervals(u.intersect_interval(interval)),
        }
    }

    pub fn union(&self, other: &PredictionSet) -> Result<PredictionSet> {
        match (self, other) {
            (PredictionSet::Labels(a), PredictionSet::Labels(b)) => Ok(PredictionSet::labels(
                a.iter().chain(b.iter()).copied().collect(),
            )),
            (PredictionSet::Intervals(a), PredictionSet::Intervals(b)) => {
                Ok(PredictionSet::Intervals(a.union(b)))
            }
            _ => Err(invalid("cannot combine label and interval sets")),
        }
    }

    pub fn intersect(&self, other: &PredictionSet) -> Result<PredictionSet> {
        match (self, other) {
            (PredictionSet::Labels(a), PredictionSet::Labels(b)) => Ok(PredictionSet::Labels(
                a.iter()
                    .copied()
                    .filter(|l| b.binary_search(l).is_ok())
                    .collect(),
            )),
            (PredictionSet::Intervals(a), PredictionSet::Intervals(b)) => {
                Ok(PredictionSet::Intervals(a.intersect(b)))
            }
            _ => Err(invalid("cannot combine label and interval sets")),
        }
    }

    pub fn difference(&self, other: &PredictionSet) -> Result<PredictionSet> {
        match (self, other) {
            (PredictionSet::Labels(a), PredictionSet::Labels(b)) => Ok(PredictionSet::Labels(
                a.iter()
                    .copied()
                    .filter(|l| b.binary_search(l).is_err())
                    .collect(),
            )),
            (PredictionSet::Intervals(a), PredictionSet::Intervals(b)) => {
                Ok(PredictionSet::Intervals(a.difference(b)))
            }
            _ => Err(invalid("cannot combine label and interval sets")),
        }
    }

    pub fn parse(text: &str, kind: SetKind) -> Result<Self> {
        let text = text.trim();
        match kind {
            SetKind::Labels => {
                if text.is_empty() {
                    return Ok(PredictionSet::Labels(Vec::new()));
                }
                let labels = text
                    .split('|')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| invalid(format!("bad label `{t}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PredictionSet::labels(labels))
            }
            SetKind::Intervals => {
                if text.is_empty() {
                    return Ok(PredictionSet::Intervals(IntervalUnion::empty()));
                }
                let mut segs = Vec::new();
                for part in text.split(';') {
                    let (lo, hi) = part
                        .split_once(':')
                        .ok_or_else(|| invalid(format!("bad segment `{part}`")))?;
                    let (lo, lo_open) = parse_endpoint(lo)?;
                    let (hi, hi_open) = parse_endpoint(hi)?;
                    let seg = Interval::new(lo, hi, !lo_open, !hi_open)
                        .ok_or_else(|| invalid(format!("empty segment `{part}`")))?;
                    segs.push(seg);
                }
                Ok(PredictionSet::Intervals(IntervalUnion::from_intervals(
                    segs,
                )))
            }
        }
    }
}

fn parse_endpoint(text: &str) -> Result<(f64, bool)> {
    let t = text.trim();
    let (num, open) = match t.strip_suffix('o') {
        Some(rest) if !rest.is_empty() => (rest, true),
        _ => (t, false),
    };
    let v: f64 = num
        .parse()
        .map_err(|_| invalid(format!("bad endpoint `{text}`")))?;
    if v.is_nan() {
        return Err(invalid("NaN endpoint"));
    }
    Ok((v, open || v.is_infinite()))
}

fn write_endpoint(f: &mut fmt::Formatter<'_>, v: f64, closed: bool) -> fmt::Result {
    write!(f, "{v}")?;
    if !closed && v.is_finite() {
        f.write_str("o")?;
    }
    Ok(())
}

impl fmt::Display for PredictionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictionSet::Labels(ls) => {
                for (k, l) in ls.iter().enumerate() {
                    if k > 0 {
                        f.write_str("|")?;
                    }
                    write!(f, "{l}")?;
                }
                Ok(())
            }
            PredictionSet::Intervals(u) => {
                for (k, s) in u.segments().iter().enumerate() {
                    if k > 0 {
                        f.write_str(";")?;
                    }
                    write_endpoint(f, s.lo, s.lo_closed)?;
                    f.write_str(":")?;
                    write_endpoint(f, s.hi, s.hi_closed)?;
                }
                Ok(())
            }
        }
    }
}

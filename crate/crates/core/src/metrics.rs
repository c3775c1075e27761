//! Threshold-free OOD metrics and curve aggregation.
//!
//! Scores follow the convention "higher means more OOD" throughout.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// ID and OOD scores for one evaluation pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

fn check_scores(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::DegenerateInput(format!("{name} score list is empty")));
    }
    if let Some(i) = v.iter().position(|s| !s.is_finite()) {
        return Err(Error::Validation {
            row: i,
            message: format!("{name} score {} is not finite", v[i]),
        });
    }
    Ok(())
}

impl ScoredPair {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        check_scores("ID", &id_scores)?;
        check_scores("OOD", &ood_scores)?;
        Ok(Self {
            id_scores,
            ood_scores,
        })
    }

    /// OOD becomes ID and vice versa.
    pub fn swapped(&self) -> Self {
        Self {
            id_scores: self.ood_scores.clone(),
            ood_scores: self.id_scores.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        check_scores("ID", &self.id_scores)?;
        check_scores("OOD", &self.ood_scores)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub auroc: f64,
    pub dtacc: f64,
    pub auin: f64,
    pub auout: f64,
}

impl MetricBundle {
    pub fn compute(pair: &ScoredPair) -> Result<Self> {
        Ok(Self {
            auroc: auroc(pair)?,
            dtacc: dtacc(pair)?,
            auin: au_pr(pair, Positive::Id)?,
            auout: au_pr(pair, Positive::Ood)?,
        })
    }
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair: String,
    pub detector: String,
    pub auroc: f64,
    pub dtacc: f64,
    pub auin: f64,
    pub auout: f64,
}

impl PairReport {
    pub fn new(pair: impl Into<String>, detector: impl Into<String>, m: MetricBundle) -> Self {
        Self {
            pair: pair.into(),
            detector: detector.into(),
            auroc: m.auroc,
            dtacc: m.dtacc,
            auin: m.auin,
            auout: m.auout,
        }
    }

    pub fn metrics(&self) -> MetricBundle {
        MetricBundle {
            auroc: self.auroc,
            dtacc: self.dtacc,
            auin: self.auin,
            auout: self.auout,
        }
    }
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// P(OOD score > ID score) + ½ P(tie), via the Mann–Whitney U statistic.
pub fn auroc(pair: &ScoredPair) -> Result<f64> {
    pair.validate()?;
    let n_id = pair.id_scores.len() as f64;
    let n_ood = pair.ood_scores.len() as f64;
    let all: Vec<f64> = pair.ood_scores.iter().chain(&pair.id_scores).copied().collect();
    let ranks = mid_ranks(&all);
    let rank_sum: f64 = ranks[..pair.ood_scores.len()].iter().sum();
    let u = rank_sum - n_ood * (n_ood + 1.0) / 2.0;
    Ok(u / (n_id * n_ood))
}

/// Sorted copy of a finite score list.
fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Best balanced accuracy of the rule "OOD iff score > δ".
///
/// Evaluating at every distinct score value is the same as evaluating at
/// the midpoints between adjacent distinct values; δ = -inf adds the
/// all-OOD rule.
pub fn dtacc(pair: &ScoredPair) -> Result<f64> {
    pair.validate()?;
    let id = sorted(&pair.id_scores);
    let ood = sorted(&pair.ood_scores);
    let (ni, no) = (id.len() as f64, ood.len() as f64);
    let acc = |id_le: usize, ood_le: usize| {
        0.5 * (id_le as f64 / ni) + 0.5 * ((ood.len() - ood_le) as f64 / no)
    };
    let mut best = acc(0, 0);
    let (mut a, mut b) = (0, 0);
    while a < id.len() || b < ood.len() {
        let next = match (id.get(a), ood.get(b)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while a < id.len() && id[a] == next {
            a += 1;
        }
        while b < ood.len() && ood[b] == next {
            b += 1;
        }
        best = best.max(acc(a, b));
    }
    Ok(best)
}

/// Which class is treated as positive for precision-recall.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positive {
    /// AUIN: ID is positive, ranked by ascending score.
    Id,
    /// AUOUT: OOD is positive, ranked by descending score.
    Ood,
}

/// Step-wise area under the precision-recall curve (average precision).
///
/// Tied scores enter the ranking together, so a tie group contributes a
/// single precision-recall point.
pub fn au_pr(pair: &ScoredPair, positive: Positive) -> Result<f64> {
    pair.validate()?;
    // Map to (key, is_positive) with larger key ranked first.
    let mut items: Vec<(f64, bool)> = match positive {
        Positive::Ood => pair
            .ood_scores
            .iter()
            .map(|&s| (s, true))
            .chain(pair.id_scores.iter().map(|&s| (s, false)))
            .collect(),
        Positive::Id => pair
            .id_scores
            .iter()
            .map(|&s| (-s, true))
            .chain(pair.ood_scores.iter().map(|&s| (-s, false)))
            .collect(),
    };
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = items.iter().filter(|x| x.1).count() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < items.len() {
        let key = items[i].0;
        while i < items.len() && items[i].0 == key {
            if items[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let recall = tp / n_pos;
        area += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    Ok(area)
}

/// Linear-interpolation percentile (`p` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::DegenerateInput("percentile of an empty list".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Argument(format!("percentile {p} outside [0, 100]")));
    }
    Ok(percentile_sorted(&sorted(values), p))
}

fn percentile_sorted(s: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        s[lo]
    } else {
        s[lo] + frac * (s[hi] - s[lo])
    }
}

/// Mean of the values between the 25th and 75th percentiles inclusive.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::DegenerateInput("IQM of an empty list".into()));
    }
    let s = sorted(values);
    let (q1, q3) = (percentile_sorted(&s, 25.0), percentile_sorted(&s, 75.0));
    let mid: Vec<f64> = s.iter().copied().filter(|&v| v >= q1 && v <= q3).collect();
    if mid.is_empty() {
        return Ok(percentile_sorted(&s, 50.0));
    }
    Ok(mid.iter().sum::<f64>() / mid.len() as f64)
}

/// Rescales a curve to [0, 1]; a constant curve maps to all ones.
pub fn min_max_normalize(curve: &[f64]) -> Vec<f64> {
    let lo = curve.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        curve.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; curve.len()]
    }
}

fn check_curves(curves: &[Vec<f64>]) -> Result<usize> {
    let len = curves.first().map_or(0, Vec::len);
    if len == 0 {
        return Err(Error::DegenerateInput("curves are empty".into()));
    }
    if let Some(c) = curves.iter().find(|c| c.len() != len) {
        return Err(Error::Shape {
            expected: len,
            actual: c.len(),
        });
    }
    Ok(len)
}

/// IQM across curves at every grid point.
pub fn iqm_curve(curves: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = check_curves(curves)?;
    (0..len)
        .map(|t| iqm(&curves.iter().map(|c| c[t]).collect::<Vec<_>>()))
        .collect()
}

/// Percentile-bootstrap interval of the per-point IQM, resampling whole curves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            resamples: 2000,
            seed: 0,
        }
    }
}

pub fn bootstrap_ci(curves: &[Vec<f64>], cfg: &BootstrapConfig) -> Result<Vec<(f64, f64)>> {
    if curves.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: curves.len(),
        });
    }
    let len = check_curves(curves)?;
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::Argument(format!("level {} outside (0, 1)", cfg.level)));
    }
    if cfg.resamples == 0 {
        return Err(Error::Argument("resamples must be positive".into()));
    }
    let n = curves.len();
    let mut rng = seeded(cfg.seed);
    let mut stats = vec![Vec::with_capacity(cfg.resamples); len];
    let mut column = vec![0.0; n];
    for _ in 0..cfg.resamples {
        let pick: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        for (t, out) in stats.iter_mut().enumerate() {
            for (slot, &k) in column.iter_mut().zip(&pick) {
                *slot = curves[k][t];
            }
            out.push(iqm(&column)?);
        }
    }
    let lo_p = 50.0 * (1.0 - cfg.level);
    let hi_p = 100.0 - lo_p;
    Ok(stats
        .into_iter()
        .map(|mut s| {
            s.sort_by(f64::total_cmp);
            (percentile_sorted(&s, lo_p), percentile_sorted(&s, hi_p))
        })
        .collect())
}

/// Index of the largest value, preferring the earliest on ties.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if v.partial_cmp(&values[b]) == Some(Ordering::Greater) => best = Some(i),
            _ => {}
        }
    }
    best
}

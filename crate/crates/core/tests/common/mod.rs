//! Synthetic data shared by the integration tests.

#![allow(dead_code)]

use latentood::mlp::{Activation, MlpConfig};
use latentood::rng::{gaussian_vec, StreamRng};
use latentood::LatentDataset;
use rand::Rng;

/// Distance of each ID mixture mode from the origin, along the diagonal
/// `(1, ..., 1) / sqrt(d)`. Placing the modes on the diagonal keeps every
/// coordinate's marginal variance equal, so per-dimension standardization is
/// an isotropic rescaling.
pub const MODE_OFFSET: f64 = 3.0;

/// Reduced denoiser used wherever a test trains an observer.
pub fn small_arch(dim: usize) -> MlpConfig {
    MlpConfig {
        dim,
        width: 128,
        depth: 3,
        time_dim: 32,
        activation: Activation::Silu,
    }
}

fn mode(d: usize, sign: f64) -> Vec<f64> {
    vec![sign * MODE_OFFSET / (d as f64).sqrt(); d]
}

/// Equal mixture of `N(+m, I)` and `N(-m, I)` with `m` on the diagonal,
/// translated by `shift`.
pub fn mixture(rng: &mut StreamRng, n: usize, d: usize, shift: &[f64]) -> LatentDataset {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let m = mode(d, sign);
            gaussian_vec(rng, d)
                .iter()
                .zip(&m)
                .zip(shift)
                .map(|((g, m), s)| g + m + s)
                .collect()
        })
        .collect();
    LatentDataset::from_rows(d, &rows).unwrap()
}

/// `amount * (e_a - e_b) / sqrt(2)`: a unit-free shift orthogonal to the
/// mode axis.
pub fn orthogonal_shift(d: usize, a: usize, b: usize, amount: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[a] = amount / 2f64.sqrt();
    v[b] = -amount / 2f64.sqrt();
    v
}

/// Log density of the shifted mixture at `z`.
pub fn mixture_log_density(z: &[f64], shift: &[f64]) -> f64 {
    let d = z.len();
    let comp = |sign: f64| {
        let m = mode(d, sign);
        -0.5 * (0..d).map(|i| (z[i] - m[i] - shift[i]).powi(2)).sum::<f64>()
    };
    let (a, b) = (comp(1.0), comp(-1.0));
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
        - 2f64.ln()
        - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Samples `N(mean, L L^T)` for a lower-triangular `l` given row-major.
pub fn correlated_gaussian(rng: &mut StreamRng, n: usize, mean: &[f64], l: &[Vec<f64>]) -> LatentDataset {
    let d = mean.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let g = gaussian_vec(rng, d);
            (0..d)
                .map(|i| mean[i] + (0..=i).map(|j| l[i][j] * g[j]).sum::<f64>())
                .collect()
        })
        .collect();
    LatentDataset::from_rows(d, &rows).unwrap()
}

/// Pair-counting AUROC: P(ood > id) + ½ P(ood == id).
pub fn auroc_by_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in ood {
        for &i in id {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn distinct_sorted(id: &[f64], ood: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = id.iter().chain(ood).copied().collect();
    u.sort_by(f64::total_cmp);
    u.dedup();
    u
}

/// Balanced accuracy maximized over δ ∈ {-inf, midpoints, +inf}.
pub fn dtacc_by_thresholds(id: &[f64], ood: &[f64]) -> f64 {
    let u = distinct_sorted(id, ood);
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(u.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(f64::INFINITY);
    let (ni, no) = (id.len() as f64, ood.len() as f64);
    thresholds
        .into_iter()
        .map(|t| {
            let id_le = id.iter().filter(|&&s| s <= t).count() as f64;
            let ood_gt = ood.iter().filter(|&&s| s > t).count() as f64;
            0.5 * (id_le / ni) + 0.5 * (ood_gt / no)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Average precision from the full precision-recall curve, one point per
/// distinct threshold. `ood_positive` selects AUOUT, otherwise AUIN.
pub fn ap_by_curve(id: &[f64], ood: &[f64], ood_positive: bool) -> f64 {
    let mut u = distinct_sorted(id, ood);
    let (pos, neg): (&[f64], &[f64]) = if ood_positive { (ood, id) } else { (id, ood) };
    if ood_positive {
        u.reverse();
    }
    let hit = |s: f64, t: f64| if ood_positive { s >= t } else { s <= t };
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in u {
        let tp = pos.iter().filter(|&&s| hit(s, t)).count() as f64;
        let fp = neg.iter().filter(|&&s| hit(s, t)).count() as f64;
        let recall = tp / pos.len() as f64;
        area += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    area
}

/// Exact score of the diagonal-mode mixture, in the coordinates given by a
/// per-dimension standardization `(z - mean) / std`, convolved with
/// `N(0, sigma^2 I)`.
pub struct MixtureScoreField {
    means: Vec<Vec<f64>>,
    /// Per-coordinate precision of each component before noising.
    precision: Vec<f64>,
}

impl MixtureScoreField {
    pub fn standardized(d: usize, mean: &[f64], std: &[f64]) -> Self {
        let means = [1.0, -1.0]
            .iter()
            .map(|&s| {
                let m = mode(d, s);
                (0..d).map(|i| (m[i] - mean[i]) / std[i]).collect()
            })
            .collect();
        Self {
            means,
            precision: std.iter().map(|s| s * s).collect(),
        }
    }
}

impl latentood::typicality::ScoreField for MixtureScoreField {
    fn dim(&self) -> usize {
        self.precision.len()
    }

    fn score_and_jvps(
        &self,
        x: &[f64],
        sigma: f64,
        dirs: &[&[f64]],
    ) -> latentood::Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let d = x.len();
        let prec: Vec<f64> = self.precision.iter().map(|p| 1.0 / (1.0 / p + sigma * sigma)).collect();
        // Per-component log weight (up to a shared constant) and score.
        let comps: Vec<(f64, Vec<f64>)> = self
            .means
            .iter()
            .map(|m| {
                let r: Vec<f64> = (0..d).map(|i| x[i] - m[i]).collect();
                let lw = -0.5 * (0..d).map(|i| r[i] * r[i] * prec[i]).sum::<f64>();
                (lw, (0..d).map(|i| -prec[i] * r[i]).collect())
            })
            .collect();
        let hi = comps.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = comps.iter().map(|c| (c.0 - hi).exp()).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let mean_score: Vec<f64> = (0..d)
            .map(|i| comps.iter().zip(&w).map(|(c, w)| w * c.1[i]).sum())
            .collect();
        // J = -diag(prec) + sum_k w_k (s_k - s)(s_k - s)^T
        let jvps = dirs
            .iter()
            .map(|v| {
                let mut out: Vec<f64> = (0..d).map(|i| -prec[i] * v[i]).collect();
                for (c, wk) in comps.iter().zip(&w) {
                    let dev: Vec<f64> = (0..d).map(|i| c.1[i] - mean_score[i]).collect();
                    let proj: f64 = (0..d).map(|i| dev[i] * v[i]).sum();
                    for i in 0..d {
                        out[i] += wk * dev[i] * proj;
                    }
                }
                out
            })
            .collect();
        Ok((mean_score, jvps))
    }
}

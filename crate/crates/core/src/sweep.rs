//! Denoising-scale sweep: ReSCOPED AUROC as a function of the noise level.
//!
//! Grid index `t` maps to `sigma_t`; the default grid is 11 points spaced
//! logarithmically from 0.01 to 10, which brackets the 0.099 operating point
//! by two decades on each side. Every report carries the full map.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionObserver;
use crate::error::{Error, Result};
use crate::latent_io::LatentDataset;
use crate::metrics::{argmax_first, auroc, bootstrap_ci, iqm_curve, min_max_normalize, BootstrapConfig, ScoredPair};
use crate::typicality::{fit_kde, statistics_for, KdeModel, TypicalityConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    sigmas: Vec<f64>,
}

impl SweepGrid {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::Argument("sweep grid is empty".into()));
        }
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Argument("sweep sigmas must be positive and finite".into()));
        }
        if sigmas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("sweep sigmas must be strictly increasing".into()));
        }
        Ok(Self { sigmas })
    }

    /// `n` points spaced evenly in log10 between `lo` and `hi` inclusive.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 1 {
            return Self::new(vec![lo]);
        }
        let (a, b) = (lo.log10(), hi.log10());
        let step = (b - a) / (n - 1) as f64;
        Self::new((0..n).map(|i| 10f64.powf(a + step * i as f64)).collect())
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self::log_spaced(0.01, 10.0, 11).expect("default grid is valid")
    }
}

/// How the KDE follows the noise level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdeRefit {
    /// Recompute `T` on the training set and refit the KDE at every sigma.
    #[default]
    PerSigma,
    /// Keep the KDE fitted at the base config's sigma for every grid point.
    Fixed,
}

/// One named ID-test / OOD-test pairing.
#[derive(Clone, Debug)]
pub struct SweepPair {
    pub name: String,
    pub id: LatentDataset,
    pub ood: LatentDataset,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub grid: SweepGrid,
    /// Probes, epsilon and seed; the sigma field is only used by
    /// [`KdeRefit::Fixed`].
    pub typicality: TypicalityConfig,
    pub bandwidth: f64,
    pub refit: KdeRefit,
    pub bootstrap: BootstrapConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: SweepGrid::default(),
            typicality: TypicalityConfig::default(),
            bandwidth: crate::typicality::DEFAULT_BANDWIDTH,
            refit: KdeRefit::PerSigma,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCurve {
    pub pairing: String,
    pub auroc_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub iqm_curve: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub sigma_grid: Vec<f64>,
    pub kde_refit: KdeRefit,
    pub pairs: Vec<PairCurve>,
    /// IQM across pairings of the raw AUROC curves.
    pub aggregate: Aggregate,
    /// Normalization applied to each curve before `normalized_aggregate`.
    pub normalization: String,
    pub normalized_aggregate: Aggregate,
}

fn aggregate(curves: &[Vec<f64>], cfg: &BootstrapConfig) -> Result<Aggregate> {
    let iqm = iqm_curve(curves)?;
    let (ci_low, ci_high) = if curves.len() >= 2 {
        bootstrap_ci(curves, cfg)?.into_iter().unzip()
    } else {
        (iqm.clone(), iqm.clone())
    };
    Ok(Aggregate {
        iqm_curve: iqm,
        ci_low,
        ci_high,
    })
}

/// Builds the result from per-pair AUROC curves already on `grid`.
pub fn summarize(
    grid: &SweepGrid,
    refit: KdeRefit,
    curves: Vec<PairCurve>,
    bootstrap: &BootstrapConfig,
) -> Result<SweepResult> {
    if curves.is_empty() {
        return Err(Error::Argument("sweep needs at least one pairing".into()));
    }
    if let Some(c) = curves.iter().find(|c| c.auroc_curve.len() != grid.len()) {
        return Err(Error::Shape {
            expected: grid.len(),
            actual: c.auroc_curve.len(),
        });
    }
    let raw: Vec<Vec<f64>> = curves.iter().map(|c| c.auroc_curve.clone()).collect();
    let norm: Vec<Vec<f64>> = raw.iter().map(|c| min_max_normalize(c)).collect();
    Ok(SweepResult {
        sigma_grid: grid.sigmas().to_vec(),
        kde_refit: refit,
        aggregate: aggregate(&raw, bootstrap)?,
        normalization: "per-pairing min-max (constant curve -> 1)".into(),
        normalized_aggregate: aggregate(&norm, bootstrap)?,
        pairs: curves,
    })
}

/// AUROC at every grid point for every pairing.
///
/// Grid points run in parallel and are merged in grid order, so the result
/// does not depend on scheduling.
pub fn run_sweep(
    observer: &Arc<DiffusionObserver>,
    train: &LatentDataset,
    pairs: &[SweepPair],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if pairs.is_empty() {
        return Err(Error::Argument("sweep needs at least one pairing".into()));
    }
    cfg.typicality.validate()?;
    let fixed_kde = match cfg.refit {
        KdeRefit::Fixed => Some(fit_kde(
            &statistics_for(observer, train, &cfg.typicality)?,
            cfg.bandwidth,
        )?),
        KdeRefit::PerSigma => None,
    };
    let per_sigma: Vec<Vec<f64>> = cfg
        .grid
        .sigmas()
        .par_iter()
        .map(|&sigma| sweep_point(observer, train, pairs, cfg, sigma, fixed_kde.as_ref()))
        .collect::<Result<_>>()?;
    let curves = pairs
        .iter()
        .enumerate()
        .map(|(p, pair)| PairCurve {
            pairing: pair.name.clone(),
            auroc_curve: per_sigma.iter().map(|row| row[p]).collect(),
        })
        .collect();
    summarize(&cfg.grid, cfg.refit, curves, &cfg.bootstrap)
}

fn sweep_point(
    observer: &DiffusionObserver,
    train: &LatentDataset,
    pairs: &[SweepPair],
    cfg: &SweepConfig,
    sigma: f64,
    fixed_kde: Option<&KdeModel>,
) -> Result<Vec<f64>> {
    let tcfg = cfg.typicality.with_sigma(sigma);
    let refit;
    let kde = match fixed_kde {
        Some(k) => k,
        None => {
            refit = fit_kde(&statistics_for(observer, train, &tcfg)?, cfg.bandwidth)?;
            &refit
        }
    };
    let nll = |ds: &LatentDataset| -> Result<Vec<f64>> {
        Ok(statistics_for(observer, ds, &tcfg)?
            .into_iter()
            .map(|t| kde.nll(t))
            .collect())
    };
    pairs
        .iter()
        .map(|p| auroc(&ScoredPair::new(nll(&p.id)?, nll(&p.ood)?)?))
        .collect()
}

/// Grid sigma maximizing the aggregate IQM curve; ties go to the smaller sigma.
pub fn select_sigma(result: &SweepResult) -> Result<f64> {
    argmax_first(&result.aggregate.iqm_curve)
        .map(|i| result.sigma_grid[i])
        .ok_or_else(|| Error::Argument("empty sweep result".into()))
}

impl SweepResult {
    /// One row per grid index, for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,sigma");
        for p in &self.pairs {
            out.push(',');
            out.push_str(&csv_field(&p.pairing));
        }
        out.push_str(",iqm,ci_low,ci_high,norm_iqm,norm_ci_low,norm_ci_high\n");
        for (t, sigma) in self.sigma_grid.iter().enumerate() {
            let _ = write!(out, "{t},{sigma}");
            for p in &self.pairs {
                let _ = write!(out, ",{}", p.auroc_curve[t]);
            }
            for agg in [&self.aggregate, &self.normalized_aggregate] {
                let _ = write!(out, ",{},{},{}", agg.iqm_curve[t], agg.ci_low[t], agg.ci_high[t]);
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(name: &str, v: &[f64]) -> PairCurve {
        PairCurve {
            pairing: name.into(),
            auroc_curve: v.to_vec(),
        }
    }

    #[test]
    fn default_grid_is_log_spaced() {
        let g = SweepGrid::default();
        assert_eq!(g.len(), 11);
        assert!((g.sigmas()[0] - 0.01).abs() < 1e-15);
        assert!((g.sigmas()[10] - 10.0).abs() < 1e-12);
        assert!((g.sigmas()[5] - 10f64.powf(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn grid_validation() {
        assert!(SweepGrid::new(vec![]).is_err());
        assert!(SweepGrid::new(vec![0.1, 0.1]).is_err());
        assert!(SweepGrid::new(vec![0.2, 0.1]).is_err());
        assert!(SweepGrid::new(vec![0.0, 0.1]).is_err());
    }

    #[test]
    fn single_point_aggregate_equals_auroc() {
        let g = SweepGrid::new(vec![0.1]).unwrap();
        let r = summarize(&g, KdeRefit::PerSigma, vec![curve("a", &[0.73])], &BootstrapConfig::default()).unwrap();
        assert_eq!(r.aggregate.iqm_curve, vec![0.73]);
        assert_eq!(select_sigma(&r).unwrap(), 0.1);
    }

    #[test]
    fn identical_pairs_give_zero_width_ci() {
        let g = SweepGrid::new(vec![0.1, 1.0, 2.0]).unwrap();
        let c = [0.6, 0.9, 0.7];
        let r = summarize(&g, KdeRefit::PerSigma, vec![curve("a", &c), curve("b", &c)], &BootstrapConfig::default()).unwrap();
        assert_eq!(r.aggregate.ci_low, r.aggregate.ci_high);
        assert_eq!(r.aggregate.iqm_curve, c.to_vec());
    }

    #[test]
    fn select_sigma_rules() {
        let g = SweepGrid::new(vec![0.1, 0.2, 0.3]).unwrap();
        let b = BootstrapConfig::default();
        let inc = summarize(&g, KdeRefit::PerSigma, vec![curve("a", &[0.1, 0.2, 0.3])], &b).unwrap();
        assert_eq!(select_sigma(&inc).unwrap(), 0.3);
        let flat = summarize(&g, KdeRefit::PerSigma, vec![curve("a", &[0.5; 3])], &b).unwrap();
        assert_eq!(select_sigma(&flat).unwrap(), 0.1);
        let peak = summarize(&g, KdeRefit::PerSigma, vec![curve("a", &[0.5, 0.8, 0.6])], &b).unwrap();
        assert_eq!(select_sigma(&peak).unwrap(), 0.2);
    }

    #[test]
    fn curve_length_must_match_grid() {
        let g = SweepGrid::new(vec![0.1, 0.2]).unwrap();
        let r = summarize(&g, KdeRefit::PerSigma, vec![curve("a", &[0.5])], &BootstrapConfig::default());
        assert!(matches!(r, Err(Error::Shape { expected: 2, actual: 1 })));
    }

    #[test]
    fn csv_layout() {
        let g = SweepGrid::new(vec![0.1, 1.0]).unwrap();
        let r = summarize(&g, KdeRefit::PerSigma, vec![curve("x,y", &[0.5, 0.75])], &BootstrapConfig::default()).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("index,sigma,\"x,y\",iqm"));
        assert!(lines[2].starts_with("1,1,0.75,0.75"));
    }
}

//! ReSCOPED: score-curvature typicality scored through a 1-D KDE.
//!
//! For a score field `s(x, sigma)` the statistic is
//!
//! ```text
//! T(x) = |s(x)|^2 / (-tr(grad_x s(x)) + eps)
//! ```
//!
//! with the trace estimated by Hutchinson's method using Rademacher probes.
//! A Gaussian KDE is fitted to `T` over in-distribution training latents and
//! the anomaly score is the negative log density of `T(z)` under it.
//!
//! Probe vectors for a given input come from a stream seeded by the config
//! seed mixed with the input's bit pattern, so scoring an input is a pure
//! function of the input regardless of batching or scheduling.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::diffusion::{write_atomic, DiffusionObserver};
use crate::error::{check_dim, Error, Result};
use crate::latent_io::LatentDataset;
use crate::linalg::{dot, norm_sq, CholeskyFactor, Matrix};
use crate::rng::{mix_seed, rademacher_vec, seeded};

pub const DEFAULT_SIGMA: f64 = 0.099;
pub const DEFAULT_PROBES: usize = 8;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_BANDWIDTH: f64 = 0.2;
/// Densities are floored here before taking the log.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// A vector field with Jacobian-vector products, evaluated at a noise level.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;

    /// `s(x, sigma)` together with `(grad_x s) v` for every direction `v`.
    fn score_and_jvps(
        &self,
        x: &[f64],
        sigma: f64,
        directions: &[&[f64]],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;
}

/// The observer's score field in normalized coordinates.
impl ScoreField for DiffusionObserver {
    fn dim(&self) -> usize {
        DiffusionObserver::dim(self)
    }

    fn score_and_jvps(
        &self,
        x: &[f64],
        sigma: f64,
        directions: &[&[f64]],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.score_and_jvps_normalized(x, sigma, directions)
    }
}

/// `s(x) = A x`, independent of the noise level.
#[derive(Clone, Debug)]
pub struct LinearScoreField {
    pub a: Matrix,
}

impl LinearScoreField {
    /// Score of a standard normal: `s(x) = -x`.
    pub fn standard_normal(dim: usize) -> Self {
        let mut a = Matrix::identity(dim);
        a.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
        Self { a }
    }
}

impl ScoreField for LinearScoreField {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn score_and_jvps(
        &self,
        x: &[f64],
        _sigma: f64,
        directions: &[&[f64]],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let s = self.a.matvec(x)?;
        let j = directions
            .iter()
            .map(|v| self.a.matvec(v))
            .collect::<Result<_>>()?;
        Ok((s, j))
    }
}

/// Exact score of `N(mean, cov)` convolved with `N(0, sigma^2 I)`:
/// `s(x) = -(cov + sigma^2 I)^{-1} (x - mean)`.
#[derive(Clone, Debug)]
pub struct GaussianScoreField {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl ScoreField for GaussianScoreField {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score_and_jvps(
        &self,
        x: &[f64],
        sigma: f64,
        directions: &[&[f64]],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        check_dim(self.dim(), x.len())?;
        let f = CholeskyFactor::factor(&self.cov, sigma * sigma)?;
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let neg = |v: Vec<f64>| v.into_iter().map(|e| -e).collect::<Vec<_>>();
        let s = neg(f.solve(&diff)?);
        let j = directions
            .iter()
            .map(|v| f.solve(v).map(neg))
            .collect::<Result<_>>()?;
        Ok((s, j))
    }
}

fn check_probes(probes: usize) -> Result<()> {
    if probes == 0 {
        return Err(Error::Argument("at least one probe is required".into()));
    }
    Ok(())
}

/// Score and Hutchinson trace estimate from one shared pass.
pub fn score_and_trace<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    sigma: f64,
    probes: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    check_probes(probes)?;
    check_dim(field.dim(), x.len())?;
    let mut rng = seeded(seed);
    let vs: Vec<Vec<f64>> = (0..probes).map(|_| rademacher_vec(&mut rng, x.len())).collect();
    let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
    let (score, jvps) = field.score_and_jvps(x, sigma, &refs)?;
    let trace = vs.iter().zip(&jvps).map(|(v, jv)| dot(v, jv)).sum::<f64>() / probes as f64;
    Ok((score, trace))
}

/// Hutchinson estimate of `tr(grad_x s(x, sigma))` with `probes` Rademacher
/// vectors drawn from `seed`.
pub fn hutchinson_trace<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    sigma: f64,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    Ok(score_and_trace(field, x, sigma, probes, seed)?.1)
}

/// Trace by enumerating basis directions (`dim` JVPs).
pub fn exact_trace<F: ScoreField + ?Sized>(field: &F, x: &[f64], sigma: f64) -> Result<f64> {
    let d = field.dim();
    let basis: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        })
        .collect();
    let refs: Vec<&[f64]> = basis.iter().map(|v| v.as_slice()).collect();
    let (_, jvps) = field.score_and_jvps(x, sigma, &refs)?;
    Ok(jvps.iter().enumerate().map(|(i, j)| j[i]).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TypicalityConfig {
    pub sigma: f64,
    pub probes: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TypicalityConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            probes: DEFAULT_PROBES,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

impl TypicalityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Argument(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Argument("epsilon must be positive".into()));
        }
        check_probes(self.probes)
    }

    pub fn with_sigma(self, sigma: f64) -> Self {
        Self { sigma, ..self }
    }
}

/// `T(x)` for a point already in the field's coordinates.
///
/// The denominator is not clamped: a positive curvature estimate yields a
/// negative or very large `T`, which the KDE then scores as atypical.
pub fn typicality_of_field<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    cfg: &TypicalityConfig,
) -> Result<f64> {
    cfg.validate()?;
    let seed = mix_seed(cfg.seed, x);
    let (score, trace) = score_and_trace(field, x, cfg.sigma, cfg.probes, seed)?;
    let s2 = norm_sq(&score);
    if !s2.is_finite() {
        return Err(Error::Numeric { stage: "score norm" });
    }
    if !trace.is_finite() {
        return Err(Error::Numeric { stage: "trace estimate" });
    }
    let t = s2 / (-trace + cfg.epsilon);
    if !t.is_finite() {
        return Err(Error::Numeric { stage: "typicality ratio" });
    }
    Ok(t)
}

/// `T(z)` for a raw latent: normalizes with the observer's normalizer first.
pub fn typicality_statistic(
    obs: &DiffusionObserver,
    z: &[f64],
    cfg: &TypicalityConfig,
) -> Result<f64> {
    let x = obs.normalizer().normalize(z)?;
    typicality_of_field(obs, &x, cfg)
}

/// Gaussian-kernel density estimate over scalar samples.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    samples: Vec<f64>,
    bandwidth: f64,
}

pub fn fit_kde(values: &[f64], bandwidth: f64) -> Result<KdeModel> {
    if values.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: values.len(),
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation {
            row: i,
            message: format!("KDE sample {} is not finite", values[i]),
        });
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::Argument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    Ok(KdeModel {
        samples: values.to_vec(),
        bandwidth,
    })
}

impl KdeModel {
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `ln p(x)` via log-sum-exp, exact far into the tails.
    pub fn log_density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let exps: Vec<f64> = self
            .samples
            .iter()
            .map(|t| -0.5 * ((x - t) / h).powi(2))
            .collect();
        let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
        let log_norm = (self.samples.len() as f64).ln() + h.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
        max + sum.ln() - log_norm
    }

    pub fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    /// `-ln(max(p(x), DENSITY_FLOOR))`.
    pub fn nll(&self, x: f64) -> f64 {
        -self.log_density(x).max(DENSITY_FLOOR.ln())
    }
}

/// The fitted ReSCOPED detector.
#[derive(Clone, Debug)]
pub struct TypicalityScorer {
    observer: Arc<DiffusionObserver>,
    config: TypicalityConfig,
    kde: KdeModel,
}

impl TypicalityScorer {
    /// Computes `T` over `train` and fits the KDE to it.
    pub fn fit(
        observer: Arc<DiffusionObserver>,
        train: &LatentDataset,
        config: TypicalityConfig,
        bandwidth: f64,
    ) -> Result<Self> {
        config.validate()?;
        let t = statistics_for(&observer, train, &config)?;
        let kde = fit_kde(&t, bandwidth)?;
        Ok(Self {
            observer,
            config,
            kde,
        })
    }

    pub fn from_parts(
        observer: Arc<DiffusionObserver>,
        config: TypicalityConfig,
        kde: KdeModel,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            observer,
            config,
            kde,
        })
    }

    pub fn observer(&self) -> &Arc<DiffusionObserver> {
        &self.observer
    }

    pub fn config(&self) -> &TypicalityConfig {
        &self.config
    }

    pub fn kde(&self) -> &KdeModel {
        &self.kde
    }

    pub fn dim(&self) -> usize {
        self.observer.dim()
    }

    pub fn statistic(&self, z: &[f64]) -> Result<f64> {
        typicality_statistic(&self.observer, z, &self.config)
    }

    /// Negative log KDE density of `T(z)`; higher means more atypical.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        Ok(self.kde.nll(self.statistic(z)?))
    }

    pub fn score_batch(&self, ds: &LatentDataset) -> Result<Vec<f64>> {
        check_dim(self.dim(), ds.dim())?;
        (0..ds.count())
            .into_par_iter()
            .map(|i| self.score(&ds.row_f64(i)))
            .collect()
    }

    /// Scores of the KDE's own training values.
    pub fn train_scores(&self) -> Vec<f64> {
        self.kde.samples().iter().map(|&t| self.kde.nll(t)).collect()
    }

    /// Serializes with a reference to the observer file at `observer_path`.
    pub fn to_bytes(&self, observer_path: &str) -> Vec<u8> {
        let mut w = Writer::new(&RSCP_MAGIC, RSCP_VERSION);
        w.bytes(&observer_digest(&self.observer));
        w.str(observer_path);
        w.f64(self.config.sigma);
        w.u32(self.config.probes as u32);
        w.f64(self.config.epsilon);
        w.u64(self.config.seed);
        w.f64(self.kde.bandwidth);
        w.u64(self.kde.samples.len() as u64);
        w.f64s(&self.kde.samples);
        w.finish()
    }

    /// Writes the scorer; `observer_path` is stored as given, and relative
    /// paths are resolved against the scorer file's directory on load.
    pub fn save(&self, path: impl AsRef<Path>, observer_path: &str) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes(observer_path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let header = ScorerFile::parse(&bytes)?;
        let obs_path = header.resolve_observer(path);
        let observer = DiffusionObserver::load(&obs_path)?;
        header.into_scorer(Arc::new(observer))
    }
}

/// SHA-256 of the observer's serialized form.
pub fn observer_digest(obs: &DiffusionObserver) -> [u8; 32] {
    Sha256::digest(obs.to_bytes()).into()
}

const RSCP_MAGIC: [u8; 4] = *b"RSCP";
const RSCP_VERSION: u32 = 1;

/// Decoded RSCP contents before the observer is attached.
#[derive(Clone, Debug)]
pub struct ScorerFile {
    pub observer_digest: [u8; 32],
    pub observer_path: String,
    pub config: TypicalityConfig,
    pub kde: KdeModel,
}

impl ScorerFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, &RSCP_MAGIC, RSCP_VERSION, "RSCP")?;
        let observer_digest: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let observer_path = r.str()?;
        let config = TypicalityConfig {
            sigma: r.f64()?,
            probes: r.u32()? as usize,
            epsilon: r.f64()?,
            seed: r.u64()?,
        };
        let bandwidth = r.f64()?;
        let n = r.u64()? as usize;
        let samples = r.f64s(n)?;
        r.finish()?;
        config
            .validate()
            .map_err(|e| Error::Corrupt(format!("RSCP config: {e}")))?;
        let kde = fit_kde(&samples, bandwidth)
            .map_err(|e| Error::Corrupt(format!("RSCP KDE: {e}")))?;
        Ok(Self {
            observer_digest,
            observer_path,
            config,
            kde,
        })
    }

    pub fn resolve_observer(&self, scorer_path: &Path) -> PathBuf {
        let p = PathBuf::from(&self.observer_path);
        if p.is_absolute() {
            p
        } else {
            scorer_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    /// Attaches an observer after checking it is the one the file refers to.
    pub fn into_scorer(self, observer: Arc<DiffusionObserver>) -> Result<TypicalityScorer> {
        if observer_digest(&observer) != self.observer_digest {
            return Err(Error::Format(format!(
                "observer {} does not match the hash recorded in the scorer",
                self.observer_path
            )));
        }
        TypicalityScorer::from_parts(observer, self.config, self.kde)
    }
}

/// `T` for every row of `ds`, in row order.
pub fn statistics_for(
    obs: &DiffusionObserver,
    ds: &LatentDataset,
    cfg: &TypicalityConfig,
) -> Result<Vec<f64>> {
    check_dim(obs.dim(), ds.dim())?;
    (0..ds.count())
        .into_par_iter()
        .map(|i| typicality_statistic(obs, &ds.row_f64(i), cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_linear_field_trace_is_exact_for_any_k() {
        let mut a = Matrix::zeros(5, 5);
        for (i, v) in [-1.0, -2.0, 0.5, -3.0, -0.25].iter().enumerate() {
            a[(i, i)] = *v;
        }
        let field = LinearScoreField { a };
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        for k in [1, 2, 7] {
            for seed in 0..5 {
                let t = hutchinson_trace(&field, &x, 0.1, k, seed).unwrap();
                assert!((t - (-5.75)).abs() < 1e-12);
            }
        }
        assert_eq!(exact_trace(&field, &x, 0.1).unwrap(), -5.75);
        assert!(hutchinson_trace(&field, &x, 0.1, 0, 1).is_err());
    }

    #[test]
    fn standard_normal_field_typical_shell() {
        let d = 16;
        let field = LinearScoreField::standard_normal(d);
        let cfg = TypicalityConfig::default();
        let x = vec![1.0; d]; // |x| = sqrt(d)
        let t = typicality_of_field(&field, &x, &cfg).unwrap();
        assert!((t - d as f64 / (d as f64 + 1e-8)).abs() < 1e-12);
        let t0 = typicality_of_field(&field, &vec![0.0; d], &cfg).unwrap();
        assert_eq!(t0, 0.0);
    }

    #[test]
    fn positive_curvature_gives_negative_t() {
        let field = LinearScoreField {
            a: Matrix::identity(3),
        };
        let t = typicality_of_field(&field, &[1.0, 1.0, 1.0], &TypicalityConfig::default()).unwrap();
        assert!(t < 0.0);
    }

    #[test]
    fn gaussian_field_matches_closed_form() {
        let mut cov = Matrix::identity(2);
        cov[(0, 0)] = 3.0;
        let field = GaussianScoreField {
            mean: vec![1.0, 0.0],
            cov,
        };
        let (s, j) = field.score_and_jvps(&[2.0, 1.0], 1.0, &[&[1.0, 0.0]]).unwrap();
        assert!((s[0] + 0.25).abs() < 1e-12);
        assert!((s[1] + 0.5).abs() < 1e-12);
        assert!((j[0][0] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn kde_single_repeated_value() {
        let h = 0.2;
        let kde = fit_kde(&[1.5; 10], h).unwrap();
        let want = 0.5 * (2.0 * std::f64::consts::PI * h * h).ln();
        assert!((kde.nll(1.5) - want).abs() < 1e-12);
        let want_off = want + 0.5 * (0.3f64 / h).powi(2);
        assert!((kde.nll(1.8) - want_off).abs() < 1e-12);
    }

    #[test]
    fn kde_symmetry() {
        let kde = fit_kde(&[-0.7, 0.7], 0.2).unwrap();
        for x in [0.0, 0.1, 0.5, 0.7, 1.3, 4.0] {
            assert!((kde.nll(x) - kde.nll(-x)).abs() < 1e-12);
        }
    }

    #[test]
    fn kde_floor_and_errors() {
        let kde = fit_kde(&[0.0, 0.1], 0.2).unwrap();
        assert_eq!(kde.nll(1e6), -DENSITY_FLOOR.ln());
        assert!(matches!(fit_kde(&[1.0], 0.2), Err(Error::InsufficientData { .. })));
        assert!(matches!(
            fit_kde(&[1.0, f64::NAN], 0.2),
            Err(Error::Validation { row: 1, .. })
        ));
        assert!(matches!(fit_kde(&[1.0, 2.0], 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn config_validation() {
        let cfg = TypicalityConfig {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(TypicalityConfig::default().sigma, 0.099);
        assert_eq!(TypicalityConfig::default().probes, 8);
        assert_eq!(TypicalityConfig::default().epsilon, 1e-8);
    }
}

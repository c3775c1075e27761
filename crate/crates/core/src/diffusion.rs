//! EDM denoiser trained on latents, exposing the score field `s(z, sigma)`.
//!
//! The raw network `F` is wrapped with the EDM preconditioning
//!
//! ```text
//! D(x, sigma) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x, c_noise(sigma))
//! ```
//!
//! and the score is read off the denoiser as `s = (D(x, sigma) - x) / sigma^2`.
//! All of this happens in normalized coordinates: latents are standardized
//! per dimension with statistics of the training split before they reach
//! the network.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::codec::{read_dim, Reader, Writer};
use crate::error::{check_dim, Error, Result};
use crate::latent_io::LatentDataset;
use crate::linalg::Matrix;
use crate::mlp::{cosine_lr, Activation, Adam, MlpConfig, MlpParams};
use crate::rng::{gaussian, substream};

/// Lower bound applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    /// Mean and population standard deviation (1/N) of every column.
    pub fn fit(train: &LatentDataset) -> Result<Self> {
        let n = train.count();
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: n });
        }
        let d = train.dim();
        let mut mean = vec![0.0; d];
        for row in train.rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in train.rows() {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let c = f64::from(v) - m;
                *s += c * c;
            }
        }
        let std = var
            .iter()
            .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn from_parts(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), std.len())?;
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Argument("normalizer std must be positive and finite".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn normalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        Ok(z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    pub fn normalize_f32(&self, z: &[f32]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        Ok(z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, m), s)| (f64::from(v) - m) / s)
            .collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        Ok(z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect())
    }

    /// Applies the diagonal part of the map to a direction (no shift).
    pub fn scale_direction(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(v.iter().zip(&self.std).map(|(v, s)| v / s).collect())
    }

    pub fn normalize_dataset(&self, ds: &LatentDataset) -> Result<Matrix> {
        check_dim(self.dim(), ds.dim())?;
        let mut data = Vec::with_capacity(ds.count() * ds.dim());
        for row in ds.rows() {
            data.extend(self.normalize_f32(row)?);
        }
        Matrix::from_vec(ds.count(), ds.dim(), data)
    }
}

/// EDM preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Preconditioning {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma;
        let d2 = sigma_data * sigma_data;
        Self {
            c_skip: d2 / (s2 + d2),
            c_out: sigma * sigma_data / (s2 + d2).sqrt(),
            c_in: 1.0 / (s2 + d2).sqrt(),
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// EDM loss weight `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    /// Base learning rate, decayed to zero with a cosine schedule.
    pub lr: f64,
    pub seed: u64,
    /// Mean of `ln sigma` when sampling training noise levels.
    pub p_mean: f64,
    /// Standard deviation of `ln sigma`.
    pub p_std: f64,
    pub sigma_data: f64,
    /// Overwritten with the current observer every `checkpoint_every` steps.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 150_000,
            batch: 256,
            lr: 3e-4,
            seed: 0,
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: 1.0,
            checkpoint: None,
            checkpoint_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.p_std > 0.0) || !(self.sigma_data > 0.0) {
            return Err(Error::Argument(
                "lr, p_std and sigma_data must be positive".into(),
            ));
        }
        if !self.p_mean.is_finite() || self.checkpoint_every == 0 {
            return Err(Error::Argument("invalid noise or checkpoint settings".into()));
        }
        Ok(())
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Mean loss over `[start, end)`, clamped to the recorded range.
    pub fn window_mean(&self, start: usize, end: usize) -> Option<f64> {
        let end = end.min(self.losses.len());
        if start >= end {
            return None;
        }
        Some(self.losses[start..end].iter().sum::<f64>() / (end - start) as f64)
    }
}

/// A trained (or freshly initialized) denoiser together with its normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionObserver {
    params: MlpParams,
    normalizer: Normalizer,
    sigma_data: f64,
    train_config: TrainConfig,
    final_loss: f64,
}

const EDMO_MAGIC: [u8; 4] = *b"EDMO";
const EDMO_VERSION: u32 = 1;

impl DiffusionObserver {
    /// Fits the normalizer and initializes the network without training.
    pub fn initialize(train: &LatentDataset, arch: MlpConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_dim(train.dim(), arch.dim)?;
        let normalizer = Normalizer::fit(train)?;
        let params = MlpParams::init(arch, &mut substream(cfg.seed, 0))?;
        Ok(Self {
            params,
            normalizer,
            sigma_data: cfg.sigma_data,
            train_config: cfg.clone(),
            final_loss: f64::NAN,
        })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlpParams {
        &mut self.params
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_config
    }

    pub fn final_loss(&self) -> f64 {
        self.final_loss
    }

    pub fn dim(&self) -> usize {
        self.normalizer.dim()
    }

    /// Rounds parameters to the f32 precision used on disk, so that an
    /// in-memory observer scores exactly like its saved copy.
    pub fn round_to_storage_precision(&mut self) {
        for t in self.params.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    /// `D(x, sigma)` in normalized coordinates.
    pub fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        let pc = Preconditioning::new(sigma, self.sigma_data);
        let input: Vec<f64> = x.iter().map(|v| pc.c_in * v).collect();
        let f = self.params.forward(&input, pc.c_noise)?;
        Ok(x.iter()
            .zip(&f)
            .map(|(x, f)| pc.c_skip * x + pc.c_out * f)
            .collect())
    }

    /// Score and Jacobian-vector products in normalized coordinates, from a
    /// single network pass shared by all probe directions.
    pub fn score_and_jvps_normalized(
        &self,
        x: &[f64],
        sigma: f64,
        directions: &[&[f64]],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        check_sigma(sigma)?;
        check_dim(self.dim(), x.len())?;
        let pc = Preconditioning::new(sigma, self.sigma_data);
        let input: Vec<f64> = x.iter().map(|v| pc.c_in * v).collect();
        let scaled: Vec<Vec<f64>> = directions
            .iter()
            .map(|v| v.iter().map(|e| pc.c_in * e).collect())
            .collect();
        let refs: Vec<&[f64]> = scaled.iter().map(|v| v.as_slice()).collect();
        let (f, f_dot) = self.params.forward_with_tangents(&input, pc.c_noise, &refs)?;
        let inv_s2 = 1.0 / (sigma * sigma);
        let score = x
            .iter()
            .zip(&f)
            .map(|(x, f)| (pc.c_skip * x + pc.c_out * f - x) * inv_s2)
            .collect();
        let jvps = directions
            .iter()
            .zip(&f_dot)
            .map(|(v, fd)| {
                v.iter()
                    .zip(fd)
                    .map(|(v, fd)| (pc.c_skip * v + pc.c_out * fd - v) * inv_s2)
                    .collect()
            })
            .collect();
        Ok((score, jvps))
    }

    pub fn score_normalized(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        Ok(self.score_and_jvps_normalized(x, sigma, &[])?.0)
    }

    /// Score of a raw latent, returned in normalized coordinates.
    pub fn score_field(&self, z: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        let x = self.normalizer.normalize(z)?;
        self.score_normalized(&x, sigma)
    }

    /// `(d score_field / dz) v` for a raw latent `z` and raw direction `v`.
    pub fn score_jvp(&self, z: &[f64], sigma: f64, v: &[f64]) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        let x = self.normalizer.normalize(z)?;
        let u = self.normalizer.scale_direction(v)?;
        let (_, mut j) = self.score_and_jvps_normalized(&x, sigma, &[&u])?;
        Ok(j.pop().unwrap())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.params.config();
        let tc = &self.train_config;
        let mut w = Writer::new(&EDMO_MAGIC, EDMO_VERSION);
        w.u32(self.dim() as u32);
        w.f64(self.sigma_data);
        w.f64s(self.normalizer.mean());
        w.f64s(self.normalizer.std());
        w.u32(cfg.width as u32);
        w.u32(cfg.depth as u32);
        w.u32(cfg.time_dim as u32);
        w.u32(cfg.activation.code());
        w.u64(tc.steps);
        w.u32(tc.batch as u32);
        w.f64(tc.lr);
        w.u64(tc.seed);
        w.f64(tc.p_mean);
        w.f64(tc.p_std);
        w.f64(self.final_loss);
        w.u64(self.params.param_count() as u64);
        for t in self.params.tensors() {
            w.f32s(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, &EDMO_MAGIC, EDMO_VERSION, "EDMO")?;
        let dim = read_dim(&mut r)?;
        let sigma_data = r.f64()?;
        let mean = r.f64s(dim)?;
        let std = r.f64s(dim)?;
        let normalizer = Normalizer::from_parts(mean, std)
            .map_err(|e| Error::Corrupt(format!("EDMO normalizer: {e}")))?;
        let arch = MlpConfig {
            dim,
            width: r.u32()? as usize,
            depth: r.u32()? as usize,
            time_dim: r.u32()? as usize,
            activation: Activation::from_code(r.u32()?)?,
        };
        arch.validate()
            .map_err(|e| Error::Format(format!("EDMO architecture: {e}")))?;
        let train_config = TrainConfig {
            steps: r.u64()?,
            batch: r.u32()? as usize,
            lr: r.f64()?,
            seed: r.u64()?,
            p_mean: r.f64()?,
            p_std: r.f64()?,
            sigma_data,
            checkpoint: None,
            checkpoint_every: TrainConfig::default().checkpoint_every,
        };
        let final_loss = r.f64()?;
        let count = r.u64()? as usize;
        if count != arch.param_count() {
            return Err(Error::Corrupt(format!(
                "EDMO parameter count {count} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let flat = r.f32s(count)?;
        r.finish()?;
        let mut params = MlpParams::zeros(arch);
        params.load_flat(&flat)?;
        if !params.is_finite() {
            return Err(Error::Corrupt("EDMO parameters contain non-finite values".into()));
        }
        Ok(Self {
            params,
            normalizer,
            sigma_data,
            train_config,
            final_loss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!("noise level must be positive, got {sigma}")));
    }
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Trains the denoiser on `train` with the EDM objective.
///
/// Each step draws `batch` rows with replacement, a noise level per row with
/// `ln sigma ~ N(p_mean, p_std^2)`, and takes one Adam step on the weighted
/// denoising loss `lambda(sigma) |D(x + n, sigma) - x|^2` averaged over
/// rows and dimensions.
pub fn train_observer(
    train: &LatentDataset,
    arch: MlpConfig,
    cfg: &TrainConfig,
) -> Result<(DiffusionObserver, TrainReport)> {
    if train.count() < cfg.batch {
        return Err(Error::InsufficientData {
            needed: cfg.batch,
            got: train.count(),
        });
    }
    let mut obs = DiffusionObserver::initialize(train, arch, cfg)?;
    let data = obs.normalizer.normalize_dataset(train)?;
    let n = data.rows();
    let d = data.cols();
    let b = cfg.batch;
    let mut rng = substream(cfg.seed, 1);
    let mut adam = Adam::new(&obs.params);
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps as usize),
    };

    let mut noisy = Matrix::zeros(b, d);
    let mut target = Matrix::zeros(b, d);
    let mut c_noise = vec![0.0; b];
    for step in 0..cfg.steps {
        for (r, cn) in c_noise.iter_mut().enumerate() {
            let x = data.row(rng.random_range(0..n));
            let sigma = (cfg.p_mean + cfg.p_std * gaussian(&mut rng)).exp();
            let pc = Preconditioning::new(sigma, obs.sigma_data);
            *cn = pc.c_noise;
            let in_row = noisy.row_mut(r);
            let t_row = target.row_mut(r);
            for j in 0..d {
                let y = x[j] + sigma * gaussian(&mut rng);
                in_row[j] = pc.c_in * y;
                // lambda * |D - x|^2 == |F - (x - c_skip y) / c_out|^2
                t_row[j] = (x[j] - pc.c_skip * y) / pc.c_out;
            }
        }
        let (out, cache) = obs.params.forward_batch(&noisy, &c_noise)?;
        let scale = 1.0 / (b * d) as f64;
        let mut grad = Matrix::zeros(b, d);
        let mut loss = 0.0;
        for ((g, o), t) in grad
            .as_mut_slice()
            .iter_mut()
            .zip(out.as_slice())
            .zip(target.as_slice())
        {
            let diff = o - t;
            loss += diff * diff;
            *g = 2.0 * diff * scale;
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        report.losses.push(loss);
        let (grads, _) = obs.params.backward(&cache, &grad)?;
        adam.step(&mut obs.params, &grads, cosine_lr(cfg.lr, step, cfg.steps));
        obs.final_loss = loss;

        if let Some(path) = &cfg.checkpoint {
            if (step + 1) % cfg.checkpoint_every == 0 {
                obs.save(path)?;
            }
        }
    }
    if !obs.params.is_finite() {
        return Err(Error::Training {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok((obs, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded};

    fn toy_arch(dim: usize) -> MlpConfig {
        MlpConfig {
            dim,
            width: 16,
            depth: 2,
            time_dim: 8,
            activation: Activation::Silu,
        }
    }

    fn gaussian_dataset(n: usize, d: usize, seed: u64) -> LatentDataset {
        let mut rng = seeded(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, d)).collect();
        LatentDataset::from_rows(d, &rows).unwrap()
    }

    #[test]
    fn preconditioning_hand_values() {
        let pc = Preconditioning::new(1.0, 1.0);
        assert!((pc.c_skip - 0.5).abs() < 1e-15);
        assert!((pc.c_out - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((pc.c_in - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(pc.c_noise, 0.0);
        let pc = Preconditioning::new(0.5, 1.0);
        assert!((pc.c_skip - 0.8).abs() < 1e-15);
        assert!((pc.c_out - 0.5 / 1.25f64.sqrt()).abs() < 1e-15);
        assert!((pc.c_in - 1.0 / 1.25f64.sqrt()).abs() < 1e-15);
        assert!((pc.c_noise - 0.5f64.ln() / 4.0).abs() < 1e-15);
        // lambda * c_out^2 == 1 for every sigma
        for s in [0.01, 0.099, 1.0, 7.0] {
            let pc = Preconditioning::new(s, 1.0);
            assert!((loss_weight(s, 1.0) * pc.c_out * pc.c_out - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_constant_dataset_hits_floor() {
        let ds = LatentDataset::from_rows(2, &[[3.0, -1.0], [3.0, -1.0], [3.0, -1.0]]).unwrap();
        let n = Normalizer::fit(&ds).unwrap();
        assert_eq!(n.mean(), &[3.0, -1.0]);
        assert_eq!(n.std(), &[STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn normalizer_needs_two_rows() {
        let ds = LatentDataset::from_rows(1, &[[1.0]]).unwrap();
        assert!(matches!(
            Normalizer::fit(&ds),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn normalizer_standardizes_training_data() {
        let mut rng = seeded(5);
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..4).map(|j| 3.0 * gaussian(&mut rng) + j as f64).collect())
            .collect();
        let ds = LatentDataset::from_rows(4, &rows).unwrap();
        let n = Normalizer::fit(&ds).unwrap();
        let m = n.normalize_dataset(&ds).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..500).map(|i| m[(i, j)]).collect();
            let mean = col.iter().sum::<f64>() / 500.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }
        let z = ds.row_f64(7);
        let back = n.denormalize(&n.normalize(&z).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&z) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn normalizer_law_of_large_numbers() {
        let ds = gaussian_dataset(10_000, 8, 21);
        let n = Normalizer::fit(&ds).unwrap();
        for j in 0..8 {
            assert!(n.mean()[j].abs() < 0.05);
            assert!((n.std()[j] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn untrained_score_is_skip_path() {
        let ds = gaussian_dataset(64, 3, 1);
        let cfg = TrainConfig {
            steps: 0,
            batch: 16,
            ..Default::default()
        };
        let (obs, report) = train_observer(&ds, toy_arch(3), &cfg).unwrap();
        assert!(report.losses.is_empty());
        let z = [0.4, -1.2, 2.0];
        let sigma = 0.3;
        let x = obs.normalizer().normalize(&z).unwrap();
        let pc = Preconditioning::new(sigma, 1.0);
        let s = obs.score_field(&z, sigma).unwrap();
        for (si, xi) in s.iter().zip(&x) {
            let want = (pc.c_skip - 1.0) * xi / (sigma * sigma);
            assert!((si - want).abs() < 1e-12);
        }
        let v = [1.0, 0.5, -2.0];
        let u = obs.normalizer().scale_direction(&v).unwrap();
        let j = obs.score_jvp(&z, sigma, &v).unwrap();
        for (ji, ui) in j.iter().zip(&u) {
            let want = (pc.c_skip - 1.0) / (sigma * sigma) * ui;
            assert!((ji - want).abs() < 1e-12);
        }
        assert_eq!(obs.score_jvp(&z, sigma, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn score_rejects_bad_sigma_and_shape() {
        let ds = gaussian_dataset(32, 2, 2);
        let obs = DiffusionObserver::initialize(&ds, toy_arch(2), &TrainConfig::default()).unwrap();
        assert!(matches!(obs.score_field(&[0.0, 0.0], 0.0), Err(Error::Argument(_))));
        assert!(matches!(obs.score_field(&[0.0, 0.0], -1.0), Err(Error::Argument(_))));
        assert!(matches!(obs.score_field(&[0.0], 1.0), Err(Error::Shape { .. })));
        assert!(obs.score_jvp(&[0.0, 0.0], 1.0, &[1.0]).is_err());
    }

    #[test]
    fn insufficient_rows_for_batch() {
        let ds = gaussian_dataset(10, 2, 2);
        let cfg = TrainConfig {
            batch: 32,
            ..Default::default()
        };
        assert!(matches!(
            train_observer(&ds, toy_arch(2), &cfg),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn divergence_reports_step() {
        let ds = gaussian_dataset(64, 2, 3);
        let cfg = TrainConfig {
            steps: 50,
            batch: 8,
            lr: 1e300,
            ..Default::default()
        };
        match train_observer(&ds, toy_arch(2), &cfg) {
            Err(Error::Training { step, .. }) => assert!(step < 50),
            other => panic!("expected training error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn training_is_deterministic_and_roundtrips() {
        let ds = gaussian_dataset(128, 2, 4);
        let cfg = TrainConfig {
            steps: 30,
            batch: 16,
            seed: 9,
            ..Default::default()
        };
        let (a, ra) = train_observer(&ds, toy_arch(2), &cfg).unwrap();
        let (b, rb) = train_observer(&ds, toy_arch(2), &cfg).unwrap();
        assert_eq!(a.params().flatten(), b.params().flatten());
        assert_eq!(ra.losses, rb.losses);
        assert!(ra.final_loss().unwrap().is_finite());

        let mut rounded = a.clone();
        rounded.round_to_storage_precision();
        let back = DiffusionObserver::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, rounded);
        assert_eq!(back.to_bytes(), a.to_bytes());
    }

    #[test]
    fn checkpoint_file_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("obs.edmo");
        let ds = gaussian_dataset(64, 2, 4);
        let cfg = TrainConfig {
            steps: 6,
            batch: 8,
            checkpoint: Some(ckpt.clone()),
            checkpoint_every: 3,
            ..Default::default()
        };
        let (obs, _) = train_observer(&ds, toy_arch(2), &cfg).unwrap();
        let saved = DiffusionObserver::load(&ckpt).unwrap();
        assert_eq!(saved.to_bytes(), obs.to_bytes());
    }

    #[test]
    fn rejects_corrupt_files() {
        let ds = gaussian_dataset(32, 2, 2);
        let obs = DiffusionObserver::initialize(&ds, toy_arch(2), &TrainConfig::default()).unwrap();
        let bytes = obs.to_bytes();
        assert!(matches!(
            DiffusionObserver::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Corrupt(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DiffusionObserver::from_bytes(&bad), Err(Error::Format(_))));
    }
}

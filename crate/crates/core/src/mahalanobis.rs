//! Global (label-free) and class-conditional Mahalanobis detectors.
//!
//! The global model fits one Gaussian to unlabeled training latents,
//!
//! ```text
//! mu    = (1/N) sum z_i
//! Sigma = (1/N) sum (z_i - mu)(z_i - mu)^T + lambda I
//! S(z)  = (z - mu)^T Sigma^{-1} (z - mu)
//! ```
//!
//! and scores through triangular solves against the Cholesky factor of
//! `Sigma`. If the factorization fails, `lambda` is raised tenfold up to
//! [`MAX_RIDGE_ESCALATIONS`] times.

use std::fs;
use std::path::Path;

use crate::codec::{read_dim, Reader, Writer};
use crate::diffusion::{write_atomic, Normalizer};
use crate::error::{check_dim, Error, Result};
use crate::latent_io::LatentDataset;
use crate::linalg::{gemm, CholeskyFactor, Matrix};

pub const DEFAULT_RIDGE: f64 = 1e-4;
pub const MAX_RIDGE_ESCALATIONS: u32 = 3;

/// Rows are centered and accumulated into the scatter matrix in blocks of
/// this many rows.
const SCATTER_BLOCK: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisModel {
    mean: Vec<f64>,
    factor: CholeskyFactor,
    ridge: f64,
    requested_ridge: f64,
    fit_count: usize,
    standardizer: Option<Normalizer>,
}

/// Accumulates `sum_i (z_i - center(i))(z_i - center(i))^T` over `rows`.
fn scatter(
    dim: usize,
    rows: impl Iterator<Item = (usize, Vec<f64>)>,
    center: impl Fn(usize) -> Vec<f64>,
) -> Matrix {
    let mut acc = Matrix::zeros(dim, dim);
    let mut block: Vec<f64> = Vec::with_capacity(SCATTER_BLOCK * dim);
    let flush = |block: &mut Vec<f64>, acc: &mut Matrix| {
        if block.is_empty() {
            return;
        }
        let m = Matrix::from_vec(block.len() / dim, dim, std::mem::take(block)).unwrap();
        gemm(1.0, &m, true, &m, false, 1.0, acc);
    };
    for (i, z) in rows {
        let c = center(i);
        block.extend(z.iter().zip(&c).map(|(v, m)| v - m));
        if block.len() == SCATTER_BLOCK * dim {
            flush(&mut block, &mut acc);
        }
    }
    flush(&mut block, &mut acc);
    // gemm accumulates both triangles independently; force exact symmetry.
    for i in 0..dim {
        for j in 0..i {
            let v = acc[(i, j)];
            acc[(j, i)] = v;
        }
    }
    acc
}

/// Factorizes `cov + ridge I`, escalating the ridge on failure.
fn factor_with_escalation(cov: &Matrix, ridge: f64) -> Result<(CholeskyFactor, f64)> {
    let mut lambda = ridge;
    for attempt in 0..=MAX_RIDGE_ESCALATIONS {
        match CholeskyFactor::factor(cov, lambda) {
            Ok(f) => return Ok((f, lambda)),
            Err(Error::NotPositiveDefinite { .. }) if attempt < MAX_RIDGE_ESCALATIONS => {
                lambda *= 10.0;
            }
            Err(Error::NotPositiveDefinite { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Conditioning { lambda })
}

fn check_ridge(ridge: f64) -> Result<()> {
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::Argument(format!("ridge must be positive, got {ridge}")));
    }
    Ok(())
}

fn prepared_rows<'a>(
    train: &'a LatentDataset,
    standardizer: Option<&'a Normalizer>,
) -> impl Iterator<Item = (usize, Vec<f64>)> + 'a {
    (0..train.count()).map(move |i| {
        let z = match standardizer {
            Some(n) => n.normalize_f32(train.row(i)).unwrap(),
            None => train.row_f64(i),
        };
        (i, z)
    })
}

fn mean_of(dim: usize, rows: impl Iterator<Item = (usize, Vec<f64>)>) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for (_, z) in rows {
        for (m, v) in mean.iter_mut().zip(&z) {
            *m += v;
        }
        n += 1;
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Fits the label-free global model on raw latents.
pub fn fit_global(train: &LatentDataset, ridge: f64) -> Result<MahalanobisModel> {
    fit_global_inner(train, ridge, None)
}

/// Like [`fit_global`], but standardizes every dimension first.
pub fn fit_global_standardized(train: &LatentDataset, ridge: f64) -> Result<MahalanobisModel> {
    let n = Normalizer::fit(train)?;
    fit_global_inner(train, ridge, Some(n))
}

fn fit_global_inner(
    train: &LatentDataset,
    ridge: f64,
    standardizer: Option<Normalizer>,
) -> Result<MahalanobisModel> {
    check_ridge(ridge)?;
    let n = train.count();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let d = train.dim();
    let mean = mean_of(d, prepared_rows(train, standardizer.as_ref()));
    let mut cov = scatter(d, prepared_rows(train, standardizer.as_ref()), |_| mean.clone());
    cov.as_mut_slice().iter_mut().for_each(|v| *v /= n as f64);
    let (factor, used) = factor_with_escalation(&cov, ridge)?;
    Ok(MahalanobisModel {
        mean,
        factor,
        ridge: used,
        requested_ridge: ridge,
        fit_count: n,
        standardizer,
    })
}

const MAHA_MAGIC: [u8; 4] = *b"MAHA";
const MAHA_VERSION: u32 = 1;

impl MahalanobisModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Ridge actually applied (after any escalation).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn requested_ridge(&self) -> f64 {
        self.requested_ridge
    }

    /// Number of tenfold ridge increases needed to factorize.
    pub fn escalations(&self) -> u32 {
        (self.ridge / self.requested_ridge).log10().round() as u32
    }

    pub fn fit_count(&self) -> usize {
        self.fit_count
    }

    pub fn is_standardized(&self) -> bool {
        self.standardizer.is_some()
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    /// `Sigma + lambda I`, reconstructed from the factor.
    pub fn covariance(&self) -> Matrix {
        self.factor.reconstruct()
    }

    /// `(z - mu)^T (Sigma + lambda I)^{-1} (z - mu)`.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        let diff: Vec<f64> = match &self.standardizer {
            Some(n) => n.normalize(z)?,
            None => z.to_vec(),
        }
        .iter()
        .zip(&self.mean)
        .map(|(v, m)| v - m)
        .collect();
        self.factor.inverse_quad_form(&diff)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(&MAHA_MAGIC, MAHA_VERSION);
        w.u32(self.dim() as u32);
        w.u64(self.fit_count as u64);
        w.f64(self.requested_ridge);
        w.f64(self.ridge);
        match &self.standardizer {
            Some(n) => {
                w.u32(1);
                w.f64s(n.mean());
                w.f64s(n.std());
            }
            None => w.u32(0),
        }
        w.f64s(&self.mean);
        w.f64s(&self.factor.packed());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, &MAHA_MAGIC, MAHA_VERSION, "MAHA")?;
        let d = read_dim(&mut r)?;
        let fit_count = r.u64()? as usize;
        let requested_ridge = r.f64()?;
        let ridge = r.f64()?;
        let standardizer = match r.u32()? {
            0 => None,
            1 => {
                let mean = r.f64s(d)?;
                let std = r.f64s(d)?;
                Some(
                    Normalizer::from_parts(mean, std)
                        .map_err(|e| Error::Corrupt(format!("MAHA standardizer: {e}")))?,
                )
            }
            f => return Err(Error::Format(format!("unknown MAHA standardization flag {f}"))),
        };
        let mean = r.f64s(d)?;
        let packed = r.f64s(d * (d + 1) / 2)?;
        r.finish()?;
        let factor = CholeskyFactor::from_packed(d, &packed)
            .map_err(|e| Error::Corrupt(format!("MAHA factor: {e}")))?;
        Ok(Self {
            mean,
            factor,
            ridge,
            requested_ridge,
            fit_count,
            standardizer,
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

/// Per-class means with a shared, pooled within-class covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassConditionalModel {
    means: Vec<Vec<f64>>,
    counts: Vec<usize>,
    factor: CholeskyFactor,
    ridge: f64,
}

/// Fits the class-conditional model. Labels run from 1 to C; every class
/// in that range must have at least one sample.
pub fn fit_class_conditional(
    train: &LatentDataset,
    labels: &[u32],
    ridge: f64,
) -> Result<ClassConditionalModel> {
    check_ridge(ridge)?;
    check_dim(train.count(), labels.len())?;
    let n = train.count();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if let Some(i) = labels.iter().position(|&l| l == 0) {
        return Err(Error::Validation {
            row: i,
            message: "class labels start at 1".into(),
        });
    }
    let classes = *labels.iter().max().unwrap() as usize;
    let d = train.dim();
    let mut means = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        let c = l as usize - 1;
        counts[c] += 1;
        for (m, &v) in means[c].iter_mut().zip(train.row(i)) {
            *m += f64::from(v);
        }
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Validation {
            row: c + 1,
            message: format!("class {} has no samples", c + 1),
        });
    }
    for (m, &k) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= k as f64);
    }
    let mut cov = scatter(d, prepared_rows(train, None), |i| {
        means[labels[i] as usize - 1].clone()
    });
    cov.as_mut_slice().iter_mut().for_each(|v| *v /= n as f64);
    let (factor, ridge) = factor_with_escalation(&cov, ridge)?;
    Ok(ClassConditionalModel {
        means,
        counts,
        factor,
        ridge,
    })
}

impl ClassConditionalModel {
    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn covariance(&self) -> Matrix {
        self.factor.reconstruct()
    }

    /// Minimum Mahalanobis distance over class means.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        let mut best = f64::INFINITY;
        for m in &self.means {
            let diff: Vec<f64> = z.iter().zip(m).map(|(v, m)| v - m).collect();
            best = best.min(self.factor.inverse_quad_form(&diff)?);
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: &[&[f64]]) -> LatentDataset {
        LatentDataset::from_rows(rows[0].len(), rows).unwrap()
    }

    #[test]
    fn two_point_fit_by_hand() {
        let m = fit_global(&ds(&[&[0.0, 0.0], &[2.0, 0.0]]), 1e-4).unwrap();
        assert_eq!(m.mean(), &[1.0, 0.0]);
        let c = m.covariance();
        assert!((c[(0, 0)] - 1.0001).abs() < 1e-12);
        assert!((c[(1, 1)] - 1e-4).abs() < 1e-16);
        assert!(c[(0, 1)].abs() < 1e-16);
        assert_eq!(m.ridge(), 1e-4);
        assert_eq!(m.escalations(), 0);
        assert_eq!(m.fit_count(), 2);
    }

    #[test]
    fn identical_points_give_ridge_covariance() {
        let m = fit_global(&ds(&[&[1.0, 2.0][..]; 5]), 1e-4).unwrap();
        let z = [1.5, 1.0];
        let want = (0.25 + 1.0) / 1e-4;
        assert!((m.score(&z).unwrap() - want).abs() < 1e-8 * want);
    }

    #[test]
    fn zero_at_mean_and_shape_errors() {
        let m = fit_global(&ds(&[&[0.0, 1.0], &[2.0, 3.0], &[1.0, 5.0]]), 1e-4).unwrap();
        assert_eq!(m.score(m.mean()).unwrap(), 0.0);
        assert!(matches!(m.score(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            fit_global(&ds(&[&[1.0]]), 1e-4),
            Err(Error::InsufficientData { .. })
        ));
        assert!(matches!(
            fit_global(&ds(&[&[1.0], &[2.0]]), 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn ridge_escalates_then_gives_up() {
        let mut cov = Matrix::identity(2);
        cov[(1, 1)] = -0.05;
        let (_, used) = factor_with_escalation(&cov, 0.01).unwrap();
        assert!((used - 0.1).abs() < 1e-15);
        cov[(1, 1)] = -100.0;
        assert!(matches!(
            factor_with_escalation(&cov, 0.01),
            Err(Error::Conditioning { .. })
        ));
    }

    #[test]
    fn standardized_fit_scores_in_standard_units() {
        let data = ds(&[&[0.0, 0.0], &[10.0, 1.0], &[20.0, 0.0], &[30.0, 1.0]]);
        let raw = fit_global(&data, 1e-4).unwrap();
        let std = fit_global_standardized(&data, 1e-4).unwrap();
        assert!(std.is_standardized());
        let z = [12.0, 0.3];
        // Without ridge the two agree; the ridge matters more on raw scale for
        // the low-variance axis.
        let (a, b) = (raw.score(&z).unwrap(), std.score(&z).unwrap());
        assert!((a - b).abs() / a < 1e-3);
        let back = MahalanobisModel::from_bytes(&std.to_bytes()).unwrap();
        assert_eq!(back, std);
    }

    #[test]
    fn class_conditional_two_singletons() {
        let m = fit_class_conditional(&ds(&[&[0.0, 0.0], &[2.0, 2.0]]), &[1, 2], 1e-4).unwrap();
        assert_eq!(m.class_means(), &[vec![0.0, 0.0], vec![2.0, 2.0]]);
        let c = m.covariance();
        assert!((c[(0, 0)] - 1e-4).abs() < 1e-16);
        assert!(c[(0, 1)].abs() < 1e-16);
        assert_eq!(m.score(&[2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(m.score(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_collapses_to_global() {
        let data = ds(&[&[0.0, 1.0], &[2.0, 3.0], &[1.0, 5.0], &[-1.0, 0.5]]);
        let g = fit_global(&data, 1e-4).unwrap();
        let c = fit_class_conditional(&data, &[1, 1, 1, 1], 1e-4).unwrap();
        for (a, b) in g.covariance().as_slice().iter().zip(c.covariance().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = [0.3, -2.0];
        assert!((g.score(&z).unwrap() - c.score(&z).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn class_conditional_validation() {
        let data = ds(&[&[0.0], &[1.0], &[2.0]]);
        assert!(matches!(
            fit_class_conditional(&data, &[1, 3, 3], 1e-4),
            Err(Error::Validation { row: 2, .. })
        ));
        assert!(fit_class_conditional(&data, &[0, 1, 1], 1e-4).is_err());
        assert!(fit_class_conditional(&data, &[1, 1], 1e-4).is_err());
    }

    #[test]
    fn maha_file_rejects_corruption() {
        let m = fit_global(&ds(&[&[0.0, 1.0], &[2.0, 3.0], &[1.0, 5.0]]), 1e-4).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(MahalanobisModel::from_bytes(&bytes).unwrap(), m);
        assert!(matches!(
            MahalanobisModel::from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Corrupt(_))
        ));
        assert!(matches!(
            MahalanobisModel::from_bytes(b"LTNT\x01\x00\x00\x00"),
            Err(Error::Format(_))
        ));
    }
}

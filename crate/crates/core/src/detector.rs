//! Common interface over the fitted detectors.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::latent_io::LatentDataset;
use crate::mahalanobis::MahalanobisModel;
use crate::metrics::{MetricBundle, ScoredPair};
use crate::typicality::TypicalityScorer;

/// A fitted detector; higher scores mean more out-of-distribution.
pub trait OodDetector: Send + Sync {
    fn name(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn score(&self, z: &[f64]) -> Result<f64>;

    /// Scores every row, in parallel, preserving row order.
    fn score_batch(&self, ds: &LatentDataset) -> Result<Vec<f64>> {
        check_dim(self.dim(), ds.dim())?;
        (0..ds.count())
            .into_par_iter()
            .map(|i| self.score(&ds.row_f64(i)))
            .collect()
    }
}

impl OodDetector for MahalanobisModel {
    fn name(&self) -> &'static str {
        "mahalanobis"
    }

    fn dim(&self) -> usize {
        MahalanobisModel::dim(self)
    }

    fn score(&self, z: &[f64]) -> Result<f64> {
        MahalanobisModel::score(self, z)
    }
}

impl OodDetector for TypicalityScorer {
    fn name(&self) -> &'static str {
        "rescoped"
    }

    fn dim(&self) -> usize {
        TypicalityScorer::dim(self)
    }

    fn score(&self, z: &[f64]) -> Result<f64> {
        TypicalityScorer::score(self, z)
    }
}

/// Scores an ID/OOD pair and computes all four metrics.
pub fn evaluate_pair(
    detector: &dyn OodDetector,
    id: &LatentDataset,
    ood: &LatentDataset,
) -> Result<(MetricBundle, ScoredPair)> {
    let pair = ScoredPair::new(detector.score_batch(id)?, detector.score_batch(ood)?)?;
    Ok((MetricBundle::compute(&pair)?, pair))
}

/// Loads a model file of either kind, chosen by its magic bytes.
pub fn load_detector(path: impl AsRef<Path>) -> Result<Box<dyn OodDetector>> {
    let path = path.as_ref();
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    }
    match &magic {
        b"MAHA" => Ok(Box::new(MahalanobisModel::load(path)?)),
        b"RSCP" => Ok(Box::new(TypicalityScorer::load(path)?)),
        _ => Err(Error::Format(format!(
            "{} is not a detector model file",
            path.display()
        ))),
    }
}

//! Prefill-stage gating over accumulating prompt prefixes.
//!
//! At token `k` the prefix mean of the unmasked hidden states is scored
//! against a threshold taken as a high percentile of ID scores. The final
//! decision looks only at the full-length score; earlier flags are reported
//! for monitoring, and those before `min_prefix` tokens are marked advisory.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::OodDetector;
use crate::error::{check_dim, Error, Result};
use crate::latent_io::{PrefixPooler, TokenSequence};
use crate::metrics::percentile;

pub const MIN_CALIBRATION_SCORES: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    #[default]
    Rescoped,
    Mahalanobis,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub detector: DetectorKind,
    pub percentile: f64,
    pub min_prefix: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            detector: DetectorKind::Rescoped,
            percentile: 99.0,
            min_prefix: 3,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::Argument(format!(
                "percentile must be in (0, 100), got {}",
                self.percentile
            )));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile of ID scores.
pub fn calibrate_threshold(id_scores: &[f64], pct: f64) -> Result<f64> {
    if id_scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::InsufficientData {
            needed: MIN_CALIBRATION_SCORES,
            got: id_scores.len(),
        });
    }
    if let Some(i) = id_scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Validation {
            row: i,
            message: "calibration score is not finite".into(),
        });
    }
    percentile(id_scores, pct)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

/// One token's entry in a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStep {
    pub token_index: usize,
    /// `None` while every token so far is masked out.
    pub score: Option<f64>,
    pub over_threshold: bool,
    pub advisory: bool,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub threshold: f64,
    pub steps: Vec<GateStep>,
    pub decision: Decision,
}

impl GateTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_score(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.score)
    }
}

/// Scores every prefix of `seq` and decides on the full-length score.
pub fn gate_sequence(
    seq: &TokenSequence,
    detector: &dyn OodDetector,
    threshold: f64,
    cfg: &GateConfig,
) -> Result<GateTrace> {
    cfg.validate()?;
    check_dim(detector.dim(), seq.dim())?;
    if seq.is_empty() {
        return Err(Error::DegenerateInput("sequence has no tokens".into()));
    }
    let mut pooler = PrefixPooler::new(seq.dim());
    let mut steps = Vec::with_capacity(seq.len());
    for (k, (h, &m)) in seq.hidden().rows().zip(seq.mask()).enumerate() {
        let start = Instant::now();
        let score = match pooler.push(h, m) {
            Some(pooled) => Some(detector.score(&pooled)?),
            None => None,
        };
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        steps.push(GateStep {
            token_index: k,
            score,
            over_threshold: score.is_some_and(|s| s > threshold),
            advisory: k + 1 < cfg.min_prefix,
            latency_ms,
        });
    }
    let last = steps.last().expect("non-empty sequence");
    if last.score.is_none() {
        return Err(Error::DegenerateInput("every token is masked out".into()));
    }
    let decision = if last.over_threshold {
        Decision::Reject
    } else {
        Decision::Accept
    };
    Ok(GateTrace {
        threshold,
        steps,
        decision,
    })
}

//! Label-free out-of-distribution detection on frozen latent representations.
//!
//! Two detectors share the same input, a matrix of embedding vectors:
//!
//! - [`mahalanobis`]: a single Gaussian fit to unlabeled in-distribution
//!   latents, scored by squared Mahalanobis distance.
//! - [`typicality`]: ReSCOPED, which trains a small EDM denoiser
//!   ([`diffusion`]) on the latents and scores the score-curvature ratio
//!   `T(z) = |s(z)|^2 / (-tr grad s(z) + eps)` through a 1-D KDE.
//!
//! [`metrics`], [`sweep`] and [`gatekeeper`] build evaluation and deployment
//! workflows on top of either detector.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub(crate) mod codec;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod gatekeeper;
pub mod latent_io;
pub mod linalg;
pub mod mahalanobis;
pub mod metrics;
pub mod mlp;
pub mod rng;
pub mod sweep;
pub mod typicality;

pub use detector::{evaluate_pair, OodDetector};
pub use error::{Error, Result};
pub use latent_io::{LatentDataset, TokenSequence};

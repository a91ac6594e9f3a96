//! Multi-view panoptic fusion with probabilistic instance embeddings.
//!
//! Every scene point carries a diagonal Gaussian embedding. Embeddings are
//! trained from per-view instance masks whose IDs need not agree across
//! views, using contrastive objectives built on the probability product
//! kernel. At inference, per-view instances are grouped, scored and reduced
//! to a set of prototypes by greedy suppression, and every pixel takes the ID
//! of its nearest prototype. Results are scored with scene-level panoptic
//! quality.
//!
//! Module map:
//!
//! - [`kernel`]: Gaussian embeddings, the probability product kernel, its gradient, the RBF special case
//! - [`loss`]: contrastive, concentration, cross-view and regularization losses
//! - [`trainer`]: the embedding table, batch sampling, optimization schedule, checkpoints
//! - [`mvoa`]: instance grouping, similarity graph, threshold, prototype selection, labeling
//! - [`metrics`]: scene segments, PQ/SQ/RQ, covariance statistics
//! - [`synth`]: synthetic scenes, noise protocols, scene directories
//! - [`pipeline`]: run configuration and the `synth`/`train`/`cluster`/`eval`/`run` commands

pub mod error;
pub mod kernel;
pub mod loss;
pub mod metrics;
pub mod mvoa;
pub mod pipeline;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use kernel::{log_pp_kernel, pp_kernel, pp_kernel_grad, rbf_kernel, GaussianEmbedding};

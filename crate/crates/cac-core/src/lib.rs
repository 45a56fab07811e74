//! Source-free domain adaptation by contrasting neighborhood pairs of
//! softmax outputs.
//!
//! A model pretrained on a labeled source domain is adapted to an unlabeled
//! target domain without ever reading source data again. Adaptation pulls
//! each sample's prediction toward the stored predictions of its nearest
//! neighbors (positive pairs) and pushes it away from the neighbor
//! predictions of the remaining mini-batch members (negative pairs), with an
//! expanded-neighbor mask that removes probable same-class samples from the
//! negative pool and a decay factor that tapers the negative term over
//! training.
//!
//! The crate is organized around five pieces:
//!
//! - [`matrix`] / [`model`]: dense linear algebra, the two-stage network
//!   `z(x) = classifier(extractor(x))`, hand-derived backpropagation, SGD
//!   with momentum, and a finite-difference gradient oracle.
//! - [`banks`]: the feature / prediction / neighbor-index memory banks with
//!   exact top-K cosine retrieval and O(1) expanded-neighbor queries.
//! - [`losses`]: the neighborhood-pair contrastive objective, its
//!   negative-pair mask and decay schedule, the multi-positive NCE baseline,
//!   and a likelihood-ratio diagnostic objective.
//! - [`data`]: synthetic two-domain Gaussian-blob benchmarks with
//!   controllable shift and class imbalance, plus CSV I/O.
//! - [`harness`]: source pretraining, the adaptation loop, evaluation,
//!   ablations, parameter sweeps, and reporting.

pub mod banks;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod rng;

pub use config::TrainConfig;
pub use error::{CacError, Result};
pub use matrix::Matrix;

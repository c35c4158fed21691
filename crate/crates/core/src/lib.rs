//! TERSE: source-free domain adaptation for multivariate time series via a
//! spatial-temporal encoder plus temporal-restoration and spatial-rewiring
//! auxiliary tasks.
//!
//! The crate is organized bottom-up:
//! - [`tensor`] — float32 tensors with reverse-mode autodiff
//! - [`rng`] — deterministic seeded random streams
//! - [`optim`] — Adam
//! - [`encoder`] — temporal CNN, graph learner, spatial GNN, classifier
//! - [`auxiliary`] — masking plus the restoration and rewiring heads
//! - [`losses`] — classification, reconstruction, and information
//!   maximization objectives
//! - [`model`] — parameter bundle and checkpoint format
//! - [`training`] — source pre-training, target adaptation, plug-in losses
//! - [`data`] — dataset format, CSV import, normalization, synthetic
//!   domain-shift generator
//! - [`metrics`] / [`experiment`] — macro-F1 and experiment drivers

pub mod auxiliary;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use rng::SeedRng;
pub use tensor::Tensor;

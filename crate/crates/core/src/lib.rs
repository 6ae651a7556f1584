//! Disentangled sequence representations with a factorized hierarchical VAE
//! and an auxiliary future-frame prediction decoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`gaussian`]: closed-form diagonal-Gaussian primitives used by every loss term.
//! - [`features`]: STFT features, segmentation with prediction targets, the synthetic
//!   corpus, the binary feature format and corpus manifests.
//! - [`model`]: the z2/z1 encoders and the reconstruction/prediction decoders, with
//!   hand-written backward passes.
//! - [`training`]: losses, s-vector table, Adam and the resumable training loop.
//! - [`conversion`]: latent feature extraction, voice conversion and Griffin-Lim.
//! - [`eval`]: cosine EER, k-fold probes, the normalized-difference metric and the
//!   synthetic disentanglement benchmark.
//! - [`config`] and [`pipeline`]: the declarative run config and the staged pipeline
//!   driven by the `dsv` binary.

pub mod config;
pub mod conversion;
pub mod error;
pub mod eval;
pub mod features;
pub mod gaussian;
pub mod hash;
pub mod model;
pub mod pipeline;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use features::{CorpusManifest, Segment, SequenceRecord};
pub use gaussian::DiagGaussian;
pub use model::{ModelConfig, SeqVae, Variant};
pub use training::{LossBreakdown, SVectorTable, TrainState};

/// Version string embedded in every artifact.
pub const CODE_VERSION: &str = concat!("dsv-core ", env!("CARGO_PKG_VERSION"));

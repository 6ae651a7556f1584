//! Sequence VAE: encoders, decoders and their hand-written gradients.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod seqvae;

pub use checkpoint::{file_hash, Checkpoint, NamedTensor};
pub use config::{ModelConfig, Variant};
pub use seqvae::{time_major, BatchNoise, BatchOutputs, ForwardCache, GaussianNoise, LatentOutputs, NoiseSource, OutputGrads, SeqVae, ZeroNoise};

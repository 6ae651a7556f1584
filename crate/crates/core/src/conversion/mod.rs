//! Latent feature extraction, voice conversion by latent recombination and
//! Griffin-Lim inversion of log-magnitude spectrograms.

pub mod extract;
pub mod griffin_lim;

pub use extract::{
    convert_voice, convert_with_svector, extract_segmental, extract_sequential, reconstruct, SegmentalFeature, SequentialFeature,
};
pub use griffin_lim::{griffin_lim, griffin_lim_trace, spectral_convergence, GriffinLimResult};

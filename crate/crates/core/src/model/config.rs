use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};

/// Baseline FHVAE or one of the three prediction-decoder variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "fhvae")]
    Fhvae,
    #[serde(rename = "apc-enc1-dec1")]
    ApcEnc1Dec1,
    #[serde(rename = "apc-enc2-dec1")]
    ApcEnc2Dec1,
    #[serde(rename = "apc-enc2-dec2")]
    ApcEnc2Dec2,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Fhvae, Variant::ApcEnc1Dec1, Variant::ApcEnc2Dec1, Variant::ApcEnc2Dec2];

    /// Recurrent layers in the z1 encoder.
    pub fn z1_encoder_layers(self) -> usize {
        match self {
            Variant::Fhvae | Variant::ApcEnc1Dec1 => 1,
            Variant::ApcEnc2Dec1 | Variant::ApcEnc2Dec2 => 2,
        }
    }

    /// Recurrent layers in the prediction decoder, if there is one.
    pub fn prediction_decoder_layers(self) -> Option<usize> {
        match self {
            Variant::Fhvae => None,
            Variant::ApcEnc1Dec1 | Variant::ApcEnc2Dec1 => Some(1),
            Variant::ApcEnc2Dec2 => Some(2),
        }
    }

    pub fn has_prediction(self) -> bool {
        self.prediction_decoder_layers().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fhvae => "fhvae",
            Variant::ApcEnc1Dec1 => "apc-enc1-dec1",
            Variant::ApcEnc2Dec1 => "apc-enc2-dec1",
            Variant::ApcEnc2Dec2 => "apc-enc2-dec2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub feature_dim: usize,
    pub segment_len: usize,
    pub latent_dim_z1: usize,
    pub latent_dim_z2: usize,
    pub hidden_units: usize,
    /// Prediction offset in frames.
    pub m: usize,
    /// Fixed variance of p(z2 | mu2).
    pub sigma2_z2: f64,
    /// Weight of the segment-to-sequence discriminative term.
    pub alpha_dis: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ApcEnc1Dec1,
            feature_dim: 200,
            segment_len: 20,
            latent_dim_z1: 32,
            latent_dim_z2: 32,
            hidden_units: 256,
            m: 3,
            sigma2_z2: 0.25,
            alpha_dis: 10.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.feature_dim >= 1, "feature_dim must be >= 1");
        ensure!(self.segment_len >= 1, "segment_len must be >= 1");
        ensure!(self.latent_dim_z1 >= 1 && self.latent_dim_z2 >= 1, "latent dims must be >= 1");
        ensure!(self.hidden_units >= 1, "hidden_units must be >= 1");
        ensure!(self.sigma2_z2 > 0.0 && self.sigma2_z2.is_finite(), "sigma2_z2 must be positive");
        ensure!(self.alpha_dis >= 0.0 && self.alpha_dis.is_finite(), "alpha_dis must be >= 0");
        Ok(())
    }

    /// Total trainable weights (excluding s-vectors), from shapes alone.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_units;
        let lstm = |input: usize| 4 * h * (input + h) + 4 * h;
        let stack = |input: usize, depth: usize| lstm(input) + (depth - 1) * lstm(h);
        let linear = |i: usize, o: usize| i * o + o;
        let (f, d1, d2) = (self.feature_dim, self.latent_dim_z1, self.latent_dim_z2);
        let recon_out = if self.variant.has_prediction() { f } else { 2 * f };
        let mut n = lstm(f) + linear(h, 2 * d2);
        n += stack(f + d2, self.variant.z1_encoder_layers()) + linear(h, 2 * d1);
        n += lstm(d1 + d2) + linear(h, recon_out);
        if let Some(depth) = self.variant.prediction_decoder_layers() {
            n += stack(d1 + d2, depth) + linear(h, f);
        }
        n
    }
}

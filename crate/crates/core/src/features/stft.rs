use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{ensure, Error, Result};

/// Floor added to magnitudes before taking the log.
pub const LOG_EPS: f64 = 1e-10;

/// Short-time Fourier transform settings.
///
/// Output column `j` holds FFT bin `j + first_bin()`; with `drop_dc` the DC
/// bin is skipped so that a 400-point FFT yields exactly 200 columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub n_bins: usize,
    pub drop_dc: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::from_ms(16_000, 25.0, 10.0, 200)
    }
}

impl StftConfig {
    /// FFT size equals the window length.
    pub fn from_ms(sample_rate: u32, window_ms: f64, hop_ms: f64, n_bins: usize) -> Self {
        let win = (sample_rate as f64 * window_ms / 1000.0).round() as usize;
        let hop = (sample_rate as f64 * hop_ms / 1000.0).round() as usize;
        Self { sample_rate, win_length: win, hop_length: hop, fft_size: win, n_bins, drop_dc: true }
    }

    pub fn first_bin(&self) -> usize {
        usize::from(self.drop_dc)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.hop_length > 0, "hop length must be positive");
        ensure!(self.win_length > 0, "window length must be positive");
        ensure!(self.fft_size >= self.win_length, "fft size {} shorter than window {}", self.fft_size, self.win_length);
        ensure!(self.n_bins >= 1, "need at least one frequency bin");
        ensure!(
            self.first_bin() + self.n_bins <= self.fft_size / 2 + 1,
            "{} bins (first bin {}) exceed the {} available for fft size {}",
            self.n_bins,
            self.first_bin(),
            self.fft_size / 2 + 1,
            self.fft_size
        );
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win_length {
            0
        } else {
            1 + (n_samples - self.win_length) / self.hop_length
        }
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_length as f64;
        (0..self.win_length).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()).collect()
    }
}

/// Planned forward/inverse FFTs plus the analysis window, reused across frames.
pub struct StftEngine {
    cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl StftEngine {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            window: cfg.window(),
            fwd: planner.plan_fft_forward(cfg.fft_size),
            inv: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Half spectrum (`fft_size / 2 + 1` bins) for every frame.
    pub fn forward(&self, signal: &[f64]) -> Vec<Vec<Complex64>> {
        let n_frames = self.cfg.n_frames(signal.len());
        let half = self.cfg.fft_size / 2 + 1;
        let mut buf = vec![Complex64::default(); self.cfg.fft_size];
        (0..n_frames)
            .map(|t| {
                let start = t * self.cfg.hop_length;
                buf.fill(Complex64::default());
                for (i, w) in self.window.iter().enumerate() {
                    buf[i] = Complex64::new(signal[start + i] * w, 0.0);
                }
                self.fwd.process(&mut buf);
                buf[..half].to_vec()
            })
            .collect()
    }

    /// Least-squares inverse: windowed overlap-add normalized by the summed
    /// squared window. Samples with zero window coverage are set to zero.
    pub fn inverse(&self, frames: &[Vec<Complex64>], n_samples: usize) -> Vec<f64> {
        let n = self.cfg.fft_size;
        let half = n / 2 + 1;
        let mut out = vec![0.0; n_samples];
        let mut norm = vec![0.0; n_samples];
        let mut buf = vec![Complex64::default(); n];
        for (t, spec) in frames.iter().enumerate() {
            buf[..half].copy_from_slice(&spec[..half]);
            for k in half..n {
                buf[k] = spec[n - k].conj();
            }
            // the imaginary parts of DC/Nyquist do not survive a real signal
            buf[0].im = 0.0;
            if n % 2 == 0 {
                buf[n / 2].im = 0.0;
            }
            self.inv.process(&mut buf);
            let start = t * self.cfg.hop_length;
            for (i, w) in self.window.iter().enumerate() {
                let idx = start + i;
                if idx < n_samples {
                    out[idx] += w * buf[i].re / n as f64;
                    norm[idx] += w * w;
                }
            }
        }
        for (o, z) in out.iter_mut().zip(&norm) {
            *o = if *z > 1e-12 { *o / z } else { 0.0 };
        }
        out
    }

    /// Number of samples spanned by `n_frames` frames.
    pub fn signal_len(&self, n_frames: usize) -> usize {
        if n_frames == 0 {
            0
        } else {
            (n_frames - 1) * self.cfg.hop_length + self.cfg.win_length
        }
    }

    /// Magnitudes of the kept bins (columns of the feature matrix).
    pub fn kept_magnitudes(&self, spectra: &[Vec<Complex64>]) -> Array2<f64> {
        let first = self.cfg.first_bin();
        let mut out = Array2::zeros((spectra.len(), self.cfg.n_bins));
        for (t, spec) in spectra.iter().enumerate() {
            for j in 0..self.cfg.n_bins {
                out[[t, j]] = spec[first + j].norm();
            }
        }
        out
    }
}

/// Hann-windowed STFT log-magnitude, `ln(|S| + 1e-10)`, shape `T x n_bins`.
pub fn stft_log_magnitude(waveform: &[f64], cfg: &StftConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if waveform.len() < cfg.win_length {
        return Err(Error::TooShort { needed: cfg.win_length, got: waveform.len() });
    }
    let engine = StftEngine::new(cfg)?;
    let mags = engine.kept_magnitudes(&engine.forward(waveform));
    Ok(mags.mapv(|m| (m + LOG_EPS).ln()))
}

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::error::{ensure, Result};
use crate::features::stft::{StftEngine, LOG_EPS};
use crate::features::StftConfig;

/// Extrapolation weight of the accelerated update.
pub const MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct GriffinLimResult {
    pub waveform: Vec<f64>,
    /// Spectral convergence after each iteration.
    pub convergence: Vec<f64>,
}

/// `||S - |STFT(x)||| / ||S||` over the kept bins.
pub fn spectral_convergence(target: &Array2<f64>, estimate: &Array2<f64>) -> f64 {
    let num: f64 = target.iter().zip(estimate.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = target.iter().map(|a| a * a).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

fn full_spectra(mag: &Array2<f64>, phase: &[Vec<Complex64>], cfg: &StftConfig) -> Vec<Vec<Complex64>> {
    let half = cfg.fft_size / 2 + 1;
    let first = cfg.first_bin();
    (0..mag.nrows())
        .map(|t| {
            let mut spec = vec![Complex64::default(); half];
            for j in 0..cfg.n_bins {
                spec[first + j] = phase[t][first + j] * mag[[t, j]];
            }
            spec
        })
        .collect()
}

fn extrapolate(cur: &[Vec<Complex64>], prev: &[Vec<Complex64>], alpha: f64) -> Vec<Vec<Complex64>> {
    cur.iter().zip(prev).map(|(c, p)| c.iter().zip(p).map(|(a, b)| a + (a - b) * alpha).collect()).collect()
}

fn unit_phase(spectra: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    spectra
        .iter()
        .map(|s| s.iter().map(|c| if c.norm() > 0.0 { c / c.norm() } else { Complex64::new(1.0, 0.0) }).collect())
        .collect()
}

/// Iterative phase retrieval from a `T x n_bins` log-magnitude spectrogram.
/// Bins outside the kept range (the DC bin) are held at zero magnitude.
///
/// Uses the accelerated update with a restart whenever an iterate would raise
/// the spectral convergence, so the returned waveform is the best accepted
/// iterate and the trace is non-increasing.
pub fn griffin_lim_trace(log_magnitude: &Array2<f64>, cfg: &StftConfig, iterations: usize, seed: u64) -> Result<GriffinLimResult> {
    ensure!(iterations >= 1, "griffin-lim needs at least one iteration");
    ensure!(
        log_magnitude.ncols() == cfg.n_bins,
        "spectrogram has {} bins, stft config expects {}",
        log_magnitude.ncols(),
        cfg.n_bins
    );
    ensure!(log_magnitude.nrows() >= 1, "spectrogram has no frames");
    ensure!(log_magnitude.iter().all(|v| v.is_finite()), "spectrogram has non-finite entries");
    let engine = StftEngine::new(cfg)?;
    let mag = log_magnitude.mapv(|v| (v.exp() - LOG_EPS).max(0.0));
    let n_samples = engine.signal_len(mag.nrows());
    let half = cfg.fft_size / 2 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: Vec<Vec<Complex64>> = (0..mag.nrows())
        .map(|_| (0..half).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))).collect())
        .collect();
    let mut convergence = Vec::with_capacity(iterations);
    let mut best_sc = f64::INFINITY;
    let mut waveform = Vec::new();
    // last accepted projection; momentum extrapolates from it
    let mut accepted: Option<Vec<Vec<Complex64>>> = None;
    for _ in 0..iterations {
        let x = engine.inverse(&full_spectra(&mag, &phase, cfg), n_samples);
        let spectra = engine.forward(&x);
        let sc = spectral_convergence(&mag, &engine.kept_magnitudes(&spectra));
        if sc <= best_sc {
            best_sc = sc;
            waveform = x;
            phase = match &accepted {
                Some(prev) => unit_phase(&extrapolate(&spectra, prev, MOMENTUM)),
                None => unit_phase(&spectra),
            };
            accepted = Some(spectra);
        } else {
            // restart: plain projection step from the last accepted iterate
            let prev = accepted.take().expect("first iterate is always accepted");
            phase = unit_phase(&prev);
        }
        convergence.push(best_sc);
    }
    Ok(GriffinLimResult { waveform, convergence })
}

pub fn griffin_lim(log_magnitude: &Array2<f64>, cfg: &StftConfig, iterations: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(griffin_lim_trace(log_magnitude, cfg, iterations, seed)?.waveform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::stft_log_magnitude;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Vec<f64> {
        let n = (seconds * sr as f64) as usize;
        (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()).collect()
    }

    #[test]
    fn tone_reaches_20_db_and_converges_monotonically() {
        let cfg = StftConfig::default();
        let logmag = stft_log_magnitude(&tone(440.0, 0.5, 16_000), &cfg).unwrap();
        let r = griffin_lim_trace(&logmag, &cfg, 60, 7).unwrap();
        for w in r.convergence.windows(2) {
            assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
        }
        let snr = -20.0 * r.convergence.last().unwrap().log10();
        assert!(snr >= 20.0, "spectral SNR {snr} dB");
        let one = griffin_lim_trace(&logmag, &cfg, 1, 7).unwrap();
        assert!(r.convergence[59] <= one.convergence[0]);
        assert_eq!(r.waveform.len(), cfg.win_length + (logmag.nrows() - 1) * cfg.hop_length);
    }

    #[test]
    fn seeded_and_validated() {
        let cfg = StftConfig::default();
        let logmag = stft_log_magnitude(&tone(300.0, 0.1, 16_000), &cfg).unwrap();
        assert_eq!(griffin_lim(&logmag, &cfg, 3, 1).unwrap(), griffin_lim(&logmag, &cfg, 3, 1).unwrap());
        assert!(griffin_lim(&logmag, &cfg, 0, 1).is_err());
        assert!(griffin_lim(&Array2::zeros((4, 10)), &cfg, 2, 1).is_err());
    }
}

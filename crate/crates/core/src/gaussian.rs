//! Diagonal-Gaussian primitives.
//!
//! Everything is parameterized by mean and natural-log variance and evaluated
//! in `f64`. The per-dimension kernels (`kl_term`, `log_prob_term` and their
//! gradients) are shared with the batched loss code in [`crate::training`].

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        let g = Self { mean, logvar };
        g.validate()?;
        Ok(g)
    }

    /// N(0, I) of dimension `dim`.
    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], logvar: vec![0.0; dim] }
    }

    /// Isotropic Gaussian with the given mean and shared variance.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Self {
        let lv = variance.ln();
        let d = mean.len();
        Self { mean, logvar: vec![lv; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| l.exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.mean.is_empty(), "gaussian dimension must be >= 1");
        ensure!(
            self.mean.len() == self.logvar.len(),
            "mean has {} entries but logvar has {}",
            self.mean.len(),
            self.logvar.len()
        );
        ensure!(
            self.mean.iter().chain(&self.logvar).all(|v| v.is_finite()),
            "gaussian parameters must be finite"
        );
        Ok(())
    }
}

/// One dimension of KL(q || p).
#[inline]
pub fn kl_term(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let d = mq - mp;
    0.5 * ((lq - lp).exp() + d * d * (-lp).exp() - 1.0 + lp - lq)
}

/// Partial derivatives of [`kl_term`] with respect to `(mq, lq, mp, lp)`.
#[inline]
pub fn kl_term_grad(mq: f64, lq: f64, mp: f64, lp: f64) -> [f64; 4] {
    let inv_vp = (-lp).exp();
    let d = mq - mp;
    let ratio = (lq - lp).exp();
    [d * inv_vp, 0.5 * (ratio - 1.0), -d * inv_vp, 0.5 * (1.0 - ratio - d * d * inv_vp)]
}

/// One dimension of log N(x; mean, exp(logvar)).
#[inline]
pub fn log_prob_term(x: f64, mean: f64, logvar: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + logvar + d * d * (-logvar).exp())
}

/// Partial derivatives of [`log_prob_term`] with respect to `(x, mean, logvar)`.
#[inline]
pub fn log_prob_term_grad(x: f64, mean: f64, logvar: f64) -> [f64; 3] {
    let d = x - mean;
    let inv_v = (-logvar).exp();
    [-d * inv_v, d * inv_v, -0.5 * (1.0 - d * d * inv_v)]
}

fn check_pair(a: &DiagGaussian, b: &DiagGaussian) -> Result<()> {
    a.validate()?;
    b.validate()?;
    ensure!(a.dim() == b.dim(), "dimension mismatch: {} vs {}", a.dim(), b.dim());
    Ok(())
}

pub fn kl_diag_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_pair(q, p)?;
    Ok((0..q.dim()).map(|j| kl_term(q.mean[j], q.logvar[j], p.mean[j], p.logvar[j])).sum())
}

/// Gradient of KL(q || p): `(dq, dp)`, each laid out as a Gaussian of partials.
pub fn kl_diag_gaussians_grad(q: &DiagGaussian, p: &DiagGaussian) -> Result<(DiagGaussian, DiagGaussian)> {
    check_pair(q, p)?;
    let d = q.dim();
    let mut dq = DiagGaussian { mean: vec![0.0; d], logvar: vec![0.0; d] };
    let mut dp = dq.clone();
    for j in 0..d {
        let [a, b, c, e] = kl_term_grad(q.mean[j], q.logvar[j], p.mean[j], p.logvar[j]);
        dq.mean[j] = a;
        dq.logvar[j] = b;
        dp.mean[j] = c;
        dp.logvar[j] = e;
    }
    Ok((dq, dp))
}

pub fn gaussian_log_prob(x: &[f64], g: &DiagGaussian) -> Result<f64> {
    g.validate()?;
    ensure!(x.len() == g.dim(), "dimension mismatch: x has {}, gaussian has {}", x.len(), g.dim());
    Ok(x.iter().zip(g.mean.iter().zip(&g.logvar)).map(|(&x, (&m, &l))| log_prob_term(x, m, l)).sum())
}

/// Gradient of [`gaussian_log_prob`]: `(dx, dg)`.
pub fn gaussian_log_prob_grad(x: &[f64], g: &DiagGaussian) -> Result<(Vec<f64>, DiagGaussian)> {
    g.validate()?;
    ensure!(x.len() == g.dim(), "dimension mismatch: x has {}, gaussian has {}", x.len(), g.dim());
    let mut dx = vec![0.0; x.len()];
    let mut dg = DiagGaussian { mean: vec![0.0; x.len()], logvar: vec![0.0; x.len()] };
    for j in 0..x.len() {
        let [a, b, c] = log_prob_term_grad(x[j], g.mean[j], g.logvar[j]);
        dx[j] = a;
        dg.mean[j] = b;
        dg.logvar[j] = c;
    }
    Ok((dx, dg))
}

/// `mean + exp(logvar / 2) * noise`.
pub fn reparam_sample(g: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    g.validate()?;
    ensure!(noise.len() == g.dim(), "noise has {} entries, gaussian has {}", noise.len(), g.dim());
    Ok(g.mean.iter().zip(&g.logvar).zip(noise).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect())
}

/// Diagonal Jacobian of [`reparam_sample`]: `(d out / d mean, d out / d logvar)`.
pub fn reparam_sample_grad(g: &DiagGaussian, noise: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    g.validate()?;
    ensure!(noise.len() == g.dim(), "noise has {} entries, gaussian has {}", noise.len(), g.dim());
    let dl = g.logvar.iter().zip(noise).map(|(l, e)| 0.5 * (0.5 * l).exp() * e).collect();
    Ok((vec![1.0; g.dim()], dl))
}

/// log N(mu2; 0, I), the hyperprior on s-vectors.
pub fn log_prior_mu2(mu2: &[f64]) -> Result<f64> {
    ensure!(!mu2.is_empty(), "s-vector dimension must be >= 1");
    ensure!(mu2.iter().all(|v| v.is_finite()), "s-vector must be finite");
    Ok(mu2.iter().map(|&m| log_prob_term(m, 0.0, 0.0)).sum())
}

pub fn log_prior_mu2_grad(mu2: &[f64]) -> Vec<f64> {
    mu2.iter().map(|m| -m).collect()
}

//! Segment-level objectives.
//!
//! Every [`LossBreakdown`] field is the term's contribution to the minimized
//! total: `total = recon + prediction + kl_z1 + kl_z2 + mu2_prior + alpha_dis * discriminative`,
//! with `mu2_prior = -(1/N_i) log p(mu2)`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::svector::SVectorTable;
use crate::error::{ensure, Error, Result};
use crate::features::Segment;
use crate::gaussian::{self, kl_term, kl_term_grad, log_prob_term, log_prob_term_grad, DiagGaussian};
use crate::model::{BatchOutputs, LatentOutputs, ModelConfig, OutputGrads};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub prediction: f64,
    pub kl_z1: f64,
    pub kl_z2: f64,
    pub mu2_prior: f64,
    pub discriminative: f64,
    /// Segments whose prediction term was dropped for lack of a future window.
    pub masked_targets: usize,
}

impl LossBreakdown {
    pub fn recompute_total(&self, alpha_dis: f64) -> f64 {
        self.recon + self.prediction + self.kl_z1 + self.kl_z2 + self.mu2_prior + alpha_dis * self.discriminative
    }

    /// Panics if `total` disagrees with its components beyond 1e-6 relative.
    pub fn assert_consistent(&self, alpha_dis: f64) {
        let r = self.recompute_total(alpha_dis);
        assert!(
            (r - self.total).abs() <= 1e-6 * r.abs().max(self.total.abs()).max(1.0),
            "loss total {} disagrees with components {}",
            self.total,
            r
        );
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.recon += other.recon;
        self.prediction += other.prediction;
        self.kl_z1 += other.kl_z1;
        self.kl_z2 += other.kl_z2;
        self.mu2_prior += other.mu2_prior;
        self.discriminative += other.discriminative;
        self.masked_targets += other.masked_targets;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * s,
            recon: self.recon * s,
            prediction: self.prediction * s,
            kl_z1: self.kl_z1 * s,
            kl_z2: self.kl_z2 * s,
            mu2_prior: self.mu2_prior * s,
            discriminative: self.discriminative * s,
            masked_targets: self.masked_targets,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.recon, self.prediction, self.kl_z1, self.kl_z2, self.mu2_prior, self.discriminative]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn prior_terms(out: &LatentOutputs, svector: &[f64], n_i: usize, cfg: &ModelConfig) -> Result<(f64, f64, f64)> {
    ensure!(n_i >= 1, "segment count must be >= 1");
    let kl1 = gaussian::kl_diag_gaussians(&out.q_z1, &DiagGaussian::standard(out.q_z1.dim()))?;
    let kl2 = gaussian::kl_diag_gaussians(&out.q_z2, &DiagGaussian::isotropic(svector.to_vec(), cfg.sigma2_z2))?;
    let prior = -gaussian::log_prior_mu2(svector)? / n_i as f64;
    Ok((kl1, kl2, prior))
}

/// Negative variational lower bound of the baseline model on one segment
/// (single-sample estimate of both expectations).
pub fn fhvae_loss(out: &LatentOutputs, segment: &Segment, svector: &[f64], n_i: usize, cfg: &ModelConfig) -> Result<LossBreakdown> {
    if out.prediction.is_some() {
        return Err(Error::VariantMismatch("baseline loss applied to outputs with a prediction decoder".into()));
    }
    let lv = out
        .recon_logvar
        .as_ref()
        .ok_or_else(|| Error::VariantMismatch("baseline loss needs a reconstruction log-variance".into()))?;
    ensure!(segment.frames.dim() == out.recon.dim(), "segment/recon shape mismatch");
    let mut logp = 0.0;
    for ((x, m), l) in segment.frames.iter().zip(out.recon.iter()).zip(lv.iter()) {
        logp += log_prob_term(*x, *m, *l);
    }
    let (kl1, kl2, prior) = prior_terms(out, svector, n_i, cfg)?;
    let mut b = LossBreakdown { recon: -logp, kl_z1: kl1, kl_z2: kl2, mu2_prior: prior, ..Default::default() };
    b.total = b.recompute_total(cfg.alpha_dis);
    Ok(b)
}

/// Squared-error reconstruction and prediction plus the shared KL/prior terms.
/// A segment without a future window contributes no prediction term and is
/// counted in `masked_targets`.
pub fn fhvae_apc_loss(out: &LatentOutputs, segment: &Segment, svector: &[f64], n_i: usize, cfg: &ModelConfig) -> Result<LossBreakdown> {
    let pred = out
        .prediction
        .as_ref()
        .ok_or_else(|| Error::VariantMismatch("prediction loss applied to outputs without a prediction decoder".into()))?;
    ensure!(segment.frames.dim() == out.recon.dim(), "segment/recon shape mismatch");
    let recon: f64 = segment.frames.iter().zip(out.recon.iter()).map(|(x, r)| (r - x).powi(2)).sum();
    let (prediction, masked) = match &segment.future_frames {
        Some(fut) => (fut.iter().zip(pred.iter()).map(|(x, y)| (y - x).powi(2)).sum(), 0),
        None => (0.0, 1),
    };
    let (kl1, kl2, prior) = prior_terms(out, svector, n_i, cfg)?;
    let mut b = LossBreakdown { recon, prediction, kl_z1: kl1, kl_z2: kl2, mu2_prior: prior, masked_targets: masked, ..Default::default() };
    b.total = b.recompute_total(cfg.alpha_dis);
    Ok(b)
}

fn disc_logits(mean: &[f64], table: &Array2<f64>, sigma2: f64) -> Vec<f64> {
    table
        .rows()
        .into_iter()
        .map(|row| -row.iter().zip(mean).map(|(m, q)| (q - m).powi(2)).sum::<f64>() / (2.0 * sigma2))
        .collect()
}

fn softmax(logits: &[f64]) -> (Vec<f64>, f64) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let lse = mx + z.ln();
    (logits.iter().map(|l| (l - lse).exp()).collect(), lse)
}

/// `-log softmax_j(-|mean - mu2_j|^2 / (2 sigma2))` at this sequence's row.
/// Unweighted; the trainer multiplies by `alpha_dis`.
pub fn discriminative_loss(q_z2: &DiagGaussian, sequence_id: &str, table: &SVectorTable, cfg: &ModelConfig) -> Result<f64> {
    let row = table.row_of(sequence_id)?;
    ensure!(q_z2.dim() == table.dim(), "posterior dim {} vs table dim {}", q_z2.dim(), table.dim());
    let logits = disc_logits(&q_z2.mean, &table.vectors, cfg.sigma2_z2);
    let (_, lse) = softmax(&logits);
    Ok(lse - logits[row])
}

/// Sums of a batch's loss terms and the gradients of their batch mean.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Per-term sums over the batch.
    pub sum: LossBreakdown,
    pub per_segment: Vec<LossBreakdown>,
    pub grads: OutputGrads,
    /// Gradient w.r.t. each segment's s-vector row (prior and KL terms).
    pub d_svector: Array2<f64>,
    /// Gradient w.r.t. the whole table from the discriminative term.
    pub d_table: Option<Array2<f64>>,
}

/// Everything the batched objective reads besides the model outputs.
pub struct BatchTargets<'a> {
    /// Time-major inputs.
    pub xs: &'a [Array2<f64>],
    /// Time-major future windows; rows without a target are ignored.
    pub future: Option<&'a [Array2<f64>]>,
    pub has_target: &'a [bool],
    /// Per-segment s-vector rows, `B x d2`.
    pub svectors: &'a Array2<f64>,
    pub segment_counts: &'a [usize],
    /// Table and each segment's row, for the discriminative term.
    pub disc: Option<(&'a Array2<f64>, &'a [usize])>,
}

/// Batched objective `scale * sum_b total_b` with analytic gradients; `scale`
/// is `1/B` of the full minibatch when this batch is one chunk of it.
pub fn batch_objective(cfg: &ModelConfig, outs: &BatchOutputs, t: &BatchTargets<'_>, scale: f64) -> BatchLoss {
    let batch = outs.batch_size();
    let apc = cfg.variant.has_prediction();
    let mut grads = OutputGrads::zeros_like(outs);
    let mut per = vec![LossBreakdown::default(); batch];
    let lp_z2 = cfg.sigma2_z2.ln();

    // reconstruction
    for (step, x) in t.xs.iter().enumerate() {
        let r = &outs.recon[step];
        for b in 0..batch {
            for j in 0..x.ncols() {
                let (xv, rv) = (x[[b, j]], r[[b, j]]);
                if apc {
                    per[b].recon += (rv - xv).powi(2);
                    grads.recon[step][[b, j]] = 2.0 * (rv - xv) * scale;
                } else {
                    let lv = outs.recon_logvar.as_ref().unwrap()[step][[b, j]];
                    per[b].recon -= log_prob_term(xv, rv, lv);
                    let [_, dm, dl] = log_prob_term_grad(xv, rv, lv);
                    grads.recon[step][[b, j]] = -dm * scale;
                    grads.recon_logvar.as_mut().unwrap()[step][[b, j]] = -dl * scale;
                }
            }
        }
    }

    // prediction
    if let (Some(pred), Some(dp)) = (&outs.prediction, grads.prediction.as_mut()) {
        for b in 0..batch {
            if !t.has_target[b] {
                per[b].masked_targets = 1;
            }
        }
        if let Some(future) = t.future {
            for (step, fut) in future.iter().enumerate() {
                for b in (0..batch).filter(|&b| t.has_target[b]) {
                    for j in 0..fut.ncols() {
                        let d = pred[step][[b, j]] - fut[[b, j]];
                        per[b].prediction += d * d;
                        dp[step][[b, j]] = 2.0 * d * scale;
                    }
                }
            }
        }
    }

    // KL terms and the s-vector hyperprior
    let mut d_svector = Array2::zeros(outs.mu2.raw_dim());
    for b in 0..batch {
        for k in 0..outs.mu1.ncols() {
            let (m, l) = (outs.mu1[[b, k]], outs.lv1[[b, k]]);
            per[b].kl_z1 += kl_term(m, l, 0.0, 0.0);
            let [dm, dl, _, _] = kl_term_grad(m, l, 0.0, 0.0);
            grads.mu1[[b, k]] += dm * scale;
            grads.lv1[[b, k]] += dl * scale;
        }
        let n_i = t.segment_counts[b] as f64;
        for k in 0..outs.mu2.ncols() {
            let (m, l, s) = (outs.mu2[[b, k]], outs.lv2[[b, k]], t.svectors[[b, k]]);
            per[b].kl_z2 += kl_term(m, l, s, lp_z2);
            let [dm, dl, ds, _] = kl_term_grad(m, l, s, lp_z2);
            grads.mu2[[b, k]] += dm * scale;
            grads.lv2[[b, k]] += dl * scale;
            per[b].mu2_prior -= log_prob_term(s, 0.0, 0.0) / n_i;
            // d/ds of -(1/N) log N(s; 0, 1) is s / N
            d_svector[[b, k]] = (ds + s / n_i) * scale;
        }
    }

    // discriminative term over the whole table
    let d_table = t.disc.filter(|_| cfg.alpha_dis > 0.0).map(|(table, rows)| {
        let mut dt = Array2::<f64>::zeros(table.raw_dim());
        let w = cfg.alpha_dis * scale;
        for b in 0..batch {
            let mean: Vec<f64> = outs.mu2.row(b).to_vec();
            let logits = disc_logits(&mean, table, cfg.sigma2_z2);
            let (p, lse) = softmax(&logits);
            per[b].discriminative = lse - logits[rows[b]];
            for (j, row) in table.rows().into_iter().enumerate() {
                let coeff = p[j] - f64::from(u8::from(j == rows[b]));
                for k in 0..mean.len() {
                    let diff = (mean[k] - row[k]) / cfg.sigma2_z2;
                    grads.mu2[[b, k]] -= w * coeff * diff;
                    dt[[j, k]] += w * coeff * diff;
                }
            }
        }
        dt
    });

    let mut sum = LossBreakdown::default();
    for p in per.iter_mut() {
        p.total = p.recompute_total(cfg.alpha_dis);
        sum.accumulate(p);
    }
    BatchLoss { sum, per_segment: per, grads, d_svector, d_table }
}

/// The `1/N_i`-weighted hyperprior term and its gradient, `((1/N) log p(mu2), -mu2/N)`.
pub fn scaled_log_prior(mu2: &[f64], n_i: usize) -> Result<(f64, Array1<f64>)> {
    ensure!(n_i >= 1, "segment count must be >= 1");
    let n = n_i as f64;
    let v = gaussian::log_prior_mu2(mu2)? / n;
    Ok((v, gaussian::log_prior_mu2_grad(mu2).into_iter().map(|g| g / n).collect()))
}

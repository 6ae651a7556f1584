use ndarray::Array2;

use super::*;
use crate::error::Error;
use crate::features::{Segment, SegmentParams, SequenceRecord};
use crate::gaussian::{DiagGaussian, LN_2PI};
use crate::model::{BatchNoise, GaussianNoise, LatentOutputs, ModelConfig, NoiseSource, SeqVae, Variant};

const LP_ZERO_32: f64 = 16.0 * LN_2PI;

fn ideal_outputs(x: &Array2<f64>, future: Option<&Array2<f64>>, d1: usize, d2: usize, sigma2: f64, apc: bool) -> LatentOutputs {
    LatentOutputs {
        q_z2: DiagGaussian::isotropic(vec![0.0; d2], sigma2),
        q_z1: DiagGaussian::standard(d1),
        z2_sample: vec![0.0; d2],
        z1_sample: vec![0.0; d1],
        recon: x.clone(),
        recon_logvar: (!apc).then(|| Array2::zeros(x.raw_dim())),
        prediction: apc.then(|| future.cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()))),
    }
}

fn seg(x: Array2<f64>, future: Option<Array2<f64>>) -> Segment {
    Segment { sequence_id: "a".into(), segment_index: 0, start_frame: 0, frames: x, future_frames: future }
}

fn cfg32() -> ModelConfig {
    ModelConfig { latent_dim_z1: 32, latent_dim_z2: 32, ..Default::default() }
}

#[test]
fn apc_degenerate_total_is_prior_only() {
    let x = GaussianNoise::seeded(1).standard_normal(20, 200);
    let fut = GaussianNoise::seeded(2).standard_normal(20, 200);
    let out = ideal_outputs(&x, Some(&fut), 32, 32, 0.25, true);
    let s = seg(x, Some(fut));
    let b = fhvae_apc_loss(&out, &s, &[0.0; 32], 10, &cfg32()).unwrap();
    assert_eq!((b.recon, b.prediction, b.kl_z1, b.kl_z2), (0.0, 0.0, 0.0, 0.0));
    assert!((b.total - 2.9406).abs() < 1e-4);
    assert!((b.total - LP_ZERO_32 / 10.0).abs() < 1e-12);
    b.assert_consistent(10.0);

    let mut off = out.clone();
    off.recon[[3, 7]] += 1.0;
    let b2 = fhvae_apc_loss(&off, &s, &[0.0; 32], 10, &cfg32()).unwrap();
    assert!((b2.total - (1.0 + LP_ZERO_32 / 10.0)).abs() < 1e-12);
}

#[test]
fn apc_masks_missing_target() {
    let x = GaussianNoise::seeded(3).standard_normal(20, 200);
    let mut out = ideal_outputs(&x, None, 32, 32, 0.25, true);
    out.prediction.as_mut().unwrap().fill(5.0);
    let b = fhvae_apc_loss(&out, &seg(x, None), &[0.0; 32], 10, &cfg32()).unwrap();
    assert_eq!(b.prediction, 0.0);
    assert_eq!(b.masked_targets, 1);
}

#[test]
fn baseline_matched_priors_and_prior_term() {
    let x = GaussianNoise::seeded(4).standard_normal(20, 200);
    let out = ideal_outputs(&x, None, 32, 32, 0.25, false);
    let cfg = ModelConfig { variant: Variant::Fhvae, ..cfg32() };
    let b = fhvae_loss(&out, &seg(x, None), &[0.0; 32], 10, &cfg).unwrap();
    assert_eq!((b.kl_z1, b.kl_z2), (0.0, 0.0));
    assert!((b.mu2_prior - 2.9406).abs() < 1e-4);
    // x = mean, unit variance: -log p = 0.5 ln 2pi per entry
    assert!((b.recon - 0.5 * LN_2PI * 4000.0).abs() < 1e-8);
}

#[test]
fn variant_mismatch_errors() {
    let x = GaussianNoise::seeded(5).standard_normal(4, 3);
    let apc = ideal_outputs(&x, None, 2, 2, 0.25, true);
    let base = ideal_outputs(&x, None, 2, 2, 0.25, false);
    let cfg = ModelConfig { latent_dim_z1: 2, latent_dim_z2: 2, ..Default::default() };
    assert!(matches!(fhvae_loss(&apc, &seg(x.clone(), None), &[0.0; 2], 1, &cfg), Err(Error::VariantMismatch(_))));
    assert!(matches!(fhvae_apc_loss(&base, &seg(x, None), &[0.0; 2], 1, &cfg), Err(Error::VariantMismatch(_))));
}

/// Independent scalar re-derivation of every term on a 2-dim toy.
#[test]
fn toy_totals_match_hand_computation() {
    let x = Array2::from_shape_vec((2, 2), vec![0.5, -1.0, 0.25, 2.0]).unwrap();
    let fut = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -0.5, 0.5]).unwrap();
    let recon = Array2::from_shape_vec((2, 2), vec![0.4, -0.8, 0.0, 1.5]).unwrap();
    let rlv = Array2::from_shape_vec((2, 2), vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    let pred = Array2::from_shape_vec((2, 2), vec![0.9, 0.2, -0.5, 1.0]).unwrap();
    let q1 = DiagGaussian::new(vec![0.3, -0.4], vec![-0.5, 0.2]).unwrap();
    let q2 = DiagGaussian::new(vec![0.8, 0.1], vec![-1.0, -1.5]).unwrap();
    let sv = [0.6, -0.2];
    let (n_i, s2) = (4usize, 0.25f64);

    let kl1: f64 = (0..2).map(|j| 0.5 * (q1.logvar[j].exp() + q1.mean[j].powi(2) - 1.0 - q1.logvar[j])).sum();
    let kl2: f64 = (0..2)
        .map(|j| 0.5 * (q2.logvar[j].exp() / s2 + (q2.mean[j] - sv[j]).powi(2) / s2 - 1.0 + s2.ln() - q2.logvar[j]))
        .sum();
    let prior = (LN_2PI + 0.5 * (sv[0] * sv[0] + sv[1] * sv[1])) / n_i as f64;
    let mut nll = 0.0;
    let mut sq = 0.0;
    let mut psq = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let (xv, m, l): (f64, f64, f64) = (x[[i, j]], recon[[i, j]], rlv[[i, j]]);
            nll += 0.5 * ((2.0 * std::f64::consts::PI).ln() + l + (xv - m).powi(2) / l.exp());
            sq += (m - xv).powi(2);
            psq += (pred[[i, j]] - fut[[i, j]] as f64).powi(2);
        }
    }
    let cfg = ModelConfig { latent_dim_z1: 2, latent_dim_z2: 2, feature_dim: 2, segment_len: 2, ..Default::default() };

    let base_out = LatentOutputs {
        q_z2: q2.clone(),
        q_z1: q1.clone(),
        z2_sample: vec![0.0; 2],
        z1_sample: vec![0.0; 2],
        recon: recon.clone(),
        recon_logvar: Some(rlv),
        prediction: None,
    };
    let b = fhvae_loss(&base_out, &seg(x.clone(), Some(fut.clone())), &sv, n_i, &ModelConfig { variant: Variant::Fhvae, ..cfg.clone() }).unwrap();
    assert!((b.total - (nll + kl1 + kl2 + prior)).abs() < 1e-12);

    let apc_out = LatentOutputs { recon_logvar: None, prediction: Some(pred), ..base_out };
    let a = fhvae_apc_loss(&apc_out, &seg(x, Some(fut)), &sv, n_i, &cfg).unwrap();
    assert!((a.total - (sq + psq + kl1 + kl2 + prior)).abs() < 1e-12);

    // the two objectives share their KL and prior terms exactly
    assert!((a.kl_z1 - b.kl_z1).abs() < 1e-10);
    assert!((a.kl_z2 - b.kl_z2).abs() < 1e-10);
    assert!((a.mu2_prior - b.mu2_prior).abs() < 1e-10);
}

#[test]
fn prior_gradient_identity() {
    let mut rng = GaussianNoise::seeded(6);
    for n in [1usize, 3, 10, 77] {
        let mu: Vec<f64> = rng.standard_normal(1, 32).iter().copied().collect();
        let (_, g) = scaled_log_prior(&mu, n).unwrap();
        for (gi, m) in g.iter().zip(&mu) {
            assert_eq!(*gi, -m / n as f64);
        }
    }
}

fn table(vectors: Vec<Vec<f64>>) -> SVectorTable {
    let entries: Vec<(String, usize)> = (0..vectors.len()).map(|i| (format!("s{i}"), 5)).collect();
    let d = vectors[0].len();
    let mut t = SVectorTable::new(&entries, d).unwrap();
    for (i, v) in vectors.iter().enumerate() {
        t.vectors.row_mut(i).assign(&ndarray::ArrayView1::from(v));
    }
    t
}

#[test]
fn discriminative_examples() {
    let cfg = ModelConfig::default();
    let q = DiagGaussian::new(vec![0.3, -0.2], vec![0.0, 0.0]).unwrap();
    let single = table(vec![vec![5.0, 5.0]]);
    assert!(discriminative_loss(&q, "s0", &single, &cfg).unwrap().abs() < 1e-15);

    let t = table(vec![vec![0.3, -0.2], vec![3.0, 1.0], vec![-2.0, 2.0], vec![1.5, -3.0]]);
    let l = discriminative_loss(&q, "s0", &t, &cfg).unwrap();
    let logits: Vec<f64> = t
        .vectors
        .rows()
        .into_iter()
        .map(|r| -((0.3 - r[0]).powi(2) + (-0.2 - r[1]).powi(2)) / (2.0 * 0.25))
        .collect();
    let want = -(logits[0].exp() / logits.iter().map(|v| v.exp()).sum::<f64>()).ln();
    assert!((l - want).abs() < 1e-12);
    assert!(l < (4f64).ln());
    assert!(matches!(discriminative_loss(&q, "nope", &t, &cfg), Err(Error::Lookup(_))));
}

fn tiny(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig { variant, feature_dim: 6, segment_len: 5, latent_dim_z1: 3, latent_dim_z2: 3, hidden_units: 8, m: 3, seed, ..Default::default() }
}

fn tiny_set(seed: u64, n_seq: usize, frames: usize) -> SegmentSet {
    let mut rng = GaussianNoise::seeded(seed);
    let recs: Vec<SequenceRecord> = (0..n_seq)
        .map(|i| {
            let f = rng.standard_normal(frames, 6).mapv(|v| v as f32);
            SequenceRecord::new(format!("q{i}"), format!("p{}", i % 2), f, 100.0).unwrap()
        })
        .collect();
    SegmentSet::from_records(&recs, &SegmentParams { len: 5, shift: 5, m: 3 }).unwrap()
}

/// Batched objective agrees with the single-segment reference losses.
#[test]
fn batch_objective_matches_reference_losses() {
    for v in Variant::ALL {
        let cfg = tiny(v, 1);
        let m = SeqVae::new(cfg.clone()).unwrap();
        let set = tiny_set(2, 3, 17);
        let mut svecs = GaussianNoise::seeded(3).standard_normal(3, 3);
        svecs *= 0.5;
        let idx: Vec<usize> = (0..set.len()).collect();
        let noise = BatchNoise::draw(&mut GaussianNoise::seeded(4), idx.len(), &cfg);
        let r = minibatch(&m, &svecs, &set, &idx, &noise, true, false);
        let t = SVectorTable::from_parts(set.sequence_ids.clone(), set.counts.clone(), svecs.clone()).unwrap();
        for (b, &i) in idx.iter().enumerate() {
            let s = &set.segments[i];
            let row = set.owner[i];
            let sv = svecs.row(row).to_vec();
            let mut src = FixedNoise(vec![noise.z2.row(b).to_vec(), noise.z1.row(b).to_vec()]);
            let out = m.forward(s, &sv, &mut src).unwrap();
            let mut want = if v.has_prediction() {
                fhvae_apc_loss(&out, s, &sv, set.counts[row], &cfg).unwrap()
            } else {
                fhvae_loss(&out, s, &sv, set.counts[row], &cfg).unwrap()
            };
            want.discriminative = discriminative_loss(&out.q_z2, &s.sequence_id, &t, &cfg).unwrap();
            want.total = want.recompute_total(cfg.alpha_dis);
            let got = r.per_segment[b];
            assert!((got.total - want.total).abs() < 1e-9 * want.total.abs().max(1.0), "{v}: {got:?} vs {want:?}");
            assert_eq!(got.masked_targets, want.masked_targets);
        }
    }
}

struct FixedNoise(Vec<Vec<f64>>);

impl NoiseSource for FixedNoise {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let v = self.0.remove(0);
        Array2::from_shape_vec((rows, cols), v).unwrap()
    }
}

#[test]
fn gradients_match_finite_differences() {
    for v in Variant::ALL {
        let cfg = tiny(v, 11);
        let mut m = SeqVae::new(cfg.clone()).unwrap();
        let set = tiny_set(12, 3, 17);
        let mut svecs = GaussianNoise::seeded(13).standard_normal(3, 3);
        svecs *= 0.5;
        let idx: Vec<usize> = (0..set.len()).collect();
        let noise = BatchNoise::draw(&mut GaussianNoise::seeded(14), idx.len(), &cfg);
        let rep = check_gradients(&mut m, &mut svecs, &set, &idx, &noise, 1e-4, 1e-5);
        assert_eq!(rep.checked, cfg.parameter_count() + 9);
        assert!(rep.max_rel_err < 1e-4, "{v}: {rep:?}");
    }
}

#[test]
fn infer_svector_uses_encoder_means() {
    let cfg = tiny(Variant::ApcEnc1Dec1, 2);
    let m = SeqVae::new(cfg).unwrap();
    let set = tiny_set(1, 1, 25);
    let est = infer_svector(&m, &set.segments).unwrap();
    let means: Vec<Vec<f64>> = set.segments.iter().map(|s| m.encode_z2(&s.frames).unwrap().mean).collect();
    let want = svector_from_means(&means, 0.25).unwrap();
    for (a, b) in est.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(infer_svector(&m, &[]).is_err());
}

fn small_state(v: Variant, seed: u64, set: &SegmentSet) -> TrainState {
    let tc = TrainConfig { batch_size: 8, learning_rate: 3e-3, ..Default::default() };
    TrainState::new(tiny(v, seed), tc, set, seed).unwrap()
}

#[test]
fn training_reduces_objective_and_moves_svectors() {
    let set = tiny_set(21, 6, 30);
    let mut st = small_state(Variant::ApcEnc1Dec1, 0, &set);
    let before = st.train_objective(&set).unwrap();
    let opts = RunOptions { out_dir: None, epoch_limit: Some(5) };
    let summary = train(&mut st, &set, None, &opts).unwrap();
    assert_eq!(summary.epochs, 5);
    let after = st.train_objective(&set).unwrap();
    assert!(after.total < before.total, "{} !< {}", after.total, before.total);
    for row in st.table.vectors.rows() {
        assert!(row.iter().map(|v| v * v).sum::<f64>() > 0.0);
    }
}

#[test]
fn resume_is_bitwise() {
    let set = tiny_set(31, 5, 30);
    let dev = tiny_set(32, 2, 30);
    let dir = tempfile::tempdir().unwrap();
    let mut full = small_state(Variant::ApcEnc2Dec1, 3, &set);
    train(&mut full, &set, Some(&dev), &RunOptions { out_dir: None, epoch_limit: Some(4) }).unwrap();

    let mut part = small_state(Variant::ApcEnc2Dec1, 3, &set);
    let opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), epoch_limit: Some(2) };
    train(&mut part, &set, Some(&dev), &opts).unwrap();
    let mut resumed = TrainState::load(dir.path().join("last.dsvc")).unwrap();
    assert_eq!(resumed, part);
    train(&mut resumed, &set, Some(&dev), &RunOptions { out_dir: Some(dir.path().to_path_buf()), epoch_limit: Some(4) }).unwrap();
    assert_eq!(resumed, full);

    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let recs: Vec<EpochRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 10);
    for r in &recs {
        r.loss.assert_consistent(10.0);
    }
    assert!(dir.path().join("best.dsvc").exists());
}

#[test]
fn early_stopping_respects_patience() {
    let set = tiny_set(41, 4, 20);
    let dev = tiny_set(42, 2, 20);
    let mut st = small_state(Variant::Fhvae, 1, &set);
    st.config.patience = 1;
    st.config.learning_rate = 0.5;
    let s = train(&mut st, &set, Some(&dev), &RunOptions { out_dir: None, epoch_limit: Some(60) }).unwrap();
    assert!(s.stopped_early);
    assert!(s.epochs < 60);
}

#[test]
fn divergence_writes_dump() {
    let set = tiny_set(51, 3, 20);
    let mut st = small_state(Variant::ApcEnc1Dec1, 1, &set);
    st.model.recon_head.b[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&mut st, &set, None, &RunOptions { out_dir: Some(dir.path().to_path_buf()), epoch_limit: Some(1) });
    match err {
        Err(Error::Divergence { dump, epoch, .. }) => {
            assert_eq!(epoch, 1);
            let text = std::fs::read_to_string(dump).unwrap();
            assert!(text.contains("q0"));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn alpha_zero_disables_discriminative_term() {
    let set = tiny_set(61, 3, 20);
    let mut cfg = tiny(Variant::ApcEnc1Dec1, 1);
    cfg.alpha_dis = 0.0;
    let m = SeqVae::new(cfg.clone()).unwrap();
    let svecs = GaussianNoise::seeded(3).standard_normal(3, 3);
    let idx: Vec<usize> = (0..set.len()).collect();
    let noise = BatchNoise::draw(&mut GaussianNoise::seeded(4), idx.len(), &cfg);
    let r = minibatch(&m, &svecs, &set, &idx, &noise, true, false);
    let s = r.sum;
    assert!((s.total - (s.recon + s.prediction + s.kl_z1 + s.kl_z2 + s.mu2_prior)).abs() < 1e-9);
}


//! Inference model (z2 encoder, z1 encoder conditioned on z2) and generative
//! model (reconstruction decoder plus optional prediction decoder).

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{ModelConfig, Variant};
use super::layers::{split_cols, stack_steps, unstack_steps, Linear, LstmCache, LstmInput, LstmStack};
use crate::error::{ensure, Error, Result};
use crate::features::Segment;
use crate::gaussian::DiagGaussian;

/// Standard-normal noise for the reparameterized samples.
pub trait NoiseSource {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Array2<f64>;
}

/// Always zero: latents collapse to posterior means.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::zeros((rows, cols))
    }
}

#[derive(Debug, Clone)]
pub struct GaussianNoise(pub ChaCha8Rng);

impl GaussianNoise {
    pub fn seeded(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl NoiseSource for GaussianNoise {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut self.0))
    }
}

/// Noise used by one batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub z2: Array2<f64>,
    pub z1: Array2<f64>,
}

impl BatchNoise {
    pub fn draw(src: &mut dyn NoiseSource, batch: usize, cfg: &ModelConfig) -> Self {
        let z2 = src.standard_normal(batch, cfg.latent_dim_z2);
        let z1 = src.standard_normal(batch, cfg.latent_dim_z1);
        Self { z2, z1 }
    }
}

/// Batched model outputs; per-step matrices are time-major (`L` entries of `B x F`).
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    pub mu2: Array2<f64>,
    pub lv2: Array2<f64>,
    pub z2: Array2<f64>,
    pub mu1: Array2<f64>,
    pub lv1: Array2<f64>,
    pub z1: Array2<f64>,
    pub recon: Vec<Array2<f64>>,
    pub recon_logvar: Option<Vec<Array2<f64>>>,
    pub prediction: Option<Vec<Array2<f64>>>,
}

impl BatchOutputs {
    pub fn batch_size(&self) -> usize {
        self.mu2.nrows()
    }

    /// Extracts segment `b` as a [`LatentOutputs`].
    pub fn segment(&self, b: usize) -> LatentOutputs {
        let row = |m: &Array2<f64>| m.row(b).to_vec();
        let steps = |ms: &Vec<Array2<f64>>| {
            let f = ms[0].ncols();
            Array2::from_shape_fn((ms.len(), f), |(t, j)| ms[t][[b, j]])
        };
        LatentOutputs {
            q_z2: DiagGaussian { mean: row(&self.mu2), logvar: row(&self.lv2) },
            q_z1: DiagGaussian { mean: row(&self.mu1), logvar: row(&self.lv1) },
            z2_sample: row(&self.z2),
            z1_sample: row(&self.z1),
            recon: steps(&self.recon),
            recon_logvar: self.recon_logvar.as_ref().map(steps),
            prediction: self.prediction.as_ref().map(steps),
        }
    }
}

/// One segment's posteriors, samples and decoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentOutputs {
    pub q_z2: DiagGaussian,
    pub q_z1: DiagGaussian,
    pub z2_sample: Vec<f64>,
    pub z1_sample: Vec<f64>,
    pub recon: Array2<f64>,
    pub recon_logvar: Option<Array2<f64>>,
    pub prediction: Option<Array2<f64>>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    noise: BatchNoise,
    z2_enc: Vec<LstmCache>,
    z1_enc: Vec<LstmCache>,
    recon: Vec<LstmCache>,
    pred: Option<Vec<LstmCache>>,
}

/// Loss gradients with respect to every model output.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub mu2: Array2<f64>,
    pub lv2: Array2<f64>,
    pub mu1: Array2<f64>,
    pub lv1: Array2<f64>,
    pub recon: Vec<Array2<f64>>,
    pub recon_logvar: Option<Vec<Array2<f64>>>,
    pub prediction: Option<Vec<Array2<f64>>>,
}

impl OutputGrads {
    pub fn zeros_like(out: &BatchOutputs) -> Self {
        let z = |m: &Array2<f64>| Array2::zeros(m.raw_dim());
        let zs = |ms: &Vec<Array2<f64>>| ms.iter().map(z).collect::<Vec<_>>();
        Self {
            mu2: z(&out.mu2),
            lv2: z(&out.lv2),
            mu1: z(&out.mu1),
            lv1: z(&out.lv1),
            recon: zs(&out.recon),
            recon_logvar: out.recon_logvar.as_ref().map(zs),
            prediction: out.prediction.as_ref().map(zs),
        }
    }
}

/// The full set of weights. A second instance of the same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqVae {
    pub config: ModelConfig,
    pub z2_encoder: LstmStack,
    pub z2_head: Linear,
    pub z1_encoder: LstmStack,
    pub z1_head: Linear,
    pub recon_decoder: LstmStack,
    pub recon_head: Linear,
    pub pred_decoder: Option<LstmStack>,
    pub pred_head: Option<Linear>,
}

/// Stacks `B` segments (`L x F` each) into `L` time-major `B x F` matrices.
pub fn time_major(segments: &[&Array2<f64>]) -> Vec<Array2<f64>> {
    let l = segments[0].nrows();
    let f = segments[0].ncols();
    (0..l).map(|t| Array2::from_shape_fn((segments.len(), f), |(b, j)| segments[b][[t, j]])).collect()
}

impl SeqVae {
    /// Seeded uniform(+-1/sqrt(fan_in)) initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (f, h, d1, d2) = (config.feature_dim, config.hidden_units, config.latent_dim_z1, config.latent_dim_z2);
        let v = config.variant;
        let z2_encoder = LstmStack::new(&mut rng, f, h, 1);
        let z2_head = Linear::new(&mut rng, h, 2 * d2);
        let z1_encoder = LstmStack::new(&mut rng, f + d2, h, v.z1_encoder_layers());
        let z1_head = Linear::new(&mut rng, h, 2 * d1);
        let recon_decoder = LstmStack::new(&mut rng, d1 + d2, h, 1);
        let recon_head = Linear::new(&mut rng, h, if v.has_prediction() { f } else { 2 * f });
        let (pred_decoder, pred_head) = match v.prediction_decoder_layers() {
            Some(depth) => (Some(LstmStack::new(&mut rng, d1 + d2, h, depth)), Some(Linear::new(&mut rng, h, f))),
            None => (None, None),
        };
        Ok(Self { config, z2_encoder, z2_head, z1_encoder, z1_head, recon_decoder, recon_head, pred_decoder, pred_head })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            z2_encoder: self.z2_encoder.zeros_like(),
            z2_head: self.z2_head.zeros_like(),
            z1_encoder: self.z1_encoder.zeros_like(),
            z1_head: self.z1_head.zeros_like(),
            recon_decoder: self.recon_decoder.zeros_like(),
            recon_head: self.recon_head.zeros_like(),
            pred_decoder: self.pred_decoder.as_ref().map(LstmStack::zeros_like),
            pred_head: self.pred_head.as_ref().map(Linear::zeros_like),
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, d, _)| d.len()).sum()
    }

    /// `(name, values, shape)` for every weight tensor, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        type Named<'a> = Vec<(String, &'a [f64], Vec<usize>)>;
        fn stack<'a>(prefix: &str, s: &'a LstmStack, out: &mut Named<'a>) {
            for (k, l) in s.layers.iter().enumerate() {
                for (n, d, sh) in l.tensors() {
                    out.push((format!("{prefix}.lstm{k}.{n}"), d, sh));
                }
            }
        }
        fn lin<'a>(prefix: &str, l: &'a Linear, out: &mut Named<'a>) {
            for (n, d, sh) in l.tensors() {
                out.push((format!("{prefix}.{n}"), d, sh));
            }
        }
        let mut out = Vec::new();
        stack("z2_encoder", &self.z2_encoder, &mut out);
        lin("z2_head", &self.z2_head, &mut out);
        stack("z1_encoder", &self.z1_encoder, &mut out);
        lin("z1_head", &self.z1_head, &mut out);
        stack("recon_decoder", &self.recon_decoder, &mut out);
        lin("recon_head", &self.recon_head, &mut out);
        if let (Some(d), Some(h)) = (&self.pred_decoder, &self.pred_head) {
            stack("pred_decoder", d, &mut out);
            lin("pred_head", h, &mut out);
        }
        out
    }

    /// Mutable views in the same order as [`named_tensors`](Self::named_tensors).
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn stack<'a>(s: &'a mut LstmStack, out: &mut Vec<&'a mut [f64]>) {
            for l in &mut s.layers {
                out.extend(l.slices_mut());
            }
        }
        stack(&mut self.z2_encoder, &mut out);
        out.extend(self.z2_head.slices_mut());
        stack(&mut self.z1_encoder, &mut out);
        out.extend(self.z1_head.slices_mut());
        stack(&mut self.recon_decoder, &mut out);
        out.extend(self.recon_head.slices_mut());
        if let (Some(d), Some(h)) = (&mut self.pred_decoder, &mut self.pred_head) {
            stack(d, &mut out);
            out.extend(h.slices_mut());
        }
        out
    }

    fn check_frames(&self, frames: &Array2<f64>) -> Result<()> {
        let want = (self.config.segment_len, self.config.feature_dim);
        ensure!(frames.dim() == want, "segment shape {:?}, model expects {:?}", frames.dim(), want);
        Ok(())
    }

    fn check_latents(&self, z1: &[f64], z2: &[f64]) -> Result<()> {
        ensure!(z1.len() == self.config.latent_dim_z1, "z1 has {} dims, model expects {}", z1.len(), self.config.latent_dim_z1);
        ensure!(z2.len() == self.config.latent_dim_z2, "z2 has {} dims, model expects {}", z2.len(), self.config.latent_dim_z2);
        Ok(())
    }

    fn run_z2(&self, xs: &[Array2<f64>]) -> (Vec<LstmCache>, Array2<f64>, Array2<f64>) {
        let caches = self.z2_encoder.forward(xs.to_vec());
        let out = self.z2_head.forward(caches.last().unwrap().last());
        let (mu, lv) = split_cols(&out, self.config.latent_dim_z2);
        (caches, mu, lv)
    }

    fn run_z1(&self, xs: &[Array2<f64>], z2: &Array2<f64>) -> (Vec<LstmCache>, Array2<f64>, Array2<f64>) {
        let inputs = xs.iter().map(|x| concatenate![Axis(1), *x, *z2]).collect();
        let caches = self.z1_encoder.forward(inputs);
        let out = self.z1_head.forward(caches.last().unwrap().last());
        let (mu, lv) = split_cols(&out, self.config.latent_dim_z1);
        (caches, mu, lv)
    }

    fn run_decoder(&self, stack: &LstmStack, head: &Linear, z1: &Array2<f64>, z2: &Array2<f64>) -> (Vec<LstmCache>, Vec<Array2<f64>>) {
        let input = concatenate![Axis(1), *z1, *z2];
        let caches = stack.forward_input(LstmInput::Repeat(input, self.config.segment_len));
        let hs = stack_steps(caches.last().unwrap().outputs());
        let outs = unstack_steps(&head.forward(&hs), z1.nrows());
        (caches, outs)
    }

    /// Posterior means/log-variances of z2 and z1 for a batch, with z1 conditioned
    /// on `mu2` (zero noise). Returns `(mu2, lv2, mu1, lv1)`.
    pub fn encode_means(&self, xs: &[Array2<f64>]) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let (_, mu2, lv2) = self.run_z2(xs);
        let (_, mu1, lv1) = self.run_z1(xs, &mu2);
        (mu2, lv2, mu1, lv1)
    }

    /// Reconstruction-decoder means for a batch of latent pairs (time-major).
    pub fn decode_recon_batch(&self, z1: &Array2<f64>, z2: &Array2<f64>) -> Vec<Array2<f64>> {
        let f = self.config.feature_dim;
        let (_, outs) = self.run_decoder(&self.recon_decoder, &self.recon_head, z1, z2);
        if self.variant().has_prediction() {
            outs
        } else {
            outs.into_iter().map(|o| split_cols(&o, f).0).collect()
        }
    }

    /// Batched forward over time-major frames.
    pub fn forward_batch(&self, xs: &[Array2<f64>], noise: BatchNoise) -> (BatchOutputs, ForwardCache) {
        let f = self.config.feature_dim;
        let (z2_enc, mu2, lv2) = self.run_z2(xs);
        let z2 = &mu2 + &(lv2.mapv(|l| (0.5 * l).exp()) * &noise.z2);
        let (z1_enc, mu1, lv1) = self.run_z1(xs, &z2);
        let z1 = &mu1 + &(lv1.mapv(|l| (0.5 * l).exp()) * &noise.z1);
        let (recon_c, recon_out) = self.run_decoder(&self.recon_decoder, &self.recon_head, &z1, &z2);
        let (recon, recon_logvar) = if self.variant().has_prediction() {
            (recon_out, None)
        } else {
            let (m, l): (Vec<_>, Vec<_>) = recon_out.iter().map(|o| split_cols(o, f)).unzip();
            (m, Some(l))
        };
        let (pred_c, prediction) = match (&self.pred_decoder, &self.pred_head) {
            (Some(d), Some(h)) => {
                let (c, o) = self.run_decoder(d, h, &z1, &z2);
                (Some(c), Some(o))
            }
            _ => (None, None),
        };
        let outs = BatchOutputs { mu2, lv2, z2, mu1, lv1, z1, recon, recon_logvar, prediction };
        let cache = ForwardCache { noise, z2_enc, z1_enc, recon: recon_c, pred: pred_c };
        (outs, cache)
    }

    fn decoder_backward(
        &self,
        stack: &LstmStack,
        head: &Linear,
        caches: &[LstmCache],
        d_out: &[Array2<f64>],
        g_stack: &mut LstmStack,
        g_head: &mut Linear,
    ) -> Array2<f64> {
        let hs = stack_steps(caches.last().unwrap().outputs());
        let dh = head.backward(&hs, &stack_steps(d_out), g_head);
        let dhs = unstack_steps(&dh, d_out[0].nrows()).into_iter().map(Some).collect();
        let dxs = stack.backward(caches, dhs, g_stack);
        let mut acc = dxs[0].clone();
        for d in &dxs[1..] {
            acc += d;
        }
        acc
    }

    /// Backpropagates output gradients, returning parameter gradients.
    pub fn backward(&self, outs: &BatchOutputs, cache: &ForwardCache, grads: &OutputGrads) -> SeqVae {
        let mut g = self.zeros_like();
        let (d1, d2) = (self.config.latent_dim_z1, self.config.latent_dim_z2);
        let batch = outs.batch_size();
        let mut dz1 = Array2::<f64>::zeros((batch, d1));
        let mut dz2 = Array2::<f64>::zeros((batch, d2));

        let d_recon_out: Vec<Array2<f64>> = match &grads.recon_logvar {
            Some(dl) => grads.recon.iter().zip(dl).map(|(m, l)| concatenate![Axis(1), *m, *l]).collect(),
            None => grads.recon.clone(),
        };
        let d_in = self.decoder_backward(&self.recon_decoder, &self.recon_head, &cache.recon, &d_recon_out, &mut g.recon_decoder, &mut g.recon_head);
        let (a, b) = split_cols(&d_in, d1);
        dz1 += &a;
        dz2 += &b;

        if let (Some(stack), Some(head), Some(caches), Some(dp)) = (&self.pred_decoder, &self.pred_head, &cache.pred, &grads.prediction) {
            let (gs, gh) = (g.pred_decoder.as_mut().unwrap(), g.pred_head.as_mut().unwrap());
            let d_in = self.decoder_backward(stack, head, caches, dp, gs, gh);
            let (a, b) = split_cols(&d_in, d1);
            dz1 += &a;
            dz2 += &b;
        }

        // z1 = mu1 + exp(lv1 / 2) * eps1
        let d_mu1 = &grads.mu1 + &dz1;
        let d_lv1 = &grads.lv1 + &(&dz1 * &(outs.lv1.mapv(|l| 0.5 * (0.5 * l).exp()) * &cache.noise.z1));
        let dh = self.z1_head.backward(cache.z1_enc.last().unwrap().last(), &concatenate![Axis(1), d_mu1, d_lv1], &mut g.z1_head);
        let steps = self.config.segment_len;
        let mut dhs = vec![None; steps];
        dhs[steps - 1] = Some(dh);
        let dxs = self.z1_encoder.backward(&cache.z1_enc, dhs, &mut g.z1_encoder);
        let f = self.config.feature_dim;
        for dx in &dxs {
            dz2 += &split_cols(dx, f).1;
        }

        let d_mu2 = &grads.mu2 + &dz2;
        let d_lv2 = &grads.lv2 + &(&dz2 * &(outs.lv2.mapv(|l| 0.5 * (0.5 * l).exp()) * &cache.noise.z2));
        let dh = self.z2_head.backward(cache.z2_enc.last().unwrap().last(), &concatenate![Axis(1), d_mu2, d_lv2], &mut g.z2_head);
        let mut dhs = vec![None; steps];
        dhs[steps - 1] = Some(dh);
        self.z2_encoder.backward(&cache.z2_enc, dhs, &mut g.z2_encoder);
        g
    }

    // ---- single-segment operations ----

    pub fn encode_z2(&self, frames: &Array2<f64>) -> Result<DiagGaussian> {
        self.check_frames(frames)?;
        let (_, mu, lv) = self.run_z2(&time_major(&[frames]));
        Ok(DiagGaussian { mean: mu.row(0).to_vec(), logvar: lv.row(0).to_vec() })
    }

    pub fn encode_z1(&self, frames: &Array2<f64>, z2: &[f64]) -> Result<DiagGaussian> {
        self.check_frames(frames)?;
        ensure!(z2.len() == self.config.latent_dim_z2, "z2 has {} dims, model expects {}", z2.len(), self.config.latent_dim_z2);
        let z2 = Array2::from_shape_vec((1, z2.len()), z2.to_vec()).unwrap();
        let (_, mu, lv) = self.run_z1(&time_major(&[frames]), &z2);
        Ok(DiagGaussian { mean: mu.row(0).to_vec(), logvar: lv.row(0).to_vec() })
    }

    fn latent_rows(z1: &[f64], z2: &[f64]) -> (Array2<f64>, Array2<f64>) {
        (
            Array2::from_shape_vec((1, z1.len()), z1.to_vec()).unwrap(),
            Array2::from_shape_vec((1, z2.len()), z2.to_vec()).unwrap(),
        )
    }

    fn unbatch(steps: &[Array2<f64>]) -> Array2<f64> {
        Array2::from_shape_fn((steps.len(), steps[0].ncols()), |(t, j)| steps[t][[0, j]])
    }

    /// Reconstruction mean `L x F`, plus per-frame log-variance for the baseline.
    pub fn decode_recon(&self, z1: &[f64], z2: &[f64]) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        self.check_latents(z1, z2)?;
        let (a, b) = Self::latent_rows(z1, z2);
        let (_, outs) = self.run_decoder(&self.recon_decoder, &self.recon_head, &a, &b);
        let full = Self::unbatch(&outs);
        if self.variant().has_prediction() {
            Ok((full, None))
        } else {
            let (m, l) = split_cols(&full, self.config.feature_dim);
            Ok((m, Some(l)))
        }
    }

    pub fn decode_predict(&self, z1: &[f64], z2: &[f64]) -> Result<Array2<f64>> {
        let (Some(stack), Some(head)) = (&self.pred_decoder, &self.pred_head) else {
            return Err(Error::UnsupportedVariant(format!("{} has no prediction decoder", self.variant())));
        };
        self.check_latents(z1, z2)?;
        let (a, b) = Self::latent_rows(z1, z2);
        let (_, outs) = self.run_decoder(stack, head, &a, &b);
        Ok(Self::unbatch(&outs))
    }

    /// Full forward pass on one segment. `svector` only parameterizes the prior
    /// in the loss; it is shape-checked here and otherwise unused.
    pub fn forward(&self, segment: &Segment, svector: &[f64], noise: &mut dyn NoiseSource) -> Result<LatentOutputs> {
        self.check_frames(&segment.frames)?;
        ensure!(svector.len() == self.config.latent_dim_z2, "s-vector has {} dims, model expects {}", svector.len(), self.config.latent_dim_z2);
        let n = BatchNoise::draw(noise, 1, &self.config);
        let (outs, _) = self.forward_batch(&time_major(&[&segment.frames]), n);
        Ok(outs.segment(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig { variant, feature_dim: 6, segment_len: 5, latent_dim_z1: 3, latent_dim_z2: 3, hidden_units: 8, m: 1, seed: 4, ..Default::default() }
    }

    fn random_frames(seed: u64, l: usize, f: usize) -> Array2<f64> {
        GaussianNoise::seeded(seed).standard_normal(l, f)
    }

    fn seg(frames: Array2<f64>) -> Segment {
        Segment { sequence_id: "s".into(), segment_index: 0, start_frame: 0, frames, future_frames: None }
    }

    #[test]
    fn default_dims() {
        let m = SeqVae::new(ModelConfig { hidden_units: 16, ..Default::default() }).unwrap();
        let x = random_frames(1, 20, 200);
        let q2 = m.encode_z2(&x).unwrap();
        assert_eq!((q2.mean.len(), q2.logvar.len()), (32, 32));
        let q1 = m.encode_z1(&x, &q2.mean).unwrap();
        assert_eq!((q1.mean.len(), q1.logvar.len()), (32, 32));
        let (r, lv) = m.decode_recon(&q1.mean, &q2.mean).unwrap();
        assert_eq!(r.dim(), (20, 200));
        assert!(lv.is_none());
        assert_eq!(m.decode_predict(&q1.mean, &q2.mean).unwrap().dim(), (20, 200));
        let out = m.forward(&seg(x), &[0.0; 32], &mut ZeroNoise).unwrap();
        assert_eq!(out.q_z1.dim(), 32);
        assert_eq!(out.recon.dim(), (20, 200));
    }

    #[test]
    fn variant_table_by_shape() {
        for v in Variant::ALL {
            let m = SeqVae::new(tiny(v)).unwrap();
            let want = match v {
                Variant::Fhvae => (1, None),
                Variant::ApcEnc1Dec1 => (1, Some(1)),
                Variant::ApcEnc2Dec1 => (2, Some(1)),
                Variant::ApcEnc2Dec2 => (2, Some(2)),
            };
            assert_eq!((m.z1_encoder.depth(), m.pred_decoder.as_ref().map(|d| d.depth())), want);
            assert_eq!(m.recon_head.output_dim(), if v == Variant::Fhvae { 12 } else { 6 });
            assert_eq!(m.n_params(), m.config.parameter_count());
        }
        let p = |v| SeqVae::new(tiny(v)).unwrap();
        assert!(p(Variant::ApcEnc2Dec1).z1_encoder.n_params() > p(Variant::ApcEnc1Dec1).z1_encoder.n_params());
        assert!(p(Variant::ApcEnc2Dec2).pred_decoder.unwrap().n_params() > p(Variant::ApcEnc2Dec1).pred_decoder.unwrap().n_params());
    }

    #[test]
    fn parameter_count_regression() {
        // h=8, F=6, d=3: lstm(in) = 32*(in+8)+32
        let counts: Vec<usize> = Variant::ALL.iter().map(|&v| tiny(v).parameter_count()).collect();
        assert_eq!(counts, vec![1752, 2232, 2776, 3320]);
        // defaults (h=256, F=200, d=32), counted by hand per layer
        assert_eq!(ModelConfig::default().parameter_count(), 1_761_808);
    }

    #[test]
    fn determinism_and_order_sensitivity() {
        let m = SeqVae::new(tiny(Variant::ApcEnc1Dec1)).unwrap();
        let x = random_frames(9, 5, 6);
        assert_eq!(m.encode_z2(&x).unwrap(), m.encode_z2(&x).unwrap());
        for s in 0..20 {
            let x = random_frames(100 + s, 5, 6);
            let mut rev = x.clone();
            rev.invert_axis(Axis(0));
            assert_ne!(m.encode_z2(&x).unwrap(), m.encode_z2(&rev).unwrap());
        }
        let q_a = m.encode_z1(&x, &[0.0, 0.0, 0.0]).unwrap();
        let q_b = m.encode_z1(&x, &[1.0, -1.0, 0.5]).unwrap();
        assert_ne!(q_a.mean, q_b.mean);
        assert!(m.encode_z2(&random_frames(1, 4, 6)).is_err());
    }

    #[test]
    fn decoders_are_isolated() {
        let m = SeqVae::new(tiny(Variant::ApcEnc2Dec2)).unwrap();
        let (z1, z2) = ([0.3, -0.2, 0.9], [0.1, 0.4, -0.7]);
        let before = m.decode_recon(&z1, &z2).unwrap();
        let mut zeroed = m.clone();
        for layer in &mut zeroed.pred_decoder.as_mut().unwrap().layers {
            layer.w_ih.fill(0.0);
            layer.w_hh.fill(0.0);
            layer.b.fill(0.0);
        }
        zeroed.pred_head.as_mut().unwrap().w.fill(0.0);
        assert_eq!(zeroed.decode_recon(&z1, &z2).unwrap(), before);

        let base = SeqVae::new(tiny(Variant::Fhvae)).unwrap();
        assert!(matches!(base.decode_predict(&z1, &z2), Err(Error::UnsupportedVariant(_))));
        let (_, lv) = base.decode_recon(&z1, &z2).unwrap();
        assert_eq!(lv.unwrap().dim(), (5, 6));
    }

    #[test]
    fn prediction_gradient_skips_recon_decoder() {
        let m = SeqVae::new(tiny(Variant::ApcEnc1Dec1)).unwrap();
        let xs = time_major(&[&random_frames(3, 5, 6), &random_frames(4, 5, 6)]);
        let noise = BatchNoise::draw(&mut GaussianNoise::seeded(1), 2, &m.config);
        let (outs, cache) = m.forward_batch(&xs, noise);
        let mut g = OutputGrads::zeros_like(&outs);
        for p in g.prediction.as_mut().unwrap() {
            p.fill(1.0);
        }
        let grads = m.backward(&outs, &cache, &g);
        let zero = |s: &[f64]| s.iter().all(|&v| v == 0.0);
        for (name, data, _) in grads.named_tensors() {
            if name.starts_with("recon_") {
                assert!(zero(data), "{name} received prediction gradient");
            }
        }
        assert!(!zero(grads.pred_head.as_ref().unwrap().w.as_slice().unwrap()));
        assert!(!zero(grads.z2_head.w.as_slice().unwrap()));
    }

    #[test]
    fn recon_depends_on_z1() {
        let m = SeqVae::new(tiny(Variant::ApcEnc1Dec1)).unwrap();
        let z2 = [0.2, -0.1, 0.3];
        let h = 1e-6;
        let f = |v: f64| m.decode_recon(&[v, 0.1, 0.2], &z2).unwrap().0.sum();
        let fd = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h);
        assert!(fd.abs() > 1e-6);
    }

    #[test]
    fn zero_noise_forward_is_deterministic() {
        let m = SeqVae::new(tiny(Variant::Fhvae)).unwrap();
        let s = seg(random_frames(5, 5, 6));
        let a = m.forward(&s, &[0.0; 3], &mut ZeroNoise).unwrap();
        let b = m.forward(&s, &[0.0; 3], &mut ZeroNoise).unwrap();
        assert_eq!(a, b);
        assert!(a.prediction.is_none());
        assert_eq!(a.z2_sample, a.q_z2.mean);
        assert!(m.forward(&s, &[0.0; 2], &mut ZeroNoise).is_err());
    }
}

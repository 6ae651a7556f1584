//! Minibatch training with early stopping and bitwise-resumable state.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::adam::{Adam, AdamParams};
use super::infer::{svector_from_means, z2_means};
use super::loss::{batch_objective, BatchTargets, LossBreakdown};
use super::svector::SVectorTable;
use crate::error::{ensure, Error, Result};
use crate::features::{segment_sequence, Normalization, Segment, SegmentParams, SequenceRecord};
use crate::model::{time_major, BatchNoise, Checkpoint, GaussianNoise, ModelConfig, NamedTensor, SeqVae};

/// Segments per parallel work item. Fixed, so results do not depend on the
/// number of worker threads.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 256, patience: 10, max_epochs: 500, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive");
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(self.patience >= 1, "patience must be >= 1");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "Adam betas must lie in [0, 1)");
        ensure!(self.eps > 0.0, "eps must be positive");
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// All segments of a set of sequences, with their owning sequence.
#[derive(Debug, Clone)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
    pub owner: Vec<usize>,
    pub sequence_ids: Vec<String>,
    pub counts: Vec<usize>,
}

impl SegmentSet {
    /// Sequences shorter than one segment are skipped.
    pub fn from_records(records: &[SequenceRecord], params: &SegmentParams) -> Result<Self> {
        let mut set = SegmentSet { segments: Vec::new(), owner: Vec::new(), sequence_ids: Vec::new(), counts: Vec::new() };
        for r in records {
            let segs = segment_sequence(r, params)?;
            if segs.is_empty() {
                continue;
            }
            let i = set.sequence_ids.len();
            set.sequence_ids.push(r.sequence_id.clone());
            set.counts.push(segs.len());
            set.owner.extend(std::iter::repeat_n(i, segs.len()));
            set.segments.extend(segs);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn table_entries(&self) -> Vec<(String, usize)> {
        self.sequence_ids.iter().cloned().zip(self.counts.iter().copied()).collect()
    }
}

struct ChunkOut {
    per_segment: Vec<LossBreakdown>,
    model_grad: Option<SeqVae>,
    /// Gradient w.r.t. the per-sequence s-vector rows.
    svec_grad: Option<Array2<f64>>,
}

fn add_into(acc: &mut SeqVae, g: &SeqVae) {
    for (a, (_, b, _)) in acc.slices_mut().into_iter().zip(g.named_tensors()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Objective over `idx` with per-sequence s-vectors `svecs` (rows indexed by
/// `set.owner`). The discriminative term treats `svecs` as the table.
#[allow(clippy::too_many_arguments)]
fn chunk_pass(
    model: &SeqVae,
    set: &SegmentSet,
    idx: &[usize],
    noise: BatchNoise,
    svecs: &Array2<f64>,
    disc: bool,
    need_grad: bool,
    scale: f64,
) -> ChunkOut {
    let frames: Vec<&Array2<f64>> = idx.iter().map(|&i| &set.segments[i].frames).collect();
    let xs = time_major(&frames);
    let has_target: Vec<bool> = idx.iter().map(|&i| set.segments[i].has_target()).collect();
    let future = model.variant().has_prediction().then(|| {
        let zeros = Array2::zeros(frames[0].raw_dim());
        let fut: Vec<&Array2<f64>> = idx.iter().map(|&i| set.segments[i].future_frames.as_ref().unwrap_or(&zeros)).collect();
        time_major(&fut)
    });
    let rows: Vec<usize> = idx.iter().map(|&i| set.owner[i]).collect();
    let sv = svecs.select(Axis(0), &rows);
    let counts: Vec<usize> = rows.iter().map(|&r| set.counts[r]).collect();
    let (outs, cache) = model.forward_batch(&xs, noise);
    let t = BatchTargets {
        xs: &xs,
        future: future.as_deref(),
        has_target: &has_target,
        svectors: &sv,
        segment_counts: &counts,
        disc: disc.then_some((svecs, rows.as_slice())),
    };
    let loss = batch_objective(&model.config, &outs, &t, scale);
    if !need_grad {
        return ChunkOut { per_segment: loss.per_segment, model_grad: None, svec_grad: None };
    }
    let model_grad = model.backward(&outs, &cache, &loss.grads);
    let mut svec_grad = loss.d_table.unwrap_or_else(|| Array2::zeros(svecs.raw_dim()));
    for (b, &r) in rows.iter().enumerate() {
        let mut row = svec_grad.row_mut(r);
        row += &loss.d_svector.row(b);
    }
    ChunkOut { per_segment: loss.per_segment, model_grad: Some(model_grad), svec_grad: Some(svec_grad) }
}

/// Loss sums and gradients of the mean objective over one minibatch.
#[derive(Debug, Clone)]
pub struct MinibatchResult {
    pub per_segment: Vec<LossBreakdown>,
    pub sum: LossBreakdown,
    /// Mean total over the minibatch (the minimized quantity).
    pub objective: f64,
    pub model_grad: Option<SeqVae>,
    pub table_grad: Option<Array2<f64>>,
}

/// Runs the training objective over `idx`, chunked across threads and reduced
/// in a fixed order.
pub fn minibatch(
    model: &SeqVae,
    svecs: &Array2<f64>,
    set: &SegmentSet,
    idx: &[usize],
    noise: &BatchNoise,
    disc: bool,
    need_grad: bool,
) -> MinibatchResult {
    let scale = 1.0 / idx.len() as f64;
    let starts: Vec<usize> = (0..idx.len()).step_by(CHUNK).collect();
    let outs: Vec<ChunkOut> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK).min(idx.len());
            let n = BatchNoise {
                z2: noise.z2.slice(ndarray::s![s..e, ..]).to_owned(),
                z1: noise.z1.slice(ndarray::s![s..e, ..]).to_owned(),
            };
            chunk_pass(model, set, &idx[s..e], n, svecs, disc, need_grad, scale)
        })
        .collect();
    let mut per_segment = Vec::with_capacity(idx.len());
    let mut model_grad: Option<SeqVae> = None;
    let mut table_grad: Option<Array2<f64>> = None;
    for c in outs {
        per_segment.extend(c.per_segment);
        if let Some(g) = c.model_grad {
            match &mut model_grad {
                Some(acc) => add_into(acc, &g),
                None => model_grad = Some(g),
            }
        }
        if let Some(g) = c.svec_grad {
            match &mut table_grad {
                Some(acc) => *acc += &g,
                None => table_grad = Some(g),
            }
        }
    }
    let mut sum = LossBreakdown::default();
    for p in &per_segment {
        sum.accumulate(p);
    }
    let objective = sum.total * scale;
    MinibatchResult { per_segment, sum, objective, model_grad, table_grad }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: SeqVae,
    pub table: SVectorTable,
    pub adam: Adam,
    pub config: TrainConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_dev: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub stopped: bool,
    pub normalization: Option<Normalization>,
    /// Provenance and corpus identity carried into every checkpoint.
    pub extra: serde_json::Value,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

impl TrainState {
    pub fn new(model_config: ModelConfig, config: TrainConfig, train: &SegmentSet, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure!(!train.is_empty(), "training set has no segments");
        let model = SeqVae::new(model_config)?;
        let table = SVectorTable::new(&train.table_entries(), model.config.latent_dim_z2)?;
        let mut sizes: Vec<usize> = model.named_tensors().iter().map(|(_, d, _)| d.len()).collect();
        sizes.push(table.vectors.len());
        let adam = Adam::new(config.adam(), &sizes);
        Ok(Self {
            model,
            table,
            adam,
            config,
            seed,
            epoch: 0,
            step: 0,
            best_dev: None,
            best_epoch: 0,
            bad_epochs: 0,
            stopped: false,
            normalization: None,
            extra: json!({}),
        })
    }

    fn check_set(&self, train: &SegmentSet) -> Result<()> {
        if train.sequence_ids != self.table.ids() {
            return Err(Error::Incompatible("training segments do not match the s-vector table".into()));
        }
        Ok(())
    }

    /// Mean training objective over every segment with fixed noise and no
    /// update; comparable across epochs.
    pub fn train_objective(&self, train: &SegmentSet) -> Result<LossBreakdown> {
        self.check_set(train)?;
        let idx: Vec<usize> = (0..train.len()).collect();
        let noise = BatchNoise::draw(&mut GaussianNoise(epoch_rng(self.seed, usize::MAX - 1)), idx.len(), &self.model.config);
        let r = minibatch(&self.model, &self.table.vectors, train, &idx, &noise, true, false);
        Ok(r.sum.scaled(1.0 / idx.len() as f64))
    }

    /// Mean dev objective: inferred s-vectors, zero noise, no discriminative term.
    pub fn dev_loss(&self, dev: &SegmentSet) -> Result<LossBreakdown> {
        ensure!(!dev.is_empty(), "dev set has no segments");
        let frames: Vec<&Array2<f64>> = dev.segments.iter().map(|s| &s.frames).collect();
        let means = z2_means(&self.model, &frames);
        let d2 = self.model.config.latent_dim_z2;
        let mut svecs = Array2::zeros((dev.sequence_ids.len(), d2));
        let mut start = 0;
        for (i, &n) in dev.counts.iter().enumerate() {
            let v = svector_from_means(&means[start..start + n], self.model.config.sigma2_z2)?;
            svecs.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
            start += n;
        }
        let idx: Vec<usize> = (0..dev.len()).collect();
        let noise = BatchNoise {
            z2: Array2::zeros((idx.len(), d2)),
            z1: Array2::zeros((idx.len(), self.model.config.latent_dim_z1)),
        };
        let r = minibatch(&self.model, &svecs, dev, &idx, &noise, false, false);
        Ok(r.sum.scaled(1.0 / idx.len() as f64))
    }

    /// One pass over the shuffled training segments. Returns per-segment means.
    pub fn run_epoch(&mut self, train: &SegmentSet, dump_dir: Option<&Path>) -> Result<LossBreakdown> {
        self.check_set(train)?;
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut noise_src = GaussianNoise(rng);
        let mut total = LossBreakdown::default();
        let alpha = self.model.config.alpha_dis;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let noise = BatchNoise::draw(&mut noise_src, idx.len(), &self.model.config);
            let r = minibatch(&self.model, &self.table.vectors, train, idx, &noise, true, true);
            if !r.sum.is_finite() {
                let dump = write_divergence_dump(dump_dir, epoch, b, train, idx, &r.per_segment)?;
                return Err(Error::Divergence { epoch, batch: b, dump });
            }
            r.sum.assert_consistent(alpha);
            let mg = r.model_grad.expect("gradients requested");
            let tg = r.table_grad.expect("gradients requested");
            let mut grads: Vec<&[f64]> = mg.named_tensors().into_iter().map(|(_, d, _)| d).collect();
            grads.push(tg.as_slice().expect("contiguous"));
            let mut weights = self.model.slices_mut();
            weights.push(self.table.vectors.as_slice_mut().expect("contiguous"));
            self.adam.step(weights, &grads)?;
            self.step += 1;
            total.accumulate(&r.sum);
        }
        self.epoch = epoch;
        Ok(total.scaled(1.0 / train.len() as f64))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.to_tensors();
        tensors.push(NamedTensor {
            name: "svector.table".into(),
            shape: vec![self.table.len(), self.table.dim()],
            data: self.table.vectors.iter().copied().collect(),
        });
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            tensors.push(NamedTensor { name: format!("adam.m.{i:03}"), shape: vec![m.len()], data: m.clone() });
            tensors.push(NamedTensor { name: format!("adam.v.{i:03}"), shape: vec![v.len()], data: v.clone() });
        }
        let meta = json!({
            "epoch": self.epoch,
            "step": self.step,
            "adam_t": self.adam.t,
            "best_dev": self.best_dev,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "stopped": self.stopped,
            "seed": self.seed,
            "train_config": self.config,
            "normalization": self.normalization,
            "table_ids": self.table.ids(),
            "table_counts": self.table.counts(),
            "extra": self.extra,
        });
        Checkpoint { model: self.model.config.clone(), tensors, meta }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = SeqVae::from_tensors(ck.model.clone(), &ck.tensors)?;
        let meta = &ck.meta;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Incompatible(format!("checkpoint metadata lacks `{k}`")));
        let ids: Vec<String> = serde_json::from_value(field("table_ids")?)?;
        let counts: Vec<usize> = serde_json::from_value(field("table_counts")?)?;
        let t = ck.tensor("svector.table").ok_or_else(|| Error::Incompatible("checkpoint lacks the s-vector table".into()))?;
        let vectors = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
            .map_err(|e| Error::Incompatible(format!("s-vector table: {e}")))?;
        let table = SVectorTable::from_parts(ids, counts, vectors)?;
        let config: TrainConfig = serde_json::from_value(field("train_config")?)?;
        let n_slots = model.named_tensors().len() + 1;
        let mut adam = Adam::new(config.adam(), &[]);
        for i in 0..n_slots {
            let get = |k: &str| {
                ck.tensor(&format!("adam.{k}.{i:03}")).map(|t| t.data.clone()).ok_or_else(|| Error::Incompatible(format!("checkpoint lacks optimizer slot {i}")))
            };
            adam.m.push(get("m")?);
            adam.v.push(get("v")?);
        }
        adam.t = serde_json::from_value(field("adam_t")?)?;
        Ok(Self {
            model,
            table,
            adam,
            config,
            seed: serde_json::from_value(field("seed")?)?,
            epoch: serde_json::from_value(field("epoch")?)?,
            step: serde_json::from_value(field("step")?)?,
            best_dev: serde_json::from_value(field("best_dev")?)?,
            best_epoch: serde_json::from_value(field("best_epoch")?)?,
            bad_epochs: serde_json::from_value(field("bad_epochs")?)?,
            stopped: serde_json::from_value(field("stopped")?)?,
            normalization: serde_json::from_value(field("normalization")?)?,
            extra: meta.get("extra").cloned().unwrap_or(json!({})),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn write_divergence_dump(
    dir: Option<&Path>,
    epoch: usize,
    batch: usize,
    set: &SegmentSet,
    idx: &[usize],
    per: &[LossBreakdown],
) -> Result<PathBuf> {
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("divergence_e{epoch}_b{batch}.json"));
    let segs: Vec<_> = idx
        .iter()
        .zip(per)
        .map(|(&i, l)| {
            let s = &set.segments[i];
            json!({"sequence_id": s.sequence_id, "segment_index": s.segment_index, "finite": l.is_finite(), "loss": l})
        })
        .collect();
    let body = json!({"epoch": epoch, "batch": batch, "segments": segs});
    std::fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Where and how long to train.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Receives `train_log.jsonl`, `best.dsvc` and `last.dsvc`. Nothing is
    /// written when absent.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (in addition to `max_epochs`).
    pub epoch_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_dev: Option<f64>,
    pub stopped_early: bool,
}

fn append_log(dir: Option<&Path>, recs: &[EpochRecord]) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let path = dir.join("train_log.jsonl");
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    for r in recs {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Trains until early stopping, `max_epochs` or `opts.epoch_limit`. Resuming
/// a saved state continues the same trajectory bit for bit.
pub fn train(state: &mut TrainState, train: &SegmentSet, dev: Option<&SegmentSet>, opts: &RunOptions) -> Result<TrainSummary> {
    let dir = opts.out_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let dev = dev.filter(|d| !d.is_empty());
    let mut history = Vec::new();
    if state.epoch == 0 {
        let mut recs = vec![EpochRecord { epoch: 0, split: "train".into(), loss: state.train_objective(train)? }];
        if let Some(d) = dev {
            recs.push(EpochRecord { epoch: 0, split: "dev".into(), loss: state.dev_loss(d)? });
        }
        append_log(dir, &recs)?;
        history.extend(recs);
    }
    let limit = opts.epoch_limit.unwrap_or(usize::MAX).min(state.config.max_epochs);
    while state.epoch < limit && !state.stopped {
        let train_loss = state.run_epoch(train, dir)?;
        let mut recs = vec![EpochRecord { epoch: state.epoch, split: "train".into(), loss: train_loss }];
        let score = match dev {
            Some(d) => {
                let l = state.dev_loss(d)?;
                recs.push(EpochRecord { epoch: state.epoch, split: "dev".into(), loss: l });
                l.total
            }
            None => train_loss.total,
        };
        let improved = state.best_dev.is_none_or(|b| score < b);
        if improved {
            state.best_dev = Some(score);
            state.best_epoch = state.epoch;
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            state.stopped = state.bad_epochs >= state.config.patience;
        }
        append_log(dir, &recs)?;
        history.extend(recs);
        if let Some(d) = dir {
            if improved {
                state.save(d.join("best.dsvc"))?;
            }
            state.save(d.join("last.dsvc"))?;
        }
    }
    Ok(TrainSummary {
        history,
        epochs: state.epoch,
        best_epoch: state.best_epoch,
        best_dev: state.best_dev,
        stopped_early: state.stopped,
    })
}

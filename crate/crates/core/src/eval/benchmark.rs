use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::convert_eval::{conversion_eval, Condition, ConversionCell, ConvertedFeature};
use super::eer::{compute_eer, cosine, cosine_score_matrix, TrialSet};
use super::probe::{kfold_probe, ProbeConfig, ProbeKind, ProbeResult};
use crate::conversion::{convert_with_svector, extract_segmental, extract_sequential, reconstruct, SegmentalFeature, SequentialFeature};
use crate::error::{ensure, Error, Result};
use crate::features::synthetic::majority_label;
use crate::features::{segment_sequence, CorpusManifest, Provenance, SegmentParams, SequenceRecord, Split};
use crate::model::{SeqVae, Variant};
use crate::training::{EpochRecord, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Folds of the probe protocol.
    pub k: usize,
    pub speaker_probe: ProbeConfig,
    pub content_probe: ProbeConfig,
    /// Run the many-to-many conversion grid over the test speakers.
    pub conversion_grid: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 8,
            speaker_probe: ProbeConfig::with_kind(ProbeKind::Gru),
            content_probe: ProbeConfig::with_kind(ProbeKind::GruFc),
            conversion_grid: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.k >= 3, "evaluation.k must be >= 3");
        self.speaker_probe.validate()?;
        self.content_probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub items: usize,
    pub classes: usize,
    #[serde(flatten)]
    pub result: ProbeResult,
}

/// Share of conversion pairs whose re-encoded s-vector is cosine-closer to
/// the target's s-vector than to the source's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionDirection {
    pub pairs: usize,
    pub closer_to_target: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub config: serde_json::Value,
    pub corpus_hash: String,
    pub variant: Variant,
    pub checkpoint_epoch: usize,
    /// EER in percent keyed by feature level.
    pub eer: BTreeMap<String, f64>,
    /// Keyed `"<target>/<feature level>"`, e.g. `"speaker/sequential"`.
    pub probes: BTreeMap<String, ProbeReport>,
    /// Keyed by condition.
    pub conversion: BTreeMap<String, ConversionCell>,
    pub conversion_direction: Option<ConversionDirection>,
    /// Converting a sequence to its own s-vector reproduces its reconstruction bit for bit.
    pub self_conversion_identity: Option<bool>,
    pub trials: BTreeMap<String, TrialSet>,
    pub loss_history: Vec<EpochRecord>,
}

impl EvalReport {
    pub fn accuracy(&self, key: &str) -> Option<f64> {
        self.probes.get(key).map(|p| p.result.mean_accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        std::fs::write(p, self.to_json()?).map_err(|e| Error::io(p, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Everything the benchmark reads besides the checkpoint.
pub struct BenchmarkInputs<'a> {
    pub manifest: &'a CorpusManifest,
    /// Raw records of the whole corpus.
    pub records: &'a [SequenceRecord],
    pub content_labels: Option<&'a BTreeMap<String, Vec<u16>>>,
    pub provenance: Provenance,
    pub config: serde_json::Value,
    pub loss_history: Vec<EpochRecord>,
}

/// Corpus hash the checkpoint was trained on, stored under `extra.corpus_hash`.
pub fn checkpoint_corpus_hash(state: &TrainState) -> Option<&str> {
    state.extra.get("corpus_hash").and_then(|v| v.as_str())
}

fn check_corpus(state: &TrainState, manifest: &CorpusManifest) -> Result<()> {
    match checkpoint_corpus_hash(state) {
        Some(h) if h == manifest.corpus_hash => Ok(()),
        Some(h) => Err(Error::Integrity(format!("checkpoint was trained on corpus {h}, manifest describes {}", manifest.corpus_hash))),
        None => Err(Error::Integrity("checkpoint records no corpus hash".into())),
    }
}

/// Test-split records in model space, sorted by sequence id.
fn test_records(state: &TrainState, inputs: &BenchmarkInputs) -> Result<Vec<SequenceRecord>> {
    let norm = state.normalization.as_ref().unwrap_or(&inputs.manifest.normalization);
    let test: BTreeSet<&str> = inputs.manifest.entries_in(Split::Test).map(|e| e.sequence_id.as_str()).collect();
    let mut out: Vec<SequenceRecord> = inputs
        .records
        .iter()
        .filter(|r| test.contains(r.sequence_id.as_str()))
        .map(|r| SequenceRecord { features: norm.apply(&r.features), ..r.clone() })
        .collect();
    out.sort_by(|a, b| a.sequence_id.cmp(&b.sequence_id));
    ensure!(!out.is_empty(), "manifest has no test sequences");
    Ok(out)
}

fn index_labels<'a>(names: impl Iterator<Item = &'a str> + Clone) -> Vec<usize> {
    let ids: BTreeMap<&str, usize> = names.clone().collect::<BTreeSet<_>>().into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    names.map(|n| ids[n]).collect()
}

fn probe(features: Vec<Vec<f64>>, labels: Vec<usize>, k: usize, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    let classes = labels.iter().collect::<BTreeSet<_>>().len();
    let result = kfold_probe(&features, &labels, k, cfg, seed)?;
    Ok(ProbeReport { kind: cfg.kind, items: labels.len(), classes, result })
}

struct Extracted {
    sequential: Vec<SequentialFeature>,
    segmental: Vec<Vec<SegmentalFeature>>,
}

fn extract_all(model: &SeqVae, records: &[SequenceRecord], params: &SegmentParams) -> Result<Extracted> {
    let per: Vec<(SequentialFeature, Vec<SegmentalFeature>)> = records
        .par_iter()
        .map(|r| Ok((extract_sequential(model, r, params)?, extract_segmental(model, r, params)?)))
        .collect::<Result<_>>()?;
    let (sequential, segmental) = per.into_iter().unzip();
    Ok(Extracted { sequential, segmental })
}

/// Speaker and content probes, cosine EER and the conversion grid on the
/// test split of a trained model.
pub fn disentanglement_benchmark(state: &TrainState, inputs: BenchmarkInputs, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    cfg.validate()?;
    check_corpus(state, inputs.manifest)?;
    let model = &state.model;
    let params = inputs.manifest.segment;
    let records = test_records(state, &inputs)?;
    let ex = extract_all(model, &records, &params)?;

    let mut probes = BTreeMap::new();
    let spk_seq = index_labels(ex.sequential.iter().map(|f| f.speaker_id.as_str()));
    probes.insert(
        "speaker/sequential".to_string(),
        probe(ex.sequential.iter().map(|f| f.vector.clone()).collect(), spk_seq.clone(), cfg.k, &cfg.speaker_probe, seed)?,
    );
    let seg_owner: Vec<usize> = ex.segmental.iter().enumerate().flat_map(|(i, s)| std::iter::repeat_n(i, s.len())).collect();
    let seg_vectors: Vec<Vec<f64>> = ex.segmental.iter().flatten().map(|f| f.vector.clone()).collect();
    probes.insert(
        "speaker/segmental".to_string(),
        probe(seg_vectors.clone(), seg_owner.iter().map(|&i| spk_seq[i]).collect(), cfg.k, &cfg.speaker_probe, seed)?,
    );
    if let Some(labels) = inputs.content_labels {
        let mut content = Vec::with_capacity(seg_owner.len());
        for r in &records {
            let l = labels.get(&r.sequence_id).ok_or_else(|| Error::Lookup(format!("no content labels for {}", r.sequence_id)))?;
            ensure!(l.len() == r.n_frames(), "content labels of {} cover {} of {} frames", r.sequence_id, l.len(), r.n_frames());
            for s in segment_sequence(r, &params)? {
                content.push(majority_label(l, s.start_frame, params.len) as usize);
            }
        }
        probes.insert("content/segmental".to_string(), probe(seg_vectors, content.clone(), cfg.k, &cfg.content_probe, seed)?);
        let owner_sv: Vec<Vec<f64>> = seg_owner.iter().map(|&i| ex.sequential[i].vector.clone()).collect();
        probes.insert("content/sequential".to_string(), probe(owner_sv, content, cfg.k, &cfg.content_probe, seed)?);
    }

    let mut trials = BTreeMap::new();
    let mut eer = BTreeMap::new();
    let seq_trials = cosine_score_matrix(&ex.sequential)?;
    eer.insert("sequential".to_string(), compute_eer(&seq_trials)?);
    trials.insert("sequential".to_string(), seq_trials);

    let (conversion, direction, identity) = if cfg.conversion_grid {
        let g = conversion_grid(model, &records, &ex.sequential, &params, &inputs.manifest.speaker_groups())?;
        (g.cells, Some(g.direction), Some(g.identity))
    } else {
        (BTreeMap::new(), None, None)
    };

    Ok(EvalReport {
        provenance: inputs.provenance,
        config: inputs.config,
        corpus_hash: inputs.manifest.corpus_hash.clone(),
        variant: model.variant(),
        checkpoint_epoch: state.epoch,
        eer,
        probes,
        conversion,
        conversion_direction: direction,
        self_conversion_identity: identity,
        trials,
        loss_history: inputs.loss_history,
    })
}

pub struct GridOutcome {
    pub cells: BTreeMap<String, ConversionCell>,
    pub direction: ConversionDirection,
    pub identity: bool,
    pub converted: Vec<ConvertedFeature>,
}

/// Converts the first utterance of every speaker to every other speaker and
/// re-encodes the output. The remaining utterances enroll the speakers.
pub fn conversion_grid(
    model: &SeqVae,
    records: &[SequenceRecord],
    sequential: &[SequentialFeature],
    params: &SegmentParams,
    groups: &BTreeMap<String, String>,
) -> Result<GridOutcome> {
    ensure!(records.len() == sequential.len(), "records and features differ in length");
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        first.entry(r.speaker_id.as_str()).or_insert(i);
    }
    ensure!(first.len() >= 2, "conversion grid needs at least two speakers");
    let sources: Vec<(&str, usize)> = first.iter().map(|(s, &i)| (*s, i)).collect();
    let pairs: Vec<(usize, usize)> =
        (0..sources.len()).flat_map(|a| (0..sources.len()).filter(move |&b| b != a).map(move |b| (a, b))).collect();
    let converted: Vec<ConvertedFeature> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (src, tgt) = (sources[a].1, sources[b].1);
            let out = convert_with_svector(model, &records[src], &sequential[tgt].vector, params)?;
            let rec = SequenceRecord::new(format!("{}->{}", records[src].sequence_id, records[tgt].sequence_id), sources[b].0, out.mapv(|v| v as f32), records[src].frame_rate)?;
            let sv = extract_sequential(model, &rec, params)?;
            Ok(ConvertedFeature { source_speaker: sources[a].0.to_string(), target_speaker: sources[b].0.to_string(), vector: sv.vector })
        })
        .collect::<Result<_>>()?;
    let closer = converted
        .iter()
        .zip(&pairs)
        .filter(|(c, &(a, b))| cosine(&c.vector, &sequential[sources[b].1].vector) > cosine(&c.vector, &sequential[sources[a].1].vector))
        .count();
    let direction = ConversionDirection { pairs: pairs.len(), closer_to_target: closer, fraction: closer as f64 / pairs.len() as f64 };
    let identity = sources
        .par_iter()
        .map(|&(_, i)| Ok(convert_with_svector(model, &records[i], &sequential[i].vector, params)? == reconstruct(model, &records[i], params)?))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .all(|b| b);

    let grid_ids: BTreeSet<&str> = sources.iter().map(|&(_, i)| records[i].sequence_id.as_str()).collect();
    let enrollment: Vec<SequentialFeature> = sequential.iter().filter(|f| !grid_ids.contains(f.sequence_id.as_str())).cloned().collect();
    let speakers: BTreeSet<String> = first.keys().map(|s| s.to_string()).collect();
    let mut by_group: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for s in &speakers {
        if let Some(g) = groups.get(s) {
            by_group.entry(g.as_str()).or_default().insert(s.clone());
        }
    }
    let mut conditions: Vec<Condition> = by_group
        .into_iter()
        // with fewer than three speakers one experiment has no impostors
        .filter(|(_, s)| s.len() >= 3)
        .map(|(g, s)| Condition { name: g.to_string(), speakers: s })
        .collect();
    conditions.push(Condition { name: "all".into(), speakers });
    let cells = conversion_eval(&converted, &enrollment, sequential, &conditions)?;
    Ok(GridOutcome { cells, direction, identity, converted })
}

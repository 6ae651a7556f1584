//! Staged pipeline behind the `dsv` subcommands. Every stage reads the
//! outputs of earlier stages from the run directory and writes only its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DataSource, RunConfig};
use crate::conversion::{convert_voice, extract_segmental, extract_sequential, griffin_lim};
use crate::error::{ensure, Error, Result};
use crate::eval::benchmark::{disentanglement_benchmark, BenchmarkInputs, EvalReport};
use crate::eval::plots::write_plots;
use crate::features::audio::read_wav;
use crate::features::manifest::{assign_splits, build_manifest};
use crate::features::{make_synthetic_corpus, stft_log_magnitude, write_features, CorpusManifest, Provenance, SequenceRecord, Split};
use crate::training::{train, EpochRecord, RunOptions, SegmentSet, TrainState, TrainSummary};
use crate::CODE_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Segmental,
    Sequential,
}

/// Which conversions `convert` runs.
#[derive(Debug, Clone, PartialEq)]
pub enum PairSpec {
    /// Explicit (source, target) sequence ids.
    List(Vec<(String, String)>),
    /// First test utterance of every test speaker to every other.
    Grid,
}

/// Reads a pairs file: one `source target` pair per line, `#` comments.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::Format { offset: n as u64 + 1, msg: format!("expected `source target`, got `{line}`") });
        }
        out.push((parts[0].to_string(), parts[1].to_string()));
    }
    Ok(out)
}

/// One configured run rooted at `<output_dir>/<run-id>`.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl Run {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.run_dir()?;
        Ok(Self { config, dir })
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.dir.join("corpus")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus_dir().join("manifest.json")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.dir.join("train")
    }

    pub fn default_checkpoint(&self) -> PathBuf {
        self.train_dir().join("best.dsvc")
    }

    pub fn report_path(&self) -> PathBuf {
        self.dir.join("eval").join("report.json")
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance { config_hash: self.config.config_hash()?, code_version: CODE_VERSION.to_string(), seed: self.config.seed })
    }

    fn config_snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.config.canonical())?)
    }

    /// Builds the corpus and writes `corpus/manifest.json` plus feature files.
    pub fn prepare(&self) -> Result<CorpusManifest> {
        let d = &self.config.data;
        let dir = self.corpus_dir();
        mkdir(&dir)?;
        let (records, groups, labels, stft, split_seed) = match d.source {
            DataSource::Synthetic => {
                let c = make_synthetic_corpus(&d.synthetic)?;
                (c.records, c.speaker_groups, Some(c.content_labels), None, d.synthetic.seed)
            }
            DataSource::Audio => {
                let root = d.audio_dir.as_ref().ok_or_else(|| Error::Config("data.audio_dir is not set".into()))?;
                let stft = d.stft.to_stft();
                let (records, groups) = load_audio_dir(root, &stft)?;
                (records, groups, None, Some(stft), self.config.seed)
            }
        };
        let speakers: BTreeSet<String> = records.iter().map(|r| r.speaker_id.clone()).collect();
        let splits = assign_splits(&speakers, d.dev_speakers, d.test_speakers, split_seed)?;
        let manifest = build_manifest(&dir, &records, &groups, &splits, d.segment, stft, split_seed, labels.as_ref(), self.provenance()?)?;
        manifest.write(self.manifest_path())?;
        write_json(&self.dir.join("config.json"), &self.config_snapshot()?)?;
        Ok(manifest)
    }

    /// Manifest plus verified raw records.
    pub fn load_corpus(&self) -> Result<(CorpusManifest, Vec<SequenceRecord>)> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "no manifest; run `prepare` first")));
        }
        let manifest = CorpusManifest::read(&path)?;
        let records = manifest.verify(&self.corpus_dir())?;
        Ok((manifest, records))
    }

    fn split_records(manifest: &CorpusManifest, records: &[SequenceRecord], split: Split) -> Vec<SequenceRecord> {
        let ids: BTreeSet<&str> = manifest.entries_in(split).map(|e| e.sequence_id.as_str()).collect();
        records
            .iter()
            .filter(|r| ids.contains(r.sequence_id.as_str()))
            .map(|r| SequenceRecord { features: manifest.normalization.apply(&r.features), ..r.clone() })
            .collect()
    }

    /// Trains, resuming from `train/last.dsvc` when it exists. A finished run
    /// is left untouched.
    pub fn train(&self, epoch_limit: Option<usize>) -> Result<TrainSummary> {
        let (manifest, records) = self.load_corpus()?;
        let train_set = SegmentSet::from_records(&Self::split_records(&manifest, &records, Split::Train), &manifest.segment)?;
        let dev_set = SegmentSet::from_records(&Self::split_records(&manifest, &records, Split::Dev), &manifest.segment)?;
        let model_cfg = self.config.model.to_model_config(manifest.feature_dim, &manifest.segment, self.config.seed);
        let last = self.train_dir().join("last.dsvc");
        let mut state = if last.exists() {
            let s = TrainState::load(&last)?;
            if s.model.config != model_cfg || s.config != self.config.training || s.seed != self.config.seed {
                return Err(Error::Incompatible(format!("{} was written by a different configuration", last.display())));
            }
            s
        } else {
            let mut s = TrainState::new(model_cfg, self.config.training.clone(), &train_set, self.config.seed)?;
            s.normalization = Some(manifest.normalization.clone());
            s.extra = json!({"corpus_hash": manifest.corpus_hash, "provenance": self.provenance()?});
            s
        };
        let dev = (!dev_set.is_empty()).then_some(&dev_set);
        train(&mut state, &train_set, dev, &RunOptions { out_dir: Some(self.train_dir()), epoch_limit })
    }

    pub fn load_checkpoint(&self, path: Option<&Path>) -> Result<TrainState> {
        let p = path.map(Path::to_path_buf).unwrap_or_else(|| self.default_checkpoint());
        if !p.exists() {
            return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
        }
        TrainState::load(&p)
    }

    fn model_space(state: &TrainState, manifest: &CorpusManifest, records: &[SequenceRecord]) -> Vec<SequenceRecord> {
        let norm = state.normalization.as_ref().unwrap_or(&manifest.normalization);
        records.iter().map(|r| SequenceRecord { features: norm.apply(&r.features), ..r.clone() }).collect()
    }

    /// Writes `extract/<level>.dsvf` (one row per feature) and a JSON sidecar
    /// naming each row.
    pub fn extract(&self, checkpoint: Option<&Path>, level: Level) -> Result<PathBuf> {
        let (manifest, records) = self.load_corpus()?;
        let state = self.load_checkpoint(checkpoint)?;
        let recs = Self::model_space(&state, &manifest, &records);
        let model = &state.model;
        let (rows, index): (Vec<Vec<f64>>, Vec<serde_json::Value>) = match level {
            Level::Sequential => recs
                .par_iter()
                .map(|r| extract_sequential(model, r, &manifest.segment))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .map(|f| (f.vector, json!({"sequence_id": f.sequence_id, "speaker_id": f.speaker_id})))
                .unzip(),
            Level::Segmental => recs
                .par_iter()
                .map(|r| extract_segmental(model, r, &manifest.segment))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .map(|f| (f.vector, json!({"sequence_id": f.sequence_id, "segment_index": f.segment_index})))
                .unzip(),
        };
        ensure!(!rows.is_empty(), "nothing to extract");
        let m = Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j] as f32);
        let dir = self.dir.join("extract");
        mkdir(&dir)?;
        let name = match level {
            Level::Segmental => "segmental",
            Level::Sequential => "sequential",
        };
        let path = dir.join(format!("{name}.dsvf"));
        write_features(&path, &m)?;
        write_json(&dir.join(format!("{name}.json")), &json!({"level": level, "provenance": self.provenance()?, "rows": index}))?;
        Ok(path)
    }

    /// Converts the requested pairs and writes `convert/<src>__<tgt>.dsvf` in
    /// the corpus feature space, plus Griffin-Lim waveforms when `wav` is set.
    pub fn convert(&self, checkpoint: Option<&Path>, pairs: &PairSpec, wav: bool) -> Result<Vec<PathBuf>> {
        let (manifest, records) = self.load_corpus()?;
        let state = self.load_checkpoint(checkpoint)?;
        let stft = match (wav, &manifest.stft) {
            (true, None) => return Err(Error::Incompatible("corpus has no STFT front end, so --wav cannot synthesize audio".into())),
            (_, s) => s.clone(),
        };
        let recs = Self::model_space(&state, &manifest, &records);
        let by_id: BTreeMap<&str, &SequenceRecord> = recs.iter().map(|r| (r.sequence_id.as_str(), r)).collect();
        let list = match pairs {
            PairSpec::List(l) => l.clone(),
            PairSpec::Grid => grid_pairs(&manifest),
        };
        ensure!(!list.is_empty(), "no conversion pairs given");
        let norm = state.normalization.as_ref().unwrap_or(&manifest.normalization);
        let dir = self.dir.join("convert");
        mkdir(&dir)?;
        let outputs: Vec<(String, Array2<f64>)> = list
            .par_iter()
            .map(|(s, t)| {
                let src = by_id.get(s.as_str()).ok_or_else(|| Error::Lookup(format!("unknown source sequence {s}")))?;
                let tgt = by_id.get(t.as_str()).ok_or_else(|| Error::Lookup(format!("unknown target sequence {t}")))?;
                let out = convert_voice(&state.model, src, tgt, &manifest.segment)?;
                Ok((format!("{s}__{t}"), norm.invert(&out)))
            })
            .collect::<Result<_>>()?;
        let mut written = Vec::new();
        for (name, spec) in &outputs {
            let p = dir.join(format!("{name}.dsvf"));
            write_features(&p, &spec.mapv(|v| v as f32))?;
            written.push(p);
            if let (true, Some(cfg)) = (wav, &stft) {
                let samples = griffin_lim(spec, cfg, self.config.conversion.griffin_lim_iterations, self.config.seed)?;
                let w = dir.join(format!("{name}.wav"));
                crate::features::audio::write_wav(&w, &samples, cfg.sample_rate)?;
                written.push(w);
            }
        }
        write_json(&dir.join("index.json"), &json!({"provenance": self.provenance()?, "pairs": list}))?;
        Ok(written)
    }

    /// Runs the benchmark and writes `eval/report.json` (and SVG plots).
    pub fn evaluate(&self, checkpoint: Option<&Path>, plots: bool) -> Result<EvalReport> {
        let (manifest, records) = self.load_corpus()?;
        let state = self.load_checkpoint(checkpoint)?;
        let labels = manifest.read_content_labels(&self.corpus_dir())?;
        let inputs = BenchmarkInputs {
            manifest: &manifest,
            records: &records,
            content_labels: labels.as_ref(),
            provenance: self.provenance()?,
            config: self.config_snapshot()?,
            loss_history: read_train_log(&self.train_dir().join("train_log.jsonl"))?,
        };
        let report = disentanglement_benchmark(&state, inputs, &self.config.evaluation, self.config.seed)?;
        let path = self.report_path();
        mkdir(path.parent().expect("report has a parent"))?;
        report.write(&path)?;
        if plots {
            write_plots(&report, &self.dir.join("eval").join("plots"))?;
        }
        Ok(report)
    }
}

/// First utterance of every test speaker paired with every other.
pub fn grid_pairs(manifest: &CorpusManifest) -> Vec<(String, String)> {
    let mut first: BTreeMap<&str, &str> = BTreeMap::new();
    for e in manifest.entries_in(Split::Test) {
        first.entry(e.speaker_id.as_str()).or_insert(e.sequence_id.as_str());
    }
    let ids: Vec<&str> = first.values().copied().collect();
    ids.iter().flat_map(|s| ids.iter().filter(move |t| *t != s).map(move |t| (s.to_string(), t.to_string()))).collect()
}

/// Training history, or empty when there is no log.
pub fn read_train_log(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// `<root>/<speaker>/<utterance>.wav`, with an optional `groups.json`
/// mapping speaker to group.
fn load_audio_dir(root: &Path, stft: &crate::features::StftConfig) -> Result<(Vec<SequenceRecord>, BTreeMap<String, String>)> {
    let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p).map_err(|e| Error::io(p, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        v.sort();
        Ok(v)
    };
    let mut records = Vec::new();
    for spk_dir in read_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let spk = spk_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        for wav in read_dir(&spk_dir)?.into_iter().filter(|p| p.extension().is_some_and(|e| e == "wav")) {
            let (samples, sr) = read_wav(&wav)?;
            if sr != stft.sample_rate {
                return Err(Error::Incompatible(format!("{} has sample rate {sr}, config expects {}", wav.display(), stft.sample_rate)));
            }
            let feats = stft_log_magnitude(&samples, stft)?.mapv(|v| v as f32);
            let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            records.push(SequenceRecord::new(format!("{spk}_{stem}"), spk.clone(), feats, sr as f64 / stft.hop_length as f64)?);
        }
    }
    ensure!(!records.is_empty(), "no .wav files under {}", root.display());
    let groups_path = root.join("groups.json");
    let groups = if groups_path.exists() {
        let text = std::fs::read_to_string(&groups_path).map_err(|e| Error::io(&groups_path, e))?;
        serde_json::from_str(&text)?
    } else {
        BTreeMap::new()
    };
    Ok((records, groups))
}

fn condition_label(name: &str) -> String {
    match name {
        "f" => "Female".into(),
        "m" => "Male".into(),
        "all" => "All".into(),
        other => other.to_string(),
    }
}

/// Human-readable tables: EER and probe accuracies, then the conversion
/// results by condition.
pub fn render_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variant {}  epoch {}  seed {}  config {}", report.variant, report.checkpoint_epoch, report.provenance.seed, &report.provenance.config_hash[..12.min(report.provenance.config_hash.len())]);
    let _ = writeln!(s, "corpus {}\n", report.corpus_hash);
    let _ = writeln!(s, "{:<22} {:>10}", "Speaker verification", "EER(%)");
    for (k, v) in &report.eer {
        let _ = writeln!(s, "{k:<22} {v:>10.2}");
    }
    let _ = writeln!(s, "\n{:<22} {:>8} {:>8} {:>8}", "Probe", "kind", "items", "acc");
    for (k, p) in &report.probes {
        let kind = serde_json::to_value(p.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(s, "{k:<22} {kind:>8} {:>8} {:>8.4}", p.items, p.result.mean_accuracy);
    }
    if !report.conversion.is_empty() {
        let conds: Vec<&String> = report.conversion.keys().filter(|k| *k != "all").chain(report.conversion.keys().filter(|k| *k == "all")).collect();
        let header: Vec<String> = conds.iter().map(|c| format!("{:>8}", condition_label(c))).collect();
        let _ = writeln!(s, "\n{:<10}{}", "Conversion", header.join(""));
        let row = |name: &str, f: &dyn Fn(&crate::eval::ConversionCell) -> String| {
            let cells: Vec<String> = conds.iter().map(|c| format!("{:>8}", f(&report.conversion[*c]))).collect();
            format!("{name:<10}{}\n", cells.join(""))
        };
        s.push_str(&row("EER_C(%)", &|c| format!("{:.2}", c.eer_c)));
        s.push_str(&row("EER_A(%)", &|c| format!("{:.2}", c.eer_a)));
        s.push_str(&row("EER_B(%)", &|c| format!("{:.2}", c.eer_b)));
        s.push_str(&row("ND", &|c| c.nd.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into())));
    }
    if let Some(d) = &report.conversion_direction {
        let _ = writeln!(s, "\ncloser to target: {}/{} ({:.1}%)", d.closer_to_target, d.pairs, 100.0 * d.fraction);
    }
    if let Some(id) = report.self_conversion_identity {
        let _ = writeln!(s, "self-conversion identity: {}", if id { "holds" } else { "BROKEN" });
    }
    s
}

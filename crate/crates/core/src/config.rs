//! Declarative run configuration: one TOML file, every field defaulted,
//! unknown keys rejected with the nearest valid name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::eval::EvalConfig;
use crate::features::{SegmentParams, StftConfig, SyntheticSpec};
use crate::hash::sha256_hex;
use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;

/// Environment variable consulted when `output_dir` is not set.
pub const OUTPUT_DIR_ENV: &str = "DSV_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    /// `audio_dir/<speaker>/<utterance>.wav`
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftSection {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_bins: usize,
}

impl Default for StftSection {
    fn default() -> Self {
        Self { sample_rate: 16_000, window_ms: 25.0, hop_ms: 10.0, n_bins: 200 }
    }
}

impl StftSection {
    pub fn to_stft(&self) -> StftConfig {
        StftConfig::from_ms(self.sample_rate, self.window_ms, self.hop_ms, self.n_bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub audio_dir: Option<PathBuf>,
    pub dev_speakers: usize,
    pub test_speakers: usize,
    pub segment: SegmentParams,
    pub stft: StftSection,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            audio_dir: None,
            dev_speakers: 4,
            test_speakers: 12,
            segment: SegmentParams::default(),
            stft: StftSection::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Model hyperparameters; the feature dimension, segment length and
/// prediction offset come from the prepared corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    /// Shared size of z1 and z2 unless overridden below.
    pub latent_dim: usize,
    pub latent_dim_z1: Option<usize>,
    pub latent_dim_z2: Option<usize>,
    pub hidden_units: usize,
    pub sigma2_z2: f64,
    pub alpha_dis: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::ApcEnc1Dec1,
            latent_dim: 8,
            latent_dim_z1: None,
            latent_dim_z2: None,
            hidden_units: 32,
            sigma2_z2: 0.25,
            alpha_dis: 10.0,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, feature_dim: usize, segment: &SegmentParams, seed: u64) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            feature_dim,
            segment_len: segment.len,
            latent_dim_z1: self.latent_dim_z1.unwrap_or(self.latent_dim),
            latent_dim_z2: self.latent_dim_z2.unwrap_or(self.latent_dim),
            hidden_units: self.hidden_units,
            m: segment.m,
            sigma2_z2: self.sigma2_z2,
            alpha_dis: self.alpha_dis,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConversionConfig {
    pub griffin_lim_iterations: usize,
    /// Source/target sequence-id pairs converted by `convert --pairs`
    /// when no pairs file is given.
    pub pairs: Vec<(String, String)>,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self { griffin_lim_iterations: 60, pairs: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
    pub conversion: ConversionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: DataConfig::default(),
            model: ModelSection::default(),
            training: TrainConfig::default(),
            evaluation: EvalConfig::default(),
            conversion: ConversionConfig::default(),
        }
    }
}

/// Every dotted key path a config may contain, with `*` for optional keys
/// that do not appear in the serialized defaults.
fn known_keys() -> Vec<String> {
    fn walk(prefix: &str, t: &toml::Table, out: &mut Vec<String>) {
        for (k, v) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if let toml::Value::Table(sub) = v {
                walk(&path, sub, out);
            }
            out.push(path);
        }
    }
    let mut out = Vec::new();
    walk("", &toml::Table::try_from(RunConfig::default()).expect("defaults serialize"), &mut out);
    for k in [
        "output_dir",
        "data.audio_dir",
        "model.latent_dim_z1",
        "model.latent_dim_z2",
        "evaluation.speaker_probe.patience",
        "evaluation.content_probe.patience",
    ] {
        out.push(k.to_string());
    }
    out
}

/// Rejects the first key not in the schema, suggesting the closest sibling.
fn check_keys(table: &toml::Table) -> Result<()> {
    let known = known_keys();
    fn walk(prefix: &str, t: &toml::Table, known: &[String]) -> Result<()> {
        for (k, v) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if !known.contains(&path) {
                let depth = path.matches('.').count();
                let siblings = known.iter().filter(|c| c.matches('.').count() == depth && c.starts_with(prefix));
                let suggestion = siblings
                    .map(|c| (strsim::damerau_levenshtein(c, &path), c))
                    .filter(|(d, _)| *d <= 3)
                    .min()
                    .map(|(_, c)| c.rsplit('.').next().unwrap_or(c).to_string());
                return Err(Error::UnknownKey { key: path, suggestion });
            }
            if let toml::Value::Table(sub) = v {
                walk(&path, sub, known)?;
            }
        }
        Ok(())
    }
    walk("", table, &known)
}

/// Parses `value` as a TOML literal, falling back to a plain string.
fn parse_literal(value: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies one `section.key=value` override in place.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    ensure!(keys.iter().all(|k| !k.is_empty()), "override key `{path}` has an empty component");
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{path}`: `{k}` is not a section"))),
        };
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_literal(value.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        check_keys(&table)?;
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        ensure!(d.segment.len >= 1 && d.segment.shift >= 1, "data.segment len and shift must be >= 1");
        if d.source == DataSource::Audio {
            ensure!(d.audio_dir.is_some(), "data.source = \"audio\" needs data.audio_dir");
        }
        ensure!(d.synthetic.n_speakers > d.dev_speakers + d.test_speakers || d.source == DataSource::Audio, "synthetic corpus leaves no training speakers");
        ensure!(self.model.latent_dim >= 1 && self.model.hidden_units >= 1, "model dims must be >= 1");
        let feature_dim = match d.source {
            DataSource::Synthetic => d.synthetic.feature_dim,
            DataSource::Audio => d.stft.n_bins,
        };
        self.model.to_model_config(feature_dim, &d.segment, self.seed).validate()?;
        self.training.validate()?;
        self.evaluation.validate()?;
        ensure!(self.conversion.griffin_lim_iterations >= 1, "conversion.griffin_lim_iterations must be >= 1");
        Ok(())
    }

    /// The config without `output_dir`: where a run is written does not
    /// change what it computes.
    pub fn canonical(&self) -> RunConfig {
        RunConfig { output_dir: None, ..self.clone() }
    }

    /// Hash of the canonical serialized config (seed included).
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical().to_toml()?.as_bytes()))
    }

    /// First 12 hex digits of the hash of (config, seed).
    pub fn run_id(&self) -> Result<String> {
        Ok(self.config_hash()?[..12].to_string())
    }

    /// `output_dir`, else `$DSV_OUTPUT_DIR`, else `./runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_root().join(self.run_id()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let again = RunConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), c);
    }

    #[test]
    fn misspelled_key_suggests_neighbour() {
        let err = RunConfig::from_toml_str("[model]\nlatent_dmi = 16\n", &[]).unwrap_err();
        match err {
            Error::UnknownKey { key, suggestion } => {
                assert_eq!(key, "model.latent_dmi");
                assert_eq!(suggestion.as_deref(), Some("latent_dim"));
            }
            e => panic!("{e:?}"),
        }
        assert!(matches!(RunConfig::from_toml_str("sed = 1\n", &[]), Err(Error::UnknownKey { .. })));
        assert!(matches!(RunConfig::from_toml_str("[training]\npatiense = 3\n", &[]), Err(Error::UnknownKey { suggestion: Some(_), .. })));
    }

    #[test]
    fn latent_dim_is_shared_unless_overridden() {
        let c = RunConfig::from_toml_str("[model]\nlatent_dim = 16\nlatent_dim_z2 = 4\n", &[]).unwrap();
        let m = c.model.to_model_config(24, &c.data.segment, 0);
        assert_eq!((m.latent_dim_z1, m.latent_dim_z2), (16, 4));
    }

    #[test]
    fn overrides_and_run_id() {
        let base = RunConfig::default();
        let c = RunConfig::from_toml_str("", &["training.max_epochs=5".into(), "model.variant=fhvae".into(), "seed=3".into()]).unwrap();
        assert_eq!((c.training.max_epochs, c.model.variant, c.seed), (5, Variant::Fhvae, 3));
        assert_ne!(c.run_id().unwrap(), base.run_id().unwrap());
        assert_eq!(c.run_id().unwrap().len(), 12);
        let seeded = RunConfig { seed: 1, ..base.clone() };
        assert_ne!(seeded.run_id().unwrap(), base.run_id().unwrap());
        assert!(matches!(RunConfig::from_toml_str("", &["model.hidden=3".into()]), Err(Error::UnknownKey { .. })));
        assert!(RunConfig::from_toml_str("", &["nonsense".into()]).is_err());
        let nested = RunConfig::from_toml_str("", &["data.synthetic.n_speakers=30".into()]).unwrap();
        assert_eq!(nested.data.synthetic.n_speakers, 30);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[training]\nbatch_size = 0\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[model]\nvariant = \"apc\"\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[data]\nsource = \"audio\"\n", &[]).is_err());
    }

    #[test]
    fn output_dir_precedence() {
        let c = RunConfig { output_dir: Some("/tmp/x".into()), ..RunConfig::default() };
        assert_eq!(c.output_root(), PathBuf::from("/tmp/x"));
        assert_eq!(c.run_id().unwrap(), RunConfig::default().run_id().unwrap());
    }
}

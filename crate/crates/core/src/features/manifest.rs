//! Corpus manifest: the JSON index over feature files, splits, segmentation
//! and normalization statistics.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::io::{read_features, write_features};
use super::segment::{SegmentParams, SequenceRecord};
use super::stft::StftConfig;
use crate::error::{ensure, Error, Result};
use crate::hash::ContentHasher;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub speaker_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Relative to the manifest's directory.
    pub path: String,
    pub frames: usize,
    pub split: Split,
}

/// Per-bin mean/std, estimated on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    const STD_FLOOR: f64 = 1e-6;

    pub fn fit<'a>(records: impl IntoIterator<Item = &'a SequenceRecord>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for r in records {
            if sum.is_empty() {
                sum = vec![0.0; r.feature_dim()];
                sq = vec![0.0; r.feature_dim()];
            }
            ensure!(r.feature_dim() == sum.len(), "feature dims differ within corpus");
            for row in r.features.rows() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
            }
            n += r.n_frames();
        }
        ensure!(n > 0, "cannot fit normalization on an empty split");
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn apply(&self, m: &Array2<f32>) -> Array2<f32> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v as f64 - self.mean[j]) / self.std[j]) as f32;
            }
        }
        out
    }

    pub fn invert(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

/// Who produced an artifact: embedded in every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    pub segment: SegmentParams,
    pub feature_dim: usize,
    pub frame_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stft: Option<StftConfig>,
    pub seed: u64,
    pub normalization: Normalization,
    /// Per-frame content labels (synthetic corpora only), relative path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_labels: Option<String>,
    pub corpus_hash: String,
    pub provenance: Provenance,
}

/// Speaker-disjoint split: speakers are sorted, shuffled with `seed`, then the
/// first `n_test` go to test and the next `n_dev` to dev.
pub fn assign_splits(speakers: &BTreeSet<String>, n_dev: usize, n_test: usize, seed: u64) -> Result<BTreeMap<String, Split>> {
    ensure!(
        speakers.len() > n_dev + n_test,
        "{} speakers cannot fill {n_test} test + {n_dev} dev speakers and leave any for training",
        speakers.len()
    );
    let mut order: Vec<&String> = speakers.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b17));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < n_test {
                Split::Test
            } else if i < n_test + n_dev {
                Split::Dev
            } else {
                Split::Train
            };
            (s.clone(), split)
        })
        .collect())
}

/// Hash over sorted entry metadata and the raw feature values.
pub fn corpus_hash<'a>(entries: &[ManifestEntry], records: impl IntoIterator<Item = &'a SequenceRecord>) -> String {
    let by_id: BTreeMap<&str, &SequenceRecord> = records.into_iter().map(|r| (r.sequence_id.as_str(), r)).collect();
    let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.sequence_id.cmp(&b.sequence_id));
    let mut h = ContentHasher::new();
    for e in sorted {
        h.update(e.sequence_id.as_bytes()).update(e.speaker_id.as_bytes());
        h.update(format!("{:?}", e.split).as_bytes());
        if let Some(r) = by_id.get(e.sequence_id.as_str()) {
            h.update_f32s(r.features.as_slice().unwrap_or(&r.features.iter().copied().collect::<Vec<_>>()));
        }
    }
    h.finish_hex()
}

impl CorpusManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        ensure!(m.version == MANIFEST_VERSION, "unsupported manifest version {}", m.version);
        m.entries.sort_by(|a, b| a.sequence_id.cmp(&b.sequence_id));
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn entry(&self, sequence_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sequence_id == sequence_id)
    }

    pub fn speaker_groups(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .filter_map(|e| e.group.as_ref().map(|g| (e.speaker_id.clone(), g.clone())))
            .collect()
    }

    /// Loads raw (un-normalized) records for every entry, sorted by id.
    pub fn load_records(&self, dir: &Path) -> Result<Vec<SequenceRecord>> {
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let p: PathBuf = dir.join(&e.path);
            let feats = read_features(&p)?;
            if feats.dim() != (e.frames, self.feature_dim) {
                return Err(Error::Incompatible(format!(
                    "{} has shape {:?}, manifest records ({}, {})",
                    p.display(),
                    feats.dim(),
                    e.frames,
                    self.feature_dim
                )));
            }
            out.push(SequenceRecord::new(e.sequence_id.clone(), e.speaker_id.clone(), feats, self.frame_rate)?);
        }
        Ok(out)
    }

    /// Checks that every referenced file exists with the recorded shape and
    /// that the content hash still matches.
    pub fn verify(&self, dir: &Path) -> Result<Vec<SequenceRecord>> {
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            ensure!(ids.insert(e.sequence_id.as_str()), "duplicate sequence id {}", e.sequence_id);
        }
        let records = self.load_records(dir)?;
        let h = corpus_hash(&self.entries, &records);
        if h != self.corpus_hash {
            return Err(Error::Integrity(format!("corpus hash {h} does not match manifest {}", self.corpus_hash)));
        }
        Ok(records)
    }

    pub fn read_content_labels(&self, dir: &Path) -> Result<Option<BTreeMap<String, Vec<u16>>>> {
        let Some(rel) = &self.content_labels else { return Ok(None) };
        let p = dir.join(rel);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }
}

/// Writes feature files under `dir/features/` and assembles the manifest.
#[allow(clippy::too_many_arguments)]
pub fn build_manifest(
    dir: &Path,
    records: &[SequenceRecord],
    groups: &BTreeMap<String, String>,
    splits: &BTreeMap<String, Split>,
    segment: SegmentParams,
    stft: Option<StftConfig>,
    seed: u64,
    content_labels: Option<&BTreeMap<String, Vec<u16>>>,
    provenance: Provenance,
) -> Result<CorpusManifest> {
    ensure!(!records.is_empty(), "corpus is empty");
    let feature_dim = records[0].feature_dim();
    let mut sorted: Vec<&SequenceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.sequence_id.cmp(&b.sequence_id));
    let mut entries = Vec::with_capacity(records.len());
    let mut seen = BTreeSet::new();
    for r in &sorted {
        ensure!(r.feature_dim() == feature_dim, "feature dim differs for {}", r.sequence_id);
        ensure!(seen.insert(r.sequence_id.as_str()), "duplicate sequence id {}", r.sequence_id);
        let split = *splits
            .get(&r.speaker_id)
            .ok_or_else(|| Error::Lookup(format!("no split for speaker {}", r.speaker_id)))?;
        let rel = format!("features/{}.dsvf", r.sequence_id);
        write_features(dir.join(&rel), &r.features)?;
        entries.push(ManifestEntry {
            sequence_id: r.sequence_id.clone(),
            speaker_id: r.speaker_id.clone(),
            group: groups.get(&r.speaker_id).cloned(),
            path: rel,
            frames: r.n_frames(),
            split,
        });
    }
    let normalization = Normalization::fit(sorted.iter().copied().filter(|r| splits.get(&r.speaker_id) == Some(&Split::Train)))?;
    let labels_rel = match content_labels {
        Some(labels) => {
            let rel = "content_labels.json".to_string();
            let p = dir.join(&rel);
            std::fs::write(&p, serde_json::to_string(labels)?).map_err(|e| Error::io(&p, e))?;
            Some(rel)
        }
        None => None,
    };
    let corpus_hash = corpus_hash(&entries, sorted.iter().copied());
    Ok(CorpusManifest {
        version: MANIFEST_VERSION,
        entries,
        segment,
        feature_dim,
        frame_rate: records[0].frame_rate,
        stft,
        seed,
        normalization,
        content_labels: labels_rel,
        corpus_hash,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::synthetic::{make_synthetic_corpus, SyntheticSpec};

    fn prov() -> Provenance {
        Provenance { config_hash: "x".into(), code_version: "t".into(), seed: 1 }
    }

    #[test]
    fn splits_are_speaker_disjoint_and_seeded() {
        let spk: BTreeSet<String> = (0..10).map(|i| format!("s{i}")).collect();
        let a = assign_splits(&spk, 2, 3, 4).unwrap();
        assert_eq!(a, assign_splits(&spk, 2, 3, 4).unwrap());
        assert_eq!(a.values().filter(|s| **s == Split::Test).count(), 3);
        assert_eq!(a.values().filter(|s| **s == Split::Dev).count(), 2);
        assert!(assign_splits(&spk, 5, 5, 0).is_err());
    }

    #[test]
    fn build_verify_and_order_invariance() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { n_speakers: 5, sequences_per_speaker: 2, frames_per_sequence: 40, ..Default::default() };
        let c = make_synthetic_corpus(&spec).unwrap();
        let speakers = c.records.iter().map(|r| r.speaker_id.clone()).collect();
        let splits = assign_splits(&speakers, 1, 1, 0).unwrap();
        let m = build_manifest(dir.path(), &c.records, &c.speaker_groups, &splits, SegmentParams::default(), None, 0, Some(&c.content_labels), prov()).unwrap();
        m.write(dir.path().join("manifest.json")).unwrap();
        let back = CorpusManifest::read(dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, m);
        let recs = back.verify(dir.path()).unwrap();
        assert_eq!(recs.len(), 10);
        assert_eq!(back.read_content_labels(dir.path()).unwrap().unwrap(), c.content_labels);

        // reversed input order gives the same manifest
        let mut rev = c.records.clone();
        rev.reverse();
        let dir2 = tempfile::tempdir().unwrap();
        let m2 = build_manifest(dir2.path(), &rev, &c.speaker_groups, &splits, SegmentParams::default(), None, 0, Some(&c.content_labels), prov()).unwrap();
        assert_eq!(m2, m);

        // normalization uses the training split only
        let train: Vec<_> = c.records.iter().filter(|r| splits[&r.speaker_id] == Split::Train).collect();
        assert_eq!(m.normalization, Normalization::fit(train).unwrap());

        // tampering breaks verification
        std::fs::write(dir.path().join(&m.entries[0].path), b"DSVF").unwrap();
        assert!(back.verify(dir.path()).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let r = SequenceRecord::new("a", "s", Array2::from_shape_fn((4, 2), |(i, j)| (i + 3 * j) as f32), 100.0).unwrap();
        let n = Normalization::fit([&r]).unwrap();
        let z = n.apply(&r.features);
        let col_mean: f64 = z.column(0).iter().map(|&v| v as f64).sum::<f64>() / 4.0;
        assert!(col_mean.abs() < 1e-6);
        let back = n.invert(&z.mapv(f64::from));
        for (a, b) in back.iter().zip(r.features.iter()) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }
}

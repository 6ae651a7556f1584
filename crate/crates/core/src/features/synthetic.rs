//! Synthetic two-factor corpus.
//!
//! Every frame is `content_template[k] + speaker_offset[s] + noise`, where the
//! content class `k` is constant over blocks of `block_len` frames and the
//! speaker offset is constant over a speaker's sequences. Ground-truth labels
//! for both factors are emitted alongside the features.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::segment::SequenceRecord;
use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_speakers: usize,
    pub sequences_per_speaker: usize,
    pub frames_per_sequence: usize,
    pub feature_dim: usize,
    pub n_content_classes: usize,
    /// Frames per content block.
    pub block_len: usize,
    /// Scale of the per-speaker offset.
    pub speaker_scale: f64,
    /// Scale of the per-class content template.
    pub content_scale: f64,
    pub noise_std: f64,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_speakers: 40,
            sequences_per_speaker: 12,
            frames_per_sequence: 200,
            feature_dim: 24,
            n_content_classes: 8,
            block_len: 20,
            speaker_scale: 1.0,
            content_scale: 1.0,
            noise_std: 0.3,
            frame_rate: 100.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<SequenceRecord>,
    /// Content class per frame, keyed by sequence id.
    pub content_labels: BTreeMap<String, Vec<u16>>,
    /// Speaker group ("f"/"m" alternating), keyed by speaker id.
    pub speaker_groups: BTreeMap<String, String>,
    pub speaker_offsets: Vec<Array1<f64>>,
    pub content_templates: Vec<Array1<f64>>,
}

pub fn speaker_name(s: usize) -> String {
    format!("spk{s:03}")
}

pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    ensure!(spec.n_speakers >= 1, "n_speakers must be >= 1");
    ensure!(spec.sequences_per_speaker >= 1, "sequences_per_speaker must be >= 1");
    ensure!(spec.frames_per_sequence >= 1, "frames_per_sequence must be >= 1");
    ensure!(spec.feature_dim >= 1, "feature_dim must be >= 1");
    ensure!(spec.n_content_classes >= 1, "n_content_classes must be >= 1");
    ensure!(spec.block_len >= 1, "block_len must be >= 1");
    ensure!(spec.n_content_classes <= u16::MAX as usize, "too many content classes");
    ensure!(
        spec.speaker_scale >= 0.0 && spec.noise_std >= 0.0 && spec.content_scale >= 0.0,
        "scales must be non-negative"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.feature_dim;
    let gauss = |rng: &mut ChaCha8Rng, scale: f64| -> Array1<f64> {
        Array1::from_shape_fn(f, |_| {
            let e: f64 = StandardNormal.sample(rng);
            scale * e
        })
    };
    let templates: Vec<_> = (0..spec.n_content_classes).map(|_| gauss(&mut rng, spec.content_scale)).collect();
    let offsets: Vec<_> = (0..spec.n_speakers).map(|_| gauss(&mut rng, spec.speaker_scale)).collect();

    let t = spec.frames_per_sequence;
    let n_blocks = t.div_ceil(spec.block_len);
    let mut records = Vec::with_capacity(spec.n_speakers * spec.sequences_per_speaker);
    let mut content_labels = BTreeMap::new();
    let mut speaker_groups = BTreeMap::new();
    for (s, offset) in offsets.iter().enumerate() {
        let spk = speaker_name(s);
        speaker_groups.insert(spk.clone(), if s % 2 == 0 { "f" } else { "m" }.to_string());
        for u in 0..spec.sequences_per_speaker {
            let classes: Vec<usize> = (0..n_blocks).map(|_| rng.random_range(0..spec.n_content_classes)).collect();
            let mut feats = Array2::<f32>::zeros((t, f));
            let mut labels = Vec::with_capacity(t);
            for i in 0..t {
                let k = classes[i / spec.block_len];
                labels.push(k as u16);
                for j in 0..f {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    feats[[i, j]] = (templates[k][j] + offset[j] + spec.noise_std * e) as f32;
                }
            }
            let id = format!("{spk}_utt{u:02}");
            content_labels.insert(id.clone(), labels);
            records.push(SequenceRecord::new(id, spk.clone(), feats, spec.frame_rate)?);
        }
    }
    Ok(SyntheticCorpus { records, content_labels, speaker_groups, speaker_offsets: offsets, content_templates: templates })
}

/// Most frequent label among `labels[start..start + len]`, ties to the smallest.
pub fn majority_label(labels: &[u16], start: usize, len: usize) -> u16 {
    let mut counts = BTreeMap::new();
    for &l in &labels[start..start + len] {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    counts.into_iter().find(|&(_, c)| c == best).map(|(l, _)| l).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Leave-one-out nearest-centroid speaker accuracy on per-sequence means.
    fn centroid_accuracy(c: &SyntheticCorpus) -> f64 {
        let means: Vec<(String, Array1<f64>)> = c
            .records
            .iter()
            .map(|r| (r.speaker_id.clone(), r.features.mapv(f64::from).mean_axis(ndarray::Axis(0)).unwrap()))
            .collect();
        let mut correct = 0;
        for (i, (spk, m)) in means.iter().enumerate() {
            let mut sums: BTreeMap<&str, (Array1<f64>, usize)> = BTreeMap::new();
            for (j, (s2, m2)) in means.iter().enumerate() {
                if i != j {
                    let e = sums.entry(s2.as_str()).or_insert((Array1::zeros(m.len()), 0));
                    e.0 += m2;
                    e.1 += 1;
                }
            }
            let best = sums
                .iter()
                .map(|(s, (sum, n))| (*s, (sum / *n as f64 - m).mapv(|v| v * v).sum()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += usize::from(best == spk);
        }
        correct as f64 / means.len() as f64
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec { n_speakers: 3, sequences_per_speaker: 2, frames_per_sequence: 30, ..Default::default() };
        let a = make_synthetic_corpus(&spec).unwrap();
        let b = make_synthetic_corpus(&spec).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.sequence_id, y.sequence_id);
            assert!(x.features.iter().zip(y.features.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(a.content_labels, b.content_labels);
    }

    #[test]
    fn default_corpus_is_speaker_separable() {
        let c = make_synthetic_corpus(&SyntheticSpec::default()).unwrap();
        assert_eq!(c.records.len(), 480);
        assert_eq!(c.records[0].features.dim(), (200, 24));
        let acc = centroid_accuracy(&c);
        assert!(acc >= 0.95, "nearest-centroid speaker accuracy {acc}");
    }

    #[test]
    fn no_speaker_factor_gives_chance() {
        let spec = SyntheticSpec { speaker_scale: 0.0, n_speakers: 10, ..Default::default() };
        let acc = centroid_accuracy(&make_synthetic_corpus(&spec).unwrap());
        // chance is 0.1; 120 sequences
        assert!(acc < 0.25, "accuracy {acc}");
    }

    #[test]
    fn single_class_noiseless_differs_only_by_offset() {
        let spec = SyntheticSpec { n_content_classes: 1, noise_std: 0.0, n_speakers: 4, sequences_per_speaker: 2, ..Default::default() };
        let c = make_synthetic_corpus(&spec).unwrap();
        for r in &c.records {
            let s: usize = r.speaker_id[3..].parse().unwrap();
            for row in r.features.rows() {
                for j in 0..row.len() {
                    let want = (c.content_templates[0][j] + c.speaker_offsets[s][j]) as f32;
                    assert_eq!(row[j], want);
                }
            }
        }
    }

    #[test]
    fn majority() {
        assert_eq!(majority_label(&[1, 1, 2, 2, 2, 0], 0, 6), 2);
        assert_eq!(majority_label(&[3, 1, 1, 3], 0, 4), 1);
        assert_eq!(majority_label(&[3, 1, 1, 3], 3, 1), 3);
    }
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::eer::{compute_eer, cosine, Trial, TrialSet};
use super::nd::nd_metric;
use crate::conversion::SequentialFeature;
use crate::error::{ensure, Error, Result};

/// Re-encoded feature of one converted utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertedFeature {
    pub source_speaker: String,
    pub target_speaker: String,
    pub vector: Vec<f64>,
}

/// Speakers that take part in one condition, e.g. a gender group or all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub speakers: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionCell {
    pub eer_a: f64,
    pub eer_b: f64,
    pub eer_c: f64,
    /// Undefined when the unconverted baseline separates speakers perfectly.
    pub nd: Option<f64>,
    pub pairs: usize,
    pub trials_a: TrialSet,
    pub trials_b: TrialSet,
    pub trials_c: TrialSet,
}

fn centroid<'a>(vs: impl Iterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0.0;
    for v in vs {
        let a = acc.get_or_insert_with(|| vec![0.0; v.len()]);
        for (x, y) in a.iter_mut().zip(v) {
            *x += y;
        }
        n += 1.0;
    }
    acc.map(|a| a.into_iter().map(|x| x / n).collect())
}

/// Scores each converted utterance against speaker centroids built from
/// `enrollment`. Experiment A leaves out the target speaker and counts the
/// source as the true speaker; experiment B leaves out the source and counts
/// the target. The baseline EER_C scores every unconverted utterance against
/// leave-one-out centroids of the same population.
pub fn conversion_eval(
    converted: &[ConvertedFeature],
    enrollment: &[SequentialFeature],
    unconverted: &[SequentialFeature],
    conditions: &[Condition],
) -> Result<BTreeMap<String, ConversionCell>> {
    let mut out = BTreeMap::new();
    for cond in conditions {
        let in_cond = |s: &str| cond.speakers.contains(s);
        let mut centroids = BTreeMap::new();
        for spk in &cond.speakers {
            let c = centroid(enrollment.iter().filter(|f| &f.speaker_id == spk).map(|f| f.vector.as_slice()))
                .ok_or_else(|| Error::Lookup(format!("no enrollment features for speaker {spk}")))?;
            centroids.insert(spk.as_str(), c);
        }
        let pairs: Vec<&ConvertedFeature> =
            converted.iter().filter(|c| in_cond(&c.source_speaker) && in_cond(&c.target_speaker)).collect();
        ensure!(!pairs.is_empty(), "condition {} has no converted pairs", cond.name);
        let experiment = |true_spk: fn(&ConvertedFeature) -> &str, excluded: fn(&ConvertedFeature) -> &str| {
            let mut trials = Vec::new();
            for c in &pairs {
                for (spk, cen) in &centroids {
                    if *spk != excluded(c) {
                        trials.push(Trial { score: cosine(&c.vector, cen), is_target: *spk == true_spk(c) });
                    }
                }
            }
            trials
        };
        let a = TrialSet::new(
            format!("{}: converted vs centroids without target, source is true", cond.name),
            experiment(|c| c.source_speaker.as_str(), |c| c.target_speaker.as_str()),
        )?;
        let b = TrialSet::new(
            format!("{}: converted vs centroids without source, target is true", cond.name),
            experiment(|c| c.target_speaker.as_str(), |c| c.source_speaker.as_str()),
        )?;
        let base: Vec<&SequentialFeature> = unconverted.iter().filter(|f| in_cond(&f.speaker_id)).collect();
        if base.is_empty() {
            return Err(Error::Lookup(format!("no unconverted baseline features for condition {}", cond.name)));
        }
        let mut trials_c = Vec::new();
        for u in &base {
            for spk in &cond.speakers {
                let others = base.iter().filter(|f| &f.speaker_id == spk && f.sequence_id != u.sequence_id);
                if let Some(cen) = centroid(others.map(|f| f.vector.as_slice())) {
                    trials_c.push(Trial { score: cosine(&u.vector, &cen), is_target: *spk == u.speaker_id });
                }
            }
        }
        let c = TrialSet::new(format!("{}: unconverted vs leave-one-out centroids", cond.name), trials_c)?;
        let (eer_a, eer_b, eer_c) = (compute_eer(&a)?, compute_eer(&b)?, compute_eer(&c)?);
        let nd = if eer_c > 0.0 { Some(nd_metric(eer_a, eer_b, eer_c)?) } else { None };
        out.insert(cond.name.clone(), ConversionCell { eer_a, eer_b, eer_c, nd, pairs: pairs.len(), trials_a: a, trials_b: b, trials_c: c });
    }
    Ok(out)
}

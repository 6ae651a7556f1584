use serde::{Deserialize, Serialize};

use crate::conversion::SequentialFeature;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub score: f64,
    pub is_target: bool,
}

/// Scored trials plus a note on how the pairs were formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub pairing: String,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(pairing: impl Into<String>, trials: Vec<Trial>) -> Result<Self> {
        let set = Self { pairing: pairing.into(), trials };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let targets = self.trials.iter().filter(|t| t.is_target).count();
        ensure!(targets >= 1, "trial set `{}` has no target trials", self.pairing);
        ensure!(targets < self.trials.len(), "trial set `{}` has no non-target trials", self.pairing);
        ensure!(self.trials.iter().all(|t| t.score.is_finite()), "trial set `{}` has non-finite scores", self.pairing);
        Ok(())
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.trials.iter().filter(|t| t.is_target).count();
        (t, self.trials.len() - t)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn nonzero(f: &SequentialFeature) -> Result<()> {
    if f.vector.iter().all(|&v| v == 0.0) {
        return Err(Error::Contract(format!("feature of sequence {} has zero norm", f.sequence_id)));
    }
    Ok(())
}

/// Every unordered pair scored by cosine similarity; target = same speaker.
pub fn cosine_score_matrix(features: &[SequentialFeature]) -> Result<TrialSet> {
    ensure!(features.len() >= 2, "need at least two features, got {}", features.len());
    for f in features {
        nonzero(f)?;
        ensure!(f.vector.len() == features[0].vector.len(), "feature of {} has a different dimension", f.sequence_id);
    }
    let mut trials = Vec::with_capacity(features.len() * (features.len() - 1) / 2);
    for (i, a) in features.iter().enumerate() {
        for b in &features[i + 1..] {
            trials.push(Trial { score: cosine(&a.vector, &b.vector), is_target: a.speaker_id == b.speaker_id });
        }
    }
    TrialSet::new("all unordered pairs of sequential features", trials)
}

/// One ROC operating point: accept iff score >= threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at every distinct score (ascending) followed by +inf.
pub fn roc_points(trials: &TrialSet) -> Result<Vec<OperatingPoint>> {
    trials.validate()?;
    let (n_t, n_n) = trials.counts();
    let mut sorted = trials.trials.clone();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // below the first threshold everything is accepted
    let (mut rejected_t, mut accepted_n) = (0usize, n_n);
    let mut points = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        points.push(OperatingPoint { threshold: s, far: accepted_n as f64 / n_n as f64, frr: rejected_t as f64 / n_t as f64 });
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].is_target {
                rejected_t += 1;
            } else {
                accepted_n -= 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(points)
}

/// Crossing of FAR and FRR, linearly interpolated between the adjacent
/// operating points that bracket it.
pub fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.frr - a.far, b.frr - b.far);
        if da <= 0.0 && db > 0.0 {
            if da == 0.0 {
                return a.far;
            }
            let t = da / (da - db);
            return a.far + t * (b.far - a.far);
        }
    }
    unreachable!("FRR - FAR runs from -1 to 1 over the sweep")
}

/// Equal error rate in percent.
pub fn compute_eer(trials: &TrialSet) -> Result<f64> {
    Ok(100.0 * eer_from_points(&roc_points(trials)?))
}

//! Fixtures shared by the criterion benches.

use dsv_core::eval::{Trial, TrialSet};
use dsv_core::features::{make_synthetic_corpus, Normalization, SegmentParams, SequenceRecord, SyntheticSpec};
use dsv_core::model::{ModelConfig, Variant};
use dsv_core::training::SegmentSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reduced model used by the synthetic benchmark.
pub fn bench_model_config(variant: Variant) -> ModelConfig {
    ModelConfig { variant, feature_dim: 24, latent_dim_z1: 8, latent_dim_z2: 8, hidden_units: 32, ..Default::default() }
}

/// Normalized segments of a small synthetic corpus.
pub fn bench_segments(n_speakers: usize) -> SegmentSet {
    let spec = SyntheticSpec { n_speakers, ..SyntheticSpec::default() };
    let corpus = make_synthetic_corpus(&spec).expect("valid spec");
    let norm = Normalization::fit(corpus.records.iter()).expect("non-empty corpus");
    let recs: Vec<SequenceRecord> = corpus.records.iter().map(|r| SequenceRecord { features: norm.apply(&r.features), ..r.clone() }).collect();
    SegmentSet::from_records(&recs, &SegmentParams::default()).expect("valid segments")
}

/// `n` scored trials where targets score higher on average.
pub fn bench_trials(n: usize, seed: u64) -> TrialSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = (0..n)
        .map(|i| {
            let is_target = i % 4 == 0;
            Trial { score: rng.random::<f64>() + if is_target { 0.3 } else { 0.0 }, is_target }
        })
        .collect();
    TrialSet::new("bench", trials).expect("both classes present")
}

/// Clustered features for probe benchmarks.
pub fn bench_probe_data(classes: usize, per_class: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            xs.push(center.iter().map(|m| m + rng.random_range(-1.0..1.0)).collect());
            ys.push(c);
        }
    }
    (xs, ys)
}

//! Cosine-scoring EER, k-fold probes, the normalized-difference conversion
//! metric and the synthetic disentanglement benchmark.

pub mod benchmark;
pub mod convert_eval;
pub mod eer;
pub mod nd;
pub mod plots;
pub mod probe;

pub use benchmark::{disentanglement_benchmark, BenchmarkInputs, EvalConfig, EvalReport};
pub use convert_eval::{conversion_eval, Condition, ConversionCell, ConvertedFeature};
pub use eer::{compute_eer, cosine_score_matrix, Trial, TrialSet};
pub use nd::nd_metric;
pub use probe::{kfold_probe, ProbeConfig, ProbeKind, ProbeResult};

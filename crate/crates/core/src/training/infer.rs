use ndarray::Array2;

use crate::error::{ensure, Result};
use crate::features::Segment;
use crate::model::{time_major, SeqVae};

/// Segments encoded per forward call during inference.
pub const INFER_CHUNK: usize = 256;

/// Closed-form posterior mean of mu2 given per-segment z2 means under the
/// N(0, I) hyperprior: `sum(means) / (N + sigma2_z2)`.
pub fn svector_from_means(means: &[Vec<f64>], sigma2_z2: f64) -> Result<Vec<f64>> {
    ensure!(!means.is_empty(), "cannot infer an s-vector from zero segments");
    let d = means[0].len();
    ensure!(means.iter().all(|m| m.len() == d), "segment means differ in dimension");
    let denom = means.len() as f64 + sigma2_z2 / 1.0;
    let mut out = vec![0.0; d];
    for m in means {
        for (o, v) in out.iter_mut().zip(m) {
            *o += v;
        }
    }
    Ok(out.into_iter().map(|s| s / denom).collect())
}

/// z2 posterior means for many segments, batched.
pub fn z2_means(model: &SeqVae, frames: &[&Array2<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(INFER_CHUNK) {
        let (mu2, _, _, _) = model.encode_means(&time_major(chunk));
        out.extend(mu2.rows().into_iter().map(|r| r.to_vec()));
    }
    out
}

/// Infers the s-vector of one unseen sequence from its segments.
pub fn infer_svector(model: &SeqVae, segments: &[Segment]) -> Result<Vec<f64>> {
    ensure!(!segments.is_empty(), "cannot infer an s-vector from zero segments");
    ensure!(
        segments.iter().all(|s| s.sequence_id == segments[0].sequence_id),
        "s-vector inference needs segments from a single sequence"
    );
    let want = (model.config.segment_len, model.config.feature_dim);
    ensure!(segments.iter().all(|s| s.frames.dim() == want), "segment shape does not match the model");
    let frames: Vec<&Array2<f64>> = segments.iter().map(|s| &s.frames).collect();
    svector_from_means(&z2_means(model, &frames), model.config.sigma2_z2)
}

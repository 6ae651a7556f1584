use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{segment_sequence, Segment, SegmentParams, SequenceRecord};
use crate::model::{time_major, SeqVae};
use crate::training::infer::{svector_from_means, INFER_CHUNK};

/// `[mean ; logvar]` of q(z1) for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentalFeature {
    pub sequence_id: String,
    pub segment_index: usize,
    pub vector: Vec<f64>,
}

/// Inferred s-vector of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialFeature {
    pub sequence_id: String,
    pub speaker_id: String,
    pub vector: Vec<f64>,
}

fn check(model: &SeqVae, seq: &SequenceRecord, params: &SegmentParams) -> Result<()> {
    if seq.feature_dim() != model.config.feature_dim {
        return Err(Error::Incompatible(format!(
            "sequence {} has {} feature bins, checkpoint expects {}",
            seq.sequence_id,
            seq.feature_dim(),
            model.config.feature_dim
        )));
    }
    if params.len != model.config.segment_len {
        return Err(Error::Incompatible(format!("segment length {} vs checkpoint {}", params.len, model.config.segment_len)));
    }
    Ok(())
}

fn segments(model: &SeqVae, seq: &SequenceRecord, params: &SegmentParams) -> Result<Vec<Segment>> {
    check(model, seq, params)?;
    let segs = segment_sequence(seq, params)?;
    if segs.is_empty() {
        return Err(Error::Contract(format!(
            "sequence {} has {} frames, fewer than one segment of {}",
            seq.sequence_id,
            seq.n_frames(),
            params.len
        )));
    }
    Ok(segs)
}

/// `(mu2, mu1, lv1)` per segment, with z1 conditioned on the z2 posterior mean.
fn encode(model: &SeqVae, segs: &[Segment]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for chunk in segs.chunks(INFER_CHUNK) {
        let frames: Vec<&Array2<f64>> = chunk.iter().map(|s| &s.frames).collect();
        let (mu2, _, mu1, lv1) = model.encode_means(&time_major(&frames));
        parts.0.push(mu2);
        parts.1.push(mu1);
        parts.2.push(lv1);
    }
    let cat = |v: Vec<Array2<f64>>| {
        let views: Vec<_> = v.iter().map(|m| m.view()).collect();
        concatenate(Axis(0), &views).expect("equal widths")
    };
    (cat(parts.0), cat(parts.1), cat(parts.2))
}

fn svector(model: &SeqVae, mu2: &Array2<f64>) -> Result<Vec<f64>> {
    let means: Vec<Vec<f64>> = mu2.rows().into_iter().map(|r| r.to_vec()).collect();
    svector_from_means(&means, model.config.sigma2_z2)
}

pub fn extract_segmental(model: &SeqVae, seq: &SequenceRecord, params: &SegmentParams) -> Result<Vec<SegmentalFeature>> {
    let segs = segments(model, seq, params)?;
    let (_, mu1, lv1) = encode(model, &segs);
    Ok(segs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut v = mu1.row(i).to_vec();
            v.extend(lv1.row(i).iter());
            SegmentalFeature { sequence_id: s.sequence_id.clone(), segment_index: s.segment_index, vector: v }
        })
        .collect())
}

pub fn extract_sequential(model: &SeqVae, seq: &SequenceRecord, params: &SegmentParams) -> Result<SequentialFeature> {
    let segs = segments(model, seq, params)?;
    let (mu2, _, _) = encode(model, &segs);
    Ok(SequentialFeature { sequence_id: seq.sequence_id.clone(), speaker_id: seq.speaker_id.clone(), vector: svector(model, &mu2)? })
}

fn conversion_params(params: &SegmentParams) -> SegmentParams {
    SegmentParams { shift: params.len, ..*params }
}

/// Decodes every source segment from its own z1 posterior mean and the given
/// sequence-level z2. Output has `floor(T / L) * L` frames.
pub fn convert_with_svector(model: &SeqVae, source: &SequenceRecord, svector: &[f64], params: &SegmentParams) -> Result<Array2<f64>> {
    if svector.len() != model.config.latent_dim_z2 {
        return Err(Error::Incompatible(format!("s-vector has {} dims, checkpoint expects {}", svector.len(), model.config.latent_dim_z2)));
    }
    let segs = segments(model, source, &conversion_params(params))?;
    let (_, mu1, _) = encode(model, &segs);
    let z2 = Array2::from_shape_fn((segs.len(), svector.len()), |(_, j)| svector[j]);
    let steps = model.decode_recon_batch(&mu1, &z2);
    let (l, f) = (model.config.segment_len, model.config.feature_dim);
    Ok(Array2::from_shape_fn((segs.len() * l, f), |(r, j)| steps[r % l][[r / l, j]]))
}

/// Content of `source`, identity of `target`.
pub fn convert_voice(model: &SeqVae, source: &SequenceRecord, target: &SequenceRecord, params: &SegmentParams) -> Result<Array2<f64>> {
    let sv = extract_sequential(model, target, &conversion_params(params))?;
    convert_with_svector(model, source, &sv.vector, params)
}

/// Reconstruction through latent means: each segment decoded from its own z1
/// mean and the sequence's own s-vector.
pub fn reconstruct(model: &SeqVae, seq: &SequenceRecord, params: &SegmentParams) -> Result<Array2<f64>> {
    let p = conversion_params(params);
    let segs = segments(model, seq, &p)?;
    let (mu2, mu1, _) = encode(model, &segs);
    let sv = svector(model, &mu2)?;
    let z2 = Array2::from_shape_fn((segs.len(), sv.len()), |(_, j)| sv[j]);
    let steps = model.decode_recon_batch(&mu1, &z2);
    let (l, f) = (model.config.segment_len, model.config.feature_dim);
    Ok(Array2::from_shape_fn((segs.len() * l, f), |(r, j)| steps[r % l][[r / l, j]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaussianNoise, ModelConfig, NoiseSource, Variant};

    fn tiny() -> SeqVae {
        SeqVae::new(ModelConfig { variant: Variant::ApcEnc1Dec1, feature_dim: 6, segment_len: 5, latent_dim_z1: 3, latent_dim_z2: 4, hidden_units: 8, seed: 3, ..Default::default() })
            .unwrap()
    }

    fn rec(id: &str, seed: u64, t: usize) -> SequenceRecord {
        let f = GaussianNoise::seeded(seed).standard_normal(t, 6).mapv(|v| v as f32);
        SequenceRecord::new(id, "spk", f, 100.0).unwrap()
    }

    fn params() -> SegmentParams {
        SegmentParams { len: 5, shift: 5, m: 3 }
    }

    #[test]
    fn shapes_and_determinism() {
        let m = tiny();
        let s = rec("a", 1, 23);
        let seg = extract_segmental(&m, &s, &params()).unwrap();
        assert_eq!(seg.len(), 4);
        assert!(seg.iter().all(|f| f.vector.len() == 6));
        assert_eq!(seg, extract_segmental(&m, &s, &params()).unwrap());
        let sq = extract_sequential(&m, &s, &params()).unwrap();
        assert_eq!(sq.vector.len(), 4);
        assert_eq!(convert_voice(&m, &s, &rec("b", 2, 40), &params()).unwrap().dim(), (20, 6));
    }

    #[test]
    fn duplicate_segments_give_identical_features() {
        let m = tiny();
        let mut f = GaussianNoise::seeded(4).standard_normal(15, 6).mapv(|v| v as f32);
        let block = f.slice(ndarray::s![0..5, ..]).to_owned();
        f.slice_mut(ndarray::s![10..15, ..]).assign(&block);
        let s = SequenceRecord::new("d", "spk", f, 100.0).unwrap();
        let seg = extract_segmental(&m, &s, &params()).unwrap();
        assert_eq!(seg[0].vector, seg[2].vector);
        assert_ne!(seg[0].vector, seg[1].vector);
    }

    #[test]
    fn repeated_sequence_moves_estimate_toward_mean() {
        let m = tiny();
        let s = rec("a", 5, 20);
        let mut doubled = s.clone();
        doubled.features = ndarray::concatenate![Axis(0), s.features, s.features];
        let segs = segment_sequence(&s, &params()).unwrap();
        let (mu2, _, _) = encode(&m, &segs);
        let mean = mu2.mean_axis(Axis(0)).unwrap();
        let dist = |v: &[f64]| v.iter().zip(mean.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let one = extract_sequential(&m, &s, &params()).unwrap();
        let two = extract_sequential(&m, &doubled, &params()).unwrap();
        assert!(dist(&two.vector) < dist(&one.vector));
    }

    #[test]
    fn self_conversion_is_reconstruction() {
        let m = tiny();
        let s = rec("a", 6, 27);
        assert_eq!(convert_voice(&m, &s, &s, &params()).unwrap(), reconstruct(&m, &s, &params()).unwrap());
    }

    #[test]
    fn target_enters_only_through_its_svector() {
        let m = tiny();
        let src = rec("a", 7, 30);
        let t1 = rec("b", 8, 30);
        let sv = extract_sequential(&m, &t1, &params()).unwrap();
        let via_target = convert_voice(&m, &src, &t1, &params()).unwrap();
        assert_eq!(via_target, convert_with_svector(&m, &src, &sv.vector, &params()).unwrap());
        // a different target sequence with the same feature gives the same output
        let mut t2 = rec("c", 9, 50);
        t2.speaker_id = "other".into();
        let out2 = convert_with_svector(&m, &src, &sv.vector, &params()).unwrap();
        assert_eq!(via_target, out2);
        assert_ne!(convert_voice(&m, &src, &t2, &params()).unwrap(), via_target);
    }

    #[test]
    fn errors() {
        let m = tiny();
        assert!(matches!(extract_sequential(&m, &rec("s", 1, 3), &params()), Err(Error::Contract(_))));
        let wide = SequenceRecord::new("w", "s", Array2::zeros((10, 7)), 100.0).unwrap();
        assert!(matches!(extract_segmental(&m, &wide, &params()), Err(Error::Incompatible(_))));
        assert!(convert_voice(&m, &rec("a", 1, 30), &rec("b", 1, 2), &params()).is_err());
    }
}

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// One utterance: a `T x F` log-magnitude feature matrix plus its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub sequence_id: String,
    pub speaker_id: String,
    pub features: Array2<f32>,
    pub frame_rate: f64,
}

impl SequenceRecord {
    pub fn new(sequence_id: impl Into<String>, speaker_id: impl Into<String>, features: Array2<f32>, frame_rate: f64) -> Result<Self> {
        let r = Self { sequence_id: sequence_id.into(), speaker_id: speaker_id.into(), features, frame_rate };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, f) = self.features.dim();
        ensure!(t >= 1 && f >= 1, "sequence {} has empty features ({t}x{f})", self.sequence_id);
        ensure!(self.features.iter().all(|v| v.is_finite()), "sequence {} has non-finite features", self.sequence_id);
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    /// Frames per segment.
    pub len: usize,
    pub shift: usize,
    /// Prediction offset in frames.
    pub m: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self { len: 20, shift: 20, m: 3 }
    }
}

/// `L` consecutive frames, optionally with the window `m` frames ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub sequence_id: String,
    pub segment_index: usize,
    pub start_frame: usize,
    pub frames: Array2<f64>,
    pub future_frames: Option<Array2<f64>>,
}

impl Segment {
    pub fn has_target(&self) -> bool {
        self.future_frames.is_some()
    }
}

/// Start frames of every full segment of a `t`-frame sequence.
pub fn segment_starts(t: usize, params: &SegmentParams) -> Vec<usize> {
    if t < params.len {
        return Vec::new();
    }
    (0..=t - params.len).step_by(params.shift).collect()
}

/// Cuts a sequence into segments starting at `0, shift, 2*shift, ...`.
///
/// Segments whose future window would run past the end are kept without a
/// prediction target. A sequence shorter than one segment yields no segments.
pub fn segment_sequence(seq: &SequenceRecord, params: &SegmentParams) -> Result<Vec<Segment>> {
    ensure!(params.len >= 1, "segment length must be >= 1");
    ensure!(params.shift >= 1, "segment shift must be >= 1");
    let t = seq.n_frames();
    let feats = seq.features.mapv(f64::from);
    Ok(segment_starts(t, params)
        .into_iter()
        .enumerate()
        .map(|(n, start)| {
            let end = start + params.len;
            let future = (end + params.m <= t).then(|| feats.slice(s![start + params.m..end + params.m, ..]).to_owned());
            Segment {
                sequence_id: seq.sequence_id.clone(),
                segment_index: n,
                start_frame: start,
                frames: feats.slice(s![start..end, ..]).to_owned(),
                future_frames: future,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn indexed(t: usize, f: usize) -> SequenceRecord {
        let feats = Array2::from_shape_fn((t, f), |(i, j)| (i * 1000 + j) as f32);
        SequenceRecord::new("s0", "spk", feats, 100.0).unwrap()
    }

    #[test]
    fn enumeration_example() {
        let segs = segment_sequence(&indexed(100, 3), &SegmentParams { len: 20, shift: 20, m: 3 }).unwrap();
        // starts 0,20,40,60,80; only start 80 lacks frames 100..102
        assert_eq!(segs.len(), 5);
        assert_eq!(segs.iter().filter(|s| s.has_target()).count(), 4);
        assert!(!segs[4].has_target());
        assert_eq!(segs.iter().map(|s| s.start_frame).collect::<Vec<_>>(), vec![0, 20, 40, 60, 80]);
    }

    #[test]
    fn too_short_is_empty() {
        let segs = segment_sequence(&indexed(19, 2), &SegmentParams { len: 20, shift: 20, m: 3 }).unwrap();
        assert!(segs.is_empty());
    }

    #[test]
    fn zero_shift_target_is_identity() {
        let segs = segment_sequence(&indexed(50, 2), &SegmentParams { len: 10, shift: 7, m: 0 }).unwrap();
        assert!(!segs.is_empty());
        for s in &segs {
            assert_eq!(s.future_frames.as_ref().unwrap(), &s.frames);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(segment_sequence(&indexed(10, 2), &SegmentParams { len: 0, shift: 1, m: 0 }).is_err());
        assert!(segment_sequence(&indexed(10, 2), &SegmentParams { len: 2, shift: 0, m: 0 }).is_err());
    }

    proptest! {
        #[test]
        fn coverage_and_alignment(t in 1usize..120, len in 1usize..25, shift in 1usize..25, m in 0usize..6) {
            let seq = indexed(t, 2);
            let p = SegmentParams { len, shift, m };
            let segs = segment_sequence(&seq, &p).unwrap();
            for s in &segs {
                prop_assert!(s.start_frame + len <= t);
                prop_assert_eq!(s.has_target(), s.start_frame + m + len <= t);
                for r in 0..len {
                    prop_assert_eq!(s.frames[[r, 0]], ((s.start_frame + r) * 1000) as f64);
                    if let Some(fut) = &s.future_frames {
                        prop_assert_eq!(fut[[r, 1]], ((s.start_frame + m + r) * 1000 + 1) as f64);
                    }
                }
            }
            // non-overlapping segmentation reproduces the leading floor(T/L)*L frames
            let tiles = segment_sequence(&seq, &SegmentParams { len, shift: len, m }).unwrap();
            prop_assert_eq!(tiles.len(), t / len);
            for (k, s) in tiles.iter().enumerate() {
                prop_assert_eq!(s.start_frame, k * len);
            }
        }
    }
}

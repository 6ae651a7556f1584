//! Feature pipeline: waveforms or synthetic data in, segmented feature
//! matrices with prediction targets out.

pub mod audio;
pub mod io;
pub mod manifest;
pub mod segment;
pub mod stft;
pub mod synthetic;

pub use io::{read_features, write_features};
pub use manifest::{CorpusManifest, ManifestEntry, Normalization, Provenance, Split};
pub use segment::{segment_sequence, Segment, SegmentParams, SequenceRecord};
pub use stft::{stft_log_magnitude, StftConfig};
pub use synthetic::{make_synthetic_corpus, SyntheticCorpus, SyntheticSpec};

//! Content hashing helpers shared by manifests, checkpoints and run ids.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental hasher over a sequence of byte chunks.
#[derive(Default)]
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        // length-prefix so chunk boundaries are unambiguous
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn update_f32s(&mut self, xs: &[f32]) -> &mut Self {
        self.0.update((xs.len() as u64).to_le_bytes());
        for x in xs {
            self.0.update(x.to_le_bytes());
        }
        self
    }

    pub fn finish_hex(self) -> String {
        hex::encode(self.0.finalize())
    }
}

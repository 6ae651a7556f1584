//! Versioned checkpoint container.
//!
//! ```text
//! b"DSVCKPT\0" | u32 version | u64 header_len | header JSON | f64 LE payload | sha256(all previous bytes)
//! ```
//!
//! The header lists every tensor's name, shape and element count in payload
//! order, plus the model config and free-form metadata.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use super::config::ModelConfig;
use super::seqvae::SeqVae;
use crate::error::{ensure, Error, Result};

const MAGIC: [u8; 8] = *b"DSVCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            tensors: self.tensors.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone(), len: t.data.len() }).collect(),
            meta: self.meta.clone(),
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for t in &self.tensors {
            ensure!(t.shape.iter().product::<usize>() == t.data.len(), "tensor {} shape/len mismatch", t.name);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: &str| Error::Format { offset: offset as u64, msg: msg.to_string() };
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(fmt(bytes.len(), "checkpoint truncated"));
        }
        if bytes[..8] != MAGIC {
            return Err(fmt(0, "bad checkpoint magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint content hash mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt(8, &format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| fmt(12, "header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        let mut off = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let end = off + 8 * e.len;
            if end > body.len() {
                return Err(fmt(body.len(), &format!("payload truncated in tensor {}", e.name)));
            }
            let data = body[off..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name: e.name, shape: e.shape, data });
            off = end;
        }
        if off != body.len() {
            return Err(fmt(off, "trailing bytes after payload"));
        }
        Ok(Self { model: header.model, tensors, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::hash::sha256_hex(&bytes))
}

impl SeqVae {
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.named_tensors()
            .into_iter()
            .map(|(name, data, shape)| NamedTensor { name: format!("model.{name}"), shape, data: data.to_vec() })
            .collect()
    }

    /// Rebuilds a model from `model.*` tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut model = SeqVae::new(config)?;
        let expected: Vec<(String, Vec<usize>)> = model.named_tensors().into_iter().map(|(n, _, s)| (format!("model.{n}"), s)).collect();
        let found: Vec<&NamedTensor> = tensors.iter().filter(|t| t.name.starts_with("model.")).collect();
        if found.len() != expected.len() {
            return Err(Error::Incompatible(format!("checkpoint has {} model tensors, config expects {}", found.len(), expected.len())));
        }
        for (slot, ((name, shape), t)) in model.slices_mut().into_iter().zip(expected.iter().zip(found)) {
            if &t.name != name || &t.shape != shape {
                return Err(Error::Incompatible(format!("tensor {} {:?} does not match expected {} {:?}", t.name, t.shape, name, shape)));
            }
            slot.copy_from_slice(&t.data);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{time_major, BatchNoise, GaussianNoise, NoiseSource, Variant};

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig { variant: Variant::ApcEnc2Dec2, feature_dim: 5, segment_len: 4, latent_dim_z1: 2, latent_dim_z2: 3, hidden_units: 6, ..Default::default() };
        let m = SeqVae::new(cfg.clone()).unwrap();
        let ck = Checkpoint { model: cfg.clone(), tensors: m.to_tensors(), meta: serde_json::json!({"step": 7}) };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.dsvc");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let m2 = SeqVae::from_tensors(back.model.clone(), &back.tensors).unwrap();
        assert_eq!(m2, m);

        let x = GaussianNoise::seeded(5).standard_normal(4, 5);
        let xs = time_major(&[&x]);
        let n = BatchNoise::draw(&mut GaussianNoise::seeded(6), 1, &cfg);
        let (a, _) = m.forward_batch(&xs, n.clone());
        let (b, _) = m2.forward_batch(&xs, n);
        assert!(a.recon.iter().zip(&b.recon).all(|(p, q)| p.iter().zip(q.iter()).all(|(u, v)| u.to_bits() == v.to_bits())));
    }

    #[test]
    fn corruption_detected() {
        let cfg = ModelConfig { feature_dim: 3, segment_len: 2, latent_dim_z1: 1, latent_dim_z2: 1, hidden_units: 2, ..Default::default() };
        let m = SeqVae::new(cfg.clone()).unwrap();
        let mut bytes = Checkpoint { model: cfg.clone(), tensors: m.to_tensors(), meta: serde_json::Value::Null }.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Format { .. })));

        let other = ModelConfig { hidden_units: 3, ..cfg };
        assert!(matches!(SeqVae::from_tensors(other, &m.to_tensors()), Err(Error::Incompatible(_))));
    }
}

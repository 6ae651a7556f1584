//! Binary feature matrix format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"DSVF"
//! 4       4     version (u32 LE) = 1
//! 8       4     T rows (u32 LE)
//! 12      4     F cols (u32 LE)
//! 16      4*T*F f32 LE, row-major
//! ```

use ndarray::Array2;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const MAGIC: [u8; 4] = *b"DSVF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(m: &Array2<f32>) -> Result<Vec<u8>> {
    let (t, f) = m.dim();
    ensure!(t >= 1 && f >= 1, "refusing to write an empty {t}x{f} feature matrix");
    ensure!(t <= u32::MAX as usize && f <= u32::MAX as usize, "matrix too large for the format");
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * f);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], off: usize) -> Result<u32> {
    let b = bytes
        .get(off..off + 4)
        .ok_or_else(|| Error::Format { offset: bytes.len() as u64, msg: "truncated header".into() })?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn decode_features(bytes: &[u8]) -> Result<Array2<f32>> {
    let magic = bytes
        .get(..4)
        .ok_or_else(|| Error::Format { offset: bytes.len() as u64, msg: "truncated header".into() })?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:02x?}") });
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let t = u32_at(bytes, 8)? as usize;
    let f = u32_at(bytes, 12)? as usize;
    if t == 0 || f == 0 {
        return Err(Error::Format { offset: 8, msg: format!("empty {t}x{f} matrix") });
    }
    let need = HEADER_LEN + 4 * t * f;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated payload: expected {need} bytes for {t}x{f}"),
        });
    }
    if bytes.len() > need {
        return Err(Error::Format { offset: need as u64, msg: "trailing bytes after payload".into() });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((t, f), data).expect("shape checked above"))
}

pub fn write_features(path: impl AsRef<Path>, m: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(m)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_fn((7, 13), |(i, j)| ((i * 31 + j * 17) as f32).sin() * 1e3);
        let p = dir.path().join("x.dsvf");
        write_features(&p, &m).unwrap();
        let back = read_features(&p).unwrap();
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.dim(), (7, 13));
    }

    #[test]
    fn corruption_is_reported() {
        let m = Array2::from_elem((3, 4), 1.5f32);
        let bytes = encode_features(&m).unwrap();
        match decode_features(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_features(&bytes[..10]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 0, .. })));
        let mut badv = bytes;
        badv[4] = 9;
        assert!(matches!(decode_features(&badv), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn empty_rejected_at_write() {
        let m = Array2::<f32>::zeros((0, 5));
        assert!(encode_features(&m).is_err());
    }

    proptest! {
        #[test]
        fn bitwise_round_trip(t in 1usize..9, f in 1usize..9, bits in prop::collection::vec(any::<u32>(), 81)) {
            let m = Array2::from_shape_fn((t, f), |(i, j)| f32::from_bits(bits[i * 9 + j]));
            let back = decode_features(&encode_features(&m).unwrap()).unwrap();
            prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

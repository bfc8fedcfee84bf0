//! Binary tensor files (`.dtt`).
//!
//! Layout, all little-endian:
//! magic `DTEA` | u32 version (= 1) | u8 rank | rank x u32 dims |
//! f32 payload, row-major. Writing the same tensor twice produces
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

pub const TENSOR_MAGIC: [u8; 4] = *b"DTEA";
pub const TENSOR_VERSION: u32 = 1;

/// Write a rank-3 feature map. Values are stored as `f32` regardless of the
/// in-memory precision.
pub fn save_feature_map<T: Scalar>(map: &FeatureMap<T>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[3u8])?;
    for dim in [map.channels(), map.height(), map.width()] {
        let dim = u32::try_from(dim).map_err(|_| Error::Format {
            context: "tensor write",
            reason: format!("dimension {dim} exceeds u32"),
        })?;
        w.write_all(&dim.to_le_bytes())?;
    }
    for &v in map.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a rank-3 feature map written by [`save_feature_map`].
pub fn load_feature_map<T: Scalar>(path: &Path) -> Result<FeatureMap<T>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format {
            context: "tensor read",
            reason: format!("bad magic {magic:?}"),
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TENSOR_VERSION {
        return Err(Error::Format {
            context: "tensor read",
            reason: format!("unsupported version {version}"),
        });
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let rank = b1[0];
    if rank != 3 {
        return Err(Error::Format {
            context: "tensor read",
            reason: format!("expected rank 3, got {rank}"),
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut b4)?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(T::from_f64(f32::from_le_bytes(b4) as f64));
    }
    // Trailing bytes indicate a corrupt or mismatched file.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => {
            return Err(Error::Format {
                context: "tensor read",
                reason: "trailing bytes after payload".into(),
            })
        }
    }
    FeatureMap::new(dims[0], dims[1], dims[2], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn roundtrip_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dtt");
        let mut rng = SplitMix64::new(21);
        let mut map = FeatureMap::<f32>::zeros(3, 4, 5);
        map.fill_uniform(&mut rng);
        save_feature_map(&map, &path).unwrap();
        let back: FeatureMap<f32> = load_feature_map(&path).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn write_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dtt");
        let p2 = dir.path().join("b.dtt");
        let mut rng = SplitMix64::new(22);
        let mut map = FeatureMap::<f32>::zeros(2, 3, 3);
        map.fill_uniform(&mut rng);
        save_feature_map(&map, &p1).unwrap();
        save_feature_map(&map, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.dtt");
        let map = FeatureMap::<f32>::new(1, 2, 3, vec![0.0; 6]).unwrap();
        save_feature_map(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"DTEA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 3);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 21 + 6 * 4);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dtt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x03").unwrap();
        assert!(matches!(
            load_feature_map::<f32>(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("g.dtt");
        let map = FeatureMap::<f32>::new(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_feature_map(&map, &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 2);
        let bad = dir.path().join("t.dtt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_feature_map::<f32>(&bad).is_err());
    }

    #[test]
    fn f64_map_saves_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dtt");
        let map = FeatureMap::<f64>::new(1, 1, 2, vec![0.1, 0.2]).unwrap();
        save_feature_map(&map, &path).unwrap();
        let back: FeatureMap<f64> = load_feature_map(&path).unwrap();
        assert_eq!(back.data()[0], 0.1f32 as f64);
        assert_eq!(back.data()[1], 0.2f32 as f64);
    }
}

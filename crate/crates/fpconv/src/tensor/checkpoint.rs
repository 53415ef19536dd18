//! Flat binary checkpoint format.
//!
//! Layout: magic `FPCK`, version `u32` LE, then per-tensor records of
//! (name length `u32` LE, name bytes, rank `u32` LE, extents `u64` LE each,
//! fp32 values LE). Records are sorted by name; files are written to a
//! temporary path and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::layers::NamedTensor;
use super::Scalar;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FPCK";
const VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(path: &Path, entries: &[NamedTensor<T>]) -> Result<()> {
    let mut sorted: Vec<&NamedTensor<T>> = entries.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for pair in sorted.windows(2) {
        if pair[0].name == pair[1].name {
            return Err(Error::BadCheckpoint {
                path: path.display().to_string(),
                message: format!("duplicate tensor name {:?}", pair[0].name),
            });
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for e in &sorted {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = e.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.values().iter() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }

    let tmp = path.with_extension("fpck.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Every record in a checkpoint file, in file order.
pub fn read_checkpoint_raw(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |message: String| Error::BadCheckpoint {
        path: path.display().to_string(),
        message,
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing FPCK magic".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut pos = 8usize;
    let mut out = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::BadCheckpoint {
                path: path.display().to_string(),
                message: "truncated record".to_string(),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("non-utf8 tensor name".to_string()))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, values));
    }
    Ok(out)
}

/// Load a checkpoint into an existing tensor set. Names must match exactly
/// in both directions and every shape must agree.
pub fn load_checkpoint<T: Scalar>(path: &Path, entries: &[NamedTensor<T>]) -> Result<()> {
    let records = read_checkpoint_raw(path)?;
    let mut by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = BTreeMap::new();
    for (name, shape, values) in &records {
        by_name.insert(name.as_str(), (shape, values));
    }
    if by_name.len() != records.len() {
        return Err(Error::BadCheckpoint {
            path: path.display().to_string(),
            message: "duplicate tensor name".to_string(),
        });
    }
    for e in entries {
        let Some((shape, values)) = by_name.remove(e.name.as_str()) else {
            return Err(Error::BadCheckpoint {
                path: path.display().to_string(),
                message: format!("missing tensor {:?}", e.name),
            });
        };
        if shape.as_slice() != e.tensor.shape() {
            return Err(Error::shape(
                "load_checkpoint",
                format!("{:?} for {:?}", e.tensor.shape(), e.name),
                format!("{shape:?}"),
            ));
        }
        let mut vals = e.tensor.values_mut();
        for (dst, &src) in vals.iter_mut().zip(values.iter()) {
            *dst = T::from_f64(src as f64);
        }
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::BadCheckpoint {
            path: path.display().to_string(),
            message: format!("unexpected tensor {name:?}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn entry(name: &str, shape: &[usize], v: Vec<f32>) -> NamedTensor<f32> {
        NamedTensor {
            name: name.to_string(),
            tensor: Tensor::param(shape, v).unwrap(),
            trainable: true,
        }
    }

    #[test]
    fn round_trip_preserves_values_and_sorts_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fpck");
        let entries = vec![
            entry("b.w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            entry("a.w", &[3], vec![-1.0, 0.5, 9.0]),
        ];
        save_checkpoint(&path, &entries).unwrap();

        let raw = read_checkpoint_raw(&path).unwrap();
        assert_eq!(raw[0].0, "a.w");
        assert_eq!(raw[1].0, "b.w");

        let fresh = vec![
            entry("a.w", &[3], vec![0.0; 3]),
            entry("b.w", &[2, 2], vec![0.0; 4]),
        ];
        load_checkpoint(&path, &fresh).unwrap();
        assert_eq!(fresh[0].tensor.to_vec(), vec![-1.0, 0.5, 9.0]);
        assert_eq!(fresh[1].tensor.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_diagnosed_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fpck");
        save_checkpoint(&path, &[entry("head.w", &[2], vec![1.0, 2.0])]).unwrap();
        let err = load_checkpoint(&path, &[entry("head.w", &[3], vec![0.0; 3])]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("head.w"), "{msg}");
    }

    #[test]
    fn missing_and_extra_tensors_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fpck");
        save_checkpoint(&path, &[entry("a", &[1], vec![1.0])]).unwrap();
        assert!(load_checkpoint(&path, &[entry("b", &[1], vec![0.0])]).is_err());
        assert!(load_checkpoint::<f32>(&path, &[]).is_err());
    }

    #[test]
    fn magic_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.fpck");
        std::fs::write(&path, b"NOPE****").unwrap();
        assert!(read_checkpoint_raw(&path).is_err());
    }
}

//! Binary parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"RLAB"            4 bytes
//! version u32               4 bytes
//! tensor count u64          8 bytes
//! then per tensor:
//!   name length u32, name bytes (UTF-8)
//!   ndim u32, dims u64 * ndim
//!   values f64 * product(dims)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"RLAB";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"RLAB\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),
}

/// Named f64 buffers with shapes; ordering is the write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl TensorFile {
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.entries.push((name.to_string(), shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Name -> entry index map; errors on duplicate names.
    pub fn index(&self) -> Result<BTreeMap<&str, usize>, CheckpointError> {
        let mut map = BTreeMap::new();
        for (i, (name, _, _)) in self.entries.iter().enumerate() {
            if map.insert(name.as_str(), i).is_some() {
                return Err(CheckpointError::Malformed(format!(
                    "duplicate tensor name {name}"
                )));
            }
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        let mut write = || -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
            for (name, shape, data) in &self.entries {
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(shape.len() as u32).to_le_bytes())?;
                for &d in shape {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for &v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()
        };
        write().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<TensorFile, CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::Malformed("file shorter than header".into()))?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let count = read_u64(&mut r)?;
        let mut out = TensorFile::default();
        for i in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {i}: implausible name length {name_len}"
                )));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| CheckpointError::Malformed(format!("tensor {i}: truncated name")))?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Malformed(format!("tensor {i}: name not UTF-8")))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name}: implausible rank {ndim}"
                )));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf).map_err(|_| {
                    CheckpointError::Malformed(format!("tensor {name}: truncated values"))
                })?;
                *v = f64::from_le_bytes(buf);
                if !v.is_finite() {
                    return Err(CheckpointError::NonFinite(name.clone()));
                }
            }
            out.entries.push((name, shape, data));
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail).map_err(io_err)? != 0 {
            return Err(CheckpointError::Malformed(
                "trailing bytes after last tensor".into(),
            ));
        }
        Ok(out)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Malformed("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Malformed("truncated u64".into()))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::default();
        f.push("w", vec![2, 3], vec![1.0, -0.5, 0.25, 3.0, 4.5, -6.0]);
        f.push("b", vec![3], vec![0.0, 1e-300, -1e300]);
        f
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rlab");
        let f = sample();
        f.save(&path).unwrap();
        let g = TensorFile::load(&path).unwrap();
        assert_eq!(f, g);
        // byte-identical on re-save
        let path2 = dir.path().join("model2.rlab");
        g.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_is_16_bytes_with_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rlab");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"RLAB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
    }

    #[test]
    fn corrupted_magic_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rlab");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            TensorFile::load(&path).unwrap_err(),
            CheckpointError::BadMagic { .. }
        ));

        bytes[0] = b'R';
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            TensorFile::load(&path).unwrap_err(),
            CheckpointError::Malformed(_)
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rlab");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            TensorFile::load(&path).unwrap_err(),
            CheckpointError::Version { found: 9 }
        ));
    }
}

//! Named-tensor container: the on-disk format for checkpoints, worlds, and
//! rescale statistics.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "NTC1"
//! fp_len     u32      length of fingerprint string
//! fp         bytes    hex fingerprint of the producing config
//! meta_len   u32      length of metadata JSON
//! meta       bytes    arbitrary JSON object (kind, step counters, ...)
//! n_tensors  u32
//! repeated n_tensors times:
//!   name_len u32
//!   name     bytes    utf-8
//!   rows     u32
//!   cols     u32
//!   data     rows*cols f64 values, row-major
//! ```
//!
//! Tensor order is preserved on read, so parameter stores reload in their
//! insertion order and round-trips are bitwise.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NTC1";

#[derive(Debug, Clone)]
pub struct Container {
    pub fingerprint: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

/// Hex SHA-256 of a config's canonical JSON form. Two configs match exactly
/// when their fingerprints match.
pub fn config_fingerprint<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl Container {
    pub fn new(fingerprint: &str, meta: serde_json::Value) -> Self {
        Container { fingerprint: fingerprint.to_string(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name).ok_or_else(|| {
            CoreError::ShapeMismatch(format!("container is missing tensor `{name}`"))
        })
    }

    /// Fails with [`CoreError::FingerprintMismatch`] unless the stored
    /// fingerprint equals `expected`.
    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint == expected {
            Ok(())
        } else {
            Err(CoreError::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            })
        }
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(|v| v.as_str())
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(|v| v.as_u64())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        write_bytes(&mut buf, self.fingerprint.as_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        write_bytes(&mut buf, &meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_bytes(&mut buf, name.as_bytes());
            buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Container> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let magic = take(&bytes, &mut pos, 4)?;
        if magic != MAGIC {
            return Err(CoreError::Io(format!(
                "{}: not a tensor container (bad magic)",
                path.display()
            )));
        }
        let fp_bytes = read_bytes(&bytes, &mut pos)?;
        let fingerprint = String::from_utf8(fp_bytes.to_vec())
            .map_err(|_| CoreError::Io("fingerprint is not utf-8".into()))?;
        let meta_bytes = read_bytes(&bytes, &mut pos)?;
        let meta: serde_json::Value = serde_json::from_slice(meta_bytes)?;
        let n = read_u32(&bytes, &mut pos)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(&bytes, &mut pos)?.to_vec())
                .map_err(|_| CoreError::Io("tensor name is not utf-8".into()))?;
            let rows = read_u32(&bytes, &mut pos)? as usize;
            let cols = read_u32(&bytes, &mut pos)? as usize;
            let raw = take(&bytes, &mut pos, rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(Container { fingerprint, meta, tensors })
    }
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > bytes.len() {
        return Err(CoreError::Io("container truncated".into()));
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let raw = take(bytes, pos, 4)?;
    Ok(u32::from_le_bytes(raw.try_into().unwrap()))
}

fn read_bytes<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    let len = read_u32(bytes, pos)? as usize;
    take(bytes, pos, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.ntc");
        let mut c = Container::new("abc123", serde_json::json!({"kind": "test", "step": 7}));
        c.push("w", Tensor::randn(5, 3, 1.0, &mut rng));
        c.push("b", Tensor::randn(1, 3, 1e-12, &mut rng));
        c.write_to(&path).unwrap();
        let back = Container::read_from(&path).unwrap();
        assert_eq!(back.fingerprint, "abc123");
        assert_eq!(back.meta_u64("step"), Some(7));
        assert_eq!(back.tensors.len(), 2);
        for ((n0, t0), (n1, t1)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_is_detected() {
        let c = Container::new("aaaa", serde_json::json!({}));
        assert!(c.check_fingerprint("aaaa").is_ok());
        let err = c.check_fingerprint("bbbb").unwrap_err();
        assert!(matches!(err, CoreError::FingerprintMismatch { .. }));
    }

    #[test]
    fn fingerprint_tracks_config_content() {
        #[derive(Serialize)]
        struct C {
            a: u32,
            b: f64,
        }
        let f1 = config_fingerprint(&C { a: 1, b: 2.0 });
        let f2 = config_fingerprint(&C { a: 1, b: 2.0 });
        let f3 = config_fingerprint(&C { a: 2, b: 2.0 });
        assert_eq!(f1, f2);
        assert_ne!(f1, f3);
        assert_eq!(f1.len(), 64);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ntc");
        std::fs::write(&path, b"XXXX0000").unwrap();
        assert!(Container::read_from(&path).is_err());
    }
}

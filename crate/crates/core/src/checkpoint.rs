//! Versioned parameter archives.
//!
//! Layout: the 8-byte magic `DDSLABCK`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header (kind, free-form metadata,
//! parameter names and shapes), the parameter values as little-endian `f32`
//! in header order, and a SHA-256 over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DDSLABCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// A decoded archive: what it holds, its metadata and the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

impl Checkpoint {
    pub fn new(kind: &str, meta: impl Serialize, params: ParamStore) -> Result<Self> {
        Ok(Self { kind: kind.to_string(), meta: serde_json::to_value(meta)?, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            params: self.params.iter().map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape.clone() }).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(header.len() + 4 * self.params.num_scalars() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 + 32 {
            return Err(corrupt(path, "file truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(path, format!("format version {version}, this build reads {VERSION}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt(path, "checksum mismatch (truncated or corrupted)"));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt(path, "header length out of range"))?;
        let header: Header =
            serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        let mut params = ParamStore::new();
        let mut pos = header_end;
        for entry in header.params {
            let len: usize = entry.shape.iter().product();
            let end = pos + 4 * len;
            if end > body.len() {
                return Err(corrupt(path, format!("parameter `{}` runs past the end of the file", entry.name)));
            }
            let data = body[pos..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push_tensor(entry.name, Tensor { shape: entry.shape, data });
            pos = end;
        }
        if pos != body.len() {
            return Err(corrupt(path, "trailing bytes after parameters"));
        }
        Ok(Self { kind: header.kind, meta: header.meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| corrupt(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the archive holds `kind`.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(corrupt(path, format!("holds a {}, expected a {kind}", c.kind)));
        }
        Ok(c)
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| corrupt(path, format!("bad metadata: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::rng;

    fn sample() -> Checkpoint {
        let mut r = rng::rng(1);
        let mut ps = ParamStore::new();
        ps.add("a.weight", &[3, 2], Init::Normal(1.0), &mut r);
        ps.add("a.bias", &[3], Init::Normal(1.0), &mut r);
        Checkpoint::new("test", serde_json::json!({"loss": 0.125, "seed": 7}), ps).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn detects_truncation_corruption_and_version() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        for cut in [0, 10, 30, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], p).unwrap_err();
            assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped, p).unwrap_err().to_string().contains("checksum"));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2, p).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn save_load_save_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/c.ckpt");
        sample().save(&p).unwrap();
        let a = std::fs::read(&p).unwrap();
        Checkpoint::load(&p).unwrap().save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), a);
        assert!(Checkpoint::load_kind(&p, "denoiser").is_err());
    }
}

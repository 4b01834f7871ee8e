//! Binary parameter container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "ONRCCKPT"
//! version  u32      1
//! bits     u32      64 (float precision of stored values)
//! hash     32 bytes SHA-256 of the metadata text
//! metalen  u64, then metadata bytes (UTF-8, usually a TOML config)
//! count    u32
//! per parameter:
//!   namelen u32, name bytes, ndim u32, dims u64 * ndim, values f64 * prod(dims)
//! crc32    u32 over every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ONRCCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub config_hash: [u8; 32],
    pub params: Vec<(String, Tensor)>,
}

pub fn config_hash(metadata: &str) -> [u8; 32] {
    Sha256::digest(metadata.as_bytes()).into()
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: impl Into<String>) -> Self {
        let metadata = metadata.into();
        Checkpoint {
            config_hash: config_hash(&metadata),
            metadata,
            params: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&64u32.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let integrity = |message: &str| Error::Integrity { path: path.to_path_buf(), message: message.to_string() };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
            return Err(integrity("not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(integrity("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let bad = || integrity("truncated or malformed body");
        let version = r.u32().ok_or_else(bad)?;
        if version != VERSION {
            return Err(integrity(&format!("unsupported version {version}")));
        }
        let bits = r.u32().ok_or_else(bad)?;
        if bits != 64 {
            return Err(integrity(&format!("unsupported precision {bits}")));
        }
        let config_hash: [u8; 32] = r.take(32).ok_or_else(bad)?.try_into().expect("32 bytes");
        let meta_len = r.u64().ok_or_else(bad)? as usize;
        let metadata = String::from_utf8(r.take(meta_len).ok_or_else(bad)?.to_vec()).map_err(|_| bad())?;
        let count = r.u32().ok_or_else(bad)?;
        let mut params = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(bad)? as usize;
            let name = String::from_utf8(r.take(name_len).ok_or_else(bad)?.to_vec()).map_err(|_| bad())?;
            let ndim = r.u32().ok_or_else(bad)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().ok_or_else(bad)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8).ok_or_else(bad)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push((name, Tensor::new(shape, data).map_err(|_| bad())?));
        }
        if r.pos != body.len() {
            return Err(bad());
        }
        Ok(Checkpoint { metadata, config_hash, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Reads `path` and restores it into `store`; a configuration mismatch
    /// is reported as an integrity failure of that file.
    pub fn load_into(path: &Path, store: &mut ParamStore, expected_metadata: &str, force: bool) -> Result<()> {
        Checkpoint::load(path)?.restore_into(store, expected_metadata, force).map_err(|e| match e {
            Error::Config(message) => Error::Integrity { path: path.to_path_buf(), message },
            other => other,
        })
    }

    /// Copies values into a store of identical layout. Refuses when the
    /// checkpoint was written for a different configuration unless `force`.
    pub fn restore_into(&self, store: &mut ParamStore, expected_metadata: &str, force: bool) -> Result<()> {
        if !force && self.config_hash != config_hash(expected_metadata) {
            return Err(Error::Config(
                "checkpoint configuration hash does not match the requested configuration (use force to override)".into(),
            ));
        }
        if self.params.len() != store.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint parameter {name} unknown to model")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Contract(format!("shape mismatch for {name}")));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        s.add("enc.b", Tensor::randn(&[1, 4], 1e-300, &mut rng));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let ck = Checkpoint::from_store(&s, "d_model = 4\n");
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store();
        fresh.value_mut(fresh.id("enc.w").unwrap()).data_mut()[0] = 9.0;
        back.restore_into(&mut fresh, "d_model = 4\n", false).unwrap();
        assert!(fresh.values_bitwise_eq(&s));
    }

    #[test]
    fn corruption_and_config_mismatch_are_rejected() {
        let s = store();
        let ck = Checkpoint::from_store(&s, "a");
        let mut bytes = ck.to_bytes();
        bytes[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("x")), Err(Error::Integrity { .. })));
        let mut target = store();
        assert!(matches!(ck.restore_into(&mut target, "b", false), Err(Error::Config(_))));
        assert!(ck.restore_into(&mut target, "b", true).is_ok());
    }
}

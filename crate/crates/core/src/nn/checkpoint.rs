//! Binary container, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "VAMIDICK"
//! version  u32
//! json_len u32, then json_len bytes of UTF-8 JSON (run config)
//! count    u32, then per block:
//!     name_len u32, name bytes, ndim u32, ndim x u64 dims, f64 values
//! checksum 8 bytes  first 8 bytes of SHA-256 over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{NnError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VAMIDICK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub blocks: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::CheckpointCorrupt(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self { config, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.blocks.push((name.into(), t));
    }

    pub fn push_store(&mut self, store: &ParamStore) {
        for p in store.iter() {
            self.blocks.push((p.name.clone(), p.value.clone()));
        }
    }

    pub fn block(&self, name: &str) -> Result<&Tensor, NnError> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::UnknownBlock(name.to_string()))
    }

    /// Copies every parameter of `store` from the block of the same name.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<(), NnError> {
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            store.set_value(&name, self.block(&name)?.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("JSON value serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest[..8]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 8 + 4 + 4 + 4 + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        if Sha256::digest(body)[..8] != *sum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let json_len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(json_len)?).map_err(|e| corrupt(format!("config: {e}")))?;
        let count = r.u32()?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("block name"))?;
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("shape"))?)?;
            let data: Vec<f64> =
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!("non-finite value in `{name}`")));
            }
            blocks.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { config, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"model_dim": 16, "seed": 7}));
        c.push("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap());
        c.push("a.b", Tensor::zeros(&[1, 3]));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = sample().to_bytes();
        for i in (0..bytes.len()).step_by(7) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&b), Err(NnError::CheckpointCorrupt(_))), "byte {i}");
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

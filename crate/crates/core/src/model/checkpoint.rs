//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "TWST" | u32 version | u64 meta_len | meta JSON | u64 n_records
//! record: u32 name_len | name | u8 dtype (0 = f32) | u8 ndim | u64×ndim dims | data
//! ```
//!
//! The meta JSON carries the `ModelConfig` and, for extracted subnets, the
//! spec that produced them (so evaluation can apply the right scaling).
//! Load → save round-trips byte-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blueprint::SubnetSpec;
use crate::error::{Result, TwistError};
use crate::model::ModelConfig;
use crate::tensor::{ParameterStore, Tensor};

pub const MAGIC: [u8; 4] = *b"TWST";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Present when the stored tensors are a physically extracted subnet.
    pub subnet: Option<SubnetSpec>,
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParameterStore) -> Result<()> {
    let bytes = checkpoint_to_vec(meta, store)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParameterStore)> {
    let bytes = fs::read(path)?;
    checkpoint_from_slice(&bytes)
}

pub fn checkpoint_to_vec(meta: &CheckpointMeta, store: &ParameterStore) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| TwistError::Format(format!("meta serialization failed: {e}")))?;
    let mut out = Vec::with_capacity(store.param_bytes() as usize + meta_json.len() + 64);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, tensor) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TwistError::Corrupt(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn checkpoint_from_slice(bytes: &[u8]) -> Result<(CheckpointMeta, ParameterStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TwistError::Format("not a TWST checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TwistError::Format(format!(
            "incompatible checkpoint version {version}, expected {VERSION}"
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| TwistError::Corrupt(format!("bad checkpoint meta: {e}")))?;
    let n_records = r.u64()? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..n_records {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| TwistError::Corrupt("non-utf8 tensor name".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(TwistError::Format(format!("unsupported dtype {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for c in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(c.try_into().unwrap()));
        }
        store.insert(&name, Tensor::from_vec(&shape, data)?.with_grad())?;
    }
    if r.pos != bytes.len() {
        return Err(TwistError::Corrupt(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok((meta, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tensor::Rng;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut cfg = ModelConfig::desk_default(48);
        cfg.layers = 2;
        cfg.shared_layers = [0].into_iter().collect();
        let store = init_params(&cfg, &mut Rng::new(9, 9)).unwrap();
        let meta = CheckpointMeta {
            config: cfg,
            subnet: None,
        };
        let bytes = checkpoint_to_vec(&meta, &store).unwrap();
        let (meta2, store2) = checkpoint_from_slice(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert!(store.bitwise_eq(&store2));
        let bytes2 = checkpoint_to_vec(&meta2, &store2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn version_and_magic_are_enforced() {
        let mut cfg = ModelConfig::desk_default(8);
        cfg.layers = 1;
        cfg.shared_layers = Default::default();
        let store = init_params(&cfg, &mut Rng::new(0, 0)).unwrap();
        let meta = CheckpointMeta {
            config: cfg,
            subnet: None,
        };
        let mut bytes = checkpoint_to_vec(&meta, &store).unwrap();
        bytes[4] = 99; // version low byte
        assert!(matches!(
            checkpoint_from_slice(&bytes),
            Err(TwistError::Format(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            checkpoint_from_slice(&bytes),
            Err(TwistError::Format(_))
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let mut cfg = ModelConfig::desk_default(8);
        cfg.layers = 1;
        cfg.shared_layers = Default::default();
        let store = init_params(&cfg, &mut Rng::new(0, 0)).unwrap();
        let meta = CheckpointMeta {
            config: cfg,
            subnet: None,
        };
        let bytes = checkpoint_to_vec(&meta, &store).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            checkpoint_from_slice(cut),
            Err(TwistError::Corrupt(_))
        ));
    }
}

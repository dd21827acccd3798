//! Model checkpoint format: a little-endian flat binary container of named
//! 64-bit float tensors behind a JSON header, self-described by the run
//! configuration that produced it.
//!
//! Layout: magic `PLCK`, format version (u32 LE), header length (u64 LE),
//! the JSON header, then the concatenated tensor data as f64 LE. Header
//! entries give each tensor's name, shape, and element offset into the data
//! block. Loading validates offsets, lengths, duplicate names, and
//! finiteness before any tensor is accepted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{CoeffMode, ScheduleKind};
use crate::dualstream::BackboneConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PLCK";
const VERSION: u32 = 1;
/// Caps protecting the loader from absurd allocations in untrusted files.
const MAX_HEADER_BYTES: u64 = 16 << 20;
const MAX_TENSORS: usize = 1 << 20;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub diffusion_t: usize,
    pub schedule: String,
    pub sampling_steps: usize,
    pub coeff_mode: String,
    pub pose_scale_mm: f64,
}

impl CheckpointMeta {
    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        self.schedule.parse()
    }

    pub fn coeff(&self) -> Result<CoeffMode> {
        self.coeff_mode.parse()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data block.
    offset: u64,
    /// Element count (product of the shape, stored for validation).
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Serializes the store (converted to f64) with its metadata.
pub fn encode_checkpoint<T: Scalar>(meta: &CheckpointMeta, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for id in store.ids() {
        let t = store.tensor(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel() as u64,
        });
        offset += t.numel() as u64;
    }
    let header = Header { meta: meta.clone(), tensors };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header_json.len() + offset as usize * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for id in store.ids() {
        for v in store.tensor(id).data() {
            out.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint from bytes, validating the container before any
/// tensor is materialized.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointMeta, ParamStore<T>)> {
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint too short for its preamble".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if header_len > MAX_HEADER_BYTES || 16 + header_len as usize > bytes.len() {
        return Err(Error::Format("checkpoint header length out of bounds".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len as usize])
        .map_err(|e| Error::Format(format!("checkpoint header: {}", e)))?;
    if header.tensors.len() > MAX_TENSORS {
        return Err(Error::Format("checkpoint declares too many tensors".into()));
    }
    let data = &bytes[16 + header_len as usize..];
    if data.len() % 8 != 0 {
        return Err(Error::Format("checkpoint data block is not a whole number of f64s".into()));
    }
    let total_elements = (data.len() / 8) as u64;
    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let numel: u64 = entry.shape.iter().map(|&s| s as u64).product();
        if numel != entry.len {
            return Err(Error::Format(format!(
                "tensor '{}': shape {:?} disagrees with declared length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let end = entry.offset.checked_add(entry.len).ok_or_else(|| Error::Format("tensor extent overflows".into()))?;
        if end > total_elements {
            return Err(Error::Format(format!(
                "tensor '{}' extends past the data block ({} > {})",
                entry.name, end, total_elements
            )));
        }
        let mut values = Vec::with_capacity(entry.len as usize);
        let base = entry.offset as usize * 8;
        for i in 0..entry.len as usize {
            let b: [u8; 8] = data[base + i * 8..base + (i + 1) * 8].try_into().unwrap();
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::Format(format!("tensor '{}' contains a non-finite value", entry.name)));
            }
            values.push(T::from_f64(v));
        }
        let tensor = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| Error::Format(format!("tensor '{}': {}", entry.name, e)))?;
        store
            .register(entry.name.clone(), tensor)
            .map_err(|e| Error::Format(format!("tensor '{}': {}", entry.name, e)))?;
    }
    Ok((header.meta, store))
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, meta: &CheckpointMeta, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode_checkpoint(meta, store)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(CheckpointMeta, ParamStore<T>)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualstream::init_params;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            backbone: BackboneConfig::desk(),
            diffusion_t: 1000,
            schedule: "cosine".into(),
            sampling_steps: 1,
            coeff_mode: "standard".into(),
            pose_scale_mm: 1000.0,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut cfg = BackboneConfig::desk();
        cfg.d = 8;
        cfg.d_prime = 16;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.frames = 4;
        let (store, _) = init_params::<f64>(&cfg, 5).unwrap();
        let m = CheckpointMeta { backbone: cfg, ..meta() };
        let bytes = encode_checkpoint(&m, &store).unwrap();
        let (meta2, store2) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(meta2, m);
        assert_eq!(store2.len(), store.len());
        for id in store.ids() {
            let other = store2.id(store.name(id)).unwrap();
            assert_eq!(store.tensor(id), store2.tensor(other));
        }
    }

    #[test]
    fn f32_stores_round_trip_through_f64_container() {
        let mut cfg = BackboneConfig::desk();
        cfg.d = 8;
        cfg.d_prime = 16;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.frames = 4;
        let (store, _) = init_params::<f32>(&cfg, 5).unwrap();
        let bytes = encode_checkpoint(&meta(), &store).unwrap();
        let (_, store2) = decode_checkpoint::<f32>(&bytes).unwrap();
        for id in store.ids() {
            let other = store2.id(store.name(id)).unwrap();
            assert_eq!(store.tensor(id), store2.tensor(other));
        }
    }

    #[test]
    fn truncated_and_corrupted_inputs_are_format_errors() {
        let (store, _) = init_params::<f64>(
            &BackboneConfig { d: 8, d_prime: 16, depth: 1, heads: 2, frames: 4, ..BackboneConfig::desk() },
            1,
        )
        .map(|(s, h)| (s, h))
        .unwrap();
        let bytes = encode_checkpoint(&meta(), &store).unwrap();
        assert!(decode_checkpoint::<f64>(&bytes[..10]).is_err());
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 9]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_checkpoint::<f64>(&bad_magic).is_err());
        let mut bad_header_len = bytes.clone();
        bad_header_len[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_checkpoint::<f64>(&bad_header_len).is_err());
        // NaN in the data block
        let mut nan_data = bytes.clone();
        let l = nan_data.len();
        nan_data[l - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_checkpoint::<f64>(&nan_data).is_err());
    }

    #[test]
    fn empty_store_round_trips() {
        let store = ParamStore::<f64>::new();
        let bytes = encode_checkpoint(&meta(), &store).unwrap();
        let (_, store2) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(store2.len(), 0);
    }
}

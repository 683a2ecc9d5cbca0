//! Checkpoint files.
//!
//! ```text
//! "RXFC"  u32 header length (LE)  header JSON
//! RXF1 matrix block per tensor entry, in header order
//! ```
//!
//! The header carries the format tag, engine version, a SHA-256 hash of the
//! configuration, and the name, role and shape of every stored tensor.
//! Optimizer moments are stored next to each parameter so training state
//! round-trips exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::matrix;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RXFC";
pub const CHECKPOINT_FORMAT: &str = "rxf-checkpoint/1";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Param,
    /// AdamW first moment.
    M,
    /// AdamW second moment.
    V,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub engine_version: String,
    pub config_hash: String,
    pub encoder: EncoderConfig,
    /// Free-form run information (loss, seed, ...); part of the hash.
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub epoch: Option<usize>,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet<f32>,
}

/// Hex SHA-256 of the compact JSON of `(encoder, metadata)`.
pub fn config_hash(encoder: &EncoderConfig, metadata: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(&(encoder, metadata)).expect("config serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_checkpoint(
    params: &ParamSet<f32>,
    encoder: &EncoderConfig,
    metadata: &serde_json::Value,
    epoch: Option<usize>,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blocks = Vec::new();
    for (name, value) in params.iter() {
        let (m, v) = params.moments(name)?;
        for (role, t) in [(TensorRole::Param, value), (TensorRole::M, m), (TensorRole::V, v)] {
            tensors.push(TensorEntry {
                name: name.clone(),
                role,
                shape: t.shape(),
            });
            blocks.extend(matrix::encode(t));
        }
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        engine_version: ENGINE_VERSION.into(),
        config_hash: config_hash(encoder, metadata),
        encoder: encoder.clone(),
        metadata: metadata.clone(),
        epoch,
        step: params.step(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("<checkpoint header>", e))?;
    let mut out = Vec::with_capacity(8 + json.len() + blocks.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend(json);
    out.extend(blocks);
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet<f32>,
    encoder: &EncoderConfig,
    metadata: &serde_json::Value,
    epoch: Option<usize>,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, encoder, metadata, epoch)?)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| Error::json(path, e))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unsupported format `{}`", header.format)));
    }
    if header.config_hash != config_hash(&header.encoder, &header.metadata) {
        return Err(bad("config hash does not match the stored config".into()));
    }
    header.encoder.validate()?;

    let mut rest = &bytes[8 + len..];
    let mut tensors: Vec<Tensor<f32>> = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let (t, used) = matrix::decode_prefix(rest, path)?;
        if t.shape() != entry.shape {
            return Err(bad(format!(
                "tensor `{}` has shape {:?}, header says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor `{}`", entry.name)));
        }
        tensors.push(t);
        rest = &rest[used..];
    }
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }

    let mut entries = Vec::new();
    let mut it = header.tensors.iter().zip(tensors);
    while let Some((e, p)) = it.next() {
        let (Some((em, m)), Some((ev, v))) = (it.next(), it.next()) else {
            return Err(bad(format!("incomplete optimizer state for `{}`", e.name)));
        };
        let roles = (e.role, em.role, ev.role);
        if roles != (TensorRole::Param, TensorRole::M, TensorRole::V) || em.name != e.name || ev.name != e.name {
            return Err(bad(format!("unexpected tensor layout at `{}`", e.name)));
        }
        entries.push((e.name.clone(), p, m, v));
    }
    let params = ParamSet::restore(entries, header.step)?;
    Ok(Checkpoint { header, params })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

//! Single-file checkpoints: `MRKT`, format version, JSON header, then the
//! parameters as little-endian f32 and an 8-byte SHA-256 prefix.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::metrics::Summary;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MRKT";
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    pub val: Option<Summary>,
    /// Seed that produced this run; epoch RNGs derive from it.
    pub seed: u64,
    pub backbone_id: String,
    pub parameters: usize,
}

pub fn save(path: &Path, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    let header = serde_json::to_vec(meta).expect("checkpoint header serializes");
    let params = model.flat_params();
    let mut buf = Vec::with_capacity(24 + header.len() + 4 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in &params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest[..8]);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&buf).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn take<'a>(raw: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if raw.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, rest) = raw.split_at(n);
    *raw = rest;
    Ok(head)
}

fn u64_at(raw: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(raw, 8)?.try_into().unwrap()))
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 32 || &bytes[..4] != MAGIC {
        return Err(err("not a checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if Sha256::digest(body)[..8] != *tail {
        return Err(err("checksum mismatch"));
    }
    let mut raw = &body[4..];
    let format = u32::from_le_bytes(take(&mut raw, 4)?.try_into().unwrap());
    if format != CHECKPOINT_FORMAT {
        return Err(err(&format!("unsupported format version {format}")));
    }
    let hlen = u64_at(&mut raw)? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(take(&mut raw, hlen)?).map_err(|e| err(&format!("bad header: {e}")))?;
    let n = u64_at(&mut raw)? as usize;
    let data = take(&mut raw, 4 * n)?;
    if !raw.is_empty() {
        return Err(err("trailing bytes"));
    }
    let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut model = Model::new(meta.config.clone(), 0)?;
    model.set_flat_params(&values)?;
    Ok((model, meta))
}

/// Loads and refuses configs whose parameter shapes or backbone differ.
pub fn load_matching(path: &Path, expected: &ModelConfig, backbone_id: &str) -> Result<(Model<f32>, CheckpointMeta)> {
    let (model, meta) = load(path)?;
    if !meta.config.shape_compatible(expected) {
        return Err(Error::Checkpoint(format!(
            "{} was trained with an incompatible model config",
            path.display()
        )));
    }
    if meta.backbone_id != backbone_id {
        return Err(Error::Checkpoint(format!(
            "{} was trained on backbone {} but {backbone_id} is active",
            path.display(),
            meta.backbone_id
        )));
    }
    Ok((model, meta))
}

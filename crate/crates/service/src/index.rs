//! Per-environment candidate encodings, persisted with the stamps of the
//! backbone and model that produced them.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ltrpo_core::backbone::Embedder;
use ltrpo_core::corpus::Dataset;
use ltrpo_core::features::{candidate_features, FeatureOptions};
use ltrpo_core::ranker::{CandidateEncoding, CandidateFeatures, Model};

use crate::{ServiceError, ServiceResult};

pub const INDEX_DIR_ENV: &str = "LTRPO_INDEX_DIR";
const MAGIC: &[u8; 4] = b"LTRI";
const INDEX_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStamp {
    pub backbone_id: String,
    pub model_stamp: String,
}

/// Hash of a model's config and parameters.
pub fn model_stamp(model: &Model<f32>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).expect("config serializes"));
    for p in model.flat_params() {
        h.update(p.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

pub fn stamp_for(model: &Model<f32>, embedder: &Embedder) -> IndexStamp {
    IndexStamp { backbone_id: embedder.backbone().id(), model_stamp: model_stamp(model) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub env_id: String,
    pub stamp: IndexStamp,
    pub candidate_ids: Vec<String>,
    /// Raw target embeddings, one row per candidate.
    pub h_t: Array2<f32>,
    pub encoding: CandidateEncoding<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    env_id: String,
    stamp: IndexStamp,
    candidate_ids: Vec<String>,
    shapes: [[usize; 2]; 3],
}

fn rows(feats: &[&CandidateFeatures<f32>]) -> Array2<f32> {
    let dim = feats.first().map_or(0, |f| f.target.len());
    let mut out = Array2::zeros((feats.len(), dim));
    for (mut r, f) in out.rows_mut().into_iter().zip(feats) {
        r.assign(&f.target);
    }
    out
}

impl EmbeddingIndex {
    pub fn from_features(
        env_id: &str,
        ids: Vec<String>,
        feats: &[&CandidateFeatures<f32>],
        model: &Model<f32>,
        stamp: IndexStamp,
    ) -> ServiceResult<Self> {
        if ids.is_empty() || ids.len() != feats.len() {
            return Err(ServiceError::Index(format!("{env_id}: {} ids for {} candidates", ids.len(), feats.len())));
        }
        let encoding = model.encode_candidates(feats)?;
        Ok(EmbeddingIndex { env_id: env_id.to_string(), stamp, candidate_ids: ids, h_t: rows(feats), encoding })
    }

    /// Embeds every candidate of `env_id` and encodes them in manifest order.
    pub fn build(env_id: &str, dataset: &Dataset, embedder: &Embedder, model: &Model<f32>) -> ServiceResult<Self> {
        let env = dataset.environment(env_id).ok_or_else(|| ServiceError::UnknownEnv(env_id.to_string()))?;
        let opts = FeatureOptions::for_model(&model.config);
        let feats: Vec<CandidateFeatures<f32>> = env
            .candidates
            .iter()
            .map(|c| candidate_features(embedder, dataset, c, &opts))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&CandidateFeatures<f32>> = feats.iter().collect();
        let ids = env.candidates.iter().map(|c| c.candidate_id.clone()).collect();
        Self::from_features(env_id, ids, &refs, model, stamp_for(model, embedder))
    }

    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }

    pub fn check_stamp(&self, expected: &IndexStamp) -> ServiceResult<()> {
        if &self.stamp != expected {
            return Err(ServiceError::StaleIndex(format!(
                "{}: index built for {:?}, serving {:?}",
                self.env_id, self.stamp, expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mats = [&self.h_t, &self.encoding.target_proj, &self.encoding.targ];
        let header = Header {
            format_version: INDEX_FORMAT,
            env_id: self.env_id.clone(),
            stamp: self.stamp.clone(),
            candidate_ids: self.candidate_ids.clone(),
            shapes: mats.map(|m| [m.nrows(), m.ncols()]),
        };
        let header = serde_json::to_vec(&header).expect("index header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&INDEX_FORMAT.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for m in mats {
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest[..8]);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> ServiceResult<Self> {
        let bad = |m: &str| ServiceError::Index(m.to_string());
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("not an index file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if Sha256::digest(body)[..8] != *tail {
            return Err(bad("index checksum mismatch"));
        }
        let format = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if format != INDEX_FORMAT {
            return Err(bad(&format!("unsupported index format {format}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header: Header = body
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated index header"))
            .and_then(|h| serde_json::from_slice(h).map_err(|e| bad(&format!("bad index header: {e}"))))?;
        let mut rest = &body[16 + hlen..];
        let mut mats = Vec::with_capacity(3);
        for [r, c] in header.shapes {
            let n = 4 * r * c;
            if rest.len() < n {
                return Err(bad("truncated index data"));
            }
            let vals = rest[..n].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            mats.push(Array2::from_shape_vec((r, c), vals).expect("shape from header"));
            rest = &rest[n..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes in index"));
        }
        let targ = mats.pop().unwrap();
        let target_proj = mats.pop().unwrap();
        let h_t = mats.pop().unwrap();
        if targ.nrows() != header.candidate_ids.len() || h_t.nrows() != header.candidate_ids.len() {
            return Err(bad("index rows do not match its candidate list"));
        }
        Ok(EmbeddingIndex {
            env_id: header.env_id,
            stamp: header.stamp,
            candidate_ids: header.candidate_ids,
            h_t,
            encoding: CandidateEncoding { target_proj, targ },
        })
    }

    pub fn path_in(dir: &Path, env_id: &str) -> PathBuf {
        dir.join(format!("{env_id}.ltri"))
    }

    pub fn save(&self, dir: &Path) -> ServiceResult<PathBuf> {
        let path = Self::path_in(dir, &self.env_id);
        let io = |e: std::io::Error| ServiceError::Index(format!("{}: {e}", path.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&self.to_bytes()).map_err(io)?;
        tmp.persist(&path).map_err(|e| io(e.error))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> ServiceResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| ServiceError::Index(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Returns the index for `env_id`, reusing a persisted one in `dir` when its
/// stamps and candidate list match, and writing a fresh one otherwise.
pub fn index_environment(
    dir: Option<&Path>,
    env_id: &str,
    dataset: &Dataset,
    embedder: &Embedder,
    model: &Model<f32>,
) -> ServiceResult<EmbeddingIndex> {
    let stamp = stamp_for(model, embedder);
    let env = dataset.environment(env_id).ok_or_else(|| ServiceError::UnknownEnv(env_id.to_string()))?;
    if let Some(dir) = dir {
        let path = EmbeddingIndex::path_in(dir, env_id);
        if path.exists() {
            match EmbeddingIndex::load(&path) {
                Ok(idx)
                    if idx.stamp == stamp
                        && idx.candidate_ids.iter().eq(env.candidates.iter().map(|c| &c.candidate_id)) =>
                {
                    return Ok(idx);
                }
                Ok(_) => log::info!("re-indexing {env_id}: stamps or candidates changed"),
                Err(e) => log::warn!("re-indexing {env_id}: {e}"),
            }
        }
    }
    let idx = EmbeddingIndex::build(env_id, dataset, embedder, model)?;
    if let Some(dir) = dir {
        idx.save(dir)?;
    }
    Ok(idx)
}

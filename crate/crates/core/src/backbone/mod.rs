//! Frozen text and image encoders plus a content-addressed embedding cache.

mod cache;
#[cfg(feature = "clip")]
mod clip;
mod stub;

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};
pub use cache::{EmbeddingCache, CACHE_DIR_ENV};
#[cfg(feature = "clip")]
pub use clip::ClipBackbone;
pub use stub::StubBackbone;

/// Output width of the shipped encoders.
pub const EMBED_DIM: usize = 768;
/// Directory holding `model.safetensors` and `tokenizer.json` for the CLIP
/// backend.
pub const CLIP_DIR_ENV: &str = "LTRPO_CLIP_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Text,
    Image,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Text => "text",
            EmbeddingKind::Image => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub kind: EmbeddingKind,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub model: String,
    pub token_limit: usize,
    pub vocab_size: usize,
    pub device: String,
}

/// A frozen encoder. Nothing in the crate mutates its weights.
pub trait Backbone: Send + Sync {
    /// Version stamp; part of every cache key and index stamp.
    fn id(&self) -> String;
    fn config(&self) -> BackboneConfig;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>>;
    /// Digest of the weights, used to check they stay untouched.
    fn weights_checksum(&self) -> String;

    fn embed_image_bytes(&self, bytes: &[u8]) -> Result<Vec<f32>> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Backbone(format!("undecodable image: {e}")))?;
        self.embed_image(&img.to_rgb8())
    }
}

/// Opens a backend by name: `stub` or `clip`.
pub fn open_backbone(name: &str, dim: usize) -> Result<Arc<dyn Backbone>> {
    match name {
        "stub" => Ok(Arc::new(StubBackbone::new(dim, 0))),
        "clip" => open_clip(),
        other => Err(Error::Config(format!("unknown backbone {other:?} (expected stub or clip)"))),
    }
}

#[cfg(feature = "clip")]
fn open_clip() -> Result<Arc<dyn Backbone>> {
    let dir = std::env::var_os(CLIP_DIR_ENV)
        .ok_or_else(|| Error::Backbone(format!("{CLIP_DIR_ENV} is not set")))?;
    Ok(Arc::new(ClipBackbone::load(Path::new(&dir))?))
}

#[cfg(not(feature = "clip"))]
fn open_clip() -> Result<Arc<dyn Backbone>> {
    Err(Error::Backbone(
        "this build has no CLIP support; rebuild with --features clip".into(),
    ))
}

/// Backbone plus optional cache. All feature extraction goes through here.
#[derive(Clone)]
pub struct Embedder {
    backbone: Arc<dyn Backbone>,
    cache: Option<EmbeddingCache>,
}

impl Embedder {
    pub fn new(backbone: Arc<dyn Backbone>, cache: Option<EmbeddingCache>) -> Self {
        Embedder { backbone, cache }
    }

    pub fn uncached(backbone: Arc<dyn Backbone>) -> Self {
        Embedder { backbone, cache: None }
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    pub fn dim(&self) -> usize {
        self.backbone.dim()
    }

    pub fn text(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::Backbone("empty text".into()));
        }
        self.record(EmbeddingKind::Text, text.as_bytes(), || self.backbone.embed_text(text))
            .map(|r| r.vector)
    }

    pub fn image_file(&self, path: &Path) -> Result<Vec<f32>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.record(EmbeddingKind::Image, &bytes, || {
            self.backbone
                .embed_image_bytes(&bytes)
                .map_err(|e| Error::Backbone(format!("{}: {e}", path.display())))
        })
        .map(|r| r.vector)
    }

    pub fn image(&self, img: &RgbImage) -> Result<Vec<f32>> {
        let mut bytes = Vec::with_capacity(8 + img.as_raw().len());
        bytes.extend_from_slice(&img.width().to_le_bytes());
        bytes.extend_from_slice(&img.height().to_le_bytes());
        bytes.extend_from_slice(img.as_raw());
        self.record(EmbeddingKind::Image, &bytes, || self.backbone.embed_image(img))
            .map(|r| r.vector)
    }

    fn record(
        &self,
        kind: EmbeddingKind,
        bytes: &[u8],
        compute: impl FnOnce() -> Result<Vec<f32>>,
    ) -> Result<EmbeddingRecord> {
        let check = |v: Vec<f32>| -> Result<Vec<f32>> {
            if v.len() != self.backbone.dim() {
                return Err(Error::Backbone(format!(
                    "backbone returned {} values, expected {}",
                    v.len(),
                    self.backbone.dim()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Backbone("backbone returned non-finite values".into()));
            }
            Ok(v)
        };
        match &self.cache {
            Some(cache) => cache.get_or_compute(&self.backbone.id(), kind, bytes, || check(compute()?)),
            None => Ok(EmbeddingRecord {
                key: cache::cache_key(&self.backbone.id(), kind, bytes),
                kind,
                vector: check(compute()?)?,
            }),
        }
    }
}

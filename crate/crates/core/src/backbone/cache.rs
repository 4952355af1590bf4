use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{EmbeddingKind, EmbeddingRecord};
use crate::{Error, Result};

pub const CACHE_DIR_ENV: &str = "LTRPO_CACHE_DIR";

const MAGIC: &[u8; 4] = b"LTEC";
const FORMAT: u32 = 1;

pub(crate) fn cache_key(backbone_id: &str, kind: EmbeddingKind, bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(backbone_id.as_bytes());
    h.update([0]);
    h.update(kind.as_str().as_bytes());
    h.update([0]);
    h.update(bytes);
    hex::encode(h.finalize())
}

/// One file per vector under `root/<kind>/<first two hex>/<key>.bin`.
///
/// File layout: magic, format, dim (u32 LE), `dim` f32 LE values, then the
/// first 8 bytes of the SHA-256 of everything before it.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    root: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        EmbeddingCache { root: root.into() }
    }

    /// Cache rooted at `$LTRPO_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_DIR_ENV).map(|p| EmbeddingCache::new(PathBuf::from(p)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, kind: EmbeddingKind, key: &str) -> PathBuf {
        self.root.join(kind.as_str()).join(&key[..2]).join(format!("{key}.bin"))
    }

    pub fn get_or_compute(
        &self,
        backbone_id: &str,
        kind: EmbeddingKind,
        bytes: &[u8],
        compute: impl FnOnce() -> Result<Vec<f32>>,
    ) -> Result<EmbeddingRecord> {
        let key = cache_key(backbone_id, kind, bytes);
        let path = self.path_for(kind, &key);
        match std::fs::read(&path) {
            Ok(raw) => match decode(&raw) {
                Some(vector) => return Ok(EmbeddingRecord { key, kind, vector }),
                None => log::warn!("corrupt cache entry {}, recomputing", path.display()),
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(&path, e)),
        }
        let vector = compute()?;
        self.store(&path, &vector)?;
        Ok(EmbeddingRecord { key, kind, vector })
    }

    fn store(&self, path: &Path, vector: &[f32]) -> Result<()> {
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&encode(vector)).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }
}

fn encode(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * v.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT.to_le_bytes());
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..8]);
    out
}

fn decode(raw: &[u8]) -> Option<Vec<f32>> {
    if raw.len() < 20 || &raw[..4] != MAGIC {
        return None;
    }
    let (body, tail) = raw.split_at(raw.len() - 8);
    if Sha256::digest(body)[..8] != *tail {
        return None;
    }
    let format = u32::from_le_bytes(body[4..8].try_into().ok()?);
    let dim = u32::from_le_bytes(body[8..12].try_into().ok()?) as usize;
    if format != FORMAT || body.len() != 12 + 4 * dim {
        return None;
    }
    Some(
        body[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corrupt_entry_is_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        let first = cache
            .get_or_compute("bb", EmbeddingKind::Text, b"cup", || Ok(vec![1.0, 2.0]))
            .unwrap();
        let path = cache.path_for(EmbeddingKind::Text, &first.key);
        let mut raw = std::fs::read(&path).unwrap();
        raw[13] ^= 0xff;
        std::fs::write(&path, raw).unwrap();
        let again = cache
            .get_or_compute("bb", EmbeddingKind::Text, b"cup", || Ok(vec![1.0, 2.0]))
            .unwrap();
        assert_eq!(again.vector, [1.0, 2.0]);
        assert_eq!(decode(&std::fs::read(&path).unwrap()).unwrap(), [1.0, 2.0]);
    }

    #[test]
    fn key_depends_on_backbone_kind_and_bytes() {
        let k = cache_key("a", EmbeddingKind::Text, b"x");
        assert_ne!(k, cache_key("b", EmbeddingKind::Text, b"x"));
        assert_ne!(k, cache_key("a", EmbeddingKind::Image, b"x"));
        assert_ne!(k, cache_key("a", EmbeddingKind::Text, b"y"));
        assert_eq!(k, cache_key("a", EmbeddingKind::Text, b"x"));
    }

    #[test]
    fn thousand_vectors_reload_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        use rand::{Rng, SeedableRng};
        let originals: Vec<Vec<f32>> = (0..1000)
            .map(|_| (0..24).map(|_| rng.random::<f32>() * 1e3 - 5e2).collect())
            .collect();
        for (i, v) in originals.iter().enumerate() {
            cache
                .get_or_compute("bb", EmbeddingKind::Image, &i.to_le_bytes(), || Ok(v.clone()))
                .unwrap();
        }
        for (i, v) in originals.iter().enumerate() {
            let r = cache
                .get_or_compute("bb", EmbeddingKind::Image, &i.to_le_bytes(), || {
                    panic!("cache miss on reload")
                })
                .unwrap();
            let a: Vec<u32> = r.vector.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(v in prop::collection::vec(any::<f32>(), 0..64)) {
            let back = decode(&encode(&v)).unwrap();
            prop_assert_eq!(
                back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

use image::imageops::FilterType;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Backbone, BackboneConfig};
use crate::{Error, Result};

const SIDE: u32 = 16;
const PIXELS: usize = (SIDE * SIDE * 3) as usize;
const TOKEN_LIMIT: usize = 77;

/// Deterministic random-projection encoder.
///
/// Text is a bag of hash-seeded Gaussian word vectors scaled by `1/sqrt(n)`.
/// Images are downsampled to 16x16 RGB and multiplied by a fixed Gaussian
/// matrix, so similar pictures land close together.
pub struct StubBackbone {
    dim: usize,
    seed: u64,
    projection: Vec<f32>,
}

impl StubBackbone {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001_0000_0000);
        let scale = (12.0 / PIXELS as f64).sqrt();
        let projection = (0..dim * PIXELS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        StubBackbone { dim, seed, projection }
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(word.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Backbone for StubBackbone {
    fn id(&self) -> String {
        format!("stub-v1-d{}-s{}", self.dim, self.seed)
    }

    fn config(&self) -> BackboneConfig {
        BackboneConfig {
            model: self.id(),
            token_limit: TOKEN_LIMIT,
            vocab_size: 0,
            device: "cpu".into(),
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::Backbone("empty text".into()));
        }
        let mut toks = words(text);
        if toks.is_empty() {
            toks.push(text.trim().to_string());
        }
        if toks.len() > TOKEN_LIMIT {
            log::warn!("text has {} tokens, truncating to {TOKEN_LIMIT}", toks.len());
            toks.truncate(TOKEN_LIMIT);
        }
        let mut acc = vec![0.0f64; self.dim];
        for w in &toks {
            for (a, v) in acc.iter_mut().zip(self.word_vector(w)) {
                *a += v;
            }
        }
        let norm = (toks.len() as f64).sqrt();
        Ok(acc.into_iter().map(|a| (a / norm) as f32).collect())
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Backbone("image has zero extent".into()));
        }
        let small = image::imageops::resize(image, SIDE, SIDE, FilterType::Triangle);
        let x: Vec<f32> = small.as_raw().iter().map(|&p| p as f32 / 255.0 - 0.5).collect();
        Ok(self
            .projection
            .chunks_exact(PIXELS)
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.projection {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = StubBackbone::new(768, 0);
        let b = StubBackbone::new(768, 0);
        let t = a.embed_text("Pick up the bottle").unwrap();
        assert_eq!(t.len(), 768);
        assert_eq!(t, b.embed_text("Pick up the bottle").unwrap());
        let img = RgbImage::from_pixel(1, 1, image::Rgb([200, 10, 30]));
        let v = a.embed_image(&img).unwrap();
        assert_eq!(v.len(), 768);
        assert_eq!(v, b.embed_image(&img).unwrap());
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn long_text_is_truncated() {
        let s = StubBackbone::new(8, 0);
        let base: Vec<String> = (0..TOKEN_LIMIT).map(|i| format!("w{i}")).collect();
        let long = format!("{} extra words here", base.join(" "));
        assert_eq!(s.embed_text(&long).unwrap(), s.embed_text(&base.join(" ")).unwrap());
    }

    #[test]
    fn weights_stay_frozen() {
        let s = StubBackbone::new(32, 1);
        let before = s.weights_checksum();
        s.embed_text("a red cup").unwrap();
        s.embed_image(&RgbImage::new(4, 4)).unwrap();
        assert_eq!(before, s.weights_checksum());
    }

    #[test]
    fn seeds_differ() {
        let a = StubBackbone::new(16, 0).embed_text("cup").unwrap();
        let b = StubBackbone::new(16, 1).embed_text("cup").unwrap();
        assert_ne!(a, b);
    }
}

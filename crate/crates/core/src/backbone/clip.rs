use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::clip::{
    text_model::{Activation, ClipTextConfig},
    vision_model::ClipVisionConfig,
    ClipConfig, ClipModel,
};
use image::imageops::FilterType;
use image::RgbImage;
use sha2::{Digest, Sha256};
use tokenizers::Tokenizer;

use super::{Backbone, BackboneConfig, EMBED_DIM};
use crate::{Error, Result};

const IMAGE_SIZE: u32 = 224;
const TOKEN_LIMIT: usize = 77;
const VOCAB: usize = 49408;
const MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_1];

fn vit_l14() -> ClipConfig {
    ClipConfig {
        text_config: ClipTextConfig {
            vocab_size: VOCAB,
            embed_dim: 768,
            activation: Activation::QuickGelu,
            intermediate_size: 3072,
            max_position_embeddings: TOKEN_LIMIT,
            pad_with: None,
            num_hidden_layers: 12,
            num_attention_heads: 12,
            projection_dim: EMBED_DIM,
        },
        vision_config: ClipVisionConfig {
            embed_dim: 1024,
            activation: Activation::QuickGelu,
            intermediate_size: 4096,
            num_hidden_layers: 24,
            num_attention_heads: 16,
            projection_dim: EMBED_DIM,
            num_channels: 3,
            image_size: IMAGE_SIZE as usize,
            patch_size: 14,
        },
        logit_scale_init_value: 2.6592,
        image_size: IMAGE_SIZE as usize,
    }
}

fn backbone_err(e: impl std::fmt::Display) -> Error {
    Error::Backbone(e.to_string())
}

/// CLIP ViT-L/14 loaded from `model.safetensors` and `tokenizer.json`.
pub struct ClipBackbone {
    model: ClipModel,
    tokenizer: Tokenizer,
    device: Device,
    checksum: String,
}

impl ClipBackbone {
    pub fn load(dir: &Path) -> Result<Self> {
        let weights = dir.join("model.safetensors");
        let bytes = std::fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
        let checksum = hex::encode(Sha256::digest(&bytes));
        let device = Device::Cpu;
        let vb = VarBuilder::from_buffered_safetensors(bytes, DType::F32, &device)
            .map_err(backbone_err)?;
        let model = ClipModel::new(vb, &vit_l14()).map_err(backbone_err)?;
        let tok_path = dir.join("tokenizer.json");
        let tokenizer = Tokenizer::from_file(&tok_path)
            .map_err(|e| Error::Backbone(format!("{}: {e}", tok_path.display())))?;
        Ok(ClipBackbone { model, tokenizer, device, checksum })
    }

    fn pixels(&self, image: &RgbImage) -> Result<Tensor> {
        let (w, h) = image.dimensions();
        let scale = IMAGE_SIZE as f32 / w.min(h) as f32;
        let nw = ((w as f32 * scale).round() as u32).max(IMAGE_SIZE);
        let nh = ((h as f32 * scale).round() as u32).max(IMAGE_SIZE);
        let resized = image::imageops::resize(image, nw, nh, FilterType::CatmullRom);
        let x0 = (nw - IMAGE_SIZE) / 2;
        let y0 = (nh - IMAGE_SIZE) / 2;
        let crop = image::imageops::crop_imm(&resized, x0, y0, IMAGE_SIZE, IMAGE_SIZE).to_image();
        let n = (IMAGE_SIZE * IMAGE_SIZE) as usize;
        let mut data = vec![0f32; 3 * n];
        for (i, p) in crop.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = (p[c] as f32 / 255.0 - MEAN[c]) / STD[c];
            }
        }
        Tensor::from_vec(data, (1, 3, IMAGE_SIZE as usize, IMAGE_SIZE as usize), &self.device)
            .map_err(backbone_err)
    }
}

impl Backbone for ClipBackbone {
    fn id(&self) -> String {
        format!("clip-vit-l14-{}", &self.checksum[..16])
    }

    fn config(&self) -> BackboneConfig {
        BackboneConfig {
            model: "openai/clip-vit-large-patch14".into(),
            token_limit: TOKEN_LIMIT,
            vocab_size: VOCAB,
            device: "cpu".into(),
        }
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::Backbone("empty text".into()));
        }
        let enc = self.tokenizer.encode(text, true).map_err(backbone_err)?;
        let mut ids: Vec<u32> = enc.get_ids().to_vec();
        if ids.len() > TOKEN_LIMIT {
            log::warn!("text has {} tokens, truncating to {TOKEN_LIMIT}", ids.len());
            let eos = *ids.last().unwrap();
            ids.truncate(TOKEN_LIMIT);
            ids[TOKEN_LIMIT - 1] = eos;
        }
        let input = Tensor::new(ids.as_slice(), &self.device)
            .and_then(|t| t.unsqueeze(0))
            .map_err(backbone_err)?;
        let out = self.model.get_text_features(&input).map_err(backbone_err)?;
        out.squeeze(0).and_then(|t| t.to_vec1()).map_err(backbone_err)
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Backbone("image has zero extent".into()));
        }
        let px = self.pixels(image)?;
        let out = self.model.get_image_features(&px).map_err(backbone_err)?;
        out.squeeze(0).and_then(|t| t.to_vec1()).map_err(backbone_err)
    }

    fn weights_checksum(&self) -> String {
        self.checksum.clone()
    }
}

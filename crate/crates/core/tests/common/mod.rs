#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use ltrpo_core::backbone::{Embedder, StubBackbone};
use ltrpo_core::corpus::synth::{synth_generate, SynthConfig};
use ltrpo_core::corpus::Dataset;
use ltrpo_core::features::{FeatureOptions, FeatureStore};
use ltrpo_core::phrases::RuleChunker;
use ltrpo_core::ranker::{ModelConfig, Variant};

pub const DIM: usize = 32;

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        l_inst: 1,
        l_img: 1,
        heads: 2,
        hidden: DIM,
        ff: 64,
        variant,
        ..ModelConfig::default()
    }
}

pub fn embedder(dim: usize) -> Embedder {
    Embedder::uncached(Arc::new(StubBackbone::new(dim, 0)))
}

/// Synthetic corpus plus stub features.
pub fn fixture(dir: &Path, synth: &SynthConfig, dim: usize, with_strip: bool) -> (Dataset, FeatureStore) {
    let ds = synth_generate(synth, 11, dir).unwrap();
    let opts = FeatureOptions { with_strip, ..FeatureOptions::default() };
    let store = FeatureStore::build(&ds, &embedder(dim), &mut RuleChunker, &opts).unwrap();
    (ds, store)
}

pub fn small_synth() -> SynthConfig {
    SynthConfig { environments: 3, candidates_per_env: 8, val_envs: 1, ..SynthConfig::default() }
}

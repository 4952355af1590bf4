#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use ltrpo_core::backbone::{Embedder, StubBackbone};
use ltrpo_core::corpus::synth::{synth_generate, SynthConfig};
use ltrpo_core::corpus::Dataset;
use ltrpo_core::phrases::RuleChunker;
use ltrpo_core::ranker::{Model, ModelConfig, Variant};
use ltrpo_service::{LoopbackSimulator, RankingService, Server, ServerConfig};

pub const DIM: usize = 32;

pub fn tiny_config() -> ModelConfig {
    ModelConfig { l_inst: 1, l_img: 1, heads: 2, hidden: DIM, ff: 64, variant: Variant::Full, ..ModelConfig::default() }
}

pub fn embedder() -> Embedder {
    Embedder::uncached(Arc::new(StubBackbone::new(DIM, 0)))
}

pub fn dataset(dir: &Path, environments: usize, candidates: usize) -> Arc<Dataset> {
    let cfg = SynthConfig { environments, candidates_per_env: candidates, ..SynthConfig::default() };
    Arc::new(synth_generate(&cfg, 3, dir).unwrap())
}

pub fn service(ds: Arc<Dataset>, seed: u64, index_dir: Option<&Path>) -> RankingService {
    let model = Model::<f32>::new(tiny_config(), seed).unwrap();
    RankingService::new(ds, model, embedder(), Box::new(RuleChunker), index_dir).unwrap()
}

pub fn server(ds: Arc<Dataset>) -> (Arc<Server>, Arc<LoopbackSimulator>) {
    let sim = Arc::new(LoopbackSimulator::new());
    let s = Server::new(Arc::new(service(ds, 1, None)), sim.clone(), ServerConfig::default());
    (Arc::new(s), sim)
}

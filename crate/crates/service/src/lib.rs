//! Ranking service over indexed environments.
//!
//! [`RankingService`] answers instruction queries from per-environment
//! [`EmbeddingIndex`]es. [`Server`] adds operator sessions and dispatch, and
//! [`http::router`] exposes both over HTTP.

pub mod dispatch;
pub mod grasp;
pub mod http;
pub mod index;
pub mod session;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use ltrpo_core::backbone::Embedder;
use ltrpo_core::corpus::Dataset;
use ltrpo_core::features::{query_features, FeatureOptions};
use ltrpo_core::phrases::PhraseParser;
use ltrpo_core::ranker::{Model, QueryFeatures, RankedList};

pub use dispatch::{DispatchSink, DispatchState, DispatchStatus, LogSink, LoopbackSimulator, PickCommand};
pub use grasp::{grasp_point, DepthRange, GraspPoint, Intrinsics};
pub use index::{index_environment, model_stamp, EmbeddingIndex, IndexStamp, INDEX_DIR_ENV};
pub use session::{SelectionEvent, Sessions, ShownItem};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown environment {0}")]
    UnknownEnv(String),
    #[error("unknown query {0}")]
    UnknownQuery(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} has expired")]
    Expired(String),
    #[error("empty instruction")]
    EmptyInstruction,
    #[error("top_k must be in 1..={pool}, got {got}")]
    TopK { got: usize, pool: usize },
    #[error("{0}")]
    NotShown(String),
    #[error("{0}")]
    Conflict(String),
    #[error("stale index: {0}")]
    StaleIndex(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("grasp point: {0}")]
    Grasp(String),
    #[error("dispatch: {0}")]
    Dispatch(String),
    #[error(transparent)]
    Core(#[from] ltrpo_core::Error),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSummary {
    pub env_id: String,
    pub candidates: usize,
}

/// Model, backbone and indexes; immutable once built.
pub struct RankingService {
    dataset: Arc<Dataset>,
    model: Model<f32>,
    embedder: Embedder,
    parser: Mutex<Box<dyn PhraseParser>>,
    options: FeatureOptions,
    stamp: IndexStamp,
    indexes: BTreeMap<String, EmbeddingIndex>,
}

impl RankingService {
    /// Indexes every environment, reusing persisted indexes in `index_dir`.
    pub fn new(
        dataset: Arc<Dataset>,
        model: Model<f32>,
        embedder: Embedder,
        parser: Box<dyn PhraseParser>,
        index_dir: Option<&Path>,
    ) -> ServiceResult<Self> {
        let mut indexes = BTreeMap::new();
        for env in dataset.environments() {
            let idx = index_environment(index_dir, &env.env_id, &dataset, &embedder, &model)?;
            indexes.insert(env.env_id.clone(), idx);
        }
        Self::with_indexes(dataset, model, embedder, parser, indexes)
    }

    /// Serves prebuilt indexes; refuses any whose stamps do not match.
    pub fn with_indexes(
        dataset: Arc<Dataset>,
        model: Model<f32>,
        embedder: Embedder,
        parser: Box<dyn PhraseParser>,
        indexes: BTreeMap<String, EmbeddingIndex>,
    ) -> ServiceResult<Self> {
        let stamp = index::stamp_for(&model, &embedder);
        for idx in indexes.values() {
            idx.check_stamp(&stamp)?;
        }
        let options = FeatureOptions::for_model(&model.config);
        Ok(RankingService { dataset, model, embedder, parser: Mutex::new(parser), options, stamp, indexes })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn stamp(&self) -> &IndexStamp {
        &self.stamp
    }

    pub fn index(&self, env_id: &str) -> ServiceResult<&EmbeddingIndex> {
        self.indexes.get(env_id).ok_or_else(|| ServiceError::UnknownEnv(env_id.to_string()))
    }

    pub fn environments(&self) -> Vec<EnvSummary> {
        self.indexes.values().map(|i| EnvSummary { env_id: i.env_id.clone(), candidates: i.len() }).collect()
    }

    /// Phrase extraction and text embeddings for one instruction.
    pub fn encode_instruction(&self, instruction: &str) -> ServiceResult<QueryFeatures<f32>> {
        if instruction.trim().is_empty() {
            return Err(ServiceError::EmptyInstruction);
        }
        let mut parser = self.parser.lock().unwrap_or_else(|p| p.into_inner());
        Ok(query_features(&self.embedder, parser.as_mut(), instruction, &self.options)?)
    }

    /// Ranks an encoded instruction against the index of `env_id`.
    pub fn rank_features(&self, query: &QueryFeatures<f32>, env_id: &str, top_k: usize) -> ServiceResult<RankedList> {
        let idx = self.index(env_id)?;
        idx.check_stamp(&self.stamp)?;
        if top_k == 0 || top_k > idx.len() {
            return Err(ServiceError::TopK { got: top_k, pool: idx.len() });
        }
        let enc = self.model.encode_queries(&[query])?;
        let mut list = self.model.rank_encoded(None, &enc, &idx.encoding, &idx.candidate_ids)?;
        list.items.truncate(top_k);
        Ok(list)
    }

    pub fn query(&self, instruction: &str, env_id: &str, top_k: usize) -> ServiceResult<RankedList> {
        self.index(env_id)?;
        let q = self.encode_instruction(instruction)?;
        self.rank_features(&q, env_id, top_k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub instruction: String,
    pub env_id: String,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub candidate_id: String,
    pub score: f64,
    pub rank: usize,
    pub crop_url: String,
    pub context_urls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query_id: String,
    pub session_id: String,
    pub env_id: String,
    pub instruction: String,
    pub results: Vec<ResultItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectRequest {
    pub query_id: String,
    pub candidate_id: String,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Used when a query omits `top_k`; capped at the pool size.
    pub default_top_k: usize,
    pub session_ttl: Duration,
    pub depth_range: DepthRange,
    /// URL prefix under which dataset files are served.
    pub files_prefix: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            default_top_k: 10,
            session_ttl: Duration::from_secs(30 * 60),
            depth_range: DepthRange::default(),
            files_prefix: "/files".into(),
        }
    }
}

pub struct Server {
    pub service: Arc<RankingService>,
    pub sessions: Sessions,
    pub sink: Arc<dyn DispatchSink>,
    pub config: ServerConfig,
}

fn file_url(prefix: &str, rel: &Path) -> String {
    let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    format!("{prefix}/{}", parts.join("/"))
}

impl Server {
    pub fn new(service: Arc<RankingService>, sink: Arc<dyn DispatchSink>, config: ServerConfig) -> Self {
        Server { service, sessions: Sessions::new(config.session_ttl), sink, config }
    }

    pub fn with_sessions(mut self, sessions: Sessions) -> Self {
        self.sessions = sessions;
        self
    }

    pub fn files_root(&self) -> PathBuf {
        self.service.dataset().root().to_path_buf()
    }

    pub fn query(&self, req: &QueryRequest) -> ServiceResult<QueryResponse> {
        let pool = self.service.index(&req.env_id)?.len();
        let top_k = req.top_k.unwrap_or(self.config.default_top_k.min(pool));
        let list = self.service.query(&req.instruction, &req.env_id, top_k)?;
        let env = self.service.dataset().environment(&req.env_id).expect("indexed environments exist");
        let results: Vec<ResultItem> = list
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let c = env.candidate(&it.candidate_id).expect("indexed candidates exist");
                ResultItem {
                    candidate_id: it.candidate_id.clone(),
                    score: it.score,
                    rank: i + 1,
                    crop_url: file_url(&self.config.files_prefix, &c.crop_path),
                    context_urls: c.context_paths.iter().map(|p| file_url(&self.config.files_prefix, p)).collect(),
                }
            })
            .collect();
        let shown = results
            .iter()
            .map(|r| ShownItem { candidate_id: r.candidate_id.clone(), rank: r.rank, score: r.score })
            .collect();
        let (session_id, query_id) =
            self.sessions.open_query(req.session_id.as_deref(), &req.instruction, &req.env_id, shown)?;
        Ok(QueryResponse { query_id, session_id, env_id: req.env_id.clone(), instruction: req.instruction.clone(), results })
    }

    pub fn select(&self, req: &SelectRequest) -> ServiceResult<SelectionEvent> {
        self.sessions.select(&req.query_id, &req.candidate_id, |sel| {
            let dataset = self.service.dataset();
            let depth = dataset.environment(sel.env_id).and_then(|e| e.candidate(sel.candidate_id)).and_then(|c| c.depth.as_ref());
            let (grasp, note) = match depth {
                Some(d) => match grasp::grasp_point_for(dataset.root(), d, self.config.depth_range) {
                    Ok(g) => (Some(g), None),
                    Err(e) => (None, Some(e.to_string())),
                },
                None => (None, None),
            };
            let cmd = PickCommand {
                session_id: sel.session_id.to_string(),
                query_id: sel.query_id.to_string(),
                env_id: sel.env_id.to_string(),
                candidate_id: sel.candidate_id.to_string(),
                grasp_point: grasp,
            };
            let mut status = self.sink.dispatch(&cmd);
            if let Some(n) = note {
                status.detail = Some(match status.detail {
                    Some(d) => format!("{d}; {n}"),
                    None => n,
                });
            }
            (grasp, status)
        })
    }

    pub fn session_log(&self, session_id: &str) -> ServiceResult<Vec<SelectionEvent>> {
        self.sessions.log(session_id)
    }
}

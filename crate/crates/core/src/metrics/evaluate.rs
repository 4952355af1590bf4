use std::collections::BTreeMap;

use super::{QueryResult, Report};
use crate::corpus::{Dataset, Sample};
use crate::features::FeatureStore;
use crate::ranker::{CandidateEncoding, Model, QueryFeatures};
use crate::{Error, Result};

const QUERY_CHUNK: usize = 64;

/// Candidate encodings of each environment, computed once per model.
pub struct EnvEncodings {
    pub envs: BTreeMap<String, (Vec<String>, CandidateEncoding<f32>)>,
}

impl EnvEncodings {
    pub fn build<'a>(
        model: &Model<f32>,
        store: &FeatureStore,
        dataset: &Dataset,
        env_ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut envs = BTreeMap::new();
        for env_id in env_ids {
            if envs.contains_key(env_id) {
                continue;
            }
            let (ids, feats) = store.environment(dataset, env_id)?;
            let enc = model.encode_candidates(&feats)?;
            envs.insert(env_id.to_string(), (ids, enc));
        }
        Ok(EnvEncodings { envs })
    }
}

/// Ranks every sample against its environment pool.
pub fn evaluate_encoded(
    model: &Model<f32>,
    store: &FeatureStore,
    samples: &[&Sample],
    encodings: &EnvEncodings,
) -> Result<Vec<QueryResult>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(QUERY_CHUNK) {
        let feats: Vec<&QueryFeatures<f32>> =
            chunk.iter().map(|s| store.query(&s.sample_id)).collect::<Result<_>>()?;
        let qenc = model.encode_queries(&feats)?;
        for (i, s) in chunk.iter().enumerate() {
            let (ids, enc) = encodings
                .envs
                .get(&s.env_id)
                .ok_or_else(|| Error::DanglingReference(format!("no encodings for {}", s.env_id)))?;
            let row = crate::ranker::QueryEncoding { rows: qenc.rows.slice(ndarray::s![i..i + 1, ..]).to_owned() };
            let ranked = model.rank_encoded(Some(s.sample_id.clone()), &row, enc, ids)?;
            out.push(QueryResult { sample_id: s.sample_id.clone(), ranked, relevant: s.relevant_ids.clone() });
        }
    }
    Ok(out)
}

/// Report over the named split.
pub fn evaluate(model: &Model<f32>, store: &FeatureStore, dataset: &Dataset, split: &str) -> Result<Report> {
    let samples = dataset.split_samples(split)?;
    if samples.is_empty() {
        return Err(Error::Split(format!("split {split} has no samples")));
    }
    let enc = EnvEncodings::build(model, store, dataset, samples.iter().map(|s| s.env_id.as_str()))?;
    let results = evaluate_encoded(model, store, &samples, &enc)?;
    Report::new(format!("{} {split}", model.config.variant.as_str()), &results)
}

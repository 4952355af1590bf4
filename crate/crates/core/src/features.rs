//! Backbone features for every sample and candidate of a dataset.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::backbone::Embedder;
use crate::corpus::{baseline_context_image, load_rgb, CandidateObject, Dataset};
use crate::phrases::{extract, PhraseParser};
use crate::ranker::{CandidateFeatures, QueryFeatures};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureOptions {
    pub n_p_max: usize,
    /// Also embed the resized context strip used by the baseline.
    pub with_strip: bool,
    pub normalize: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions { n_p_max: crate::phrases::DEFAULT_N_P_MAX, with_strip: false, normalize: false }
    }
}

impl FeatureOptions {
    /// Options matching what `config` consumes.
    pub fn for_model(config: &crate::ranker::ModelConfig) -> Self {
        FeatureOptions {
            n_p_max: config.n_p_max,
            with_strip: config.variant == crate::ranker::Variant::Baseline,
            normalize: config.normalize_features,
        }
    }
}

fn vector(mut v: Vec<f32>, normalize: bool) -> Array1<f32> {
    if normalize {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    Array1::from(v)
}

fn stack(rows: Vec<Array1<f32>>, dim: usize) -> Array2<f32> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut r, v) in out.rows_mut().into_iter().zip(rows) {
        r.assign(&v);
    }
    out
}

/// `h_I` plus one embedding per unmasked phrase.
pub fn query_features(
    embedder: &Embedder,
    parser: &mut dyn PhraseParser,
    instruction: &str,
    opts: &FeatureOptions,
) -> Result<QueryFeatures<f32>> {
    if instruction.trim().is_empty() {
        return Err(Error::Data("empty instruction".into()));
    }
    let padded = extract(parser, instruction, opts.n_p_max)?;
    let mut rows = Vec::new();
    for text in padded.texts() {
        rows.push(vector(embedder.text(text)?, opts.normalize));
    }
    Ok(QueryFeatures {
        instruction: vector(embedder.text(instruction)?, opts.normalize),
        phrases: stack(rows, embedder.dim()),
    })
}

pub fn candidate_features(
    embedder: &Embedder,
    dataset: &Dataset,
    cand: &CandidateObject,
    opts: &FeatureOptions,
) -> Result<CandidateFeatures<f32>> {
    let target = vector(embedder.image_file(&dataset.resolve(&cand.crop_path))?, opts.normalize);
    let mut rows = Vec::with_capacity(cand.context_paths.len());
    for p in &cand.context_paths {
        rows.push(vector(embedder.image_file(&dataset.resolve(p))?, opts.normalize));
    }
    let strip = if opts.with_strip {
        let images = cand
            .context_paths
            .iter()
            .map(|p| load_rgb(&dataset.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        let strip = baseline_context_image(&images)?;
        Some(vector(embedder.image(&strip)?, opts.normalize))
    } else {
        None
    };
    Ok(CandidateFeatures { target, context: stack(rows, embedder.dim()), strip })
}

/// Features keyed by sample id and by `(env_id, candidate_id)`.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub backbone_id: String,
    pub options: FeatureOptions,
    pub queries: BTreeMap<String, QueryFeatures<f32>>,
    pub candidates: BTreeMap<(String, String), CandidateFeatures<f32>>,
}

impl FeatureStore {
    pub fn build(
        dataset: &Dataset,
        embedder: &Embedder,
        parser: &mut dyn PhraseParser,
        opts: &FeatureOptions,
    ) -> Result<Self> {
        let mut queries = BTreeMap::new();
        for s in dataset.samples() {
            queries.insert(s.sample_id.clone(), query_features(embedder, parser, &s.instruction, opts)?);
        }
        let mut candidates = BTreeMap::new();
        for env in dataset.environments() {
            for c in &env.candidates {
                candidates.insert(
                    (env.env_id.clone(), c.candidate_id.clone()),
                    candidate_features(embedder, dataset, c, opts)?,
                );
            }
        }
        Ok(FeatureStore { backbone_id: embedder.backbone().id(), options: opts.clone(), queries, candidates })
    }

    pub fn query(&self, sample_id: &str) -> Result<&QueryFeatures<f32>> {
        self.queries
            .get(sample_id)
            .ok_or_else(|| Error::DanglingReference(format!("no features for sample {sample_id}")))
    }

    pub fn candidate(&self, env_id: &str, candidate_id: &str) -> Result<&CandidateFeatures<f32>> {
        self.candidates
            .get(&(env_id.to_string(), candidate_id.to_string()))
            .ok_or_else(|| Error::DanglingReference(format!("no features for candidate {env_id}/{candidate_id}")))
    }

    /// Candidates of one environment, in manifest order, with their ids.
    pub fn environment<'a>(
        &'a self,
        dataset: &Dataset,
        env_id: &str,
    ) -> Result<(Vec<String>, Vec<&'a CandidateFeatures<f32>>)> {
        let env = dataset
            .environment(env_id)
            .ok_or_else(|| Error::DanglingReference(format!("unknown environment {env_id}")))?;
        let mut ids = Vec::with_capacity(env.candidates.len());
        let mut feats = Vec::with_capacity(env.candidates.len());
        for c in &env.candidates {
            ids.push(c.candidate_id.clone());
            feats.push(self.candidate(env_id, &c.candidate_id)?);
        }
        Ok((ids, feats))
    }
}

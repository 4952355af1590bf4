//! Training loop, model selection and gradient verification.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Sample};
use crate::features::FeatureStore;
use crate::metrics::{evaluate, Summary};
use crate::nn::{derivative, Params};
use crate::ranker::checkpoint::{self, CheckpointMeta, CHECKPOINT_FORMAT};
use crate::ranker::{CandidateFeatures, Model, ModelConfig, QueryFeatures};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `None` picks 32 below 1000 training samples and 128 otherwise.
    pub batch: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every_epoch: bool,
    /// Also evaluate on the training split each epoch.
    pub eval_train: bool,
    pub checkpoints: Retention,
}

/// Which per-epoch checkpoints survive a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    All,
    /// The best epoch by validation recall@10 so far, plus the latest.
    BestAndLast,
    None,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2.0e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: None,
            epochs: 20,
            seed: 0,
            eval_every_epoch: true,
            eval_train: false,
            checkpoints: Retention::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.batch == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn batch_for(&self, n_train: usize) -> usize {
        self.batch.unwrap_or(if n_train < 1000 { 32 } else { 128 })
    }
}

/// Adam without weight decay or schedule.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Adam {
            lr: cfg.lr as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.adam_eps as f32,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, model: &mut Model<f32>, grads: &Model<f32>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut ps = Vec::new();
        model.params_mut(&mut ps);
        let mut gs = Vec::new();
        grads.params(&mut gs);
        let mut at = 0;
        for (p, g) in ps.into_iter().zip(gs) {
            let m = &mut self.m[at..at + p.len()];
            let v = &mut self.v[at..at + p.len()];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            at += p.len();
        }
    }
}

fn zero(model: &mut Model<f32>) {
    let mut ps = Vec::new();
    model.params_mut(&mut ps);
    for p in ps {
        p.fill(0.0);
    }
}

/// One training example for an epoch: a sample and the relevant candidate
/// chosen as its positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair<'a> {
    pub sample: &'a Sample,
    pub positive: &'a str,
}

/// Picks a positive per sample, shuffles, then fills batches greedily so
/// that no two members of a batch share a relevant candidate.
pub fn epoch_batches<'a>(samples: &[&'a Sample], batch: usize, rng: &mut impl Rng) -> Vec<Vec<Pair<'a>>> {
    let mut pairs: Vec<Pair<'a>> = samples
        .iter()
        .map(|s| {
            let k = rng.random_range(0..s.relevant_ids.len());
            Pair { sample: s, positive: s.relevant_ids.iter().nth(k).unwrap() }
        })
        .collect();
    pairs.shuffle(rng);
    type Open<'a> = (Vec<Pair<'a>>, BTreeSet<(&'a str, &'a str)>);
    let mut batches: Vec<Open<'a>> = Vec::new();
    for p in pairs {
        let keys: Vec<(&str, &str)> =
            p.sample.relevant_ids.iter().map(|r| (p.sample.env_id.as_str(), r.as_str())).collect();
        let slot = batches
            .iter()
            .position(|(b, used)| b.len() < batch && keys.iter().all(|k| !used.contains(k)));
        match slot {
            Some(i) => {
                batches[i].1.extend(keys);
                batches[i].0.push(p);
            }
            None => batches.push((vec![p], keys.into_iter().collect())),
        }
    }
    batches.into_iter().map(|(b, _)| b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub batches: usize,
    pub val: Option<Summary>,
    pub train: Option<Summary>,
    pub checkpoint: Option<PathBuf>,
    pub seconds: f64,
}

/// Line written to `metrics.jsonl` per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub epoch: usize,
    pub loss: f64,
    pub val_mrr: Option<f64>,
    pub val_r1: Option<f64>,
    pub val_r5: Option<f64>,
    pub val_r10: Option<f64>,
    pub val_r20: Option<f64>,
    pub train_mrr: Option<f64>,
}

impl From<&EpochRecord> for MetricsLine {
    fn from(r: &EpochRecord) -> Self {
        let v = r.val.as_ref();
        MetricsLine {
            epoch: r.epoch,
            loss: r.loss,
            val_mrr: v.map(|s| s.mrr),
            val_r1: v.map(|s| s.r1),
            val_r5: v.map(|s| s.r5),
            val_r10: v.map(|s| s.r10),
            val_r20: v.map(|s| s.r20),
            train_mrr: r.train.as_ref().map(|s| s.mrr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct TrainRun {
    pub model: Model<f32>,
    pub records: Vec<EpochRecord>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Trains from a fresh initialisation. With `out_dir`, writes one checkpoint
/// per epoch and `metrics.jsonl`. `on_epoch` may stop the run early.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    store: &FeatureStore,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<f32>) -> Control,
) -> Result<TrainRun> {
    cfg.validate()?;
    let mut model = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let train_samples = dataset.split_samples("train")?;
    if train_samples.is_empty() {
        return Err(Error::Split("training split is empty".into()));
    }
    let has_val = dataset.split_samples("val").map(|v| !v.is_empty()).unwrap_or(false);
    let batch = cfg.batch_for(train_samples.len());
    let mut grads = model.zeros_like();
    let mut adam = Adam::new(cfg, model.parameter_count());
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = epoch_batches(&train_samples, batch, &mut rng);
        let (mut total, mut count) = (0.0f64, 0usize);
        for (bi, b) in batches.iter().enumerate() {
            let qs: Vec<&QueryFeatures<f32>> =
                b.iter().map(|p| store.query(&p.sample.sample_id)).collect::<Result<_>>()?;
            let cs: Vec<&CandidateFeatures<f32>> =
                b.iter().map(|p| store.candidate(&p.sample.env_id, p.positive)).collect::<Result<_>>()?;
            zero(&mut grads);
            let loss = model.loss_and_grad(&qs, &cs, &mut grads)? as f64;
            if !loss.is_finite() {
                let ids: Vec<&str> = b.iter().map(|p| p.sample.sample_id.as_str()).collect();
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {bi}, samples {ids:?}")));
            }
            adam.step(&mut model, &grads);
            total += loss * b.len() as f64;
            count += b.len();
        }
        let val = if cfg.eval_every_epoch && has_val {
            Some(evaluate(&model, store, dataset, "val")?.summary)
        } else {
            None
        };
        let train_eval = if cfg.eval_train { Some(evaluate(&model, store, dataset, "train")?.summary) } else { None };
        let mut record = EpochRecord {
            epoch,
            loss: total / count as f64,
            batches: batches.len(),
            val,
            train: train_eval,
            checkpoint: None,
            seconds: 0.0,
        };
        if let (Some(dir), false) = (out_dir, cfg.checkpoints == Retention::None) {
            let path = dir.join(format!("epoch-{epoch:04}.ckpt"));
            let meta = CheckpointMeta {
                format_version: CHECKPOINT_FORMAT,
                config: model_cfg.clone(),
                epoch,
                val: record.val.clone(),
                seed: cfg.seed,
                backbone_id: store.backbone_id.clone(),
                parameters: model.parameter_count(),
            };
            checkpoint::save(&path, &model, &meta)?;
            record.checkpoint = Some(path);
        }
        record.seconds = started.elapsed().as_secs_f64();
        if let Some((f, p)) = log.as_mut() {
            let line = serde_json::to_string(&MetricsLine::from(&record)).expect("metrics line serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        log::info!("epoch {epoch}: loss {:.5} ({:.1}s)", record.loss, record.seconds);
        let control = on_epoch(&record, &model);
        records.push(record);
        if cfg.checkpoints == Retention::BestAndLast {
            prune(&mut records)?;
        }
        if control == Control::Stop {
            break;
        }
    }
    Ok(TrainRun { model, records })
}

fn prune(records: &mut [EpochRecord]) -> Result<()> {
    let best = select_model(records).ok().map(|r| r.epoch);
    let last = records.len() - 1;
    for r in &mut records[..last] {
        if Some(r.epoch) != best {
            if let Some(p) = r.checkpoint.take() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

/// Epoch with the highest validation recall@10; the earliest wins ties.
pub fn select_model(records: &[EpochRecord]) -> Result<&EpochRecord> {
    let mut best: Option<(&EpochRecord, f64)> = None;
    for r in records {
        if let Some(v) = &r.val {
            if best.is_none_or(|(_, b)| v.r10 > b) {
                best = Some((r, v.r10));
            }
        }
    }
    best.map(|(r, _)| r)
        .ok_or_else(|| Error::Config("no epoch carries validation metrics".into()))
}

/// Largest relative error between `analytic` and five-point central
/// differences of `loss` around `params`. Gradients below `1e-6` are
/// compared on an absolute scale of `1e-6`.
pub fn grad_check_fn(
    params: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), analytic.len())));
    }
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let base = p[i];
        let num = derivative(
            |d| {
                p[i] = base + d;
                loss(&p)
            },
            epsilon,
        );
        p[i] = base;
        let a = analytic[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    Ok(worst)
}

/// Checks every parameter gradient of `model` on one paired batch.
pub fn grad_check(
    model: &Model<f64>,
    queries: &[&QueryFeatures<f64>],
    candidates: &[&CandidateFeatures<f64>],
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut grads = model.zeros_like();
    model.loss_and_grad(queries, candidates, &mut grads)?;
    let mut scratch = model.clone();
    let mut failure = None;
    let worst = grad_check_fn(
        &model.flat_params(),
        &grads.flat_params(),
        |p| {
            scratch.set_flat_params(p).expect("same parameter count");
            let mut g = scratch.zeros_like();
            match scratch.loss_and_grad(queries, candidates, &mut g) {
                Ok(l) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        epsilon,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Summary;
    use proptest::prelude::*;

    fn summary(r10: f64) -> Summary {
        Summary { n_inst: 1, mrr: 0.0, mrr_at_10: 0.0, r1: 0.0, r5: 0.0, r10, r20: 0.0 }
    }

    fn record(epoch: usize, r10: Option<f64>) -> EpochRecord {
        EpochRecord { epoch, loss: 0.0, batches: 1, val: r10.map(summary), train: None, checkpoint: None, seconds: 0.0 }
    }

    #[test]
    fn selection_prefers_earliest_tie() {
        let rs = [record(1, Some(0.5)), record(2, Some(0.7)), record(3, Some(0.7))];
        assert_eq!(select_model(&rs).unwrap().epoch, 2);
        assert_eq!(select_model(&rs[..1]).unwrap().epoch, 1);
        assert!(select_model(&[]).is_err());
        assert!(select_model(&[record(1, None)]).is_err());
    }

    proptest! {
        #[test]
        fn selection_matches_scan(vals in prop::collection::vec(0u8..6, 1..20)) {
            let rs: Vec<EpochRecord> =
                vals.iter().enumerate().map(|(i, &v)| record(i + 1, Some(v as f64 / 5.0))).collect();
            let chosen = select_model(&rs).unwrap();
            let max = vals.iter().max().unwrap();
            let first = vals.iter().position(|v| v == max).unwrap() + 1;
            prop_assert_eq!(chosen.epoch, first);
            for r in &rs {
                prop_assert!(chosen.val.as_ref().unwrap().r10 >= r.val.as_ref().unwrap().r10);
            }
        }
    }

    fn sample(id: &str, env: &str, rel: &[&str]) -> Sample {
        Sample {
            sample_id: id.into(),
            env_id: env.into(),
            instruction: "x".into(),
            relevant_ids: rel.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn batches_avoid_shared_relevants() {
        let ss = [
            sample("a", "e1", &["c1"]),
            sample("b", "e1", &["c1", "c2"]),
            sample("c", "e1", &["c3"]),
            sample("d", "e2", &["c1"]),
            sample("e", "e1", &["c2"]),
        ];
        let refs: Vec<&Sample> = ss.iter().collect();
        for seed in 0..20 {
            let mut rng = epoch_rng(seed, 1);
            let bs = epoch_batches(&refs, 4, &mut rng);
            assert_eq!(bs.iter().map(Vec::len).sum::<usize>(), 5);
            for b in &bs {
                assert!(b.len() <= 4);
                for (i, p) in b.iter().enumerate() {
                    assert!(p.sample.relevant_ids.contains(p.positive));
                    for q in &b[i + 1..] {
                        let shared = p.sample.env_id == q.sample.env_id
                            && !p.sample.relevant_ids.is_disjoint(&q.sample.relevant_ids);
                        assert!(!shared, "{} and {}", p.sample.sample_id, q.sample.sample_id);
                    }
                }
            }
        }
    }

    #[test]
    fn epoch_streams_are_reproducible() {
        let a: u64 = epoch_rng(7, 3).random();
        let b: u64 = epoch_rng(7, 3).random();
        let c: u64 = epoch_rng(7, 4).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn linear_loss_checks_exactly() {
        let x = [0.5, -1.5, 2.0, 3.25];
        let w = [0.1, 0.2, -0.3, 0.4];
        let err = grad_check_fn(&w, &x, |p| p.iter().zip(&x).map(|(a, b)| a * b).sum(), 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
        assert!(matches!(grad_check_fn(&w, &x, |_| 0.0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch: Some(0), ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_ok());
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_for(999), 32);
        assert_eq!(cfg.batch_for(4210), 128);
    }
}

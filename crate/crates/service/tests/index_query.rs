mod common;

use std::collections::BTreeMap;

use common::*;
use ltrpo_core::features::{candidate_features, FeatureOptions};
use ltrpo_core::phrases::RuleChunker;
use ltrpo_core::ranker::Model;
use ltrpo_service::index::stamp_for;
use ltrpo_service::{index_environment, EmbeddingIndex, RankingService, ServiceError};

#[test]
fn reindexing_is_byte_identical_and_covers_every_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 2, 8);
    let model = Model::<f32>::new(tiny_config(), 1).unwrap();
    let idx_dir = dir.path().join("index");
    let a = index_environment(Some(&idx_dir), "env00", &ds, &embedder(), &model).unwrap();
    assert_eq!(a.len(), 8);
    let path = EmbeddingIndex::path_in(&idx_dir, "env00");
    let first = std::fs::read(&path).unwrap();
    let mtime = std::fs::metadata(&path).unwrap().modified().unwrap();
    let b = index_environment(Some(&idx_dir), "env00", &ds, &embedder(), &model).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::metadata(&path).unwrap().modified().unwrap(), mtime);
    std::fs::remove_file(&path).unwrap();
    index_environment(Some(&idx_dir), "env00", &ds, &embedder(), &model).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(EmbeddingIndex::load(&path).unwrap(), a);
}

#[test]
fn stale_or_corrupt_indexes_are_not_served() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 1, 4);
    let idx_dir = dir.path().join("index");
    let old = Model::<f32>::new(tiny_config(), 1).unwrap();
    let new = Model::<f32>::new(tiny_config(), 2).unwrap();
    let stale = index_environment(Some(&idx_dir), "env00", &ds, &embedder(), &old).unwrap();

    let mut indexes = BTreeMap::new();
    indexes.insert("env00".to_string(), stale.clone());
    let err = RankingService::with_indexes(ds.clone(), new.clone(), embedder(), Box::new(RuleChunker), indexes)
        .err()
        .unwrap();
    assert!(matches!(err, ServiceError::StaleIndex(_)), "{err}");

    let fresh = index_environment(Some(&idx_dir), "env00", &ds, &embedder(), &new).unwrap();
    assert_eq!(fresh.stamp, stamp_for(&new, &embedder()));
    assert_ne!(fresh.stamp, stale.stamp);

    let path = EmbeddingIndex::path_in(&idx_dir, "env00");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(EmbeddingIndex::load(&path).is_err());
    let rebuilt = index_environment(Some(&idx_dir), "env00", &ds, &embedder(), &new).unwrap();
    assert_eq!(rebuilt, fresh);
}

#[test]
fn indexed_ranking_equals_direct_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 2, 16);
    let svc = service(ds.clone(), 4, None);
    let opts = FeatureOptions::for_model(&svc.model().config);
    for env in ds.environments() {
        let feats: Vec<_> =
            env.candidates.iter().map(|c| candidate_features(&embedder(), &ds, c, &opts).unwrap()).collect();
        let refs: Vec<_> = feats.iter().collect();
        let ids: Vec<String> = env.candidates.iter().map(|c| c.candidate_id.clone()).collect();
        for s in ds.samples().iter().filter(|s| s.env_id == env.env_id) {
            let q = svc.encode_instruction(&s.instruction).unwrap();
            let served = svc.rank_features(&q, &env.env_id, ids.len()).unwrap();
            let direct = svc.model().rank(None, &q, &refs, &ids).unwrap();
            assert_eq!(served, direct, "{}", s.sample_id);

            let top = svc.query(&s.instruction, &env.env_id, 1).unwrap();
            let brute = ids
                .iter()
                .zip(&refs)
                .map(|(id, c)| (id, svc.model().rank(None, &q, &[*c], std::slice::from_ref(id)).unwrap().items[0].score))
                .fold(None::<(&String, f64)>, |best, (id, sc)| match best {
                    Some((_, b)) if b >= sc => best,
                    _ => Some((id, sc)),
                })
                .unwrap();
            assert_eq!(&top.items[0].candidate_id, brute.0);
        }
    }
}

#[test]
fn query_contract() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 1, 4);
    let svc = service(ds, 1, None);
    let a = svc.query("Pick up the red box next to the lamp.", "env00", 3).unwrap();
    assert_eq!(a.items.len(), 3);
    assert!(a.items.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(a, svc.query("Pick up the red box next to the lamp.", "env00", 3).unwrap());
    assert!(matches!(svc.query("x", "env00", 5), Err(ServiceError::TopK { got: 5, pool: 4 })));
    assert!(matches!(svc.query("x", "env00", 0), Err(ServiceError::TopK { .. })));
    assert!(matches!(svc.query("x", "nowhere", 1), Err(ServiceError::UnknownEnv(_))));
    assert!(matches!(svc.query("  ", "env00", 1), Err(ServiceError::EmptyInstruction)));
    assert_eq!(svc.environments().len(), 1);
    assert_eq!(svc.environments()[0].candidates, 4);
}

use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, CheckpointMeta, CHECKPOINT_FORMAT};
use super::*;
use crate::nn::{normal, Params};

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        l_inst: 2,
        l_img: 2,
        heads: 2,
        hidden: 8,
        ff: 12,
        n_p_max: 4,
        n_c: 3,
        temperature: 1.0,
        variant,
        normalize_features: false,
    }
}

fn query(rng: &mut ChaCha8Rng, h: usize, n: usize) -> QueryFeatures<f64> {
    QueryFeatures { instruction: normal(rng, 1, h, 1.0).row(0).to_owned(), phrases: normal(rng, n, h, 1.0) }
}

fn candidate(rng: &mut ChaCha8Rng, h: usize, n_c: usize) -> CandidateFeatures<f64> {
    CandidateFeatures {
        target: normal(rng, 1, h, 1.0).row(0).to_owned(),
        context: normal(rng, n_c, h, 1.0),
        strip: Some(normal(rng, 1, h, 1.0).row(0).to_owned()),
    }
}

fn positions_zero(m: &mut Model<f64>) {
    if let Net::MultiRankIt(n) = &mut m.net {
        n.cnpe.positions.fill(0.0);
        n.crfe.positions.fill(0.0);
    }
}

#[test]
fn cosine_cases() {
    let v = [0.3, -1.2, 2.0];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!((similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
    assert!((similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(matches!(similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
}

#[test]
fn ties_break_by_id() {
    let ids: Vec<String> = ["c3", "c1", "c2"].iter().map(|s| s.to_string()).collect();
    let l = RankedList::from_scores(None, &ids, &[0.5, 0.5, 0.9]).unwrap();
    assert_eq!(l.ids(), ["c2", "c1", "c3"]);
    let one = RankedList::from_scores(None, &ids[..1], &[0.1]).unwrap();
    assert_eq!(one.items.len(), 1);
    assert!(RankedList::from_scores(None, &[], &[]).is_err());
}

#[test]
fn parameter_counts() {
    for v in Variant::ALL {
        let cfg = tiny(v);
        let m = Model::<f64>::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.parameter_count(), parameter_report(&cfg).total, "{v:?}");
    }
    let full = parameter_report(&ModelConfig::default());
    let target = 47_000_000f64;
    assert!(((full.total as f64) - target).abs() / target <= 0.15, "{}", full.total);
    for v in [Variant::NoCnpe, Variant::NoContext] {
        let cfg = ModelConfig { variant: v, ..ModelConfig::default() };
        assert_eq!(parameter_report(&cfg).total, full.total);
    }
}

#[test]
fn config_validation() {
    assert!(ModelConfig { heads: 3, ..tiny(Variant::Full) }.validate().is_err());
    assert!(ModelConfig { temperature: 0.0, ..tiny(Variant::Full) }.validate().is_err());
    assert!("no_context".parse::<Variant>().unwrap() == Variant::NoContext);
    assert!("nope".parse::<Variant>().is_err());
}

#[test]
fn instruction_slice_alone_without_phrases_or_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Model::<f64>::new(tiny(Variant::NoCnpe), 1).unwrap();
    let q = query(&mut rng, 8, 2);
    let enc = m.encode_queries(&[&q]).unwrap();
    let Net::MultiRankIt(net) = &m.net else { unreachable!() };
    let expect = q.instruction.dot(&net.head.w.slice(s![8..16, ..])) + &net.head.b;
    for (a, b) in enc.rows.row(0).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut c = candidate(&mut rng, 8, 3);
    c.target.fill(0.0);
    let ce = m.encode_candidates(&[&c]).unwrap();
    assert!(ce.target_proj.iter().all(|&v| v == 0.0));
}

#[test]
fn repeated_phrase_pools_like_single() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = Model::<f64>::new(tiny(Variant::Full), 2).unwrap();
    positions_zero(&mut m);
    let one = query(&mut rng, 8, 1);
    let row = one.phrases.row(0).to_owned();
    let mut two = one.clone();
    two.phrases = Array2::from_shape_fn((2, 8), |(_, j)| row[j]);
    let a = m.encode_queries(&[&one]).unwrap();
    let b = m.encode_queries(&[&two]).unwrap();
    for (x, y) in a.rows.iter().zip(b.rows.iter()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn equal_tokens_pool_like_target_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut full = Model::<f64>::new(tiny(Variant::Full), 2).unwrap();
    positions_zero(&mut full);
    let mut alone = full.clone();
    alone.config.variant = Variant::NoContext;
    let mut c = candidate(&mut rng, 8, 3);
    let t = c.target.clone();
    c.context = Array2::from_shape_fn((3, 8), |(_, j)| t[j]);
    let a = full.encode_candidates(&[&c]).unwrap();
    let b = alone.encode_candidates(&[&c]).unwrap();
    for (x, y) in a.targ.iter().zip(b.targ.iter()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = Model::<f64>::new(tiny(Variant::Full), 0).unwrap();
    let short = candidate(&mut rng, 8, 2);
    assert!(matches!(m.encode_candidates(&[&short]), Err(Error::Shape(_))));
    let mut empty = query(&mut rng, 8, 1);
    empty.phrases = Array2::zeros((0, 8));
    assert!(matches!(m.encode_queries(&[&empty]), Err(Error::Shape(_))));
    let too_many = query(&mut rng, 8, 5);
    assert!(matches!(m.encode_queries(&[&too_many]), Err(Error::Shape(_))));
    let base = Model::<f64>::new(tiny(Variant::Baseline), 0).unwrap();
    let mut no_strip = candidate(&mut rng, 8, 3);
    no_strip.strip = None;
    assert!(matches!(base.encode_candidates(&[&no_strip]), Err(Error::Shape(_))));
}

#[test]
fn rank_matches_per_pair_scoring() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for v in Variant::ALL {
        let m = Model::<f64>::new(tiny(v), 9).unwrap();
        let q = query(&mut rng, 8, 3);
        let cands: Vec<CandidateFeatures<f64>> = (0..12).map(|_| candidate(&mut rng, 8, 3)).collect();
        let refs: Vec<&CandidateFeatures<f64>> = cands.iter().collect();
        let ids: Vec<String> = (0..12).map(|i| format!("c{i:02}")).collect();
        let ranked = m.rank(None, &q, &refs, &ids).unwrap();
        let qe = m.encode_queries(&[&q]).unwrap();
        let mut brute: Vec<(f64, String)> = cands
            .iter()
            .zip(&ids)
            .map(|(c, id)| {
                let ce = m.encode_candidates(&[c]).unwrap();
                (m.scores(&qe, &ce).unwrap()[[0, 0]], id.clone())
            })
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let brute_ids: Vec<&str> = brute.iter().map(|(_, id)| id.as_str()).collect();
        assert_eq!(ranked.ids(), brute_ids, "{v:?}");
        for it in &ranked.items {
            assert!((-1.0..=1.0).contains(&it.score));
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = Model::<f32>::new(tiny(Variant::Full), 1).unwrap();
    let q = query(&mut rng, 8, 3).cast::<f32>();
    let c = candidate(&mut rng, 8, 3).cast::<f32>();
    let a = m.scores(&m.encode_queries(&[&q]).unwrap(), &m.encode_candidates(&[&c]).unwrap()).unwrap();
    let b = m.scores(&m.encode_queries(&[&q]).unwrap(), &m.encode_candidates(&[&c]).unwrap()).unwrap();
    assert_eq!(a[[0, 0]].to_bits(), b[[0, 0]].to_bits());
    let same = Model::<f32>::new(tiny(Variant::Full), 1).unwrap();
    assert_eq!(m, same);
}

fn numeric_check(v: Variant, temperature: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = ModelConfig { temperature, ..tiny(v) };
    let m = Model::<f64>::new(cfg, 11).unwrap();
    let qs: Vec<QueryFeatures<f64>> = (1..=3).map(|n| query(&mut rng, 8, n)).collect();
    let cs: Vec<CandidateFeatures<f64>> = (0..3).map(|_| candidate(&mut rng, 8, 3)).collect();
    let qr: Vec<&QueryFeatures<f64>> = qs.iter().collect();
    let cr: Vec<&CandidateFeatures<f64>> = cs.iter().collect();
    let mut g = m.zeros_like();
    m.loss_and_grad(&qr, &cr, &mut g).unwrap();
    let analytic = g.flat_params();
    let base = m.flat_params();
    let mut worst: f64 = 0.0;
    let h = 1e-4;
    for idx in (0..base.len()).step_by(5) {
        let eval = |d: f64| {
            let mut p = base.clone();
            p[idx] += d;
            let mut mm = m.clone();
            mm.set_flat_params(&p).unwrap();
            let mut scratch = mm.zeros_like();
            mm.loss_and_grad(&qr, &cr, &mut scratch).unwrap()
        };
        let num = crate::nn::derivative(eval, h);
        let a = analytic[idx];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

#[test]
fn model_gradients_match_differences() {
    for v in Variant::ALL {
        let worst = numeric_check(v, 0.5);
        assert!(worst < 1e-4, "{v:?}: {worst}");
    }
}

#[test]
fn ablation_gradient_leaves_unused_weights_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = Model::<f64>::new(tiny(Variant::NoCnpe), 0).unwrap();
    let qs = [query(&mut rng, 8, 2), query(&mut rng, 8, 2)];
    let cs = [candidate(&mut rng, 8, 3), candidate(&mut rng, 8, 3)];
    let mut g = m.zeros_like();
    m.loss_and_grad(&[&qs[0], &qs[1]], &[&cs[0], &cs[1]], &mut g).unwrap();
    let Net::MultiRankIt(gn) = &g.net else { unreachable!() };
    let mut cnpe = Vec::new();
    gn.cnpe.params(&mut cnpe);
    assert!(cnpe.iter().all(|p| p.iter().all(|&v| v == 0.0)));
    assert!(gn.head.w.slice(s![..8, ..]).iter().all(|&v| v == 0.0));
}

#[test]
fn checkpoint_round_trip_and_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let cfg = tiny(Variant::Full);
    let m = Model::<f32>::new(cfg.clone(), 4).unwrap();
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT,
        config: cfg.clone(),
        epoch: 3,
        val: None,
        seed: 4,
        backbone_id: "stub".into(),
        parameters: m.parameter_count(),
    };
    checkpoint::save(&path, &m, &meta).unwrap();
    let (back, meta2) = checkpoint::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(meta2, meta);
    let ablated = ModelConfig { variant: Variant::NoContext, ..cfg.clone() };
    assert!(checkpoint::load_matching(&path, &ablated, "stub").is_ok());
    let wider = ModelConfig { hidden: 16, ..cfg.clone() };
    assert!(matches!(checkpoint::load_matching(&path, &wider, "stub"), Err(Error::Checkpoint(_))));
    assert!(matches!(checkpoint::load_matching(&path, &cfg, "clip"), Err(Error::Checkpoint(_))));
    let mut raw = std::fs::read(&path).unwrap();
    let n = raw.len();
    raw[n - 20] ^= 1;
    std::fs::write(&path, raw).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Checkpoint(_))));
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(
        u in prop::collection::vec(-5.0f64..5.0, 6),
        v in prop::collection::vec(-5.0f64..5.0, 6),
        k in 0.01f64..100.0,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let a = similarity(&u, &v).unwrap();
        let us: Vec<f64> = u.iter().map(|x| x * k).collect();
        let vs: Vec<f64> = v.iter().map(|x| x * k).collect();
        prop_assert!((a - similarity(&us, &vs).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }
}

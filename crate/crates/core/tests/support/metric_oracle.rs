//! Exact-arithmetic reference for ranking metrics on random instances.

use std::collections::{BTreeSet, HashMap};

use num::{BigInt, BigRational, ToPrimitive, Zero};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ltrpo_core::metrics::{QueryResult, Summary};
use ltrpo_core::ranker::{RankedItem, RankedList};

pub fn random_instances(n: usize, seed: u64) -> Vec<QueryResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|q| {
            let pool = rng.random_range(1..=60usize);
            let mut ids: Vec<String> = (0..pool).map(|i| format!("c{i:03}")).collect();
            ids.shuffle(&mut rng);
            let n_rel = rng.random_range(1..=pool.min(5));
            let relevant: BTreeSet<String> = ids.choose_multiple(&mut rng, n_rel).cloned().collect();
            let items = ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedItem { candidate_id: id.clone(), score: 1.0 - i as f64 / pool as f64 })
                .collect();
            QueryResult { sample_id: format!("q{q}"), ranked: RankedList { sample_id: None, items }, relevant }
        })
        .collect()
}

fn ratio(n: usize, d: usize) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// `(mrr, mrr@10, [r@1, r@5, r@10, r@20])` in exact arithmetic.
pub fn exact(results: &[QueryResult]) -> (BigRational, BigRational, Vec<BigRational>) {
    let ks = [1usize, 5, 10, 20];
    let mut mrr = BigRational::zero();
    let mut mrr10 = BigRational::zero();
    let mut rec = vec![BigRational::zero(); ks.len()];
    for r in results {
        let pos: HashMap<&str, usize> =
            r.ranked.items.iter().enumerate().map(|(i, it)| (it.candidate_id.as_str(), i + 1)).collect();
        let ranks: Vec<usize> = r.relevant.iter().map(|a| pos[a.as_str()]).collect();
        let first = *ranks.iter().min().unwrap();
        mrr += ratio(1, first);
        if first <= 10 {
            mrr10 += ratio(1, first);
        }
        for (slot, &k) in rec.iter_mut().zip(&ks) {
            *slot += ratio(ranks.iter().filter(|&&p| p <= k).count(), ranks.len());
        }
    }
    let n = ratio(results.len(), 1);
    (mrr / &n, mrr10 / &n, rec.into_iter().map(|x| x / &n).collect())
}

/// Largest absolute gap between `Summary::compute` and the exact values.
pub fn max_gap(results: &[QueryResult]) -> f64 {
    let s = Summary::compute(results).unwrap();
    let (mrr, mrr10, rec) = exact(results);
    let got = [s.mrr, s.mrr_at_10, s.r1, s.r5, s.r10, s.r20];
    let want: Vec<f64> = [mrr, mrr10].into_iter().chain(rec).map(|x| x.to_f64().unwrap()).collect();
    got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

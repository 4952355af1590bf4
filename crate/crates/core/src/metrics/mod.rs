//! Ranking metrics over per-query ranked lists.
//!
//! Ranks are 1-based. Every relevant candidate must appear in its list;
//! anything else is a data error rather than a zero score.

mod evaluate;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ranker::RankedList;
use crate::{Error, Result};
pub use evaluate::{evaluate, evaluate_encoded, EnvEncodings};

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub sample_id: String,
    pub ranked: RankedList,
    pub relevant: BTreeSet<String>,
}

impl QueryResult {
    fn check(&self) -> Result<()> {
        if self.relevant.is_empty() {
            return Err(Error::Metric(format!("{}: no relevant candidates", self.sample_id)));
        }
        for r in &self.relevant {
            if self.ranked.rank_of(r).is_none() {
                return Err(Error::Metric(format!(
                    "{}: relevant candidate {r} is not in the ranked pool",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }

    /// Rank of the first relevant candidate.
    pub fn first_relevant_rank(&self) -> Result<usize> {
        self.check()?;
        Ok(self
            .ranked
            .items
            .iter()
            .position(|i| self.relevant.contains(&i.candidate_id))
            .expect("checked above")
            + 1)
    }

    /// `|A ∩ top_k| / |A|`.
    pub fn recall(&self, k: usize) -> Result<f64> {
        self.check()?;
        let hits = self
            .ranked
            .items
            .iter()
            .take(k)
            .filter(|i| self.relevant.contains(&i.candidate_id))
            .count();
        Ok(hits as f64 / self.relevant.len() as f64)
    }
}

fn mean(results: &[QueryResult], f: impl Fn(&QueryResult) -> Result<f64>) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Metric("no query results".into()));
    }
    let mut sum = 0.0;
    for r in results {
        sum += f(r)?;
    }
    Ok(sum / results.len() as f64)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Metric("k must be at least 1".into()));
    }
    Ok(())
}

pub fn mrr(results: &[QueryResult]) -> Result<f64> {
    mean(results, |r| Ok(1.0 / r.first_relevant_rank()? as f64))
}

/// MRR where queries whose first hit is below rank `k` contribute 0.
pub fn mrr_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    check_k(k)?;
    mean(results, |r| {
        let rank = r.first_relevant_rank()?;
        Ok(if rank <= k { 1.0 / rank as f64 } else { 0.0 })
    })
}

pub fn recall_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    check_k(k)?;
    mean(results, |r| r.recall(k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_inst: usize,
    pub mrr: f64,
    pub mrr_at_10: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r20: f64,
}

impl Summary {
    pub fn compute(results: &[QueryResult]) -> Result<Self> {
        Ok(Summary {
            n_inst: results.len(),
            mrr: mrr(results)?,
            mrr_at_10: mrr_at_k(results, 10)?,
            r1: recall_at_k(results, 1)?,
            r5: recall_at_k(results, 5)?,
            r10: recall_at_k(results, 10)?,
            r20: recall_at_k(results, 20)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBreakdown {
    pub sample_id: String,
    pub first_relevant_rank: usize,
    pub relevant: usize,
    pub pool: usize,
    pub recall_at: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub label: String,
    pub summary: Summary,
    pub queries: Vec<QueryBreakdown>,
}

impl Report {
    pub fn new(label: impl Into<String>, results: &[QueryResult]) -> Result<Self> {
        let summary = Summary::compute(results)?;
        let mut queries = Vec::with_capacity(results.len());
        for r in results {
            let mut recall_at = [0.0; 4];
            for (slot, k) in recall_at.iter_mut().zip(RECALL_KS) {
                *slot = r.recall(k)?;
            }
            queries.push(QueryBreakdown {
                sample_id: r.sample_id.clone(),
                first_relevant_rank: r.first_relevant_rank()?,
                relevant: r.relevant.len(),
                pool: r.ranked.items.len(),
                recall_at,
            });
        }
        Ok(Report { label: label.into(), summary, queries })
    }

    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(out, "{} (N_inst = {})", self.label, s.n_inst);
        let _ = writeln!(out, "  MRR     {:.4}", s.mrr);
        let _ = writeln!(out, "  MRR@10  {:.4}", s.mrr_at_10);
        for (k, v) in RECALL_KS.iter().zip([s.r1, s.r5, s.r10, s.r20]) {
            let _ = writeln!(out, "  R@{k:<5} {v:.4}");
        }
        out
    }
}

/// Table with one row per report: `label,MRR,R@1,R@5,R@10,R@20,MRR@10,N_inst`.
pub fn reports_csv(reports: &[Report]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "MRR", "R@1", "R@5", "R@10", "R@20", "MRR@10", "N_inst"])
        .expect("in-memory write");
    for r in reports {
        let s = &r.summary;
        w.write_record([
            r.label.clone(),
            format!("{:.4}", s.mrr),
            format!("{:.4}", s.r1),
            format!("{:.4}", s.r5),
            format!("{:.4}", s.r10),
            format!("{:.4}", s.r20),
            format!("{:.4}", s.mrr_at_10),
            s.n_inst.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

//! MultiRankIt: a phrase encoder and a region encoder scored by cosine
//! similarity, plus the image-MLP baseline and the ablation variants.

pub mod checkpoint;
mod loss;
mod model;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::nn::Real;
use crate::{Error, Result};
pub use loss::{batch_loss, batch_loss_grad};
pub use model::{
    Baseline, CandidateEncoding, CandidateFeatures, Model, MultiRankIt, Net, QueryEncoding, QueryFeatures,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Pooled phrase slot replaced by zeros.
    NoCnpe,
    /// Region encoder sees `[h_t]` only.
    NoContext,
    /// Cosine between `h_I` and an MLP over `[h_t; h_strip]`.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoCnpe, Variant::NoContext, Variant::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCnpe => "no_cnpe",
            Variant::NoContext => "no_context",
            Variant::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub l_inst: usize,
    pub l_img: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Inner width of the feed-forward block inside each encoder layer.
    pub ff: usize,
    pub n_p_max: usize,
    pub n_c: usize,
    pub temperature: f64,
    pub variant: Variant,
    /// L2-normalise backbone features before they enter the network.
    pub normalize_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l_inst: 4,
            l_img: 4,
            heads: 4,
            hidden: 768,
            ff: 2048,
            n_p_max: crate::phrases::DEFAULT_N_P_MAX,
            n_c: 4,
            temperature: 1.0,
            variant: Variant::Full,
            normalize_features: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.ff == 0 {
            return bad("hidden, heads and ff must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.n_p_max == 0 || self.n_c == 0 {
            return bad("n_p_max and n_c must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    /// True when checkpoints of `self` and `other` hold identically shaped
    /// parameters.
    pub fn shape_compatible(&self, other: &ModelConfig) -> bool {
        let family = |v: Variant| v == Variant::Baseline;
        family(self.variant) == family(other.variant)
            && self.hidden == other.hidden
            && (family(self.variant)
                || (self.l_inst == other.l_inst
                    && self.l_img == other.l_img
                    && self.heads == other.heads
                    && self.ff == other.ff
                    && self.n_p_max == other.n_p_max
                    && self.n_c == other.n_c))
    }
}

/// Trainable parameter counts, derived from the configuration alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub variant: Variant,
    pub cnpe: usize,
    pub crfe: usize,
    pub head: usize,
    pub baseline_mlp: usize,
    pub total: usize,
}

pub fn parameter_report(cfg: &ModelConfig) -> ParamReport {
    let h = cfg.hidden;
    let layer = 4 * (h * h + h) + (h * cfg.ff + cfg.ff) + (cfg.ff * h + h) + 4 * h;
    let (cnpe, crfe, head, baseline_mlp) = match cfg.variant {
        Variant::Baseline => (0, 0, 0, (2 * h * h + h) + (h * h + h)),
        _ => (
            cfg.n_p_max * h + cfg.l_inst * layer,
            (cfg.n_c + 1) * h + cfg.l_img * layer,
            3 * h * h + h + 2 * h,
            0,
        ),
    };
    ParamReport { variant: cfg.variant, cnpe, crfe, head, baseline_mlp, total: cnpe + crfe + head + baseline_mlp }
}

/// Cosine similarity; zero vectors are an error.
pub fn similarity<T: Real>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let f = |x: T| x.to_f64().unwrap();
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        uv += f(a) * f(b);
        uu += f(a) * f(a);
        vv += f(b) * f(b);
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Numeric("zero-norm vector in cosine similarity".into()));
    }
    Ok((uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub candidate_id: String,
    pub score: f64,
}

/// Candidates by descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub sample_id: Option<String>,
    pub items: Vec<RankedItem>,
}

impl RankedList {
    pub fn from_scores(sample_id: Option<String>, ids: &[String], scores: &[f64]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("empty candidate pool".into()));
        }
        if ids.len() != scores.len() {
            return Err(Error::Shape(format!("{} ids but {} scores", ids.len(), scores.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite score".into()));
        }
        let mut items: Vec<RankedItem> = ids
            .iter()
            .zip(scores)
            .map(|(id, &score)| RankedItem { candidate_id: id.clone(), score })
            .collect();
        items.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.candidate_id.cmp(&b.candidate_id))
        });
        Ok(RankedList { sample_id, items })
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.candidate_id.as_str()).collect()
    }

    /// 1-based rank of `candidate_id`.
    pub fn rank_of(&self, candidate_id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.candidate_id == candidate_id).map(|p| p + 1)
    }
}

impl<T: Real> Model<T> {
    /// Ranks pre-encoded candidates for one query.
    pub fn rank_encoded(
        &self,
        sample_id: Option<String>,
        query: &QueryEncoding<T>,
        candidates: &CandidateEncoding<T>,
        ids: &[String],
    ) -> Result<RankedList> {
        if query.rows.nrows() != 1 {
            return Err(Error::Shape("rank takes exactly one query".into()));
        }
        let s = self.scores(query, candidates)?;
        let scores: Vec<f64> = s.row(0).iter().map(|v| v.to_f64().unwrap()).collect();
        RankedList::from_scores(sample_id, ids, &scores)
    }

    /// Encodes the query once and every candidate in one batch, then ranks.
    pub fn rank(
        &self,
        sample_id: Option<String>,
        query: &QueryFeatures<T>,
        candidates: &[&CandidateFeatures<T>],
        ids: &[String],
    ) -> Result<RankedList> {
        if candidates.is_empty() {
            return Err(Error::Data("empty candidate pool".into()));
        }
        let q = self.encode_queries(&[query])?;
        let c = self.encode_candidates(candidates)?;
        self.rank_encoded(sample_id, &q, &c, ids)
    }
}

#[cfg(test)]
mod tests;

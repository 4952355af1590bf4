use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::Dataset;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub environments: usize,
    pub samples: usize,
    pub candidates: usize,
    pub total_words: usize,
    pub vocabulary_size: usize,
    pub mean_instruction_words: f64,
    /// Sample counts per split (train, val, test), when splits exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_samples: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_environments: Option<[usize; 3]>,
}

/// Whitespace tokens, lowercased, with punctuation removed; tokens that
/// were pure punctuation are dropped.
pub fn stat_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|w| {
        let t: String = w
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .flat_map(char::to_lowercase)
            .collect();
        (!t.is_empty()).then_some(t)
    })
}

pub fn dataset_stats(dataset: &Dataset) -> Stats {
    let mut vocab = HashSet::new();
    let mut total = 0usize;
    for s in dataset.samples() {
        for t in stat_tokens(&s.instruction) {
            total += 1;
            vocab.insert(t);
        }
    }
    let n = dataset.samples().len();
    let splits = dataset.splits();
    Stats {
        environments: dataset.environments().len(),
        samples: n,
        candidates: dataset.environments().iter().map(|e| e.candidates.len()).sum(),
        total_words: total,
        vocabulary_size: vocab.len(),
        mean_instruction_words: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        split_samples: splits.map(|s| [s.train.samples.len(), s.val.samples.len(), s.test.samples.len()]),
        split_environments: splits.map(|s| [s.train.envs.len(), s.val.envs.len(), s.test.envs.len()]),
    }
}

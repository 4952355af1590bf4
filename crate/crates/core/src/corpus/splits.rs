use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Dataset, Manifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPart {
    pub envs: Vec<String>,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: SplitPart,
    pub val: SplitPart,
    pub test: SplitPart,
}

impl SplitSet {
    pub fn part(&self, name: &str) -> Result<&SplitPart> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Split(format!("unknown split {other:?}"))),
        }
    }

    pub fn parts(&self) -> [(&'static str, &SplitPart); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Environment ids assigned to each split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvPartition {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Routes every sample to the split that owns its environment.
pub fn build_splits(dataset: &Dataset, partition: &EnvPartition) -> Result<SplitSet> {
    let mut owner: HashMap<&str, usize> = HashMap::new();
    let groups = [&partition.train, &partition.val, &partition.test];
    for (gi, envs) in groups.iter().enumerate() {
        for env in envs.iter() {
            if dataset.environment(env).is_none() {
                return Err(Error::Split(format!("unknown environment {env}")));
            }
            if let Some(prev) = owner.insert(env.as_str(), gi) {
                return Err(Error::Split(format!(
                    "environment {env} assigned to both {} and {}",
                    SPLIT_NAMES[prev], SPLIT_NAMES[gi]
                )));
            }
        }
    }
    if let Some(env) = dataset
        .environments()
        .iter()
        .find(|e| !owner.contains_key(e.env_id.as_str()))
    {
        return Err(Error::Split(format!("environment {} not covered", env.env_id)));
    }
    let mut parts: [SplitPart; 3] = Default::default();
    for (gi, envs) in groups.iter().enumerate() {
        parts[gi].envs = envs.to_vec();
    }
    for s in dataset.samples() {
        parts[owner[s.env_id.as_str()]].samples.push(s.sample_id.clone());
    }
    let [train, val, test] = parts;
    Ok(SplitSet { train, val, test })
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

pub fn validate_splits(dataset: &Dataset, splits: &SplitSet) -> Result<()> {
    dataset.with_splits(splits.clone()).map(|_| ())
}

pub(super) fn check(
    splits: &SplitSet,
    m: &Manifest,
    env_index: &HashMap<String, usize>,
    sample_index: &HashMap<String, usize>,
) -> Result<()> {
    let mut env_owner: HashMap<&str, &str> = HashMap::new();
    for (name, part) in splits.parts() {
        for env in &part.envs {
            if !env_index.contains_key(env) {
                return Err(Error::Split(format!("{name} lists unknown environment {env}")));
            }
            if let Some(prev) = env_owner.insert(env.as_str(), name) {
                return Err(Error::Split(format!(
                    "environment {env} appears in both {prev} and {name}"
                )));
            }
        }
    }
    let mut seen = HashSet::new();
    for (name, part) in splits.parts() {
        for id in &part.samples {
            let &si = sample_index
                .get(id)
                .ok_or_else(|| Error::DanglingReference(format!("{name} lists unknown sample {id}")))?;
            if !seen.insert(id.as_str()) {
                return Err(Error::Split(format!("sample {id} listed twice")));
            }
            let env = &m.samples[si].env_id;
            if env_owner.get(env.as_str()) != Some(&name) {
                return Err(Error::Split(format!(
                    "sample {id} of environment {env} listed under {name}"
                )));
            }
        }
    }
    if let Some(s) = m.samples.iter().find(|s| !env_owner.contains_key(s.env_id.as_str())) {
        return Err(Error::Split(format!(
            "environment {} of sample {} is in no split",
            s.env_id, s.sample_id
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::two_env_manifest;
    use crate::corpus::{CandidateObject, Environment, Sample};
    use proptest::prelude::*;

    fn three_env_dataset(dir: &std::path::Path) -> Dataset {
        let mut m = two_env_manifest(dir);
        let mut e3: Environment = m.environments[1].clone();
        e3.env_id = "e3".into();
        m.environments.push(e3);
        m.samples.push(Sample {
            sample_id: "s3".into(),
            env_id: "e3".into(),
            instruction: "Take the cup".into(),
            relevant_ids: ["c1".to_string()].into(),
        });
        Dataset::new(dir, m).unwrap()
    }

    fn envs(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn samples_follow_their_environment() {
        let dir = tempfile::tempdir().unwrap();
        let ds = three_env_dataset(dir.path());
        let p = EnvPartition {
            train: envs(&["e2"]),
            val: envs(&["e3"]),
            test: envs(&["e1"]),
        };
        let s = build_splits(&ds, &p).unwrap();
        assert_eq!(s.train.samples, ["s2"]);
        assert_eq!(s.val.samples, ["s3"]);
        assert_eq!(s.test.samples, ["s1"]);
        let ds = ds.with_splits(s).unwrap();
        assert_eq!(ds.split_samples("val").unwrap()[0].sample_id, "s3");
    }

    #[test]
    fn overlapping_or_partial_partitions_fail() {
        let dir = tempfile::tempdir().unwrap();
        let ds = three_env_dataset(dir.path());
        let overlap = EnvPartition {
            train: envs(&["e1", "e2"]),
            val: envs(&["e2"]),
            test: envs(&["e3"]),
        };
        assert!(matches!(build_splits(&ds, &overlap), Err(Error::Split(_))));
        let partial = EnvPartition {
            train: envs(&["e1"]),
            val: envs(&["e2"]),
            test: vec![],
        };
        assert!(build_splits(&ds, &partial).unwrap_err().to_string().contains("e3"));
    }

    #[test]
    fn manifest_splits_are_checked_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = three_env_dataset(dir.path());
        let bad = SplitSet {
            train: SplitPart {
                envs: envs(&["e1", "e2"]),
                samples: envs(&["s1", "s2"]),
            },
            val: SplitPart {
                envs: envs(&["e3"]),
                samples: envs(&["s1"]),
            },
            test: SplitPart::default(),
        };
        assert!(validate_splits(&ds, &bad).is_err());
    }

    proptest! {
        #[test]
        fn built_splits_are_environment_disjoint(assign in proptest::collection::vec(0usize..3, 1..12)) {
            let dir = tempfile::tempdir().unwrap();
            let base = two_env_manifest(dir.path());
            let template: CandidateObject = base.environments[0].candidates[0].clone();
            let mut m = base.clone();
            m.environments.clear();
            m.samples.clear();
            let mut p = EnvPartition::default();
            for (i, g) in assign.iter().enumerate() {
                let id = format!("env{i}");
                m.environments.push(Environment { env_id: id.clone(), candidates: vec![template.clone()] });
                m.samples.push(Sample {
                    sample_id: format!("s{i}"),
                    env_id: id.clone(),
                    instruction: "go".into(),
                    relevant_ids: [template.candidate_id.clone()].into(),
                });
                [&mut p.train, &mut p.val, &mut p.test][*g].push(id);
            }
            let ds = Dataset::new(dir.path(), m).unwrap();
            let s = build_splits(&ds, &p).unwrap();
            let sets: Vec<HashSet<&String>> = s.parts().iter().map(|(_, part)| part.envs.iter().collect()).collect();
            for a in 0..3 {
                for b in (a + 1)..3 {
                    prop_assert!(sets[a].is_disjoint(&sets[b]));
                }
            }
            prop_assert!(ds.with_splits(s).is_ok());
        }
    }
}

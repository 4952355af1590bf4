//! Dataset model: environments, candidate objects, instruction samples and
//! environment-disjoint splits, plus the on-disk manifest that ties them to
//! image files.

mod image_ops;
pub mod reverie;
mod splits;
mod stats;
pub mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image_ops::{
    angular_distance, attach_context, baseline_context_image, crop_target, heading_of_box,
    horizontal_strip, load_rgb, render_context, ContextView, ImageStore, CONTEXT_SIDE,
};
pub use splits::{build_splits, validate_splits, EnvPartition, SplitPart, SplitSet};
pub use stats::{dataset_stats, stat_tokens, Stats};

pub const FORMAT_VERSION: u32 = 1;

/// Pixel rectangle inside a source panorama.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoxRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    /// Exclusive right edge.
    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }
}

impl fmt::Display for BoxRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(x={}, y={}, w={}, h={})", self.x, self.y, self.w, self.h)
    }
}

/// Optional depth frame aligned with the candidate's source view, used for
/// grasp-point estimation at dispatch time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRef {
    pub path: PathBuf,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per stored depth unit (16-bit PNG in millimeters by default).
    #[serde(default = "default_depth_scale")]
    pub scale: f64,
    /// Box of the candidate in depth-image pixel coordinates.
    #[serde(rename = "box")]
    pub bbox: BoxRect,
}

fn default_depth_scale() -> f64 {
    0.001
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateObject {
    pub candidate_id: String,
    pub crop_path: PathBuf,
    pub context_paths: Vec<PathBuf>,
    pub source_panorama: String,
    #[serde(rename = "box")]
    pub bbox: BoxRect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub env_id: String,
    pub candidates: Vec<CandidateObject>,
}

impl Environment {
    pub fn candidate(&self, candidate_id: &str) -> Option<&CandidateObject> {
        self.candidates.iter().find(|c| c.candidate_id == candidate_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub env_id: String,
    pub instruction: String,
    pub relevant_ids: BTreeSet<String>,
}

/// Serialized form of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub environments: Vec<Environment>,
    pub samples: Vec<Sample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitSet>,
}

/// A validated, fully linked dataset. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    env_index: HashMap<String, usize>,
    sample_index: HashMap<String, usize>,
}

impl Dataset {
    /// Validates `manifest` against the files under `root` and links it.
    pub fn new(root: impl Into<PathBuf>, manifest: Manifest) -> Result<Self> {
        let root = root.into();
        let (env_index, sample_index) = validate(&root, &manifest)?;
        Ok(Self {
            root,
            manifest,
            env_index,
            sample_index,
        })
    }

    pub fn empty() -> Self {
        Self {
            root: PathBuf::new(),
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                environments: Vec::new(),
                samples: Vec::new(),
                splits: None,
            },
            env_index: HashMap::new(),
            sample_index: HashMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn environments(&self) -> &[Environment] {
        &self.manifest.environments
    }

    pub fn samples(&self) -> &[Sample] {
        &self.manifest.samples
    }

    pub fn splits(&self) -> Option<&SplitSet> {
        self.manifest.splits.as_ref()
    }

    pub fn environment(&self, env_id: &str) -> Option<&Environment> {
        self.env_index.get(env_id).map(|&i| &self.manifest.environments[i])
    }

    pub fn sample(&self, sample_id: &str) -> Option<&Sample> {
        self.sample_index.get(sample_id).map(|&i| &self.manifest.samples[i])
    }

    /// Number of context views per candidate (uniform across the dataset).
    pub fn n_c(&self) -> usize {
        self.manifest
            .environments
            .first()
            .and_then(|e| e.candidates.first())
            .map(|c| c.context_paths.len())
            .unwrap_or(0)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Samples of the named split, in split order.
    pub fn split_samples(&self, split: &str) -> Result<Vec<&Sample>> {
        let splits = self
            .splits()
            .ok_or_else(|| Error::Split("dataset has no splits".into()))?;
        let part = splits.part(split)?;
        part.samples
            .iter()
            .map(|id| {
                self.sample(id)
                    .ok_or_else(|| Error::DanglingReference(format!("split sample {id}")))
            })
            .collect()
    }

    /// Returns a copy with the given split set attached (validated).
    pub fn with_splits(&self, splits: SplitSet) -> Result<Self> {
        let mut manifest = self.manifest.clone();
        manifest.splits = Some(splits);
        Dataset::new(self.root.clone(), manifest)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::schema("manifest", e.to_string()))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Dataset::new(root, manifest)
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

type Indexes = (HashMap<String, usize>, HashMap<String, usize>);

fn validate(root: &Path, m: &Manifest) -> Result<Indexes> {
    if m.format_version != FORMAT_VERSION {
        return Err(Error::schema(
            "format_version",
            format!("expected {FORMAT_VERSION}, found {}", m.format_version),
        ));
    }
    let mut env_index = HashMap::new();
    let mut n_c = None;
    for (ei, env) in m.environments.iter().enumerate() {
        let field = format!("environments[{ei}]");
        if env.env_id.trim().is_empty() {
            return Err(Error::schema(format!("{field}.env_id"), "empty identifier"));
        }
        if env_index.insert(env.env_id.clone(), ei).is_some() {
            return Err(Error::schema(
                format!("{field}.env_id"),
                format!("duplicate env_id {}", env.env_id),
            ));
        }
        if env.candidates.is_empty() {
            return Err(Error::schema(
                format!("{field}.candidates"),
                "candidate pool is empty",
            ));
        }
        let mut seen = HashSet::new();
        for (ci, cand) in env.candidates.iter().enumerate() {
            let cfield = format!("{field}.candidates[{ci}]");
            if cand.candidate_id.trim().is_empty() {
                return Err(Error::schema(format!("{cfield}.candidate_id"), "empty identifier"));
            }
            if !seen.insert(cand.candidate_id.as_str()) {
                return Err(Error::schema(
                    format!("{cfield}.candidate_id"),
                    format!("duplicate candidate_id {}", cand.candidate_id),
                ));
            }
            if cand.bbox.w == 0 || cand.bbox.h == 0 {
                return Err(Error::schema(format!("{cfield}.box"), "zero-area box"));
            }
            if cand.context_paths.is_empty() {
                return Err(Error::schema(
                    format!("{cfield}.context_paths"),
                    "at least one context image is required",
                ));
            }
            match n_c {
                None => n_c = Some(cand.context_paths.len()),
                Some(n) if n != cand.context_paths.len() => {
                    return Err(Error::schema(
                        format!("{cfield}.context_paths"),
                        format!("expected {n} context images, found {}", cand.context_paths.len()),
                    ))
                }
                _ => {}
            }
            let mut files: Vec<&Path> = vec![&cand.crop_path];
            files.extend(cand.context_paths.iter().map(PathBuf::as_path));
            if let Some(depth) = &cand.depth {
                files.push(&depth.path);
            }
            for rel in files {
                let full = root.join(rel);
                if !full.is_file() {
                    return Err(Error::MissingImage(full));
                }
            }
        }
    }

    let mut sample_index = HashMap::new();
    for (si, s) in m.samples.iter().enumerate() {
        let field = format!("samples[{si}]");
        if sample_index.insert(s.sample_id.clone(), si).is_some() {
            return Err(Error::schema(
                format!("{field}.sample_id"),
                format!("duplicate sample_id {}", s.sample_id),
            ));
        }
        if s.instruction.trim().is_empty() {
            return Err(Error::schema(format!("{field}.instruction"), "empty instruction"));
        }
        let env = env_index
            .get(&s.env_id)
            .map(|&i| &m.environments[i])
            .ok_or_else(|| {
                Error::DanglingReference(format!("sample {} references env {}", s.sample_id, s.env_id))
            })?;
        if s.relevant_ids.is_empty() {
            return Err(Error::schema(format!("{field}.relevant_ids"), "no relevant candidates"));
        }
        for id in &s.relevant_ids {
            if env.candidate(id).is_none() {
                return Err(Error::DanglingReference(format!(
                    "sample {} references candidate {id} not in env {}",
                    s.sample_id, s.env_id
                )));
            }
        }
    }

    if let Some(splits) = &m.splits {
        splits::check(splits, m, &env_index, &sample_index)?;
    }
    Ok((env_index, sample_index))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use image::{Rgb, RgbImage};

    /// Writes a tiny two-environment dataset to `dir` and returns its manifest.
    pub fn two_env_manifest(dir: &Path) -> Manifest {
        let img = RgbImage::from_pixel(8, 8, Rgb([10, 20, 30]));
        std::fs::create_dir_all(dir.join("img")).unwrap();
        for name in ["a", "b", "c", "ctx0", "ctx1"] {
            img.save(dir.join(format!("img/{name}.png"))).unwrap();
        }
        let cand = |id: &str, crop: &str| CandidateObject {
            candidate_id: id.to_string(),
            crop_path: PathBuf::from(format!("img/{crop}.png")),
            context_paths: vec!["img/ctx0.png".into(), "img/ctx1.png".into()],
            source_panorama: "pano".into(),
            bbox: BoxRect::new(1, 1, 4, 4),
            depth: None,
        };
        Manifest {
            format_version: FORMAT_VERSION,
            environments: vec![
                Environment {
                    env_id: "e1".into(),
                    candidates: vec![cand("c1", "a"), cand("c2", "b")],
                },
                Environment {
                    env_id: "e2".into(),
                    candidates: vec![cand("c1", "c")],
                },
            ],
            samples: vec![
                Sample {
                    sample_id: "s1".into(),
                    env_id: "e1".into(),
                    instruction: "Pick up the red cup".into(),
                    relevant_ids: ["c2".to_string()].into(),
                },
                Sample {
                    sample_id: "s2".into(),
                    env_id: "e2".into(),
                    instruction: "Bring me the towel next to the sink".into(),
                    relevant_ids: ["c1".to_string()].into(),
                },
            ],
            splits: None,
        }
    }
}

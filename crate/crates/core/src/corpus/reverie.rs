//! Importer for REVERIE-style annotations over Matterport discretized views.
//!
//! Expected layout under the source root:
//!
//! ```text
//! REVERIE_train.json, REVERIE_val_unseen.json
//!     [{"id", "scan", "path": [viewpoint, ...], "objId", "instructions": [..]}]
//! BBoxes/<scan>_<viewpoint>.json
//!     {"<viewpoint>": {"<objId>": {"name", "visible_pos": [ix], "bbox2d": [[x, y, w, h]]}}}
//! views/<scan>/<viewpoint>_<ix>.jpg      ix in 0..36, heading (ix % 12) * 30°
//! ```
//!
//! The target of an entry is its object at the final viewpoint of the path,
//! cropped from the view where its box is largest. Boxes touching the view
//! border are skipped; entries left without a usable box are dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::Deserialize;

use super::{
    build_splits, crop_target, load_rgb, save_manifest, BoxRect, CandidateObject, ContextView,
    Dataset, EnvPartition, Environment, ImageStore, Manifest, Sample, CONTEXT_SIDE, FORMAT_VERSION,
};
use crate::error::{Error, Result};

const HEADINGS: usize = 12;
const VIEW_HFOV_DEG: f64 = 60.0;

#[derive(Debug, Clone)]
pub struct ReverieOptions {
    pub n_c: usize,
    /// Number of val_unseen environments (sorted by scan id) assigned to
    /// validation; the remaining ones form the test split.
    pub val_envs: usize,
}

impl Default for ReverieOptions {
    fn default() -> Self {
        Self { n_c: 4, val_envs: 4 }
    }
}

#[derive(Debug, Deserialize)]
struct Entry {
    id: String,
    scan: String,
    path: Vec<String>,
    #[serde(rename = "objId")]
    obj_id: serde_json::Value,
    instructions: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ObjectBoxes {
    #[serde(default)]
    visible_pos: Vec<usize>,
    #[serde(default)]
    bbox2d: Vec<[f64; 4]>,
}

type ViewpointBoxes = HashMap<String, HashMap<String, ObjectBoxes>>;

struct Target {
    candidate_id: String,
    obj_id: String,
    viewpoint: String,
    view_ix: usize,
    bbox: BoxRect,
    view_width: u32,
}

pub fn import_reverie(src: &Path, out_dir: &Path, opts: &ReverieOptions) -> Result<Dataset> {
    let train = read_entries(&src.join("REVERIE_train.json"))?;
    let val_unseen = read_entries(&src.join("REVERIE_val_unseen.json"))?;

    let mut box_cache: HashMap<(String, String), ViewpointBoxes> = HashMap::new();
    // scan -> (viewpoint, objId) -> target
    let mut targets: BTreeMap<String, BTreeMap<(String, String), Target>> = BTreeMap::new();
    let mut kept: Vec<(&Entry, bool)> = Vec::new();
    for (entry, is_train) in train.iter().map(|e| (e, true)).chain(val_unseen.iter().map(|e| (e, false))) {
        let Some(viewpoint) = entry.path.last() else { continue };
        let obj = obj_key(&entry.obj_id);
        let key = (viewpoint.clone(), obj.clone());
        if targets.get(&entry.scan).is_some_and(|t| t.contains_key(&key)) {
            kept.push((entry, is_train));
            continue;
        }
        let boxes = match box_cache.entry((entry.scan.clone(), viewpoint.clone())) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(read_boxes(&src.join("BBoxes").join(format!("{}_{viewpoint}.json", entry.scan)))?)
            }
        };
        if let Some(t) = best_view(src, &entry.scan, viewpoint, &obj, boxes)? {
            targets.entry(entry.scan.clone()).or_default().insert(key, t);
            kept.push((entry, is_train));
        }
    }

    let mut environments = Vec::new();
    for (scan, pool) in &targets {
        let rel_dir = PathBuf::from("images").join(scan);
        let abs_dir = out_dir.join(&rel_dir);
        std::fs::create_dir_all(&abs_dir).map_err(|e| Error::io(&abs_dir, e))?;
        let mut candidates = Vec::new();
        for t in pool.values() {
            let view = load_rgb(&view_file(src, scan, &t.viewpoint, t.view_ix))?;
            let crop = crop_target(&view, t.bbox)?;
            let crop_rel = rel_dir.join(format!("{}_crop.png", t.candidate_id));
            write_png(&crop, &out_dir.join(&crop_rel))?;

            let band = t.view_ix / HEADINGS * HEADINGS;
            let store = ImageStore::new(
                (band..band + HEADINGS)
                    .filter(|&ix| view_file(src, scan, &t.viewpoint, ix).is_file())
                    .map(|ix| ContextView {
                        panorama_id: t.viewpoint.clone(),
                        heading_deg: (ix % HEADINGS) as f64 * 30.0,
                        path: view_file(src, scan, &t.viewpoint, ix),
                    })
                    .collect(),
            );
            let offset = ((t.bbox.x as f64 + t.bbox.w as f64 / 2.0) / t.view_width as f64 - 0.5) * VIEW_HFOV_DEG;
            let heading = (t.view_ix % HEADINGS) as f64 * 30.0 + offset;
            let mut context_paths = Vec::new();
            for (k, v) in store.attach_context(&t.viewpoint, heading, opts.n_c)?.iter().enumerate() {
                let img = image::imageops::resize(&load_rgb(&v.path)?, CONTEXT_SIDE, CONTEXT_SIDE, FilterType::Triangle);
                let rel = rel_dir.join(format!("{}_ctx{k}.png", t.candidate_id));
                write_png(&img, &out_dir.join(&rel))?;
                context_paths.push(rel);
            }
            candidates.push(CandidateObject {
                candidate_id: t.candidate_id.clone(),
                crop_path: crop_rel,
                context_paths,
                source_panorama: format!("{}_{}", t.viewpoint, t.view_ix),
                bbox: t.bbox,
                depth: None,
            });
        }
        environments.push(Environment {
            env_id: scan.clone(),
            candidates,
        });
    }

    let mut samples = Vec::new();
    let mut train_scans = BTreeSet::new();
    let mut unseen_scans = BTreeSet::new();
    for (entry, is_train) in kept {
        let obj = obj_key(&entry.obj_id);
        let relevant: BTreeSet<String> = targets[&entry.scan]
            .values()
            .filter(|t| t.obj_id == obj)
            .map(|t| t.candidate_id.clone())
            .collect();
        for (k, text) in entry.instructions.iter().enumerate() {
            if text.trim().is_empty() {
                continue;
            }
            samples.push(Sample {
                sample_id: format!("{}_{k}", entry.id),
                env_id: entry.scan.clone(),
                instruction: text.trim().to_string(),
                relevant_ids: relevant.clone(),
            });
        }
        if is_train {
            train_scans.insert(entry.scan.clone());
        } else {
            unseen_scans.insert(entry.scan.clone());
        }
    }
    if let Some(scan) = train_scans.intersection(&unseen_scans).next() {
        return Err(Error::Split(format!("scan {scan} appears in both train and val_unseen")));
    }

    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        environments,
        samples,
        splits: None,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let unsplit = Dataset::new(out_dir, manifest.clone())?;
    let unseen: Vec<String> = unseen_scans.into_iter().collect();
    let n_val = opts.val_envs.min(unseen.len());
    let partition = EnvPartition {
        train: train_scans.into_iter().collect(),
        val: unseen[..n_val].to_vec(),
        test: unseen[n_val..].to_vec(),
    };
    manifest.splits = Some(build_splits(&unsplit, &partition)?);
    save_manifest(&manifest, out_dir.join("manifest.json"))?;
    Dataset::new(out_dir, manifest)
}

fn obj_key(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_boxes(path: &Path) -> Result<ViewpointBoxes> {
    if !path.is_file() {
        return Ok(HashMap::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn view_file(src: &Path, scan: &str, viewpoint: &str, ix: usize) -> PathBuf {
    src.join("views").join(scan).join(format!("{viewpoint}_{ix}.jpg"))
}

fn best_view(
    src: &Path,
    scan: &str,
    viewpoint: &str,
    obj: &str,
    boxes: &ViewpointBoxes,
) -> Result<Option<Target>> {
    let Some(ob) = boxes.get(viewpoint).and_then(|m| m.get(obj)) else {
        return Ok(None);
    };
    let mut best: Option<Target> = None;
    for (&ix, b) in ob.visible_pos.iter().zip(&ob.bbox2d) {
        let path = view_file(src, scan, viewpoint, ix);
        if !path.is_file() {
            continue;
        }
        let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        let r = BoxRect::new(b[0].max(0.0) as u32, b[1].max(0.0) as u32, b[2].max(0.0) as u32, b[3].max(0.0) as u32);
        let interior = r.w > 0
            && r.h > 0
            && r.x > 0
            && r.y > 0
            && r.right() < w as u64
            && r.bottom() < h as u64;
        if !interior {
            continue;
        }
        let area = r.w as u64 * r.h as u64;
        if best.as_ref().is_none_or(|t| area > t.bbox.w as u64 * t.bbox.h as u64) {
            best = Some(Target {
                candidate_id: format!("{viewpoint}_{obj}"),
                obj_id: obj.to_string(),
                viewpoint: viewpoint.to_string(),
                view_ix: ix,
                bbox: r,
                view_width: w,
            });
        }
    }
    Ok(best)
}

fn write_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

//! Desk-scale synthetic corpus.
//!
//! Every candidate gets its own 360° panorama of eight 256×256 sectors. The
//! target (a solid-color shape) sits in one sector and a landmark is drawn
//! in a neighbouring sector, so it only shows up in the context views.
//! Candidates of one environment come in groups that share color and shape
//! and differ only by landmark, which makes the context necessary to
//! resolve the instruction.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_splits, crop_target, heading_of_box, save_manifest, BoxRect, CandidateObject, ContextView,
    Dataset, EnvPartition, Environment, ImageStore, Manifest, Sample, FORMAT_VERSION,
};
use crate::error::{Error, Result};

pub const SECTORS: u32 = 8;
pub const SECTOR_SIDE: u32 = 256;
const PANO_W: u32 = SECTORS * SECTOR_SIDE;
const PANO_H: u32 = SECTOR_SIDE;

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [214, 39, 40]),
    ("green", [44, 160, 44]),
    ("blue", [31, 90, 220]),
    ("yellow", [240, 215, 30]),
    ("purple", [148, 60, 189]),
    ("orange", [255, 127, 14]),
    ("white", [245, 245, 245]),
    ("black", [20, 20, 20]),
];

pub const SHAPES: [&str; 4] = ["box", "ball", "cone", "ring"];

pub const LANDMARKS: [&str; 6] = ["plant", "lamp", "window", "shelf", "sink", "door"];

const TEMPLATES: [&str; 5] = [
    "Pick up the {c} {s} next to the {l}.",
    "Bring me the {c} {s} near the {l}.",
    "Go to the room with the {l} and take the {c} {s}.",
    "Please fetch the {c} {s} beside the {l}.",
    "Grab the {c} {s} that is close to the {l}.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub environments: usize,
    pub candidates_per_env: usize,
    /// Candidates sharing color and shape within an environment.
    pub group_size: usize,
    pub n_c: usize,
    pub samples_per_candidate: usize,
    pub val_envs: usize,
    pub test_envs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            environments: 2,
            candidates_per_env: 16,
            group_size: 2,
            n_c: 4,
            samples_per_candidate: 1,
            val_envs: 0,
            test_envs: 0,
        }
    }
}

/// Predicates a generated instruction asserts about its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub color: usize,
    pub shape: usize,
    pub landmark: usize,
}

struct Placed {
    attrs: Attributes,
    bbox: BoxRect,
    landmark_sector: u32,
    context: Vec<ContextView>,
}

pub fn synth_generate(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Dataset> {
    check_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut environments = Vec::new();
    let mut samples = Vec::new();

    for e in 0..config.environments {
        let env_id = format!("env{e:02}");
        let rel_dir = PathBuf::from("images").join(&env_id);
        let abs_dir = out_dir.join(&rel_dir);
        std::fs::create_dir_all(&abs_dir).map_err(|err| Error::io(&abs_dir, err))?;
        let texture = rng.random::<u64>();

        let mut placed = None;
        for _attempt in 0..64 {
            let attrs = draw_attributes(config, &mut rng);
            let layout = layout_env(config, &attrs, &env_id, &rel_dir, &mut rng)?;
            if satisfiable_uniquely(&layout) {
                placed = Some(layout);
                break;
            }
        }
        let placed = placed.ok_or_else(|| {
            Error::Synth(format!("could not generate an unambiguous layout for {env_id}"))
        })?;

        let mut candidates = Vec::new();
        for (ci, p) in placed.iter().enumerate() {
            let cand_id = format!("c{ci:02}");
            let pano = render_panorama(p, texture);
            let pano_rel = rel_dir.join(format!("{cand_id}_pano.png"));
            save_png(&pano, &out_dir.join(&pano_rel))?;
            for k in 0..SECTORS {
                let view = image::imageops::crop_imm(&pano, k * SECTOR_SIDE, 0, SECTOR_SIDE, PANO_H).to_image();
                save_png(&view, &out_dir.join(view_path(&rel_dir, &cand_id, k)))?;
            }
            let crop = crop_target(&pano, p.bbox)?;
            let crop_rel = rel_dir.join(format!("{cand_id}_crop.png"));
            save_png(&crop, &out_dir.join(&crop_rel))?;
            candidates.push(CandidateObject {
                candidate_id: cand_id.clone(),
                crop_path: crop_rel,
                context_paths: p.context.iter().map(|v| v.path.clone()).collect(),
                source_panorama: panorama_id(&env_id, &cand_id),
                bbox: p.bbox,
                depth: None,
            });
        }
        for (ci, p) in placed.iter().enumerate() {
            for k in 0..config.samples_per_candidate {
                let template = TEMPLATES.choose(&mut rng).expect("templates");
                samples.push(Sample {
                    sample_id: format!("{env_id}-s{ci:02}-{k}"),
                    env_id: env_id.clone(),
                    instruction: instruction_text(template, &p.attrs),
                    relevant_ids: [format!("c{ci:02}")].into(),
                });
            }
        }
        environments.push(Environment { env_id, candidates });
    }

    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        environments,
        samples,
        splits: None,
    };
    let unsplit = Dataset::new(out_dir, manifest.clone())?;
    let ids: Vec<String> = manifest.environments.iter().map(|e| e.env_id.clone()).collect();
    let n_train = config.environments - config.val_envs - config.test_envs;
    let partition = EnvPartition {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + config.val_envs].to_vec(),
        test: ids[n_train + config.val_envs..].to_vec(),
    };
    manifest.splits = Some(build_splits(&unsplit, &partition)?);
    save_manifest(&manifest, out_dir.join("manifest.json"))?;
    Dataset::new(out_dir, manifest)
}

fn check_config(c: &SynthConfig) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if c.environments == 0 || c.candidates_per_env == 0 || c.samples_per_candidate == 0 {
        return bad("environments, candidates and samples per candidate must be positive".into());
    }
    if c.n_c == 0 || c.n_c > SECTORS as usize {
        return bad(format!("n_c must be in 1..={SECTORS}"));
    }
    if c.group_size == 0 || c.group_size > LANDMARKS.len() {
        return bad(format!("group_size must be in 1..={}", LANDMARKS.len()));
    }
    if !c.candidates_per_env.is_multiple_of(c.group_size) {
        return bad("candidates_per_env must be a multiple of group_size".into());
    }
    if c.candidates_per_env / c.group_size > COLORS.len() * SHAPES.len() {
        return bad("not enough color/shape combinations for the requested pool".into());
    }
    if c.val_envs + c.test_envs >= c.environments {
        return bad("at least one training environment is required".into());
    }
    Ok(())
}

fn draw_attributes(c: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Attributes> {
    let mut pairs: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|col| (0..SHAPES.len()).map(move |s| (col, s)))
        .collect();
    pairs.shuffle(rng);
    let mut out = Vec::with_capacity(c.candidates_per_env);
    for &(color, shape) in pairs.iter().take(c.candidates_per_env / c.group_size) {
        let mut marks: Vec<usize> = (0..LANDMARKS.len()).collect();
        marks.shuffle(rng);
        for &landmark in marks.iter().take(c.group_size) {
            out.push(Attributes { color, shape, landmark });
        }
    }
    out.shuffle(rng);
    out
}

fn layout_env(
    c: &SynthConfig,
    attrs: &[Attributes],
    env_id: &str,
    rel_dir: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Placed>> {
    attrs
        .iter()
        .enumerate()
        .map(|(ci, &a)| {
            let sector = rng.random_range(0..SECTORS);
            let size = rng.random_range(48..=96u32);
            let cx = sector * SECTOR_SIDE + 128 + rng.random_range(0..=80u32) - 40;
            let cy = rng.random_range(100..=160u32);
            let half = size / 2 + 4;
            let bbox = BoxRect::new(cx - half, cy - half, 2 * half, 2 * half);
            let side = if rng.random_bool(0.5) { 1 } else { SECTORS - 1 };
            let landmark_sector = (sector + side) % SECTORS;

            let cand_id = format!("c{ci:02}");
            let pano = panorama_id(env_id, &cand_id);
            let store = ImageStore::new(
                (0..SECTORS)
                    .map(|k| ContextView {
                        panorama_id: pano.clone(),
                        heading_deg: (k as f64 + 0.5) * 360.0 / SECTORS as f64,
                        path: view_path(rel_dir, &cand_id, k),
                    })
                    .collect(),
            );
            let context = store.attach_context(&pano, heading_of_box(bbox, PANO_W), c.n_c)?;
            Ok(Placed {
                attrs: a,
                bbox,
                landmark_sector,
                context,
            })
        })
        .collect()
}

fn sector_of_view(v: &ContextView) -> u32 {
    (v.heading_deg / (360.0 / SECTORS as f64)).floor() as u32
}

/// Exhaustive check: each candidate's attributes are satisfied by exactly
/// one candidate of the pool, itself. A landmark only counts when it is
/// visible in one of the candidate's context views.
fn satisfiable_uniquely(pool: &[Placed]) -> bool {
    pool.iter().all(|p| {
        pool.iter()
            .filter(|q| satisfies(q, &p.attrs))
            .count()
            == 1
            && satisfies(p, &p.attrs)
    })
}

fn satisfies(p: &Placed, want: &Attributes) -> bool {
    p.attrs.color == want.color
        && p.attrs.shape == want.shape
        && p.attrs.landmark == want.landmark
        && p.context.iter().any(|v| sector_of_view(v) == p.landmark_sector)
}

/// Parses the attribute triple back out of a generated instruction.
pub fn parse_instruction(text: &str) -> Option<Attributes> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let find = |vocab: &[&str]| {
        words.iter().find_map(|w| vocab.iter().position(|v| v == w))
    };
    let colors: Vec<&str> = COLORS.iter().map(|(n, _)| *n).collect();
    Some(Attributes {
        color: find(&colors)?,
        shape: find(&SHAPES)?,
        landmark: find(&LANDMARKS)?,
    })
}

fn instruction_text(template: &str, a: &Attributes) -> String {
    template
        .replace("{c}", COLORS[a.color].0)
        .replace("{s}", SHAPES[a.shape])
        .replace("{l}", LANDMARKS[a.landmark])
}

fn panorama_id(env_id: &str, cand_id: &str) -> String {
    format!("{env_id}-{cand_id}")
}

fn view_path(rel_dir: &Path, cand_id: &str, k: u32) -> PathBuf {
    rel_dir.join(format!("{cand_id}_view{k}.png"))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

fn hash2(x: u32, y: u32, seed: u64) -> u32 {
    let mut h = seed ^ ((x as u64) << 32 | y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h as u32
}

fn render_panorama(p: &Placed, texture: u64) -> RgbImage {
    let tone = 90 + (texture % 60) as i32;
    let stripe = 16 + (texture >> 8) % 24;
    let mut img = RgbImage::from_fn(PANO_W, PANO_H, |x, y| {
        let noise = (hash2(x, y, texture) % 25) as i32 - 12;
        let band = if (x as u64 / stripe).is_multiple_of(2) { 8 } else { -8 };
        let floor = if y > 190 { -25 } else { 0 };
        let v = (tone + noise + band + floor).clamp(0, 255) as u8;
        Rgb([v, v, (v as i32 + 6).min(255) as u8])
    });
    let b = p.bbox;
    let (cx, cy) = ((b.x + b.w / 2) as i32, (b.y + b.h / 2) as i32);
    let r = (b.w / 2 - 4) as i32;
    draw_shape(&mut img, p.attrs.shape, COLORS[p.attrs.color].1, cx, cy, r);
    let lx = (p.landmark_sector * SECTOR_SIDE + SECTOR_SIDE / 2) as i32;
    draw_landmark(&mut img, p.attrs.landmark, lx, 128);
    img
}

fn put(img: &mut RgbImage, x: i32, y: i32, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn fill(img: &mut RgbImage, x0: i32, y0: i32, x1: i32, y1: i32, c: [u8; 3], inside: impl Fn(i32, i32) -> bool) {
    for y in y0..=y1 {
        for x in x0..=x1 {
            if inside(x, y) {
                put(img, x, y, c);
            }
        }
    }
}

fn rect(img: &mut RgbImage, x0: i32, y0: i32, x1: i32, y1: i32, c: [u8; 3]) {
    fill(img, x0, y0, x1, y1, c, |_, _| true);
}

fn disc(img: &mut RgbImage, cx: i32, cy: i32, r: i32, c: [u8; 3]) {
    fill(img, cx - r, cy - r, cx + r, cy + r, c, |x, y| {
        (x - cx).pow(2) + (y - cy).pow(2) <= r * r
    });
}

fn draw_shape(img: &mut RgbImage, shape: usize, c: [u8; 3], cx: i32, cy: i32, r: i32) {
    match SHAPES[shape] {
        "box" => rect(img, cx - r, cy - r, cx + r, cy + r, c),
        "ball" => disc(img, cx, cy, r, c),
        "cone" => fill(img, cx - r, cy - r, cx + r, cy + r, c, |x, y| {
            // apex at the top, base at the bottom
            let t = (y - (cy - r)) as f64 / (2 * r) as f64;
            ((x - cx).abs() as f64) <= t * r as f64
        }),
        _ => fill(img, cx - r, cy - r, cx + r, cy + r, c, |x, y| {
            let d = (x - cx).pow(2) + (y - cy).pow(2);
            d <= r * r && d >= (r * 11 / 20).pow(2)
        }),
    }
}

fn draw_landmark(img: &mut RgbImage, landmark: usize, cx: i32, cy: i32) {
    const BROWN: [u8; 3] = [110, 70, 35];
    match LANDMARKS[landmark] {
        "plant" => {
            rect(img, cx - 22, cy + 40, cx + 22, cy + 90, BROWN);
            fill(img, cx - 60, cy - 90, cx + 60, cy + 40, [30, 120, 40], |x, y| {
                let t = (y - (cy - 90)) as f64 / 130.0;
                ((x - cx).abs() as f64) <= t * 60.0
            });
        }
        "lamp" => {
            rect(img, cx - 5, cy - 30, cx + 5, cy + 100, [90, 90, 90]);
            rect(img, cx - 30, cy + 95, cx + 30, cy + 105, [90, 90, 90]);
            disc(img, cx, cy - 55, 40, [255, 230, 120]);
        }
        "window" => {
            rect(img, cx - 75, cy - 90, cx + 75, cy + 60, [170, 210, 240]);
            rect(img, cx - 5, cy - 90, cx + 5, cy + 60, [40, 40, 50]);
            rect(img, cx - 75, cy - 20, cx + 75, cy - 10, [40, 40, 50]);
        }
        "shelf" => {
            rect(img, cx - 80, cy - 100, cx - 70, cy + 100, BROWN);
            rect(img, cx + 70, cy - 100, cx + 80, cy + 100, BROWN);
            for k in 0..4 {
                let y = cy - 100 + k * 62;
                rect(img, cx - 80, y, cx + 80, y + 10, BROWN);
            }
        }
        "sink" => {
            rect(img, cx - 90, cy + 10, cx + 90, cy + 60, [235, 235, 240]);
            fill(img, cx - 70, cy + 15, cx + 70, cy + 45, [150, 160, 170], |x, y| {
                ((x - cx) as f64 / 70.0).powi(2) + ((y - cy - 30) as f64 / 15.0).powi(2) <= 1.0
            });
            rect(img, cx - 6, cy - 30, cx + 6, cy + 10, [160, 160, 170]);
            rect(img, cx - 6, cy - 30, cx + 35, cy - 20, [160, 160, 170]);
        }
        _ => {
            rect(img, cx - 50, cy - 120, cx + 50, cy + 120, [70, 40, 20]);
            disc(img, cx + 35, cy + 5, 7, [230, 190, 60]);
        }
    }
}

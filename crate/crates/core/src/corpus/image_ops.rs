use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::BoxRect;
use crate::error::{Error, Result};

/// Side length of every context view fed to the backbone.
pub const CONTEXT_SIDE: u32 = 256;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(img.into_rgb8())
}

/// Cuts the exact pixel rectangle `b` out of `panorama`.
///
/// Boxes with any side on the panorama border are rejected: such objects
/// are likely cut off and the crop would not show the whole target.
pub fn crop_target(panorama: &RgbImage, b: BoxRect) -> Result<RgbImage> {
    if b.w == 0 || b.h == 0 {
        return Err(Error::InvalidBox(format!("{b} has zero area")));
    }
    let (pw, ph) = (panorama.width() as u64, panorama.height() as u64);
    if b.right() > pw || b.bottom() > ph {
        return Err(Error::InvalidBox(format!("{b} exceeds {pw}x{ph} image")));
    }
    if b.x == 0 || b.y == 0 || b.right() == pw || b.bottom() == ph {
        return Err(Error::EdgeBox(b.to_string()));
    }
    Ok(imageops::crop_imm(panorama, b.x, b.y, b.w, b.h).to_image())
}

/// Viewing heading (degrees in `[0, 360)`) of the box center in an
/// equirectangular panorama of the given width.
pub fn heading_of_box(b: BoxRect, panorama_width: u32) -> f64 {
    let cx = b.x as f64 + b.w as f64 / 2.0;
    (cx / panorama_width as f64 * 360.0).rem_euclid(360.0)
}

/// Smallest absolute difference between two headings on the circle.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextView {
    pub panorama_id: String,
    pub heading_deg: f64,
    pub path: PathBuf,
}

/// Views captured around each panorama, as enumerated from disk.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    pub views: Vec<ContextView>,
}

impl ImageStore {
    pub fn new(views: Vec<ContextView>) -> Self {
        Self { views }
    }

    /// Picks the `n_c` views of `panorama_id` angularly nearest to
    /// `heading`, nearest first. The nearest view is repeated when the
    /// store holds fewer than `n_c` views.
    pub fn attach_context(
        &self,
        panorama_id: &str,
        heading: f64,
        n_c: usize,
    ) -> Result<Vec<ContextView>> {
        let views: Vec<&ContextView> = self
            .views
            .iter()
            .filter(|v| v.panorama_id == panorama_id)
            .collect();
        attach_context(&views, heading, n_c)
    }
}

pub fn attach_context(views: &[&ContextView], heading: f64, n_c: usize) -> Result<Vec<ContextView>> {
    if n_c == 0 {
        return Err(Error::Config("n_c must be at least 1".into()));
    }
    if views.is_empty() {
        return Err(Error::EmptyImageStore);
    }
    let mut ranked: Vec<(f64, &ContextView)> = views
        .iter()
        .map(|v| (angular_distance(v.heading_deg, heading), *v))
        .collect();
    // Path breaks ties so the result does not depend on enumeration order.
    ranked.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.path.cmp(&b.1.path))
            .then_with(|| a.1.heading_deg.total_cmp(&b.1.heading_deg))
    });
    let mut out: Vec<ContextView> = ranked.iter().take(n_c).map(|(_, v)| (*v).clone()).collect();
    while out.len() < n_c {
        out.push(out[0].clone());
    }
    Ok(out)
}

/// Loads the selected views and resizes each to `CONTEXT_SIDE` squared.
pub fn render_context(root: &Path, views: &[ContextView]) -> Result<Vec<RgbImage>> {
    views
        .iter()
        .map(|v| {
            let img = load_rgb(&root.join(&v.path))?;
            Ok(resize_exact(&img, CONTEXT_SIDE, CONTEXT_SIDE))
        })
        .collect()
}

fn resize_exact(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    if img.width() == w && img.height() == h {
        img.clone()
    } else {
        imageops::resize(img, w, h, FilterType::Triangle)
    }
}

/// Concatenates images left to right. Images taller or shorter than the
/// first are resized to its height, keeping their aspect ratio.
pub fn horizontal_strip(images: &[RgbImage]) -> Result<RgbImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("no images to concatenate".into()))?;
    let height = first.height();
    let parts: Vec<RgbImage> = images
        .iter()
        .map(|img| {
            if img.height() == height {
                img.clone()
            } else {
                let w = ((img.width() as f64 * height as f64 / img.height() as f64).round() as u32).max(1);
                imageops::resize(img, w, height, FilterType::Triangle)
            }
        })
        .collect();
    let width: u32 = parts.iter().map(RgbImage::width).sum();
    let mut strip = RgbImage::new(width, height);
    let mut x = 0i64;
    for p in &parts {
        imageops::replace(&mut strip, p, x, 0);
        x += p.width() as i64;
    }
    Ok(strip)
}

/// Context input of the CLIP-extension baseline: the views concatenated
/// horizontally and squeezed back to a single square view.
pub fn baseline_context_image(images: &[RgbImage]) -> Result<RgbImage> {
    let strip = horizontal_strip(images)?;
    Ok(resize_exact(&strip, CONTEXT_SIDE, CONTEXT_SIDE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn interior_margin_crop_is_identity_on_interior() {
        let img = gradient(20, 10);
        let crop = crop_target(&img, BoxRect::new(1, 1, 18, 8)).unwrap();
        assert_eq!((crop.width(), crop.height()), (18, 8));
        for y in 0..8 {
            for x in 0..18 {
                assert_eq!(crop.get_pixel(x, y), img.get_pixel(x + 1, y + 1));
            }
        }
    }

    #[test]
    fn edge_boxes_are_rejected() {
        let img = gradient(20, 10);
        for b in [
            BoxRect::new(0, 2, 5, 5),
            BoxRect::new(2, 0, 5, 5),
            BoxRect::new(15, 2, 5, 5),
            BoxRect::new(2, 5, 5, 5),
        ] {
            assert!(matches!(crop_target(&img, b), Err(Error::EdgeBox(_))), "{b}");
        }
        assert!(matches!(crop_target(&img, BoxRect::new(2, 2, 0, 3)), Err(Error::InvalidBox(_))));
        assert!(matches!(crop_target(&img, BoxRect::new(2, 2, 30, 3)), Err(Error::InvalidBox(_))));
    }

    proptest! {
        #[test]
        fn crop_matches_per_pixel_copy(x in 1u32..30, y in 1u32..20, w in 1u32..30, h in 1u32..20) {
            let img = gradient(64, 48);
            prop_assume!(x + w < 64 && y + h < 48);
            let crop = crop_target(&img, BoxRect::new(x, y, w, h)).unwrap();
            let mut expected = Vec::new();
            for yy in y..y + h {
                for xx in x..x + w {
                    expected.extend_from_slice(&img.get_pixel(xx, yy).0);
                }
            }
            prop_assert_eq!(crop.into_raw(), expected);
        }

        #[test]
        fn context_order_ignores_enumeration_order(seed in any::<u64>(), heading in 0.0f64..360.0) {
            let mut views: Vec<ContextView> = (0..8)
                .map(|k| view(k as f64 * 45.0, &format!("v{k}.png")))
                .collect();
            let base: Vec<&ContextView> = views.iter().collect();
            let expected = attach_context(&base, heading, 4).unwrap();
            // Fisher-Yates with a tiny LCG keeps the test free of extra deps.
            let mut s = seed;
            for i in (1..views.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                views.swap(i, (s >> 33) as usize % (i + 1));
            }
            let shuffled: Vec<&ContextView> = views.iter().collect();
            prop_assert_eq!(attach_context(&shuffled, heading, 4).unwrap(), expected);
        }
    }

    fn view(heading: f64, path: &str) -> ContextView {
        ContextView {
            panorama_id: "p".into(),
            heading_deg: heading,
            path: path.into(),
        }
    }

    #[test]
    fn exact_count_is_all_views_nearest_first() {
        let vs = [view(90.0, "a"), view(0.0, "b"), view(200.0, "c"), view(10.0, "d")];
        let refs: Vec<&ContextView> = vs.iter().collect();
        let got = attach_context(&refs, 5.0, 4).unwrap();
        let names: Vec<_> = got.iter().map(|v| v.path.to_str().unwrap()).collect();
        assert_eq!(names, ["b", "d", "a", "c"]);
    }

    #[test]
    fn single_view_is_duplicated() {
        let vs = [view(30.0, "only")];
        let refs: Vec<&ContextView> = vs.iter().collect();
        let got = attach_context(&refs, 250.0, 4).unwrap();
        assert_eq!(got.len(), 4);
        assert!(got.iter().all(|v| v == &vs[0]));
        assert!(matches!(attach_context(&[], 0.0, 4), Err(Error::EmptyImageStore)));
    }

    #[test]
    fn eight_views_pick_four_angularly_nearest() {
        let headings = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0];
        let vs: Vec<ContextView> = headings
            .iter()
            .enumerate()
            .map(|(i, &h)| view(h, &format!("v{i}")))
            .collect();
        let refs: Vec<&ContextView> = vs.iter().collect();
        let target = 300.0;
        // Brute force: sort indices by wrap-around distance.
        let mut oracle: Vec<(f64, usize)> = headings
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let d = (h - target).abs();
                (d.min(360.0 - d), i)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<String> = oracle.iter().take(4).map(|(_, i)| format!("v{i}")).collect();
        let got: Vec<String> = attach_context(&refs, target, 4)
            .unwrap()
            .iter()
            .map(|v| v.path.display().to_string())
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got, ["v7", "v6", "v0", "v5"]);
    }

    #[test]
    fn strip_geometry() {
        let imgs: Vec<RgbImage> = (0..4).map(|_| gradient(100, 50)).collect();
        let strip = horizontal_strip(&imgs).unwrap();
        assert_eq!((strip.width(), strip.height()), (400, 50));
        assert_eq!(strip.get_pixel(100, 3), imgs[1].get_pixel(0, 3));
        let squeezed = baseline_context_image(&imgs).unwrap();
        assert_eq!((squeezed.width(), squeezed.height()), (256, 256));
        let single = baseline_context_image(&imgs[..1]).unwrap();
        assert_eq!(single, resize_exact(&imgs[0], 256, 256));
    }

    #[test]
    fn heading_wraps() {
        assert_eq!(heading_of_box(BoxRect::new(0, 0, 2, 2), 360), 1.0);
        assert!((angular_distance(350.0, 10.0) - 20.0).abs() < 1e-12);
    }
}

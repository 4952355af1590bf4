//! Grasp point from a depth frame: back-project the valid pixels of a box
//! through a pinhole camera and take the per-axis median.

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use ltrpo_core::corpus::{BoxRect, DepthRef};

use crate::{ServiceError, ServiceResult};

pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    fn check(&self) -> ServiceResult<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.fx) && ok(self.fy)) || !self.cx.is_finite() || !self.cy.is_finite() || self.cx < 0.0 || self.cy < 0.0
        {
            return Err(ServiceError::Grasp(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }
}

/// Accepted depth band in meters, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min_m: f64,
    pub max_m: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        DepthRange { min_m: 0.3, max_m: 5.0 }
    }
}

/// Camera-frame coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn back_project(u: f64, v: f64, z: f64, k: &Intrinsics) -> [f64; 3] {
    [(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z]
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// `scale` converts stored depth units to meters. Zero and out-of-range
/// pixels are skipped.
pub fn grasp_point(
    depth: &DepthImage,
    bbox: BoxRect,
    k: &Intrinsics,
    scale: f64,
    range: DepthRange,
) -> ServiceResult<GraspPoint> {
    k.check()?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(ServiceError::Grasp(format!("invalid depth scale {scale}")));
    }
    if bbox.w == 0 || bbox.h == 0 || bbox.right() > depth.width() as u64 || bbox.bottom() > depth.height() as u64 {
        return Err(ServiceError::Grasp(format!(
            "box {bbox} does not fit a {}x{} depth image",
            depth.width(),
            depth.height()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    for v in bbox.y..bbox.y + bbox.h {
        for u in bbox.x..bbox.x + bbox.w {
            let raw = depth.get_pixel(u, v).0[0];
            if raw == 0 {
                continue;
            }
            let z = raw as f64 * scale;
            if z < range.min_m || z > range.max_m {
                continue;
            }
            let [x, y, z] = back_project(u as f64, v as f64, z, k);
            xs.push(x);
            ys.push(y);
            zs.push(z);
        }
    }
    if zs.is_empty() {
        return Err(ServiceError::Grasp(format!("no valid depth pixels in box {bbox}")));
    }
    Ok(GraspPoint { x: median(&mut xs), y: median(&mut ys), z: median(&mut zs) })
}

pub fn load_depth(path: &Path) -> ServiceResult<DepthImage> {
    let img = image::open(path).map_err(|e| ServiceError::Grasp(format!("{}: {e}", path.display())))?;
    Ok(img.into_luma16())
}

/// Grasp point for a candidate's depth reference; paths resolve against `root`.
pub fn grasp_point_for(root: &Path, depth: &DepthRef, range: DepthRange) -> ServiceResult<GraspPoint> {
    let img = load_depth(&root.join(&depth.path))?;
    let k = Intrinsics { fx: depth.fx, fy: depth.fy, cx: depth.cx, cy: depth.cy };
    grasp_point(&img, depth.bbox, &k, depth.scale, range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const K: Intrinsics = Intrinsics { fx: 500.0, fy: 520.0, cx: 32.0, cy: 24.0 };

    fn plane(w: u32, h: u32, mm: u16) -> DepthImage {
        ImageBuffer::from_pixel(w, h, Luma([mm]))
    }

    #[test]
    fn single_pixel_is_its_back_projection() {
        let mut img = plane(64, 48, 0);
        img.put_pixel(10, 7, Luma([1234]));
        let g = grasp_point(&img, BoxRect::new(10, 7, 1, 1), &K, 0.001, DepthRange::default()).unwrap();
        let [x, y, z] = back_project(10.0, 7.0, 1.234, &K);
        assert_eq!((g.x, g.y, g.z), (x, y, z));
    }

    #[test]
    fn uniform_plane_gives_box_center() {
        let img = plane(64, 48, 1500);
        let b = BoxRect::new(20, 10, 9, 7);
        let g = grasp_point(&img, b, &K, 0.001, DepthRange::default()).unwrap();
        let [x, y, z] = back_project(24.0, 13.0, 1.5, &K);
        assert!((g.x - x).abs() < 1e-6 && (g.y - y).abs() < 1e-6 && (g.z - z).abs() < 1e-6);
        let even = grasp_point(&img, BoxRect::new(20, 10, 8, 6), &K, 0.001, DepthRange::default()).unwrap();
        let [x, y, _] = back_project(23.5, 12.5, 1.5, &K);
        assert!((even.x - x).abs() < 1e-6 && (even.y - y).abs() < 1e-6);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let img = plane(64, 48, 0);
        let r = DepthRange::default();
        assert!(grasp_point(&img, BoxRect::new(0, 0, 4, 4), &K, 0.001, r).is_err());
        let img = plane(64, 48, 1000);
        assert!(grasp_point(&img, BoxRect::new(60, 0, 8, 4), &K, 0.001, r).is_err());
        assert!(grasp_point(&img, BoxRect::new(0, 0, 0, 4), &K, 0.001, r).is_err());
        let bad = Intrinsics { fx: 0.0, ..K };
        assert!(grasp_point(&img, BoxRect::new(0, 0, 4, 4), &bad, 0.001, r).is_err());
        let far = plane(64, 48, 9000);
        assert!(grasp_point(&far, BoxRect::new(0, 0, 4, 4), &K, 0.001, r).is_err());
    }

    proptest! {
        #[test]
        fn median_ignores_order(mut v in prop::collection::vec(-1e3f64..1e3, 1..60), seed in any::<u64>()) {
            let a = median(&mut v.clone());
            let n = v.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(a, median(&mut v));
        }
    }
}

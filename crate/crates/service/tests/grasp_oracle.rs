use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ltrpo_core::corpus::BoxRect;
use ltrpo_service::grasp::{back_project, DepthImage};
use ltrpo_service::{grasp_point, DepthRange, Intrinsics};

const K: Intrinsics = Intrinsics { fx: 525.0, fy: 525.0, cx: 319.5, cy: 239.5 };

/// Every pixel of the box, full sort, textbook median.
fn brute_force(img: &DepthImage, b: BoxRect, scale: f64, r: DepthRange) -> Option<[f64; 3]> {
    let mut pts = Vec::new();
    for v in 0..img.height() {
        for u in 0..img.width() {
            let inside = u >= b.x && u < b.x + b.w && v >= b.y && v < b.y + b.h;
            let raw = img.get_pixel(u, v).0[0];
            let z = raw as f64 * scale;
            if inside && raw != 0 && z >= r.min_m && z <= r.max_m {
                pts.push(back_project(u as f64, v as f64, z, &K));
            }
        }
    }
    if pts.is_empty() {
        return None;
    }
    let mut out = [0.0; 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let mut col: Vec<f64> = pts.iter().map(|p| p[axis]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = col.len();
        *slot = if n % 2 == 1 { col[n / 2] } else { (col[n / 2 - 1] + col[n / 2]) / 2.0 };
    }
    Some(out)
}

fn random_frame(rng: &mut ChaCha8Rng) -> DepthImage {
    let (w, h) = (96, 72);
    ImageBuffer::from_fn(w, h, |_, _| {
        let roll: f64 = rng.random();
        Luma([if roll < 0.1 { 0 } else if roll < 0.15 { rng.random_range(5001..9000) } else { rng.random_range(250..5200) }])
    })
}

#[test]
fn matches_brute_force_on_random_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let range = DepthRange::default();
    let mut checked = 0;
    while checked < 100 {
        let img = random_frame(&mut rng);
        let w = rng.random_range(1..=40);
        let h = rng.random_range(1..=30);
        let b = BoxRect::new(rng.random_range(0..=96 - w), rng.random_range(0..=72 - h), w, h);
        let got = grasp_point(&img, b, &K, 0.001, range);
        match brute_force(&img, b, 0.001, range) {
            Some(p) => {
                let g = got.unwrap();
                assert_eq!([g.x, g.y, g.z], p, "box {b}");
            }
            None => assert!(got.is_err()),
        }
        checked += 1;
    }
}

#[test]
fn uniform_plane_returns_center() {
    let img: DepthImage = ImageBuffer::from_pixel(640, 480, Luma([2000]));
    let b = BoxRect::new(300, 200, 41, 31);
    let g = grasp_point(&img, b, &K, 0.001, DepthRange::default()).unwrap();
    let c = back_project(320.0, 215.0, 2.0, &K);
    assert!((g.x - c[0]).abs() <= 1e-6 && (g.y - c[1]).abs() <= 1e-6 && (g.z - c[2]).abs() <= 1e-6);
}

fn outlier_shift(b: BoxRect, far: std::ops::Range<u16>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean: DepthImage = ImageBuffer::from_pixel(640, 480, Luma([1200]));
    let mut noisy = clean.clone();
    for v in b.y..b.y + b.h {
        for u in b.x..b.x + b.w {
            if rng.random::<f64>() < 0.1 {
                noisy.put_pixel(u, v, Luma([rng.random_range(far.clone())]));
            }
        }
    }
    let r = DepthRange::default();
    let a = grasp_point(&clean, b, &K, 0.001, r).unwrap();
    let n = grasp_point(&noisy, b, &K, 0.001, r).unwrap();
    ((a.x - n.x).powi(2) + (a.y - n.y).powi(2) + (a.z - n.z).powi(2)).sqrt()
}

#[test]
fn far_outliers_in_range_on_axis_box() {
    for seed in 0..10 {
        let d = outlier_shift(BoxRect::new(280, 210, 80, 60), 4000..5000, seed);
        assert!(d < 1e-3, "seed {seed}: moved {d} m");
    }
}

#[test]
fn far_outliers_off_axis_stay_within_a_pixel_footprint() {
    let pitch = 1.2 / K.fx;
    for seed in 0..10 {
        for far in [5001..6000, 6000..9000] {
            let d = outlier_shift(BoxRect::new(40, 30, 80, 60), far.clone(), seed);
            assert!(d <= pitch, "seed {seed}, {far:?}: moved {d} m");
        }
    }
}

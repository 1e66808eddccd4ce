//! Toy scenes, cameras and style images shared by the integration tests.
#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatstyle::imageio::RgbImage;
use splatstyle::renderer::{CameraView, Intrinsics};
use splatstyle::scene::{GaussianGeometry, GaussianScene, ShColors};

/// `count` gaussians inside a unit ball, SH degree 1, colors well inside
/// `(0, 1)` so the color clamp stays inactive.
pub fn toy_scene(count: usize, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(count);
    while positions.len() < count {
        let p = [
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
        ];
        if p.iter().map(|v| v * v).sum::<f32>() <= 1.0 {
            positions.push(p);
        }
    }
    let rotations = (0..count)
        .map(|_| {
            let q: [f32; 4] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n = q.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
            q.map(|v| v / n)
        })
        .collect();
    let log_scales = (0..count)
        .map(|_| [0; 3].map(|_: i32| rng.gen_range(0.12f32..0.3).ln()))
        .collect();
    let opacity_logits = (0..count).map(|_| rng.gen_range(1.0f32..3.0)).collect();
    let mut colors = ShColors::constant(count, 1, [0.5, 0.5, 0.5]);
    for dc in colors.dc.iter_mut() {
        let rgb = [0; 3].map(|_: i32| rng.gen_range(0.3f32..0.7));
        *dc = rgb.map(splatstyle::renderer::sh::rgb_to_dc);
    }
    for r in colors.rest.iter_mut() {
        *r = rng.gen_range(-0.02f32..0.02);
    }
    GaussianScene::new(
        GaussianGeometry {
            positions,
            rotations,
            log_scales,
            opacity_logits,
        },
        colors,
    )
    .expect("valid toy scene")
}

/// `count` cameras on a ring of radius 4 around the origin.
pub fn ring_cameras(count: usize, size: usize) -> Vec<CameraView> {
    (0..count)
        .map(|i| {
            let a = i as f64 / count as f64 * std::f64::consts::TAU;
            let eye = Vector3::new(4.0 * a.cos(), -1.0, 4.0 * a.sin());
            CameraView::look_at(
                Intrinsics::centered(1.25 * size as f64, size, size),
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, -1.0, 0.0),
            )
            .expect("valid ring camera")
        })
        .collect()
}

/// Diagonal color stripes.
pub fn stripes(size: usize) -> RgbImage {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let band = ((x + y) / 4) % 3;
            data.extend_from_slice(match band {
                0 => &[0.9, 0.15, 0.1],
                1 => &[0.1, 0.2, 0.85],
                _ => &[0.95, 0.9, 0.2],
            });
        }
    }
    RgbImage::new(size, size, data).unwrap()
}

/// Camera looking at the origin from a random direction.
pub fn random_camera(rng: &mut ChaCha8Rng, width: usize, height: usize) -> CameraView {
    let dir: Vector3<f64> = loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.2 && n <= 1.0 {
            break v / n;
        }
    };
    let eye = dir * rng.gen_range(3.0..6.0);
    let target = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let up = if dir.y.abs() > 0.9 { Vector3::new(1.0, 0.0, 0.0) } else { Vector3::new(0.0, -1.0, 0.0) };
    let f = rng.gen_range(0.8..1.6) * width as f64;
    let intr = Intrinsics {
        fx: f,
        fy: f * rng.gen_range(0.9..1.1),
        cx: width as f64 / 2.0 + rng.gen_range(-1.0..1.0),
        cy: height as f64 / 2.0 + rng.gen_range(-1.0..1.0),
        width,
        height,
    };
    CameraView::look_at(intr, eye, target, up).expect("valid random camera")
}

/// Random positive depths in `[lo, hi]`.
pub fn random_depth(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

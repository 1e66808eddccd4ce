//! Reference CPU rasterizer for Gaussian splats.
//!
//! Forward compositing follows the usual 3DGS recipe: EWA projection of each
//! covariance, a 0.3 px low-pass, front-to-back alpha blending sorted by
//! camera depth, early termination once transmittance falls below 1e-4.
//! Because geometry is never optimized here, the blend weights of a render
//! are constants of the color parameters. Each [`RenderOutput`] keeps them so
//! [`RenderOutput::color_gradient`] can pull image gradients back onto the SH
//! coefficients.

pub mod camera;
pub mod cameras_io;
pub mod sh;

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::scene::{sh_basis_count, GaussianGeometry, GaussianScene, ShColors};

pub use camera::{CameraView, Intrinsics};

const MAX_ALPHA: f64 = 0.99;
const MIN_ALPHA: f64 = 1.0 / 255.0;
const MIN_TRANSMITTANCE: f64 = 1e-4;
const LOW_PASS: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Gaussians with camera depth at or below this are culled.
    pub near: f64,
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [0.0; 3],
            near: 0.01,
            tile_size: 16,
        }
    }
}

/// Per-pixel blend record: which gaussians contributed with which weight.
#[derive(Debug, Clone, Default)]
struct BlendTape {
    offsets: Vec<usize>,
    gaussians: Vec<u32>,
    weights: Vec<f64>,
    /// SH basis evaluated for each gaussian's view direction.
    basis: Vec<f64>,
    basis_len: usize,
    /// Whether each color channel of each gaussian was inside `[0, 1]`.
    active: Vec<[bool; 3]>,
    degree: usize,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `H x W x 3`.
    pub rgb: Vec<f64>,
    /// Alpha-normalized expected camera depth; 0 where nothing was hit.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    tape: BlendTape,
}

/// Gradient of some scalar with respect to the SH coefficients, laid out
/// like [`ShColors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorGradient {
    pub dc: Vec<[f64; 3]>,
    pub rest: Vec<f64>,
}

impl ColorGradient {
    pub fn zeros_like(colors: &ShColors) -> Self {
        ColorGradient {
            dc: vec![[0.0; 3]; colors.len()],
            rest: vec![0.0; colors.rest.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ColorGradient) {
        for (a, b) in self.dc.iter_mut().zip(&other.dc) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        for (a, b) in self.rest.iter_mut().zip(&other.rest) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dc.iter().flatten().all(|v| v.is_finite()) && self.rest.iter().all(|v| v.is_finite())
    }
}

impl RenderOutput {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn rgb_at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Depth with pixels whose alpha is below `threshold` set to zero.
    pub fn masked_depth(&self, threshold: f64) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.alpha)
            .map(|(&d, &a)| if a >= threshold { d } else { 0.0 })
            .collect()
    }

    /// Number of (pixel, gaussian) blend records.
    pub fn contribution_count(&self) -> usize {
        self.tape.weights.len()
    }

    /// Back-propagates `d(loss)/d(rgb)` (same layout as `rgb`) onto the SH
    /// coefficients of the scene this output was rendered from.
    pub fn color_gradient(&self, grad_rgb: &[f64]) -> ColorGradient {
        assert_eq!(grad_rgb.len(), self.rgb.len(), "gradient/image size mismatch");
        let tape = &self.tape;
        let count = tape.active.len();
        let mut grad_color = vec![[0.0f64; 3]; count];
        for p in 0..self.pixel_count() {
            let g = &grad_rgb[p * 3..p * 3 + 3];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for k in tape.offsets[p]..tape.offsets[p + 1] {
                let gi = tape.gaussians[k] as usize;
                let w = tape.weights[k];
                for c in 0..3 {
                    grad_color[gi][c] += g[c] * w;
                }
            }
        }

        let rest_per_channel = tape.basis_len - 1;
        let mut out = ColorGradient {
            dc: vec![[0.0; 3]; count],
            rest: vec![0.0; count * 3 * rest_per_channel],
        };
        for (gi, gc) in grad_color.iter().enumerate() {
            let basis = &tape.basis[gi * tape.basis_len..(gi + 1) * tape.basis_len];
            for c in 0..3 {
                if !tape.active[gi][c] {
                    continue;
                }
                out.dc[gi][c] = gc[c] * basis[0];
                for k in 0..rest_per_channel {
                    out.rest[(gi * 3 + c) * rest_per_channel + k] = gc[c] * basis[k + 1];
                }
            }
        }
        out
    }

    pub fn sh_degree(&self) -> usize {
        self.tape.degree
    }
}

#[derive(Debug, Clone, Copy)]
struct Splat {
    index: u32,
    mean: [f64; 2],
    /// Inverse 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    radius: f64,
    color: [f64; 3],
}

fn quat_to_matrix(q: [f32; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q.map(|v| v as f64);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Default)]
pub struct Renderer {
    pub settings: RenderSettings,
}

impl Renderer {
    pub fn new(settings: RenderSettings) -> Self {
        Renderer { settings }
    }

    pub fn render_scene(&self, scene: &GaussianScene, camera: &CameraView) -> RenderOutput {
        self.render(&scene.geometry, &scene.colors, camera)
    }

    /// Renders each camera independently; output order follows `cameras`.
    pub fn render_batch(
        &self,
        geometry: &GaussianGeometry,
        colors: &ShColors,
        cameras: &[CameraView],
    ) -> Vec<RenderOutput> {
        cameras
            .par_iter()
            .map(|cam| self.render(geometry, colors, cam))
            .collect()
    }

    pub fn render(
        &self,
        geometry: &GaussianGeometry,
        colors: &ShColors,
        camera: &CameraView,
    ) -> RenderOutput {
        let (width, height) = (camera.width(), camera.height());
        let basis_len = sh_basis_count(colors.degree);
        let count = geometry.len();

        let mut basis = vec![0.0; count * basis_len];
        let mut active = vec![[false; 3]; count];
        let projected: Vec<Option<Splat>> = basis
            .par_chunks_mut(basis_len)
            .zip(active.par_iter_mut())
            .enumerate()
            .map(|(i, (basis_out, active_out))| {
                self.project(geometry, colors, camera, i, basis_out, active_out)
            })
            .collect();

        let mut splats: Vec<Splat> = projected.into_iter().flatten().collect();
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

        let tile = self.settings.tile_size.max(1);
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
        for (order, s) in splats.iter().enumerate() {
            let x0 = (s.mean[0] - s.radius).floor().max(0.0);
            let x1 = (s.mean[0] + s.radius).ceil().min(width as f64 - 1.0);
            let y0 = (s.mean[1] - s.radius).floor().max(0.0);
            let y1 = (s.mean[1] + s.radius).ceil().min(height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let (tx0, tx1) = (x0 as usize / tile, x1 as usize / tile);
            let (ty0, ty1) = (y0 as usize / tile, y1 as usize / tile);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    bins[ty * tiles_x + tx].push(order as u32);
                }
            }
        }

        let bg = self.settings.background;
        struct Row {
            rgb: Vec<f64>,
            depth: Vec<f64>,
            alpha: Vec<f64>,
            counts: Vec<usize>,
            gaussians: Vec<u32>,
            weights: Vec<f64>,
        }
        let rows: Vec<Row> = (0..height)
            .into_par_iter()
            .map(|y| {
                let mut row = Row {
                    rgb: Vec::with_capacity(width * 3),
                    depth: Vec::with_capacity(width),
                    alpha: Vec::with_capacity(width),
                    counts: Vec::with_capacity(width),
                    gaussians: Vec::new(),
                    weights: Vec::new(),
                };
                for x in 0..width {
                    let bin = &bins[(y / tile) * tiles_x + x / tile];
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut transmittance = 1.0;
                    let mut color = [0.0; 3];
                    let mut depth_acc = 0.0;
                    let mut weight_acc = 0.0;
                    let mut n = 0;
                    for &order in bin {
                        let s = &splats[order as usize];
                        let dx = px - s.mean[0];
                        let dy = py - s.mean[1];
                        let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy)
                            - s.conic[1] * dx * dy;
                        if power > 0.0 {
                            continue;
                        }
                        let a = (s.opacity * power.exp()).min(MAX_ALPHA);
                        if a < MIN_ALPHA {
                            continue;
                        }
                        let next = transmittance * (1.0 - a);
                        if next < MIN_TRANSMITTANCE {
                            break;
                        }
                        let w = a * transmittance;
                        for c in 0..3 {
                            color[c] += w * s.color[c];
                        }
                        depth_acc += w * s.depth;
                        weight_acc += w;
                        row.gaussians.push(s.index);
                        row.weights.push(w);
                        n += 1;
                        transmittance = next;
                    }
                    for c in 0..3 {
                        row.rgb.push(color[c] + transmittance * bg[c]);
                    }
                    row.depth.push(if weight_acc > 0.0 {
                        depth_acc / weight_acc
                    } else {
                        0.0
                    });
                    row.alpha.push(1.0 - transmittance);
                    row.counts.push(n);
                }
                row
            })
            .collect();

        let mut out = RenderOutput {
            width,
            height,
            rgb: Vec::with_capacity(width * height * 3),
            depth: Vec::with_capacity(width * height),
            alpha: Vec::with_capacity(width * height),
            tape: BlendTape {
                offsets: Vec::with_capacity(width * height + 1),
                gaussians: Vec::new(),
                weights: Vec::new(),
                basis,
                basis_len,
                active,
                degree: colors.degree,
            },
        };
        out.tape.offsets.push(0);
        for row in rows {
            out.rgb.extend(row.rgb);
            out.depth.extend(row.depth);
            out.alpha.extend(row.alpha);
            for n in row.counts {
                let last = *out.tape.offsets.last().unwrap();
                out.tape.offsets.push(last + n);
            }
            out.tape.gaussians.extend(row.gaussians);
            out.tape.weights.extend(row.weights);
        }
        out
    }

    fn project(
        &self,
        geometry: &GaussianGeometry,
        colors: &ShColors,
        camera: &CameraView,
        i: usize,
        basis_out: &mut [f64],
        active_out: &mut [bool; 3],
    ) -> Option<Splat> {
        let mu = Vector3::from(geometry.positions[i].map(|v| v as f64));

        // color first: it is needed for the gradient tape even if culled
        let dir = (mu - camera.center())
            .try_normalize(1e-12)
            .unwrap_or(Vector3::new(0.0, 0.0, 1.0));
        let mut basis = Vec::with_capacity(basis_out.len());
        sh::eval_basis(colors.degree, [dir.x, dir.y, dir.z], &mut basis);
        basis_out.copy_from_slice(&basis);
        let rest = colors.rest_of(i);
        let per_channel = basis.len() - 1;
        let mut color = [0.0; 3];
        for c in 0..3 {
            let mut v = basis[0] * colors.dc[i][c] as f64 + 0.5;
            for k in 0..per_channel {
                v += basis[k + 1] * rest[c * per_channel + k] as f64;
            }
            active_out[c] = (0.0..=1.0).contains(&v);
            color[c] = v.clamp(0.0, 1.0);
        }

        let r_wc = camera.rotation();
        let t = r_wc * mu + camera.translation();
        if t.z <= self.settings.near {
            return None;
        }
        let intr = &camera.intrinsics;
        let rot = quat_to_matrix(geometry.rotations[i]);
        let scale = Matrix3::from_diagonal(&Vector3::from(
            geometry.log_scales[i].map(|v| (v as f64).exp()),
        ));
        let m = rot * scale;
        let cov_world = m * m.transpose();
        let cov_cam = r_wc * cov_world * r_wc.transpose();

        let lim_x = 1.3 * (intr.width as f64 / (2.0 * intr.fx));
        let lim_y = 1.3 * (intr.height as f64 / (2.0 * intr.fy));
        let tx = (t.x / t.z).clamp(-lim_x, lim_x) * t.z;
        let ty = (t.y / t.z).clamp(-lim_y, lim_y) * t.z;
        let z2 = t.z * t.z;
        let j = Matrix2x3::new(
            intr.fx / t.z,
            0.0,
            -intr.fx * tx / z2,
            0.0,
            intr.fy / t.z,
            -intr.fy * ty / z2,
        );
        let cov2 = j * cov_cam * j.transpose();
        let (a, b, c) = (cov2[(0, 0)] + LOW_PASS, cov2[(0, 1)], cov2[(1, 1)] + LOW_PASS);
        let det = a * c - b * b;
        if !(det > 0.0) {
            return None;
        }
        let conic = [c / det, -b / det, a / det];
        let mid = 0.5 * (a + c);
        let lambda = mid + (mid * mid - det).max(0.1).sqrt();
        let radius = (3.0 * lambda.sqrt()).ceil();

        let mean = [
            intr.fx * t.x / t.z + intr.cx,
            intr.fy * t.y / t.z + intr.cy,
        ];
        Some(Splat {
            index: i as u32,
            mean,
            conic,
            depth: t.z,
            opacity: sigmoid(geometry.opacity_logits[i] as f64),
            radius,
            color,
        })
    }
}

//! Explicit cross-view geometry: sampling grids from depth back-projection,
//! visibility masks, bilinear warps and the first-observer mask.
//!
//! Grid convention: a normalized coordinate of `-1` is the center of the
//! first pixel (column or row) of the source image and `+1` the center of
//! the last one. Pixel `(u, v)` of the reference view is back-projected
//! through its center `(u + 0.5, v + 0.5)`.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::renderer::CameraView;

/// Binary per-pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2d {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask2d {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask2d {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn fill_rate(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }
}

pub type VisibilityMask = Mask2d;

/// Normalized source coordinates for every reference pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    /// `(x, y)` per reference pixel in `[-1, 1]` when in the domain.
    pub coords: Vec<[f64; 2]>,
    pub source_height: usize,
    pub source_width: usize,
    pub reference: usize,
    pub source: usize,
}

/// Continuous pixel coordinate (pixel centers at `i + 0.5`) to normalized.
pub fn pixel_to_normalized(x: f64, size: usize) -> f64 {
    if size <= 1 {
        return 2.0 * (x - 0.5);
    }
    2.0 * (x - 0.5) / (size as f64 - 1.0) - 1.0
}

/// Normalized coordinate to continuous pixel coordinate.
pub fn normalized_to_pixel(g: f64, size: usize) -> f64 {
    if size <= 1 {
        return g / 2.0 + 0.5;
    }
    (g + 1.0) / 2.0 * (size as f64 - 1.0) + 0.5
}

impl SamplingGrid {
    /// Grid that samples every pixel from its own location.
    pub fn identity(height: usize, width: usize) -> Self {
        let coords = (0..height)
            .flat_map(|y| {
                (0..width).map(move |x| {
                    [
                        pixel_to_normalized(x as f64 + 0.5, width),
                        pixel_to_normalized(y as f64 + 0.5, height),
                    ]
                })
            })
            .collect();
        SamplingGrid {
            height,
            width,
            coords,
            source_height: height,
            source_width: width,
            reference: 0,
            source: 0,
        }
    }

    fn in_domain(c: [f64; 2]) -> bool {
        c[0].is_finite() && c[1].is_finite() && c[0].abs() <= 1.0 && c[1].abs() <= 1.0
    }
}

/// Back-projects each reference pixel with `depth_b` and re-projects it into
/// `cam_j`. Returns the grid and the camera-`j` depth of every reprojected
/// point. Pixels with non-positive or non-finite depth get a NaN grid entry
/// and zero camera-`j` depth.
pub fn compute_grid(
    cam_b: &CameraView,
    cam_j: &CameraView,
    depth_b: &[f64],
) -> Result<(SamplingGrid, Vec<f64>)> {
    let (w, h) = (cam_b.width(), cam_b.height());
    if depth_b.len() != w * h {
        return Err(Error::Shape(format!(
            "depth has {} pixels, camera is {w}x{h}",
            depth_b.len()
        )));
    }
    let k_b_inv = cam_b
        .intrinsic_matrix()
        .try_inverse()
        .ok_or_else(|| Error::InvalidCamera("reference intrinsics are not invertible".into()))?;
    let k_j = cam_j.intrinsic_matrix();
    // camera-b frame to camera-j frame, folded with both intrinsics
    let r_rel = cam_j.rotation() * cam_b.rotation().transpose();
    let t_rel = cam_j.translation() - r_rel * cam_b.translation();
    let ray_to_j = k_j * r_rel * k_b_inv;
    let offset_j = k_j * t_rel;
    let (wj, hj) = (cam_j.width(), cam_j.height());

    let results: Vec<([f64; 2], f64)> = depth_b
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            if !(d > 0.0 && d.is_finite()) {
                return ([f64::NAN; 2], 0.0);
            }
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let p = ray_to_j * Vector3::new(x * d, y * d, d) + offset_j;
            let (u, v) = (p.x / p.z, p.y / p.z);
            ([pixel_to_normalized(u, wj), pixel_to_normalized(v, hj)], p.z)
        })
        .collect();
    let (coords, raw_depth) = results.into_iter().unzip();
    Ok((
        SamplingGrid {
            height: h,
            width: w,
            coords,
            source_height: hj,
            source_width: wj,
            reference: 0,
            source: 0,
        },
        raw_depth,
    ))
}

/// `v = 1` exactly where the reprojected point is in front of camera `j`
/// and the grid coordinate lies in `[-1, 1]^2`.
pub fn compute_visibility(grid: &SamplingGrid, raw_depth_j: &[f64]) -> Result<VisibilityMask> {
    if raw_depth_j.len() != grid.coords.len() {
        return Err(Error::Shape(format!(
            "grid has {} entries, depth has {}",
            grid.coords.len(),
            raw_depth_j.len()
        )));
    }
    Ok(Mask2d {
        height: grid.height,
        width: grid.width,
        data: grid
            .coords
            .iter()
            .zip(raw_depth_j)
            .map(|(&c, &z)| z > 0.0 && SamplingGrid::in_domain(c))
            .collect(),
    })
}

/// Source positions closer than this (in pixels) to a pixel center sample
/// that pixel alone; reprojection round-off otherwise leaks ~1e-16 weights
/// into neighbors.
pub const SNAP_TOLERANCE: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP_TOLERANCE {
        r
    } else {
        x
    }
}

/// One bilinear tap: source pixel index and weight.
pub type Tap = (usize, f64);

/// Precomputed bilinear taps for a grid. Taps falling outside the source
/// contribute zero; non-finite grid entries produce no taps at all.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpPlan {
    pub height: usize,
    pub width: usize,
    pub source_len: usize,
    pub taps: Vec<[Option<Tap>; 4]>,
}

impl WarpPlan {
    pub fn new(grid: &SamplingGrid) -> Self {
        let (sw, sh) = (grid.source_width, grid.source_height);
        let taps = grid
            .coords
            .iter()
            .map(|&[gx, gy]| {
                if !(gx.is_finite() && gy.is_finite()) {
                    return [None; 4];
                }
                // source index space: pixel centers at integers
                let x = normalized_to_pixel(gx, sw) - 0.5;
                let y = normalized_to_pixel(gy, sh) - 0.5;
                let (x, y) = (snap(x), snap(y));
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let corners = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ];
                corners.map(|(cx, cy, wgt)| {
                    let inside =
                        cx >= 0.0 && cy >= 0.0 && cx <= (sw - 1) as f64 && cy <= (sh - 1) as f64;
                    (inside && wgt != 0.0).then(|| (cy as usize * sw + cx as usize, wgt))
                })
            })
            .collect();
        WarpPlan {
            height: grid.height,
            width: grid.width,
            source_len: sw * sh,
            taps,
        }
    }

    /// Applies the plan to a `source_len x channels` row-major map.
    pub fn apply(&self, source: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(source.len(), self.source_len * channels);
        let mut out = vec![0.0; self.taps.len() * channels];
        for (dst, taps) in out.chunks_mut(channels).zip(&self.taps) {
            for (idx, wgt) in taps.iter().flatten() {
                let src = &source[idx * channels..(idx + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
        out
    }
}

/// Bilinear warp of an `h x w x C` source map with zero padding.
pub fn warp_features(features_j: &[f64], channels: usize, grid: &SamplingGrid) -> Result<Vec<f64>> {
    if features_j.len() != grid.source_width * grid.source_height * channels {
        return Err(Error::Shape(format!(
            "feature map has {} values, grid expects {}x{}x{channels}",
            features_j.len(),
            grid.source_height,
            grid.source_width
        )));
    }
    Ok(WarpPlan::new(grid).apply(features_j, channels))
}

/// Per-view masks keeping pixels not seen by any earlier view.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryMask {
    pub masks: Vec<Mask2d>,
}

impl GeometryMask {
    pub fn all_ones(views: usize, height: usize, width: usize) -> Self {
        GeometryMask {
            masks: vec![Mask2d::filled(height, width, true); views],
        }
    }

    pub fn fill_rate(&self) -> f64 {
        let total: usize = self.masks.iter().map(|m| m.data.len()).sum();
        let on: usize = self.masks.iter().map(Mask2d::count).sum();
        on as f64 / total.max(1) as f64
    }
}

/// `visibilities[b][j]` is `v_{b<-j}` for every `j < b`; `visibilities[0]`
/// is empty.
pub fn geometry_aware_mask(visibilities: &[Vec<VisibilityMask>]) -> Result<GeometryMask> {
    let Some(first) = visibilities.iter().flatten().next() else {
        return Err(Error::InvalidArgument(
            "geometry mask needs at least one visibility mask or an explicit size".into(),
        ));
    };
    geometry_aware_mask_sized(visibilities, first.height, first.width)
}

pub fn geometry_aware_mask_sized(
    visibilities: &[Vec<VisibilityMask>],
    height: usize,
    width: usize,
) -> Result<GeometryMask> {
    let mut masks = Vec::with_capacity(visibilities.len());
    for (b, row) in visibilities.iter().enumerate() {
        if row.len() != b {
            return Err(Error::Shape(format!(
                "view {b} needs {b} visibility masks from earlier views, got {}",
                row.len()
            )));
        }
        let mut mask = Mask2d::filled(height, width, true);
        for v in row {
            if v.height != height || v.width != width {
                return Err(Error::Shape("visibility masks differ in size".into()));
            }
            for (m, &seen) in mask.data.iter_mut().zip(&v.data) {
                *m &= !seen;
            }
        }
        masks.push(mask);
    }
    Ok(GeometryMask { masks })
}

/// Bilinearly resamples a grid onto a `target` reference resolution and
/// re-expresses its coordinates for a source map of size `source_target`.
pub fn resample_grid(
    grid: &SamplingGrid,
    target: (usize, usize),
    source_target: (usize, usize),
) -> SamplingGrid {
    let (th, tw) = target;
    let (sth, stw) = source_target;
    if (th, tw) == (grid.height, grid.width)
        && (sth, stw) == (grid.source_height, grid.source_width)
    {
        return grid.clone();
    }
    let sx = grid.width as f64 / tw as f64;
    let sy = grid.height as f64 / th as f64;
    let at = |x: usize, y: usize| grid.coords[y * grid.width + x];
    let mut coords = Vec::with_capacity(th * tw);
    for v in 0..th {
        for u in 0..tw {
            let x = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (grid.width - 1) as f64);
            let y = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (grid.height - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(grid.width - 1), (y0 + 1).min(grid.height - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let mut acc = [0.0; 2];
            let mut wsum = 0.0;
            for (cx, cy, w) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ] {
                let c = at(cx, cy);
                if w > 0.0 && c[0].is_finite() && c[1].is_finite() {
                    acc[0] += w * c[0];
                    acc[1] += w * c[1];
                    wsum += w;
                }
            }
            if wsum <= 0.0 {
                coords.push([f64::NAN; 2]);
                continue;
            }
            let g = [acc[0] / wsum, acc[1] / wsum];
            let px = normalized_to_pixel(g[0], grid.source_width) * stw as f64
                / grid.source_width as f64;
            let py = normalized_to_pixel(g[1], grid.source_height) * sth as f64
                / grid.source_height as f64;
            coords.push([pixel_to_normalized(px, stw), pixel_to_normalized(py, sth)]);
        }
    }
    SamplingGrid {
        height: th,
        width: tw,
        coords,
        source_height: sth,
        source_width: stw,
        reference: grid.reference,
        source: grid.source,
    }
}

/// Nearest-neighbor resampling of a binary mask.
pub fn resample_mask(mask: &Mask2d, target: (usize, usize)) -> Mask2d {
    let (th, tw) = target;
    if (th, tw) == (mask.height, mask.width) {
        return mask.clone();
    }
    let pick = |i: usize, t: usize, s: usize| (((i as f64 + 0.5) * s as f64 / t as f64) as usize).min(s - 1);
    let mut data = Vec::with_capacity(th * tw);
    for v in 0..th {
        let sy = pick(v, th, mask.height);
        for u in 0..tw {
            data.push(mask.get(pick(u, tw, mask.width), sy));
        }
    }
    Mask2d {
        height: th,
        width: tw,
        data,
    }
}

/// Grids, visibilities and the first-observer mask for one camera batch.
#[derive(Debug, Clone)]
pub struct GeometryGuidance {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Indexed `b * views + j`; `None` on the diagonal.
    pub grids: Vec<Option<SamplingGrid>>,
    pub visibility: Vec<Option<VisibilityMask>>,
    pub geometry_mask: GeometryMask,
}

impl GeometryGuidance {
    /// Builds guidance from per-view depths. Depth values of zero mark
    /// background pixels, which end up invisible in every `v_{b<-j}`.
    pub fn build(cameras: &[CameraView], depths: &[Vec<f64>]) -> Result<Self> {
        let n = cameras.len();
        if n == 0 || depths.len() != n {
            return Err(Error::Shape(format!(
                "{} cameras but {} depth maps",
                n,
                depths.len()
            )));
        }
        let (h, w) = (cameras[0].height(), cameras[0].width());
        if cameras.iter().any(|c| (c.height(), c.width()) != (h, w)) {
            return Err(Error::Shape("all views in a batch must share a resolution".into()));
        }
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|b| (0..n).filter(move |&j| j != b).map(move |j| (b, j)))
            .collect();
        let computed: Vec<((usize, usize), SamplingGrid, VisibilityMask)> = pairs
            .par_iter()
            .map(|&(b, j)| {
                let (mut grid, raw) = compute_grid(&cameras[b], &cameras[j], &depths[b])?;
                grid.reference = b;
                grid.source = j;
                let vis = compute_visibility(&grid, &raw)?;
                Ok(((b, j), grid, vis))
            })
            .collect::<Result<_>>()?;

        let mut grids = vec![None; n * n];
        let mut visibility = vec![None; n * n];
        for ((b, j), grid, vis) in computed {
            grids[b * n + j] = Some(grid);
            visibility[b * n + j] = Some(vis);
        }
        let lower: Vec<Vec<VisibilityMask>> = (0..n)
            .map(|b| {
                (0..b)
                    .map(|j| visibility[b * n + j].clone().expect("pair computed"))
                    .collect()
            })
            .collect();
        let geometry_mask = geometry_aware_mask_sized(&lower, h, w)?;
        Ok(GeometryGuidance {
            views: n,
            height: h,
            width: w,
            grids,
            visibility,
            geometry_mask,
        })
    }

    pub fn grid(&self, b: usize, j: usize) -> Option<&SamplingGrid> {
        self.grids[b * self.views + j].as_ref()
    }

    pub fn visibility(&self, b: usize, j: usize) -> Option<&VisibilityMask> {
        self.visibility[b * self.views + j].as_ref()
    }

    /// Replaces the first-observer mask with all ones.
    pub fn without_geometry_mask(mut self) -> Self {
        self.geometry_mask = GeometryMask::all_ones(self.views, self.height, self.width);
        self
    }

    /// Resamples everything to a feature resolution.
    pub fn at_resolution(&self, height: usize, width: usize) -> GuidanceLevel {
        let n = self.views;
        let mut plans = vec![None; n * n];
        let mut visibility = vec![None; n * n];
        for b in 0..n {
            for j in (0..n).filter(|&j| j != b) {
                let grid = self.grid(b, j).expect("off-diagonal grid");
                let g = resample_grid(grid, (height, width), (height, width));
                plans[b * n + j] = Some(WarpPlan::new(&g));
                visibility[b * n + j] =
                    Some(resample_mask(self.visibility(b, j).expect("off-diagonal"), (height, width)));
            }
        }
        GuidanceLevel {
            views: n,
            height,
            width,
            plans,
            visibility,
            geometry_mask: self
                .geometry_mask
                .masks
                .iter()
                .map(|m| resample_mask(m, (height, width)))
                .collect(),
        }
    }

    /// Writes visibility, geometry-mask and grid images for inspection.
    pub fn dump_png(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let save_mask = |m: &Mask2d, name: String| -> Result<()> {
            let img = image::GrayImage::from_fn(m.width as u32, m.height as u32, |x, y| {
                image::Luma([if m.get(x as usize, y as usize) { 255 } else { 0 }])
            });
            img.save(dir.join(name))?;
            Ok(())
        };
        for (b, m) in self.geometry_mask.masks.iter().enumerate() {
            save_mask(m, format!("geometry_mask_{b}.png"))?;
        }
        for b in 0..self.views {
            for j in (0..self.views).filter(|&j| j != b) {
                save_mask(self.visibility(b, j).unwrap(), format!("visibility_{b}_from_{j}.png"))?;
                let g = self.grid(b, j).unwrap();
                let img = image::RgbImage::from_fn(g.width as u32, g.height as u32, |x, y| {
                    let c = g.coords[y as usize * g.width + x as usize];
                    let enc = |v: f64| {
                        if v.is_finite() {
                            (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
                        } else {
                            0
                        }
                    };
                    image::Rgb([enc(c[0]), enc(c[1]), 0])
                });
                img.save(dir.join(format!("grid_{b}_from_{j}.png")))?;
            }
        }
        Ok(())
    }
}

/// Guidance resampled to one attention resolution.
#[derive(Debug, Clone)]
pub struct GuidanceLevel {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub plans: Vec<Option<WarpPlan>>,
    pub visibility: Vec<Option<VisibilityMask>>,
    pub geometry_mask: Vec<Mask2d>,
}

impl GuidanceLevel {
    pub fn plan(&self, b: usize, j: usize) -> Option<&WarpPlan> {
        self.plans[b * self.views + j].as_ref()
    }

    pub fn visibility(&self, b: usize, j: usize) -> Option<&VisibilityMask> {
        self.visibility[b * self.views + j].as_ref()
    }

    /// A level where every cross-view token is invisible.
    pub fn with_visibility_cleared(mut self) -> Self {
        for v in self.visibility.iter_mut().flatten() {
            v.data.iter_mut().for_each(|x| *x = false);
        }
        self
    }
}

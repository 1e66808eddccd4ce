//! Gaussian splatting scenes with a frozen-geometry / trainable-color split.
//!
//! A [`GaussianScene`] is stored as two halves. [`GaussianGeometry`] holds
//! everything that affects where splats land and how they composite (means,
//! rotations, log-scales, opacity logits). [`ShColors`] holds the spherical
//! harmonic color coefficients. Stylization only ever receives a mutable
//! borrow of the color half; see [`ParameterPartition`].

mod ply;

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use ply::{load_scene, save_scene};

/// Highest SH degree supported by the standard checkpoint layout.
pub const MAX_SH_DEGREE: usize = 3;

/// Number of SH basis functions for a degree, including the DC term.
pub const fn sh_basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Number of higher-order coefficients per color channel.
pub const fn sh_rest_per_channel(degree: usize) -> usize {
    sh_basis_count(degree) - 1
}

/// Infers the SH degree from the total number of `f_rest_*` values.
pub fn sh_degree_from_rest_count(count: usize) -> Option<usize> {
    (0..=MAX_SH_DEGREE).find(|&d| 3 * sh_rest_per_channel(d) == count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGeometry {
    pub positions: Vec<[f32; 3]>,
    /// Unit quaternions stored `(w, x, y, z)`.
    pub rotations: Vec<[f32; 4]>,
    /// Natural-log scales.
    pub log_scales: Vec<[f32; 3]>,
    /// Opacities before the sigmoid.
    pub opacity_logits: Vec<f32>,
}

impl GaussianGeometry {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let m = self.positions.len();
        if m == 0 {
            return Err(Error::EmptyScene);
        }
        if self.rotations.len() != m || self.log_scales.len() != m || self.opacity_logits.len() != m
        {
            return Err(Error::Shape(format!(
                "geometry arrays disagree on gaussian count: positions {m}, rotations {}, scales {}, opacities {}",
                self.rotations.len(),
                self.log_scales.len(),
                self.opacity_logits.len()
            )));
        }
        Ok(())
    }
}

/// Spherical-harmonic color coefficients.
///
/// `rest` is laid out per gaussian as `[channel][coefficient]`, i.e. all red
/// higher-order terms, then green, then blue, matching the `f_rest_*`
/// ordering of standard checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ShColors {
    pub degree: usize,
    pub dc: Vec<[f32; 3]>,
    pub rest: Vec<f32>,
}

impl ShColors {
    pub fn len(&self) -> usize {
        self.dc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dc.is_empty()
    }

    /// Higher-order coefficients per gaussian (all three channels).
    pub fn rest_stride(&self) -> usize {
        3 * sh_rest_per_channel(self.degree)
    }

    pub fn rest_of(&self, index: usize) -> &[f32] {
        let stride = self.rest_stride();
        &self.rest[index * stride..(index + 1) * stride]
    }

    /// Constant-color coefficients for a given degree: DC set so the
    /// rendered color equals `rgb`, all higher orders zero.
    pub fn constant(count: usize, degree: usize, rgb: [f32; 3]) -> Self {
        let dc = rgb.map(crate::renderer::sh::rgb_to_dc);
        ShColors {
            degree,
            dc: vec![dc; count],
            rest: vec![0.0; count * 3 * sh_rest_per_channel(degree)],
        }
    }

    fn validate(&self, count: usize) -> Result<()> {
        if self.degree > MAX_SH_DEGREE {
            return Err(Error::Format(format!(
                "sh degree {} exceeds the supported maximum {MAX_SH_DEGREE}",
                self.degree
            )));
        }
        if self.dc.len() != count {
            return Err(Error::Shape(format!(
                "sh_dc has {} rows, expected {count}",
                self.dc.len()
            )));
        }
        if self.rest.len() != count * self.rest_stride() {
            return Err(Error::Shape(format!(
                "sh_rest has {} values, expected {} for degree {}",
                self.rest.len(),
                count * self.rest_stride(),
                self.degree
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub geometry: GaussianGeometry,
    pub colors: ShColors,
}

impl GaussianScene {
    /// Builds a scene, normalizing quaternions and checking every invariant.
    pub fn new(mut geometry: GaussianGeometry, colors: ShColors) -> Result<Self> {
        geometry.validate()?;
        colors.validate(geometry.len())?;
        for q in &mut geometry.rotations {
            *q = normalize_quaternion(*q);
        }
        Ok(GaussianScene { geometry, colors })
    }

    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        self.colors.degree
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_scene(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_scene(self, path)
    }
}

/// Normalizes a `(w, x, y, z)` quaternion.
///
/// Quaternions already within 1e-6 of unit length are returned untouched so
/// that repeated load/save cycles stay bit-exact. A zero quaternion becomes
/// the identity rotation.
pub fn normalize_quaternion(q: [f32; 4]) -> [f32; 4] {
    let norm = q.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    if (norm - 1.0).abs() <= 1e-6 {
        return q;
    }
    q.map(|c| (c as f64 / norm) as f32)
}

/// Names of the parameter groups in each half of a [`ParameterPartition`].
pub const FROZEN_GROUPS: [&str; 4] = ["positions", "rotations", "scales", "opacities"];
pub const TRAINABLE_GROUPS: [&str; 2] = ["sh_dc", "sh_rest"];

/// Geometry is shared read-only behind an `Arc`; only colors can be
/// borrowed mutably.
#[derive(Debug, Clone)]
pub struct ParameterPartition {
    frozen: Arc<GaussianGeometry>,
    trainable: ShColors,
}

impl ParameterPartition {
    pub fn frozen(&self) -> &GaussianGeometry {
        &self.frozen
    }

    pub fn frozen_shared(&self) -> Arc<GaussianGeometry> {
        Arc::clone(&self.frozen)
    }

    pub fn trainable(&self) -> &ShColors {
        &self.trainable
    }

    pub fn trainable_mut(&mut self) -> &mut ShColors {
        &mut self.trainable
    }

    pub fn frozen_groups(&self) -> &'static [&'static str] {
        &FROZEN_GROUPS
    }

    pub fn trainable_groups(&self) -> &'static [&'static str] {
        &TRAINABLE_GROUPS
    }

    pub fn to_scene(&self) -> GaussianScene {
        GaussianScene {
            geometry: (*self.frozen).clone(),
            colors: self.trainable.clone(),
        }
    }

    pub fn into_scene(self) -> GaussianScene {
        let geometry = Arc::try_unwrap(self.frozen).unwrap_or_else(|shared| (*shared).clone());
        GaussianScene {
            geometry,
            colors: self.trainable,
        }
    }
}

/// Splits a scene into frozen geometry and trainable SH colors.
pub fn partition_parameters(scene: GaussianScene) -> ParameterPartition {
    ParameterPartition {
        frozen: Arc::new(scene.geometry),
        trainable: scene.colors,
    }
}

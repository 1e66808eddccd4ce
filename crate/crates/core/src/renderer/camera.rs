use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Centered principal point with a square pixel focal length.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Intrinsics {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Rescales to a new image size, keeping the field of view.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// A posed pinhole camera in the OpenCV convention: +x right, +y down,
/// +z forward. Pixel `(u, v)` covers `[u, u+1) x [v, v+1)`; its center is at
/// `(u + 0.5, v + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    world_to_camera: Matrix4<f64>,
    camera_to_world: Matrix4<f64>,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, world_to_camera: Matrix4<f64>) -> Result<Self> {
        let Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        } = intrinsics;
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive and finite, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidCamera("principal point is not finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image size must be nonzero".into()));
        }
        if world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCamera("pose contains non-finite values".into()));
        }
        let bottom = world_to_camera.fixed_view::<1, 4>(3, 0);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).abs().max() > 1e-9 {
            return Err(Error::InvalidCamera("pose bottom row must be [0 0 0 1]".into()));
        }
        let r: Matrix3<f64> = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho_err > 1e-5 || r.determinant() < 0.0 {
            return Err(Error::InvalidCamera(format!(
                "rotation block is not a proper orthonormal matrix (error {ortho_err:.3e})"
            )));
        }
        let t = world_to_camera.fixed_view::<3, 1>(0, 3).into_owned();
        let mut camera_to_world = Matrix4::identity();
        camera_to_world
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&r.transpose());
        camera_to_world
            .fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&(-(r.transpose() * t)));
        Ok(CameraView {
            intrinsics,
            world_to_camera,
            camera_to_world,
        })
    }

    /// Camera at `eye` looking at `target`. `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up vector is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::new(intrinsics, rigid(r, -(r * eye)))
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn camera_to_world(&self) -> &Matrix4<f64> {
        &self.camera_to_world
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.camera_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        self.intrinsics.matrix()
    }

    /// Same pose, intrinsics rescaled to a new resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        CameraView {
            intrinsics: self.intrinsics.resized(width, height),
            world_to_camera: self.world_to_camera,
            camera_to_world: self.camera_to_world,
        }
    }

    pub fn world_to_camera_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }
}

/// Assembles a 4x4 rigid transform from rotation and translation.
pub fn rigid(r: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

//! Camera loaders: COLMAP text models and NeRF-style `transforms.json`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::camera::{rigid, CameraView, Intrinsics};
use crate::error::{Error, Result};

/// A camera plus the name of the image it was registered with.
#[derive(Debug, Clone)]
pub struct NamedCamera {
    pub name: String,
    pub camera: CameraView,
}

/// Loads cameras from a COLMAP text model directory (`cameras.txt` +
/// `images.txt`, optionally under `sparse/0`) or a `transforms.json` file.
/// The result is sorted by image name.
pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<NamedCamera>> {
    let path = path.as_ref();
    if path.is_file() {
        return load_transforms_json(path);
    }
    for dir in [path.to_path_buf(), path.join("sparse").join("0")] {
        if dir.join("cameras.txt").is_file() && dir.join("images.txt").is_file() {
            return load_colmap_text(&dir);
        }
    }
    if path.join("transforms.json").is_file() {
        return load_transforms_json(&path.join("transforms.json"));
    }
    Err(Error::Format(format!(
        "{} is neither a transforms.json file nor a COLMAP text model directory",
        path.display()
    )))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_num<T: std::str::FromStr>(token: Option<&str>, what: &str, line: &str) -> Result<T> {
    token
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Format(format!("could not parse {what} in `{line}`")))
}

fn colmap_intrinsics(line: &str) -> Result<(u32, Intrinsics)> {
    let mut tok = line.split_whitespace();
    let id: u32 = parse_num(tok.next(), "camera id", line)?;
    let model = tok
        .next()
        .ok_or_else(|| Error::Format(format!("missing camera model in `{line}`")))?;
    let width: usize = parse_num(tok.next(), "width", line)?;
    let height: usize = parse_num(tok.next(), "height", line)?;
    let params: Vec<f64> = tok
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("bad camera parameter `{t}`")))
        })
        .collect::<Result<_>>()?;
    let need = |n: usize| -> Result<()> {
        if params.len() < n {
            Err(Error::Format(format!(
                "camera model {model} needs {n} parameters, got {}",
                params.len()
            )))
        } else {
            Ok(())
        }
    };
    let (fx, fy, cx, cy) = match model {
        "SIMPLE_PINHOLE" | "SIMPLE_RADIAL" | "RADIAL" | "SIMPLE_RADIAL_FISHEYE"
        | "RADIAL_FISHEYE" => {
            need(3)?;
            (params[0], params[0], params[1], params[2])
        }
        "PINHOLE" | "OPENCV" | "OPENCV_FISHEYE" | "FULL_OPENCV" => {
            need(4)?;
            (params[0], params[1], params[2], params[3])
        }
        other => {
            return Err(Error::Format(format!(
                "unsupported COLMAP camera model `{other}`"
            )))
        }
    };
    if !matches!(model, "SIMPLE_PINHOLE" | "PINHOLE") {
        log::warn!("camera {id}: ignoring distortion parameters of model {model}");
    }
    Ok((
        id,
        Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        },
    ))
}

/// Parses a COLMAP text model directory.
pub fn load_colmap_text(dir: &Path) -> Result<Vec<NamedCamera>> {
    let cameras_txt = read_to_string(&dir.join("cameras.txt"))?;
    let mut intrinsics = HashMap::new();
    for line in cameras_txt.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, intr) = colmap_intrinsics(line)?;
        intrinsics.insert(id, intr);
    }

    let images_txt = read_to_string(&dir.join("images.txt"))?;
    let lines: Vec<&str> = images_txt
        .lines()
        .map(str::trim)
        .filter(|l| !l.starts_with('#'))
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if line.is_empty() {
            i += 1;
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 10 {
            return Err(Error::Format(format!("bad images.txt entry `{line}`")));
        }
        let v: Vec<f64> = tok[1..8]
            .iter()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Format(format!("bad pose value `{t}` in `{line}`")))
            })
            .collect::<Result<_>>()?;
        let camera_id: u32 = parse_num(Some(tok[8]), "camera id", line)?;
        let name = tok[9..].join(" ");
        let intr = intrinsics.get(&camera_id).copied().ok_or_else(|| {
            Error::Format(format!("image {name} references unknown camera {camera_id}"))
        })?;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
        let w2c = rigid(
            q.to_rotation_matrix().into_inner(),
            Vector3::new(v[4], v[5], v[6]),
        );
        out.push(NamedCamera {
            name,
            camera: CameraView::new(intr, w2c)?,
        });
        // each image line is followed by its 2D point line
        i += 2;
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFile {
    #[serde(default)]
    camera_angle_x: Option<f64>,
    #[serde(default)]
    fl_x: Option<f64>,
    #[serde(default)]
    fl_y: Option<f64>,
    #[serde(default)]
    cx: Option<f64>,
    #[serde(default)]
    cy: Option<f64>,
    #[serde(default)]
    w: Option<usize>,
    #[serde(default)]
    h: Option<usize>,
    frames: Vec<TransformsFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformsFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fl_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<usize>,
}

/// OpenGL camera axes (y up, z backward) to OpenCV (y down, z forward).
fn gl_to_cv() -> Matrix4<f64> {
    Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0))
}

fn image_size_fallback(base: &Path, file_path: &str) -> Option<(usize, usize)> {
    let candidates: [PathBuf; 2] = [
        base.join(file_path),
        base.join(format!("{file_path}.png")),
    ];
    candidates
        .iter()
        .find_map(|p| image::image_dimensions(p).ok())
        .map(|(w, h)| (w as usize, h as usize))
}

/// Parses a NeRF-style `transforms.json`: per-frame camera-to-world
/// matrices in OpenGL convention, intrinsics at the top level or per frame.
pub fn load_transforms_json(path: &Path) -> Result<Vec<NamedCamera>> {
    let text = read_to_string(path)?;
    let file: TransformsFile = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(file.frames.len());
    for frame in &file.frames {
        let (w, h) = match (frame.w.or(file.w), frame.h.or(file.h)) {
            (Some(w), Some(h)) => (w, h),
            _ => image_size_fallback(base, &frame.file_path).ok_or_else(|| {
                Error::Format(format!(
                    "frame {} has no image size and its image could not be read",
                    frame.file_path
                ))
            })?,
        };
        let fx = match frame.fl_x.or(file.fl_x) {
            Some(f) => f,
            None => {
                let angle = file.camera_angle_x.ok_or_else(|| {
                    Error::Format("transforms.json needs fl_x or camera_angle_x".into())
                })?;
                0.5 * w as f64 / (0.5 * angle).tan()
            }
        };
        let fy = frame.fl_y.or(file.fl_y).unwrap_or(fx);
        let intr = Intrinsics {
            fx,
            fy,
            cx: frame.cx.or(file.cx).unwrap_or(w as f64 / 2.0),
            cy: frame.cy.or(file.cy).unwrap_or(h as f64 / 2.0),
            width: w,
            height: h,
        };
        let m = frame.transform_matrix;
        let c2w_gl = Matrix4::from_fn(|r, c| m[r][c]);
        let c2w = c2w_gl * gl_to_cv();
        let w2c = c2w
            .try_inverse()
            .ok_or_else(|| Error::InvalidCamera(format!("{} pose is singular", frame.file_path)))?;
        out.push(NamedCamera {
            name: frame.file_path.clone(),
            camera: CameraView::new(intr, w2c)?,
        });
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

/// Writes cameras as a `transforms.json` with per-frame intrinsics.
pub fn save_transforms_json(cameras: &[NamedCamera], path: &Path) -> Result<()> {
    let frames = cameras
        .iter()
        .map(|nc| {
            let c2w = nc.camera.camera_to_world() * gl_to_cv();
            let i = nc.camera.intrinsics;
            TransformsFrame {
                file_path: nc.name.clone(),
                transform_matrix: std::array::from_fn(|r| std::array::from_fn(|c| c2w[(r, c)])),
                fl_x: Some(i.fx),
                fl_y: Some(i.fy),
                cx: Some(i.cx),
                cy: Some(i.cy),
                w: Some(i.width),
                h: Some(i.height),
            }
        })
        .collect();
    let file = TransformsFile {
        camera_angle_x: None,
        fl_x: None,
        fl_y: None,
        cx: None,
        cy: None,
        w: None,
        h: None,
        frames,
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

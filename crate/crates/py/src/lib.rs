//! Python module `splatstyle`: scenes, cameras, rendering, stylization and
//! a few of the numeric building blocks.

use std::path::PathBuf;

use pyo3::exceptions::{PyFloatingPointError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use splatstyle_core::attention::center_normalize as normalize_op;
use splatstyle_core::backbone::LatentDiffusionBackbone;
use splatstyle_core::geometry::{compute_grid as grid_op, compute_visibility};
use splatstyle_core::imageio::RgbImage;
use splatstyle_core::renderer::{cameras_io, CameraView, Intrinsics, Renderer};
use splatstyle_core::scene::GaussianScene;
use splatstyle_core::trainer::{self, TrainingConfig};
use splatstyle_core::{metrics, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyFloatingPointError::new_err(e.to_string()),
        Error::Tensor(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Pinhole camera.
#[pyclass(name = "Camera", from_py_object)]
#[derive(Clone)]
struct PyCamera {
    inner: CameraView,
}

#[pymethods]
impl PyCamera {
    /// Camera at `eye` looking at `target` with focal length `focal` pixels.
    #[new]
    #[pyo3(signature = (focal, width, height, eye, target, up = (0.0, -1.0, 0.0)))]
    fn new(
        focal: f64,
        width: usize,
        height: usize,
        eye: (f64, f64, f64),
        target: (f64, f64, f64),
        up: (f64, f64, f64),
    ) -> PyResult<Self> {
        let v = |t: (f64, f64, f64)| splatstyle_core::nalgebra::Vector3::new(t.0, t.1, t.2);
        let inner = CameraView::look_at(Intrinsics::centered(focal, width, height), v(eye), v(target), v(up)).map_err(to_py)?;
        Ok(PyCamera { inner })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn world_to_camera(&self) -> Vec<Vec<f64>> {
        let m = self.inner.world_to_camera();
        (0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect()
    }

    fn resized(&self, width: usize, height: usize) -> Self {
        PyCamera {
            inner: self.inner.resized(width, height),
        }
    }
}

/// Gaussian splat scene.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: GaussianScene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyScene {
            inner: GaussianScene::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.inner.sh_degree()
    }

    /// Returns `{"width", "height", "rgb", "depth", "alpha"}` with flat
    /// row-major lists (`rgb` is `H*W*3`).
    fn render<'py>(&self, py: Python<'py>, camera: &PyCamera) -> PyResult<Bound<'py, PyDict>> {
        let out = Renderer::default().render_scene(&self.inner, &camera.inner);
        let d = PyDict::new(py);
        d.set_item("width", out.width)?;
        d.set_item("height", out.height)?;
        d.set_item("rgb", out.rgb.clone())?;
        d.set_item("depth", out.depth.clone())?;
        d.set_item("alpha", out.alpha.clone())?;
        Ok(d)
    }

    /// Positions, rotations, scales and opacities are equal.
    fn same_geometry(&self, other: &PyScene) -> bool {
        self.inner.geometry == other.inner.geometry
    }
}

/// Cameras from a COLMAP text model directory or a `transforms.json` file.
#[pyfunction]
fn load_cameras(path: PathBuf) -> PyResult<Vec<PyCamera>> {
    Ok(cameras_io::load_cameras(&path)
        .map_err(to_py)?
        .into_iter()
        .map(|c| PyCamera { inner: c.camera })
        .collect())
}

fn json_value(v: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(b.into());
    }
    if let Ok(i) = v.extract::<i64>() {
        return Ok(i.into());
    }
    if let Ok(f) = v.extract::<f64>() {
        return Ok(f.into());
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(s.into());
    }
    Err(PyValueError::new_err(format!("unsupported option value {v}")))
}

/// Stylizes `scene` with the tiny seeded backbone. Keyword arguments set
/// training options by name (`iterations`, `views`, `lambda`, `lr_dc`, ...).
/// Returns the stylized scene and the per-step total loss.
#[pyfunction]
#[pyo3(signature = (scene, cameras, style, output = None, backbone_seed = 0, **options))]
fn stylize(
    scene: &PyScene,
    cameras: Vec<PyCamera>,
    style: PathBuf,
    output: Option<PathBuf>,
    backbone_seed: u64,
    options: Option<&Bound<'_, PyDict>>,
) -> PyResult<(PyScene, Vec<f64>)> {
    let mut map = serde_json::Map::new();
    if let Some(opts) = options {
        for (k, v) in opts.iter() {
            map.insert(k.extract::<String>()?, json_value(&v)?);
        }
    }
    let config: TrainingConfig =
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let style = RgbImage::load(&style).map_err(to_py)?;
    let backbone = LatentDiffusionBackbone::tiny(backbone_seed).map_err(to_py)?;
    let cams: Vec<CameraView> = cameras.into_iter().map(|c| c.inner).collect();
    let (out, logs) =
        trainer::run(&backbone, scene.inner.clone(), &cams, &style, config, output.as_deref()).map_err(to_py)?;
    Ok((PyScene { inner: out }, logs.iter().map(|l| l.report.total).collect()))
}

/// Per token: subtract the channel mean and scale to unit norm.
#[pyfunction]
fn center_normalize(tokens: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let n = tokens.len();
    let d = tokens.first().map_or(0, Vec::len);
    if tokens.iter().any(|t| t.len() != d) {
        return Err(PyValueError::new_err("tokens differ in length"));
    }
    let flat: Vec<f64> = tokens.into_iter().flatten().collect();
    let t = splatstyle_core::candle_core::Tensor::from_vec(flat, (1, n, d), &splatstyle_core::candle_core::Device::Cpu)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let out = normalize_op(&t)
        .and_then(|o| o.flatten_all()?.to_vec1::<f64>())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(out.chunks(d.max(1)).map(<[f64]>::to_vec).collect())
}

/// Sampling grid of `cam_b`'s pixels in `cam_j` and the visibility mask.
#[pyfunction]
fn compute_grid(cam_b: &PyCamera, cam_j: &PyCamera, depth: Vec<f64>) -> PyResult<(Vec<(f64, f64)>, Vec<bool>)> {
    let (grid, raw) = grid_op(&cam_b.inner, &cam_j.inner, &depth).map_err(to_py)?;
    let vis = compute_visibility(&grid, &raw).map_err(to_py)?;
    Ok((grid.coords.iter().map(|c| (c[0], c[1])).collect(), vis.data))
}

/// CLIP-style scores from embeddings: `clip_s`, `clip_c`, `clip_cons`, `clip_f`.
#[pyfunction]
fn clip_scores<'py>(
    py: Python<'py>,
    stylized: Vec<Vec<f64>>,
    content: Vec<Vec<f64>>,
    style: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = metrics::clip_scores(&stylized, &content, &style).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("clip_s", s.clip_s)?;
    d.set_item("clip_c", s.clip_c)?;
    d.set_item("clip_cons", s.clip_cons)?;
    d.set_item("clip_f", s.clip_f)?;
    Ok(d)
}

/// Fréchet distance between Gaussian fits of two embedding sets.
#[pyfunction]
fn fid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(metrics::fid(&a, &b).map_err(to_py)?.value)
}

#[pymodule]
#[pyo3(name = "splatstyle")]
fn splatstyle_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(load_cameras, m)?)?;
    m.add_function(wrap_pyfunction!(stylize, m)?)?;
    m.add_function(wrap_pyfunction!(center_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(compute_grid, m)?)?;
    m.add_function(wrap_pyfunction!(clip_scores, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add("__all__", PyList::new(m.py(), ["Camera", "Scene", "load_cameras", "stylize", "center_normalize", "compute_grid", "clip_scores", "fid"])?)?;
    Ok(())
}

//! Command-line driver: `stylize`, `evaluate` and `render`.
//!
//! Settings come from an optional TOML file, then flat overrides of the form
//! `--section.key=value`, then the dedicated flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, LatentDiffusionBackbone, TimestepStrategy};
use crate::error::{Error, Result};
use crate::geometry::GeometryGuidance;
use crate::imageio::{depth_range, save_depth_heatmap, RgbImage};
use crate::metrics::{self, Extractors, MetricsConfig, Sequence};
use crate::renderer::cameras_io::{load_cameras, NamedCamera};
use crate::renderer::{CameraView, RenderOutput, RenderSettings, Renderer};
use crate::scene::GaussianScene;
use crate::trainer::{latest_checkpoint, StyleSignalMode, Stylizer, TrainingConfig, BACKGROUND_ALPHA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub background: [f64; 3],
    /// Number of cameras rendered as previews after stylization.
    pub preview_views: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            background: [0.0; 3],
            preview_views: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Pretrained scene (`.ply`).
    pub scene: PathBuf,
    /// COLMAP text model directory or `transforms.json`.
    pub cameras: PathBuf,
    pub style: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub render: RenderConfig,
}

impl RunConfig {
    /// Checks every referenced input exists and the training block is valid.
    pub fn validate(&self) -> Result<()> {
        let need = |p: &Path, what: &str, file: bool| -> Result<()> {
            let ok = if file { p.is_file() } else { p.exists() };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} not found: {}", p.display())))
            }
        };
        need(&self.scene, "scene", true)?;
        need(&self.cameras, "cameras", false)?;
        need(&self.style, "style image", true)?;
        self.training.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Plain self-attention in the rendered branch.
    NoGga,
    /// Keep every token in the loss.
    NoMg,
    /// Raw attention outputs in the loss.
    NoNorm,
    /// The style image's own attention output as the target.
    DirectStyle,
}

impl Ablation {
    pub fn apply(self, t: &mut TrainingConfig) {
        match self {
            Ablation::NoGga => t.gga = false,
            Ablation::NoMg => t.geometry_mask = false,
            Ablation::NoNorm => t.normalize = false,
            Ablation::DirectStyle => t.style_signal = StyleSignalMode::Direct,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "splatstyle", version, about = "Style transfer for Gaussian splat scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct SettingsArgs {
    /// TOML run configuration; relative paths resolve against its folder.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    #[arg(long)]
    pub style: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize the scene colors toward the style image.
    Stylize {
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// `fixed:T`, `random` or `decreasing`.
        #[arg(long)]
        timestep: Option<TimestepStrategy>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compute the metric report for a stylized scene or frame folder.
    Evaluate {
        #[command(flatten)]
        settings: SettingsArgs,
        /// Stylized `.ply` or folder of PNG frames.
        #[arg(long)]
        stylized: PathBuf,
        /// Reference `.ply` or PNG folder; defaults to the configured scene.
        #[arg(long)]
        content: Option<PathBuf>,
        /// Sequence name in the report.
        #[arg(long, default_value = "sequence")]
        name: String,
    },
    /// Render a scene along a camera path.
    Render {
        #[command(flatten)]
        settings: SettingsArgs,
        /// Output frame size; defaults to the camera size.
        #[arg(long, num_args = 2, value_names = ["W", "H"])]
        size: Option<Vec<usize>>,
        /// Also dump grids, visibility and geometry masks for the first N views.
        #[arg(long)]
        guidance_views: Option<usize>,
    },
}

/// Splits `--a.b=value` overrides from the arguments clap sees.
pub fn split_overrides(args: impl IntoIterator<Item = OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(s) = a.to_str().and_then(|s| s.strip_prefix("--")) {
            if let Some((key, value)) = s.split_once('=') {
                if key.contains('.') {
                    overrides.push((key.to_string(), value.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn parse_value(raw: &str) -> toml::Value {
    // Parse as a TOML literal when possible, else keep the text as a string.
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

/// Builds the run configuration from the file, overrides and flags.
pub fn load_run_config(settings: &SettingsArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    let (mut table, base) = match &settings.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            (table, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for (key, raw) in overrides {
        set_path(&mut table, key, parse_value(raw))?;
    }
    let flags = [
        ("scene", &settings.scene),
        ("cameras", &settings.cameras),
        ("style", &settings.style),
        ("output", &settings.output),
    ];
    let mut from_flags = Vec::new();
    for (key, value) in flags {
        if let Some(p) = value {
            table.insert(key.into(), toml::Value::String(p.display().to_string()));
            from_flags.push(key);
        }
    }
    let mut config: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        let origin = settings
            .config
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "command line".into());
        Error::Config(format!("{origin}: {}", e.message()))
    })?;
    if !base.as_os_str().is_empty() {
        for (key, p) in [
            ("scene", &mut config.scene),
            ("cameras", &mut config.cameras),
            ("style", &mut config.style),
            ("output", &mut config.output),
        ] {
            if !from_flags.contains(&key) {
                resolve(&base, p);
            }
        }
        for p in [config.backbone.weights.as_mut(), config.metrics.weights.as_mut()]
            .into_iter()
            .flatten()
        {
            resolve(&base, p);
        }
    }
    if let Some(seed) = settings.seed {
        config.training.seed = seed;
    }
    Ok(config)
}

/// Process exit code for an error: 2 for configuration and input problems,
/// 3 for numerical failure, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Tensor(_) => 1,
        _ => 2,
    }
}

fn cameras_of(path: &Path) -> Result<Vec<CameraView>> {
    let cams: Vec<NamedCamera> = load_cameras(path)?;
    if cams.is_empty() {
        return Err(Error::Config(format!("no cameras in {}", path.display())));
    }
    Ok(cams.into_iter().map(|c| c.camera).collect())
}

fn renderer(config: &RenderConfig) -> Renderer {
    Renderer::new(RenderSettings {
        background: config.background,
        ..RenderSettings::default()
    })
}

fn to_image(r: &RenderOutput) -> Result<RgbImage> {
    RgbImage::new(r.width, r.height, r.rgb.clone())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

pub fn cmd_stylize(config: &RunConfig, resume: bool) -> Result<()> {
    config.validate()?;
    log::info!("seed {}", config.training.seed);
    let out = &config.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = toml::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    let cfg_path = out.join("run_config.toml");
    std::fs::write(&cfg_path, resolved).map_err(|e| Error::io(&cfg_path, e))?;

    let scene = GaussianScene::load(&config.scene)?;
    let cameras = cameras_of(&config.cameras)?;
    let style = RgbImage::load(&config.style)?;
    let backbone = LatentDiffusionBackbone::from_config(&config.backbone)?;
    let mut stylizer = Stylizer::new(&backbone, scene, &cameras, &style, config.training.clone())?;
    if resume {
        match latest_checkpoint(out) {
            Some(step) => {
                log::info!("resuming from step {step}");
                stylizer.resume(out, step)?;
            }
            None => log::warn!("no checkpoint in {}, starting fresh", out.display()),
        }
    }
    stylizer.run(Some(out))?;
    let scene = stylizer.into_scene();
    scene.save(out.join("stylized.ply"))?;
    let r = renderer(&config.render);
    let preview = out.join("preview");
    for (i, cam) in cameras.iter().take(config.render.preview_views).enumerate() {
        to_image(&r.render_scene(&scene, cam))?.save_png(&preview.join(format!("view_{i:03}.png")))?;
    }
    log::info!("wrote {}", out.join("stylized.ply").display());
    Ok(())
}

/// Frames plus per-frame depths (background zeroed).
fn render_path(scene: &GaussianScene, cameras: &[CameraView], r: &Renderer) -> (Vec<RgbImage>, Vec<Vec<f64>>) {
    let outs = r.render_batch(&scene.geometry, &scene.colors, cameras);
    let frames = outs.iter().map(|o| to_image(o).expect("renderer output size")).collect();
    let depths = outs.iter().map(|o| o.masked_depth(BACKGROUND_ALPHA)).collect();
    (frames, depths)
}

fn load_frames(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG frames in {}", dir.display())));
    }
    paths.iter().map(|p| RgbImage::load(p)).collect()
}

pub fn cmd_evaluate(config: &RunConfig, stylized: &Path, content: Option<&Path>, name: &str) -> Result<()> {
    let content = content.unwrap_or(&config.scene);
    for p in [stylized, content, config.style.as_path()] {
        if !p.exists() {
            return Err(Error::Config(format!("input not found: {}", p.display())));
        }
    }
    let r = renderer(&config.render);
    let cameras = if config.cameras.exists() {
        Some(cameras_of(&config.cameras)?)
    } else {
        None
    };
    let need_cams = || {
        cameras
            .as_deref()
            .ok_or_else(|| Error::Config(format!("cameras not found: {}", config.cameras.display())))
    };
    let mut depths = None;
    let mut load = |p: &Path| -> Result<Vec<RgbImage>> {
        if p.is_dir() {
            load_frames(p)
        } else {
            let (frames, d) = render_path(&GaussianScene::load(p)?, need_cams()?, &r);
            depths.get_or_insert(d);
            Ok(frames)
        }
    };
    let stylized_frames = load(stylized)?;
    let content_frames = load(content)?;
    if stylized_frames.len() != content_frames.len() {
        return Err(Error::Config(format!(
            "{} stylized frames but {} content frames",
            stylized_frames.len(),
            content_frames.len()
        )));
    }
    let style = RgbImage::load(&config.style)?;
    let extractors = Extractors::from_config(&config.metrics)?;
    for n in &extractors.notes {
        log::warn!("{n}");
    }
    let geometry = match (&depths, &cameras) {
        (Some(d), Some(c)) if d.len() == stylized_frames.len() => Some((d.as_slice(), c.as_slice())),
        _ => None,
    };
    let seq = Sequence {
        name: name.to_string(),
        stylized: &stylized_frames,
        content: &content_frames,
        geometry,
    };
    let report = metrics::evaluate_sequence(&seq, &style, &extractors, &config.metrics)?;
    let reports = vec![report.clone(), metrics::MetricReport::aggregate(&[report])];
    let out = &config.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    metrics::write_json(&reports, &out.join("metrics.json"))?;
    metrics::write_csv(&reports, &out.join("metrics.csv"))?;
    log::info!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct DepthStats {
    frame: usize,
    min: Option<f64>,
    max: Option<f64>,
    coverage: f64,
}

pub fn cmd_render(config: &RunConfig, size: Option<(usize, usize)>, guidance_views: Option<usize>) -> Result<()> {
    if !config.scene.is_file() {
        return Err(Error::Config(format!("scene not found: {}", config.scene.display())));
    }
    if !config.cameras.exists() {
        return Err(Error::Config(format!("cameras not found: {}", config.cameras.display())));
    }
    let scene = GaussianScene::load(&config.scene)?;
    let mut cameras = cameras_of(&config.cameras)?;
    if let Some((w, h)) = size {
        cameras = cameras.iter().map(|c| c.resized(w, h)).collect();
    }
    let (frames, depths) = render_path(&scene, &cameras, &renderer(&config.render));
    let out = &config.output;
    let frames_dir = out.join("frames");
    let depth_dir = out.join("depth");
    std::fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    let mut stats = Vec::new();
    for (i, (f, d)) in frames.iter().zip(&depths).enumerate() {
        f.save_png(&frames_dir.join(format!("frame_{i:04}.png")))?;
        save_depth_heatmap(d, f.width, f.height, &depth_dir.join(format!("depth_{i:04}.png")))?;
        let range = depth_range(d);
        stats.push(DepthStats {
            frame: i,
            min: range.map(|r| r.0),
            max: range.map(|r| r.1),
            coverage: d.iter().filter(|&&v| v > 0.0).count() as f64 / d.len() as f64,
        });
    }
    write_json(&stats, &out.join("depth_stats.json"))?;
    if let Some(n) = guidance_views {
        let n = n.min(cameras.len());
        if n >= 1 {
            let g = GeometryGuidance::build(&cameras[..n], &depths[..n])?;
            g.dump_png(&out.join("guidance"))?;
        }
    }
    log::info!("rendered {} frames to {}", frames.len(), frames_dir.display());
    Ok(())
}

/// Parses the arguments (overrides included) and runs the command.
pub fn run(args: impl IntoIterator<Item = OsString>) -> Result<()> {
    let (rest, overrides) = split_overrides(args);
    let cli = Cli::try_parse_from(rest).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            e.exit();
        }
        Error::Config(e.to_string())
    })?;
    dispatch(cli.command, &overrides)
}

/// Configuration a `stylize` invocation would run with.
pub fn stylize_config(
    settings: &SettingsArgs,
    overrides: &[(String, String)],
    ablate: &[Ablation],
    timestep: Option<TimestepStrategy>,
) -> Result<RunConfig> {
    let mut config = load_run_config(settings, overrides)?;
    for a in ablate {
        a.apply(&mut config.training);
    }
    if let Some(t) = timestep {
        config.training.timestep = t;
    }
    Ok(config)
}

fn dispatch(command: Command, overrides: &[(String, String)]) -> Result<()> {
    match command {
        Command::Stylize {
            settings,
            ablate,
            timestep,
            resume,
        } => cmd_stylize(&stylize_config(&settings, overrides, &ablate, timestep)?, resume),
        Command::Evaluate {
            settings,
            stylized,
            content,
            name,
        } => {
            let config = lenient_config(&settings, overrides)?;
            cmd_evaluate(&config, &stylized, content.as_deref(), &name)
        }
        Command::Render {
            settings,
            size,
            guidance_views,
        } => {
            let config = lenient_config(&settings, overrides)?;
            let size = size.map(|v| (v[0], v[1]));
            cmd_render(&config, size, guidance_views)
        }
    }
}

/// `evaluate` and `render` do not need every path; missing ones default to
/// empty so only the inputs a command uses are checked.
fn lenient_config(settings: &SettingsArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut o = overrides.to_vec();
    for key in ["scene", "cameras", "style", "output"] {
        let given = overrides.iter().any(|(k, _)| k == key);
        let in_flags = match key {
            "scene" => settings.scene.is_some(),
            "cameras" => settings.cameras.is_some(),
            "style" => settings.style.is_some(),
            _ => settings.output.is_some(),
        };
        let in_file = settings
            .config
            .as_ref()
            .and_then(|p| std::fs::read_to_string(p).ok())
            .and_then(|t| t.parse::<toml::Table>().ok())
            .is_some_and(|t| t.contains_key(key));
        if !given && !in_flags && !in_file {
            o.insert(0, (key.to_string(), "\"\"".into()));
        }
    }
    load_run_config(settings, &o)
}

//! The stylization loop: render, build geometry guidance, extract attention
//! features, evaluate the masked loss, back-propagate to SH colors and take
//! an Adam step.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{center_normalize, style_signal, GgaGuidance};
use crate::backbone::{
    build_style_bank, images_to_tensor, timestep_schedule, AttentionMode, AttentionState, FeatureBackbone, StyleBank,
    TimestepStrategy,
};
use crate::error::{Error, Result};
use crate::geometry::{resample_mask, GeometryGuidance};
use crate::imageio::RgbImage;
use crate::losses::{mask_tensor, total_loss, LayerTerms, LossReport};
use crate::renderer::{CameraView, ColorGradient, RenderOutput, Renderer};
use crate::scene::{partition_parameters, GaussianScene, ParameterPartition, ShColors};

/// Pixels with lower accumulated alpha count as background.
pub const BACKGROUND_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSignalMode {
    /// Rendered-view queries attend to the style image's keys and values.
    KvInjection,
    /// The style image's own attention output (content-leaking ablation).
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// Queries of the content-image forward.
    Content,
    /// Queries of the rendered-image forward (detached).
    Rendered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub views: usize,
    pub timestep: TimestepStrategy,
    pub lambda: f64,
    pub lr_dc: f64,
    pub lr_rest: f64,
    pub seed: u64,
    pub gga: bool,
    pub geometry_mask: bool,
    pub normalize: bool,
    pub style_signal: StyleSignalMode,
    pub style_query_source: QuerySource,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            iterations: 1000,
            views: 4,
            timestep: TimestepStrategy::Fixed(1),
            lambda: 0.1,
            lr_dc: 2.5e-3,
            lr_rest: 1.25e-4,
            seed: 0,
            gga: true,
            geometry_mask: true,
            normalize: true,
            style_signal: StyleSignalMode::KvInjection,
            style_query_source: QuerySource::Content,
            checkpoint_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::Config("views per batch must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.lr_dc >= 0.0 && self.lr_rest >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if let TimestepStrategy::Fixed(0) = self.timestep {
            return Err(Error::Config("fixed timestep must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws `n` camera indices: without replacement when the pool is large
/// enough, with replacement otherwise.
pub fn sample_cameras<R: Rng + ?Sized>(pool: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if pool == 0 {
        return Err(Error::InvalidArgument("camera pool is empty".into()));
    }
    if pool >= n {
        Ok(sample(rng, pool, n).into_vec())
    } else {
        Ok((0..n).map(|_| rng.gen_range(0..pool)).collect())
    }
}

/// Adam over SH colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m_dc: Vec<[f64; 3]>,
    v_dc: Vec<[f64; 3]>,
    m_rest: Vec<f64>,
    v_rest: Vec<f64>,
}

impl Adam {
    pub fn new(colors: &ShColors) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step: 0,
            m_dc: vec![[0.0; 3]; colors.len()],
            v_dc: vec![[0.0; 3]; colors.len()],
            m_rest: vec![0.0; colors.rest.len()],
            v_rest: vec![0.0; colors.rest.len()],
        }
    }

    pub fn update(&mut self, colors: &mut ShColors, grad: &ColorGradient, lr_dc: f64, lr_rest: f64) -> Result<()> {
        if grad.dc.len() != colors.dc.len() || grad.rest.len() != colors.rest.len() || self.m_dc.len() != colors.dc.len() {
            return Err(Error::Shape("gradient does not match the color parameters".into()));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let apply = |p: &mut f32, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let delta = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            *p = (*p as f64 - delta) as f32;
        };
        for i in 0..colors.dc.len() {
            for c in 0..3 {
                apply(&mut colors.dc[i][c], grad.dc[i][c], &mut self.m_dc[i][c], &mut self.v_dc[i][c], lr_dc);
            }
        }
        for i in 0..colors.rest.len() {
            apply(&mut colors.rest[i], grad.rest[i], &mut self.m_rest[i], &mut self.v_rest[i], lr_rest);
        }
        Ok(())
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

/// Result of one loss evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    pub gradient: ColorGradient,
    pub timestep: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub timestep: u32,
    pub cameras: Vec<usize>,
    pub report: LossReport,
}

pub struct Stylizer<'a> {
    backbone: &'a dyn FeatureBackbone,
    renderer: Renderer,
    config: TrainingConfig,
    original: ShColors,
    partition: ParameterPartition,
    cameras: Vec<CameraView>,
    style: Tensor,
    bank: StyleBank,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
    history: Vec<StepLog>,
}

impl<'a> Stylizer<'a> {
    /// `cameras` are resampled to the backbone resolution; `style` is
    /// resized to it as well.
    pub fn new(
        backbone: &'a dyn FeatureBackbone,
        scene: GaussianScene,
        cameras: &[CameraView],
        style: &RgbImage,
        config: TrainingConfig,
    ) -> Result<Self> {
        config.validate()?;
        if cameras.is_empty() {
            return Err(Error::InvalidArgument("no training cameras".into()));
        }
        let s = backbone.image_size();
        let cameras: Vec<CameraView> = cameras.iter().map(|c| c.resized(s, s)).collect();
        let style = style.resized(s, s);
        let style_t = images_to_tensor(&[&style.data], s, s, backbone.dtype(), backbone.device())?;
        let bank_t = match config.timestep {
            TimestepStrategy::Fixed(t) => t,
            _ => 1,
        };
        let bank = build_style_bank(backbone, &style_t, bank_t)?;
        let original = scene.colors.clone();
        let partition = partition_parameters(scene);
        let adam = Adam::new(partition.trainable());
        Ok(Stylizer {
            backbone,
            renderer: Renderer::default(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            original,
            partition,
            cameras,
            style: style_t,
            bank,
            adam,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn cameras(&self) -> &[CameraView] {
        &self.cameras
    }

    pub fn partition(&self) -> &ParameterPartition {
        &self.partition
    }

    pub fn history(&self) -> &[StepLog] {
        &self.history
    }

    pub fn style_bank(&self) -> &StyleBank {
        &self.bank
    }

    pub fn scene(&self) -> GaussianScene {
        self.partition.to_scene()
    }

    pub fn into_scene(self) -> GaussianScene {
        self.partition.into_scene()
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            adam: self.adam.clone(),
            rng: self.rng.clone(),
        }
    }

    /// Restores colors and optimizer/rng state.
    pub fn restore(&mut self, colors: ShColors, state: TrainerState) -> Result<()> {
        if colors.len() != self.partition.trainable().len() || colors.degree != self.partition.trainable().degree {
            return Err(Error::Shape("checkpoint colors do not match the scene".into()));
        }
        *self.partition.trainable_mut() = colors;
        self.adam = state.adam;
        self.rng = state.rng;
        self.step = state.step;
        Ok(())
    }

    /// Loss and color gradient for `colors` at the given cameras, without
    /// changing any state.
    pub fn evaluate(&self, colors: &ShColors, camera_indices: &[usize], timestep: u32) -> Result<Evaluation> {
        let bb = self.backbone;
        let geometry = self.partition.frozen();
        let cams: Vec<CameraView> = camera_indices
            .iter()
            .map(|&i| {
                self.cameras
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("camera index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        let rendered = self.renderer.render_batch(geometry, colors, &cams);
        let content = self.renderer.render_batch(geometry, &self.original, &cams);
        let s = bb.image_size();
        let (dtype, dev) = (bb.dtype(), bb.device());

        let depths: Vec<Vec<f64>> = rendered.iter().map(|r| r.masked_depth(BACKGROUND_ALPHA)).collect();
        let mut guidance = GeometryGuidance::build(&cams, &depths)?;
        if !self.config.geometry_mask {
            guidance = guidance.without_geometry_mask();
        }

        let content_imgs: Vec<&[f64]> = content.iter().map(|r| r.rgb.as_slice()).collect();
        let content_t = images_to_tensor(&content_imgs, s, s, dtype, dev)?;
        let z_c = bb.encode(&content_t)?;
        let content_state = bb.extract_features(&z_c, timestep, &AttentionMode::Plain)?.detached();

        let rendered_imgs: Vec<&[f64]> = rendered.iter().map(|r| r.rgb.as_slice()).collect();
        let pixels = Var::from_tensor(&images_to_tensor(&rendered_imgs, s, s, dtype, dev)?)?;
        let z_n = bb.encode(pixels.as_tensor())?;
        let gga = if self.config.gga {
            Some(GgaGuidance::new(&guidance, &bb.site_resolutions(), dtype, dev)?)
        } else {
            None
        };
        let mode = match &gga {
            Some(g) => AttentionMode::GeometryGuided(g),
            None => AttentionMode::Plain,
        };
        let rendered_state = bb.extract_features(&z_n, timestep, &mode)?;

        // the cached bank serves fixed schedules; other timesteps need a
        // fresh style forward
        let rebuilt;
        let bank = if self.bank.timestep == timestep {
            &self.bank
        } else {
            rebuilt = build_style_bank(bb, &self.style, timestep)?;
            &rebuilt
        };
        let terms = self.layer_terms(bank, &rendered_state, &content_state, &guidance)?;
        let (loss, report) = total_loss(&terms, self.config.lambda)?;
        if !report.is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                diagnostics: diagnostics(&report, &rendered_state),
            });
        }
        let grads = loss.backward()?;
        let grad_pixels = grads
            .get(pixels.as_tensor())
            .cloned()
            .unwrap_or(pixels.as_tensor().zeros_like()?);
        let gradient = colors_gradient(&grad_pixels, &rendered, colors)?;
        if !gradient.is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                diagnostics: format!("non-finite color gradient; {}", diagnostics(&report, &rendered_state)),
            });
        }
        Ok(Evaluation {
            report,
            gradient,
            timestep,
        })
    }

    fn layer_terms(
        &self,
        bank: &StyleBank,
        rendered: &AttentionState,
        content: &AttentionState,
        guidance: &GeometryGuidance,
    ) -> Result<Vec<LayerTerms>> {
        let norm = |t: &Tensor| -> Result<Tensor> {
            Ok(if self.config.normalize {
                center_normalize(t)?
            } else {
                t.clone()
            })
        };
        let views = guidance.views;
        let mut terms = Vec::with_capacity(rendered.layers.len());
        for (i, (r, c)) in rendered.layers.iter().zip(&content.layers).enumerate() {
            let style_layer = bank.layer(i, &r.site)?;
            let style_target = match self.config.style_signal {
                StyleSignalMode::KvInjection => {
                    let q = match self.config.style_query_source {
                        QuerySource::Content => &c.queries,
                        QuerySource::Rendered => &r.queries,
                    };
                    style_signal(q, &style_layer.keys, &style_layer.values, r.site.heads, self.config.normalize)?
                }
                StyleSignalMode::Direct => {
                    let (_, t, d) = style_layer.output.dims3()?;
                    norm(&style_layer.output.broadcast_as((views, t, d))?.contiguous()?)?.detach()
                }
            };
            let masks: Vec<_> = guidance
                .geometry_mask
                .masks
                .iter()
                .map(|m| resample_mask(m, (r.site.height, r.site.width)))
                .collect();
            terms.push(LayerTerms {
                name: r.site.name.clone(),
                rendered: norm(&r.output)?,
                style_target,
                content_target: norm(&c.output)?.detach(),
                mask: mask_tensor(&masks, r.output.dtype(), r.output.device())?,
            });
        }
        Ok(terms)
    }

    /// One optimization step.
    pub fn training_step(&mut self) -> Result<StepLog> {
        let s = self.step + 1;
        let t = timestep_schedule(
            self.config.timestep,
            s,
            self.config.iterations,
            self.backbone.num_train_timesteps(),
            &mut self.rng,
        );
        let idx = sample_cameras(self.cameras.len(), self.config.views, &mut self.rng)?;
        let eval = self.evaluate(self.partition.trainable(), &idx, t)?;
        self.adam.update(
            self.partition.trainable_mut(),
            &eval.gradient,
            self.config.lr_dc,
            self.config.lr_rest,
        )?;
        self.step = s;
        let log = StepLog {
            step: s,
            timestep: t,
            cameras: idx,
            report: eval.report,
        };
        self.history.push(log.clone());
        Ok(log)
    }

    /// Runs until `config.iterations` steps are done. With an output
    /// directory, writes loss logs and periodic checkpoints there.
    pub fn run(&mut self, output: Option<&Path>) -> Result<()> {
        let mut logs = match output {
            Some(dir) => Some(LossLog::open(dir, self.step > 0)?),
            None => None,
        };
        while self.step < self.config.iterations {
            let log = self.training_step()?;
            log::info!(
                "step {} t={} total={:.6e} style={:.6e} content={:.6e} mask={:.3}",
                log.step,
                log.timestep,
                log.report.total,
                log.report.style,
                log.report.content,
                log.report.mask_fill_rate
            );
            if let Some(l) = logs.as_mut() {
                l.append(&log)?;
            }
            if let Some(dir) = output {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        if let Some(l) = logs.as_mut() {
            l.flush()?;
        }
        Ok(())
    }

    /// Writes `ckpt_{step}.ply` and `state_{step}.json`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ply = dir.join(format!("ckpt_{}.ply", self.step));
        let state = dir.join(format!("state_{}.json", self.step));
        self.scene().save(&ply)?;
        let file = File::create(&state).map_err(|e| Error::io(&state, e))?;
        serde_json::to_writer(BufWriter::new(file), &self.state())?;
        Ok((ply, state))
    }

    /// Restores the checkpoint written at `step` in `dir`.
    pub fn resume(&mut self, dir: &Path, step: usize) -> Result<()> {
        let ply = dir.join(format!("ckpt_{step}.ply"));
        let state_path = dir.join(format!("state_{step}.json"));
        let scene = GaussianScene::load(&ply)?;
        if scene.geometry != *self.partition.frozen() {
            return Err(Error::Format(format!("{} has different geometry", ply.display())));
        }
        let file = File::open(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: TrainerState = serde_json::from_reader(std::io::BufReader::new(file))?;
        self.restore(scene.colors, state)
    }
}

/// Latest checkpoint step found in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<usize> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("state_")?.strip_suffix(".json")?.parse().ok()
        })
        .max()
}

fn diagnostics(report: &LossReport, state: &AttentionState) -> String {
    let norms: Vec<String> = state
        .layers
        .iter()
        .map(|l| {
            let n = l
                .output
                .sqr()
                .and_then(|t| t.sum_all())
                .and_then(|t| t.to_dtype(candle_core::DType::F64))
                .and_then(|t| t.to_scalar::<f64>())
                .map(f64::sqrt)
                .unwrap_or(f64::NAN);
            format!("{}: |A|={n:.3e}", l.site.name)
        })
        .collect();
    format!(
        "style per layer {:?}, content per layer {:?}, mask fill rate {:.4}, attention norms [{}]",
        report.style_per_layer,
        report.content_per_layer,
        report.mask_fill_rate,
        norms.join(", ")
    )
}

/// Chains the pixel gradient `(n, 3, h, w)` through each view's render.
fn colors_gradient(grad_pixels: &Tensor, renders: &[RenderOutput], colors: &ShColors) -> Result<ColorGradient> {
    let mut total = ColorGradient::zeros_like(colors);
    for (i, r) in renders.iter().enumerate() {
        let g = crate::backbone::tensor_to_image(grad_pixels, i)?;
        total.accumulate(&r.color_gradient(&g));
    }
    Ok(total)
}

struct LossLog {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
}

impl LossLog {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<(File, bool)> {
            let p = dir.join(name);
            let existed = p.is_file();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok((f, existed && append))
        };
        let (csv, csv_existed) = open("losses.csv")?;
        let (jsonl, _) = open("log.jsonl")?;
        let mut csv = BufWriter::new(csv);
        if !csv_existed {
            writeln!(csv, "step,timestep,total,style,content,lambda,mask_fill_rate").map_err(|e| Error::io(dir, e))?;
        }
        Ok(LossLog {
            csv,
            jsonl: BufWriter::new(jsonl),
        })
    }

    fn append(&mut self, log: &StepLog) -> Result<()> {
        let r = &log.report;
        writeln!(
            self.csv,
            "{},{},{},{},{},{},{}",
            log.step, log.timestep, r.total, r.style, r.content, r.lambda, r.mask_fill_rate
        )
        .map_err(|e| Error::io("losses.csv", e))?;
        serde_json::to_writer(&mut self.jsonl, log)?;
        writeln!(self.jsonl).map_err(|e| Error::io("log.jsonl", e))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.csv.flush().map_err(|e| Error::io("losses.csv", e))?;
        self.jsonl.flush().map_err(|e| Error::io("log.jsonl", e))
    }
}

/// Stylizes `scene` and returns the result with its per-step log.
pub fn run(
    backbone: &dyn FeatureBackbone,
    scene: GaussianScene,
    cameras: &[CameraView],
    style: &RgbImage,
    config: TrainingConfig,
    output: Option<&Path>,
) -> Result<(GaussianScene, Vec<StepLog>)> {
    let mut stylizer = Stylizer::new(backbone, scene, cameras, style, config)?;
    stylizer.run(output)?;
    let history = stylizer.history().to_vec();
    Ok((stylizer.into_scene(), history))
}

//! Frozen latent-diffusion feature backbone: image encoder plus denoising
//! UNet whose self-attention layers are captured on every forward pass.

pub mod nn;
pub mod unet;
pub mod vae;
pub mod weights;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::GgaGuidance;
use crate::error::{Error, Result};
use unet::{Unet, UnetConfig};
use vae::{VaeConfig, VaeEncoder};
use weights::WeightRegistry;

/// Environment variable naming the directory that holds pretrained weights.
pub const WEIGHTS_DIR_ENV: &str = "SPLATSTYLE_WEIGHTS_DIR";

/// One self-attention module of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSite {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
}

impl AttentionSite {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Tensors of one site, each `(views, tokens, channels)`. `output` is the
/// attention result before the output projection.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub site: AttentionSite,
    pub queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionState {
    pub timestep: u32,
    pub layers: Vec<LayerCapture>,
}

impl AttentionState {
    /// Detaches every captured tensor from the autograd graph.
    pub fn detached(&self) -> AttentionState {
        AttentionState {
            timestep: self.timestep,
            layers: self
                .layers
                .iter()
                .map(|l| LayerCapture {
                    site: l.site.clone(),
                    queries: l.queries.detach(),
                    keys: l.keys.detach(),
                    values: l.values.detach(),
                    output: l.output.detach(),
                })
                .collect(),
        }
    }
}

pub enum AttentionMode<'a> {
    Plain,
    GeometryGuided(&'a GgaGuidance),
}

/// Per-call capture storage.
#[derive(Debug, Default)]
pub struct CaptureBuffer {
    pub layers: Vec<LayerCapture>,
}

/// Number of forward passes by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardCounts {
    pub encode: usize,
    pub plain: usize,
    pub guided: usize,
}

/// Encoder plus denoiser with self-attention capture. Weights are never
/// updated.
pub trait FeatureBackbone: Send + Sync {
    /// Native square image resolution.
    fn image_size(&self) -> usize;
    /// `(channels, height, width)` of one latent.
    fn latent_shape(&self) -> (usize, usize, usize);
    fn sites(&self) -> &[AttentionSite];
    fn num_train_timesteps(&self) -> u32;
    fn device(&self) -> &Device;
    fn dtype(&self) -> DType;
    /// `(n, 3, s, s)` images in `[0, 1]` to `(n, c, h, w)` latents.
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn extract_features(&self, latents: &Tensor, timestep: u32, mode: &AttentionMode<'_>) -> Result<AttentionState>;
    fn weights_checksum(&self) -> Result<String>;
    fn forward_counts(&self) -> ForwardCounts;

    /// Distinct site resolutions in forward order.
    fn site_resolutions(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for s in self.sites() {
            if !out.contains(&(s.height, s.width)) {
                out.push((s.height, s.width));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Small randomly initialized network with the production layout.
    Tiny,
    /// Stable Diffusion 1.x layout; requires pretrained weights.
    Sd15,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Seed for the random weights of the tiny backbone.
    pub seed: u64,
    /// Directory with `unet.safetensors`, `vae.safetensors` and
    /// `empty_prompt.safetensors`. Falls back to the weights-directory
    /// environment variable.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Tiny,
            seed: 0,
            weights: None,
        }
    }
}

impl BackboneConfig {
    pub fn tiny(seed: u64) -> Self {
        BackboneConfig {
            kind: BackboneKind::Tiny,
            seed,
            weights: None,
        }
    }
}

/// Encoder and UNet with a fixed empty-prompt conditioning.
pub struct LatentDiffusionBackbone {
    image_size: usize,
    vae: VaeEncoder,
    unet: Unet,
    context: Tensor,
    num_train_timesteps: u32,
    registries: Vec<WeightRegistry>,
    device: Device,
    dtype: DType,
    encode_calls: AtomicUsize,
    plain_calls: AtomicUsize,
    guided_calls: AtomicUsize,
}

impl std::fmt::Debug for LatentDiffusionBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatentDiffusionBackbone")
            .field("image_size", &self.image_size)
            .field("sites", &self.unet.sites().len())
            .finish()
    }
}

impl LatentDiffusionBackbone {
    /// Tiny test backbone: 32×32 images, 4×4×4 latents, two self-attention
    /// sites of width 16.
    pub fn tiny(seed: u64) -> Result<Self> {
        let dev = Device::Cpu;
        let dtype = DType::F64;
        let (vb_vae, reg_vae) = weights::seeded_var_builder(seed, dtype, &dev);
        let (vb_unet, reg_unet) = weights::seeded_var_builder(seed.wrapping_add(1), dtype, &dev);
        let (vb_ctx, reg_ctx) = weights::seeded_var_builder(seed.wrapping_add(2), dtype, &dev);
        let vae_cfg = VaeConfig::tiny();
        let unet_cfg = UnetConfig::tiny();
        let context = vb_ctx.get_with_hints(
            (1, 4, unet_cfg.cross_attention_dim),
            "context",
            candle_nn::Init::Randn { mean: 0.0, stdev: 1.0 },
        )?;
        Self::assemble(32, &vae_cfg, &unet_cfg, vb_vae, vb_unet, context, vec![reg_vae, reg_unet, reg_ctx], dev, dtype)
    }

    /// Pretrained SD 1.x weights from `dir`.
    pub fn sd15(dir: &Path, device: Device, dtype: DType) -> Result<Self> {
        let file = |name: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::Io {
                    path: p,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "pretrained weight file not found"),
                })
            }
        };
        let (vb_vae, reg_vae) = weights::safetensors_var_builder(&file("vae.safetensors")?, dtype, &device)?;
        let (vb_unet, reg_unet) = weights::safetensors_var_builder(&file("unet.safetensors")?, dtype, &device)?;
        let (vb_ctx, reg_ctx) = weights::safetensors_var_builder(&file("empty_prompt.safetensors")?, dtype, &device)?;
        let unet_cfg = UnetConfig::sd15();
        let context = vb_ctx.get((1, 77, unet_cfg.cross_attention_dim), "context")?;
        Self::assemble(
            512,
            &VaeConfig::sd15(),
            &unet_cfg,
            vb_vae,
            vb_unet,
            context,
            vec![reg_vae, reg_unet, reg_ctx],
            device,
            dtype,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        image_size: usize,
        vae_cfg: &VaeConfig,
        unet_cfg: &UnetConfig,
        vb_vae: candle_nn::VarBuilder<'static>,
        vb_unet: candle_nn::VarBuilder<'static>,
        context: Tensor,
        registries: Vec<WeightRegistry>,
        device: Device,
        dtype: DType,
    ) -> Result<Self> {
        let down = vae_cfg.downscale();
        if image_size % down != 0 {
            return Err(Error::Shape(format!("image size {image_size} not divisible by {down}")));
        }
        let latent = image_size / down;
        let vae = VaeEncoder::new(vae_cfg, vb_vae)?;
        let unet = Unet::new(unet_cfg, (latent, latent), vb_unet)?;
        Ok(LatentDiffusionBackbone {
            image_size,
            vae,
            unet,
            context,
            num_train_timesteps: 1000,
            registries,
            device,
            dtype,
            encode_calls: AtomicUsize::new(0),
            plain_calls: AtomicUsize::new(0),
            guided_calls: AtomicUsize::new(0),
        })
    }

    pub fn from_config(config: &BackboneConfig) -> Result<Self> {
        match config.kind {
            BackboneKind::Tiny => Self::tiny(config.seed),
            BackboneKind::Sd15 => {
                let dir = config
                    .weights
                    .clone()
                    .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "the sd15 backbone needs backbone.weights or {WEIGHTS_DIR_ENV}"
                        ))
                    })?;
                Self::sd15(&dir, Device::Cpu, DType::F32)
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.registries.iter().map(weights::parameter_count).sum()
    }

    pub fn unet(&self) -> &Unet {
        &self.unet
    }

    /// Full noise prediction (not needed for feature extraction).
    pub fn predict_noise(&self, latents: &Tensor, timestep: u32) -> Result<Tensor> {
        self.check_timestep(timestep)?;
        let mut capture = CaptureBuffer::default();
        Ok(self
            .unet
            .forward(latents, timestep as f64, &self.context, &AttentionMode::Plain, &mut capture)?)
    }

    fn check_timestep(&self, t: u32) -> Result<()> {
        if t == 0 || t > self.num_train_timesteps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.num_train_timesteps
            )));
        }
        Ok(())
    }
}

impl FeatureBackbone for LatentDiffusionBackbone {
    fn image_size(&self) -> usize {
        self.image_size
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.image_size / self.vae.config().downscale();
        (self.vae.config().latent_channels, s, s)
    }

    fn sites(&self) -> &[AttentionSite] {
        self.unet.sites()
    }

    fn num_train_timesteps(&self) -> u32 {
        self.num_train_timesteps
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "encoder expects (n, 3, {s}, {s}) images, got {:?}",
                images.dims(),
                s = self.image_size
            )));
        }
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.vae.encode(images)?)
    }

    fn extract_features(&self, latents: &Tensor, timestep: u32, mode: &AttentionMode<'_>) -> Result<AttentionState> {
        self.check_timestep(timestep)?;
        let (_, c, h, w) = latents.dims4()?;
        if (c, h, w) != self.latent_shape() {
            return Err(Error::Shape(format!(
                "latents {:?} do not match {:?}",
                latents.dims(),
                self.latent_shape()
            )));
        }
        if let AttentionMode::GeometryGuided(g) = mode {
            if g.views != latents.dim(0)? {
                return Err(Error::Shape(format!(
                    "guidance for {} views but {} latents",
                    g.views,
                    latents.dim(0)?
                )));
            }
            for s in self.sites() {
                g.level(s.height, s.width)
                    .map_err(|e| Error::Shape(e.to_string()))?;
            }
            self.guided_calls.fetch_add(1, Ordering::Relaxed);
        } else {
            self.plain_calls.fetch_add(1, Ordering::Relaxed);
        }
        let mut capture = CaptureBuffer::default();
        self.unet
            .capture_only(latents, timestep as f64, &self.context, mode, &mut capture)?;
        Ok(AttentionState {
            timestep,
            layers: capture.layers,
        })
    }

    fn weights_checksum(&self) -> Result<String> {
        let refs: Vec<&WeightRegistry> = self.registries.iter().collect();
        Ok(weights::checksum(&refs)?)
    }

    fn forward_counts(&self) -> ForwardCounts {
        ForwardCounts {
            encode: self.encode_calls.load(Ordering::Relaxed),
            plain: self.plain_calls.load(Ordering::Relaxed),
            guided: self.guided_calls.load(Ordering::Relaxed),
        }
    }
}

/// Style keys/values (and the style image's own attention output) per site,
/// detached and with batch 1.
#[derive(Debug, Clone)]
pub struct StyleBank {
    pub timestep: u32,
    pub layers: Vec<LayerCapture>,
}

impl StyleBank {
    pub fn layer(&self, index: usize, site: &AttentionSite) -> Result<&LayerCapture> {
        let layer = self
            .layers
            .get(index)
            .ok_or_else(|| Error::Shape(format!("style bank has no layer {index}")))?;
        if &layer.site != site {
            return Err(Error::Shape(format!(
                "style bank layer {index} is {}, expected {}",
                layer.site.name, site.name
            )));
        }
        Ok(layer)
    }
}

/// One plain forward of the style image. `style` is `(1, 3, s, s)` in
/// `[0, 1]`.
pub fn build_style_bank(backbone: &dyn FeatureBackbone, style: &Tensor, timestep: u32) -> Result<StyleBank> {
    if style.dim(0)? != 1 {
        return Err(Error::Shape("style bank is built from a single image".into()));
    }
    let z = backbone.encode(&style.detach())?;
    let state = backbone.extract_features(&z, timestep, &AttentionMode::Plain)?;
    Ok(StyleBank {
        timestep,
        layers: state.detached().layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TimestepStrategy {
    Fixed(u32),
    Random,
    Decreasing,
}

impl Default for TimestepStrategy {
    fn default() -> Self {
        TimestepStrategy::Fixed(1)
    }
}

impl FromStr for TimestepStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(TimestepStrategy::Random),
            "decreasing" => Ok(TimestepStrategy::Decreasing),
            _ => {
                let t = s
                    .strip_prefix("fixed:")
                    .and_then(|t| t.parse::<u32>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "timestep strategy `{s}` is not fixed:T, random or decreasing"
                        ))
                    })?;
                Ok(TimestepStrategy::Fixed(t))
            }
        }
    }
}

impl TryFrom<String> for TimestepStrategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TimestepStrategy> for String {
    fn from(s: TimestepStrategy) -> String {
        s.to_string()
    }
}

impl std::fmt::Display for TimestepStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimestepStrategy::Fixed(t) => write!(f, "fixed:{t}"),
            TimestepStrategy::Random => f.write_str("random"),
            TimestepStrategy::Decreasing => f.write_str("decreasing"),
        }
    }
}

/// Timestep for step `step` of `total` (1-based).
pub fn timestep_schedule<R: Rng + ?Sized>(
    strategy: TimestepStrategy,
    step: usize,
    total: usize,
    num_train_timesteps: u32,
    rng: &mut R,
) -> u32 {
    match strategy {
        TimestepStrategy::Fixed(t) => t,
        TimestepStrategy::Random => rng.gen_range(1..=num_train_timesteps),
        TimestepStrategy::Decreasing => {
            let frac = 1.0 - step as f64 / total.max(1) as f64;
            ((num_train_timesteps as f64 * frac).round() as u32).max(1)
        }
    }
}

/// Stacks `(h, w, 3)` row-major images into an `(n, 3, h, w)` tensor.
pub fn images_to_tensor(images: &[&[f64]], height: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let hw = height * width;
    let mut data = Vec::with_capacity(images.len() * 3 * hw);
    for img in images {
        if img.len() != 3 * hw {
            return Err(Error::Shape(format!(
                "image has {} values, expected {}",
                img.len(),
                3 * hw
            )));
        }
        for c in 0..3 {
            data.extend((0..hw).map(|p| img[3 * p + c]));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, height, width), device)?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`] for one image of a batch.
pub fn tensor_to_image(t: &Tensor, index: usize) -> Result<Vec<f64>> {
    let img = t.get(index)?.to_dtype(DType::F64)?;
    let (c, h, w) = img.dims3()?;
    let planes = img.flatten_all()?.to_vec1::<f64>()?;
    let hw = h * w;
    let mut out = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            out[c * p + ch] = planes[ch * hw + p];
        }
    }
    Ok(out)
}

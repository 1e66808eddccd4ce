//! Building blocks of the latent-diffusion encoder and denoiser, written
//! with primitive tensor ops only so that every layer is differentiable
//! with respect to its input. Parameter names follow the diffusers layout
//! so pretrained checkpoints load unchanged.

use candle_core::{DType, Module, Result, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};

use super::{AttentionMode, AttentionSite, CaptureBuffer, LayerCapture};
use crate::attention;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        if channels % groups != 0 {
            candle_core::bail!("{channels} channels are not divisible into {groups} groups");
        }
        Ok(GroupNorm {
            weight: vb.get_with_hints(channels, "weight", candle_nn::init::ONE)?,
            bias: vb.get_with_hints(channels, "bias", candle_nn::init::ZERO)?,
            groups,
            eps,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.dims().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let grouped = x.reshape((n, self.groups, ()))?;
        let mean = grouped.mean_keepdim(2)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape(shape.as_slice())?;
        let mut affine_shape = vec![1usize; shape.len()];
        affine_shape[1] = c;
        normed
            .broadcast_mul(&self.weight.reshape(affine_shape.as_slice())?)?
            .broadcast_add(&self.bias.reshape(affine_shape.as_slice())?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(LayerNorm {
            weight: vb.get_with_hints(dim, "weight", candle_nn::init::ONE)?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::init::ZERO)?,
            eps,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

pub fn conv(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    candle_nn::conv2d(cin, cout, kernel, cfg, vb)
}

#[derive(Debug, Clone)]
pub struct ResnetBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_emb_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    conv_shortcut: Option<Conv2d>,
}

impl ResnetBlock {
    pub fn new(
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
        groups: usize,
        eps: f64,
        vb: VarBuilder,
    ) -> Result<Self> {
        let conv_shortcut = if cin != cout {
            Some(conv(cin, cout, 1, 1, 0, vb.pp("conv_shortcut"))?)
        } else {
            None
        };
        Ok(ResnetBlock {
            norm1: GroupNorm::new(groups, cin, eps, vb.pp("norm1"))?,
            conv1: conv(cin, cout, 3, 1, 1, vb.pp("conv1"))?,
            time_emb_proj: temb_dim
                .map(|d| candle_nn::linear(d, cout, vb.pp("time_emb_proj")))
                .transpose()?,
            norm2: GroupNorm::new(groups, cout, eps, vb.pp("norm2"))?,
            conv2: conv(cout, cout, 3, 1, 1, vb.pp("conv2"))?,
            conv_shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(temb)) = (&self.time_emb_proj, temb) {
            let t = proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_add(&t)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.conv_shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv2d,
    /// Pads right/bottom by one before an unpadded stride-2 conv.
    asymmetric: bool,
}

impl Downsample {
    pub fn new(channels: usize, asymmetric: bool, vb: VarBuilder) -> Result<Self> {
        let padding = if asymmetric { 0 } else { 1 };
        Ok(Downsample {
            conv: conv(channels, channels, 3, 2, padding, vb.pp("conv"))?,
            asymmetric,
        })
    }
}

impl Module for Downsample {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.asymmetric {
            let x = x.pad_with_zeros(D::Minus1, 0, 1)?.pad_with_zeros(D::Minus2, 0, 1)?;
            self.conv.forward(&x)
        } else {
            self.conv.forward(x)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Upsample {
            conv: conv(channels, channels, 3, 1, 1, vb.pp("conv"))?,
        })
    }
}

impl Module for Upsample {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

/// Multi-head attention projections (`to_q`, `to_k`, `to_v`, `to_out.0`).
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl AttentionProjections {
    pub fn new(query_dim: usize, context_dim: usize, heads: usize, qkv_bias: bool, vb: VarBuilder) -> Result<Self> {
        let proj = |din: usize, name: &str| {
            if qkv_bias {
                candle_nn::linear(din, query_dim, vb.pp(name))
            } else {
                candle_nn::linear_no_bias(din, query_dim, vb.pp(name))
            }
        };
        Ok(AttentionProjections {
            to_q: proj(query_dim, "to_q")?,
            to_k: proj(context_dim, "to_k")?,
            to_v: proj(context_dim, "to_v")?,
            to_out: candle_nn::linear(query_dim, query_dim, vb.pp("to_out").pp("0"))?,
            heads,
        })
    }

    pub fn cross(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        let a = attention::attention(&q, &k, &v, self.heads, None)?;
        self.to_out.forward(&a)
    }

    /// Self-attention with Q/K/V/output capture. In geometry-guided mode
    /// keys and values are augmented with warped tokens of the other views.
    pub fn hooked_self(
        &self,
        x: &Tensor,
        site: &AttentionSite,
        mode: &AttentionMode<'_>,
        capture: &mut CaptureBuffer,
    ) -> Result<Tensor> {
        let q = self.to_q.forward(x)?;
        let k = self.to_k.forward(x)?;
        let v = self.to_v.forward(x)?;
        let a = match mode {
            AttentionMode::Plain => attention::attention(&q, &k, &v, self.heads, None)?,
            AttentionMode::GeometryGuided(guidance) => {
                let level = guidance.level(site.height, site.width)?;
                attention::geometry_guided_attention(&q, &k, &v, self.heads, level)?
            }
        };
        let out = self.to_out.forward(&a)?;
        capture.layers.push(LayerCapture {
            site: site.clone(),
            queries: q,
            keys: k,
            values: v,
            output: a,
        });
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct GegluFeedForward {
    proj: Linear,
    out: Linear,
}

impl GegluFeedForward {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        let inner = 4 * dim;
        Ok(GegluFeedForward {
            proj: candle_nn::linear(dim, 2 * inner, vb.pp("net").pp("0").pp("proj"))?,
            out: candle_nn::linear(inner, dim, vb.pp("net").pp("2"))?,
        })
    }
}

impl Module for GegluFeedForward {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.proj.forward(x)?;
        let chunks = h.chunk(2, D::Minus1)?;
        let gated = (&chunks[0] * chunks[1].gelu_erf()?)?;
        self.out.forward(&gated)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn1: AttentionProjections,
    norm2: LayerNorm,
    attn2: AttentionProjections,
    norm3: LayerNorm,
    ff: GegluFeedForward,
}

impl TransformerBlock {
    pub fn new(dim: usize, heads: usize, context_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(dim, 1e-5, vb.pp("norm1"))?,
            attn1: AttentionProjections::new(dim, dim, heads, false, vb.pp("attn1"))?,
            norm2: LayerNorm::new(dim, 1e-5, vb.pp("norm2"))?,
            attn2: AttentionProjections::new(dim, context_dim, heads, false, vb.pp("attn2"))?,
            norm3: LayerNorm::new(dim, 1e-5, vb.pp("norm3"))?,
            ff: GegluFeedForward::new(dim, vb.pp("ff"))?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        site: &AttentionSite,
        mode: &AttentionMode<'_>,
        capture: &mut CaptureBuffer,
    ) -> Result<Tensor> {
        let x = (self.attn1.hooked_self(&self.norm1.forward(x)?, site, mode, capture)? + x)?;
        let x = (self.attn2.cross(&self.norm2.forward(&x)?, context)? + &x)?;
        self.ff.forward(&self.norm3.forward(&x)?)? + &x
    }
}

/// Spatial transformer: group norm, projection in, transformer blocks,
/// projection out, residual.
#[derive(Debug, Clone)]
pub struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Projection,
    blocks: Vec<TransformerBlock>,
    proj_out: Projection,
    /// One entry per transformer block.
    pub sites: Vec<AttentionSite>,
}

#[derive(Debug, Clone)]
enum Projection {
    Conv(Conv2d),
    Linear(Linear),
}

pub struct SpatialTransformerConfig {
    pub channels: usize,
    pub heads: usize,
    pub context_dim: usize,
    pub depth: usize,
    pub groups: usize,
    pub linear_projection: bool,
}

impl SpatialTransformer {
    pub fn new(cfg: &SpatialTransformerConfig, prefix: &str, resolution: (usize, usize), vb: VarBuilder) -> Result<Self> {
        let c = cfg.channels;
        let proj = |name: &str| -> Result<Projection> {
            Ok(if cfg.linear_projection {
                Projection::Linear(candle_nn::linear(c, c, vb.pp(name))?)
            } else {
                Projection::Conv(conv(c, c, 1, 1, 0, vb.pp(name))?)
            })
        };
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(c, cfg.heads, cfg.context_dim, vb.pp("transformer_blocks").pp(i)))
            .collect::<Result<Vec<_>>>()?;
        let sites = (0..cfg.depth)
            .map(|i| AttentionSite {
                name: format!("{prefix}.transformer_blocks.{i}.attn1"),
                height: resolution.0,
                width: resolution.1,
                channels: c,
                heads: cfg.heads,
            })
            .collect();
        Ok(SpatialTransformer {
            norm: GroupNorm::new(cfg.groups, c, 1e-6, vb.pp("norm"))?,
            proj_in: proj("proj_in")?,
            blocks,
            proj_out: proj("proj_out")?,
            sites,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        mode: &AttentionMode<'_>,
        capture: &mut CaptureBuffer,
    ) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let normed = self.norm.forward(x)?;
        let mut tokens = match &self.proj_in {
            Projection::Conv(conv) => conv
                .forward(&normed)?
                .flatten_from(2)?
                .transpose(1, 2)?
                .contiguous()?,
            Projection::Linear(lin) => lin.forward(&normed.flatten_from(2)?.transpose(1, 2)?.contiguous()?)?,
        };
        for (block, site) in self.blocks.iter().zip(&self.sites) {
            tokens = block.forward(&tokens, context, site, mode, capture)?;
        }
        let out = match &self.proj_out {
            Projection::Conv(conv) => {
                let spatial = tokens.transpose(1, 2)?.reshape((n, c, h, w))?;
                conv.forward(&spatial)?
            }
            Projection::Linear(lin) => lin.forward(&tokens)?.transpose(1, 2)?.reshape((n, c, h, w))?,
        };
        out + x
    }
}

/// Single-head spatial self-attention used in the autoencoder mid block.
/// Accepts both the current (`to_q`) and legacy (`query`) parameter names.
#[derive(Debug, Clone)]
pub struct VaeAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl VaeAttention {
    pub fn new(channels: usize, groups: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        let legacy = !vb.contains_tensor("to_q.weight") && vb.contains_tensor("query.weight");
        let names = if legacy {
            ["query", "key", "value", "proj_attn"]
        } else {
            ["to_q", "to_k", "to_v", "to_out.0"]
        };
        let lin = |name: &str| candle_nn::linear(channels, channels, vb.pp(name));
        Ok(VaeAttention {
            norm: GroupNorm::new(groups, channels, eps, vb.pp("group_norm"))?,
            q: lin(names[0])?,
            k: lin(names[1])?,
            v: lin(names[2])?,
            out: lin(names[3])?,
        })
    }
}

impl Module for VaeAttention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .flatten_from(2)?
            .transpose(1, 2)?
            .contiguous()?;
        let a = attention::attention(
            &self.q.forward(&tokens)?,
            &self.k.forward(&tokens)?,
            &self.v.forward(&tokens)?,
            1,
            None,
        )?;
        let out = self.out.forward(&a)?.transpose(1, 2)?.reshape((n, c, h, w))?;
        out + x
    }
}

/// Sinusoidal timestep features with cosine first, as in SD 1.x.
pub fn timestep_features(timesteps: &[f64], dim: usize, dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t)
            .collect();
        data.extend(freqs.iter().map(|f| f.cos()));
        data.extend(freqs.iter().map(|f| f.sin()));
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::from_vec(data, (timesteps.len(), dim), dev)?.to_dtype(dtype)
}

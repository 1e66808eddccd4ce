//! Conditional denoising UNet with spatial transformers.

use candle_core::{Module, Result, Tensor};
use candle_nn::{Conv2d, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use super::nn::{conv, timestep_features, Downsample, GroupNorm, ResnetBlock, SpatialTransformer, SpatialTransformerConfig, Upsample};
use super::{AttentionMode, AttentionSite, CaptureBuffer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub block_out_channels: Vec<usize>,
    pub down_attention: Vec<bool>,
    pub up_attention: Vec<bool>,
    pub mid_attention: bool,
    pub layers_per_block: usize,
    pub heads: usize,
    pub transformer_depth: usize,
    pub norm_groups: usize,
    pub norm_eps: f64,
    pub cross_attention_dim: usize,
    pub linear_projection: bool,
}

impl UnetConfig {
    pub fn sd15() -> Self {
        UnetConfig {
            in_channels: 4,
            out_channels: 4,
            block_out_channels: vec![320, 640, 1280, 1280],
            down_attention: vec![true, true, true, false],
            up_attention: vec![false, true, true, true],
            mid_attention: true,
            layers_per_block: 2,
            heads: 8,
            transformer_depth: 1,
            norm_groups: 32,
            norm_eps: 1e-5,
            cross_attention_dim: 768,
            linear_projection: false,
        }
    }

    pub fn tiny() -> Self {
        UnetConfig {
            in_channels: 4,
            out_channels: 4,
            block_out_channels: vec![16, 16],
            down_attention: vec![true, false],
            up_attention: vec![false, false],
            mid_attention: true,
            layers_per_block: 1,
            heads: 2,
            transformer_depth: 1,
            norm_groups: 4,
            norm_eps: 1e-5,
            cross_attention_dim: 16,
            linear_projection: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.block_out_channels.len();
        if n == 0 || self.down_attention.len() != n || self.up_attention.len() != n {
            candle_core::bail!("UNet block lists must be non-empty and equally long");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DownBlock {
    resnets: Vec<ResnetBlock>,
    attentions: Vec<SpatialTransformer>,
    downsample: Option<Downsample>,
}

#[derive(Debug, Clone)]
struct UpBlock {
    resnets: Vec<ResnetBlock>,
    attentions: Vec<SpatialTransformer>,
    upsample: Option<Upsample>,
}

#[derive(Debug, Clone)]
struct MidBlock {
    resnet_in: ResnetBlock,
    attention: Option<SpatialTransformer>,
    resnet_out: ResnetBlock,
}

#[derive(Debug, Clone)]
pub struct Unet {
    config: UnetConfig,
    conv_in: Conv2d,
    time_linear_1: Linear,
    time_linear_2: Linear,
    down: Vec<DownBlock>,
    mid: MidBlock,
    up: Vec<UpBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    sites: Vec<AttentionSite>,
}

impl Unet {
    /// `latent` is the spatial size of the input latent.
    pub fn new(config: &UnetConfig, latent: (usize, usize), vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let ch = &config.block_out_channels;
        let n = ch.len();
        let temb = 4 * ch[0];
        let groups = config.norm_groups;
        let eps = config.norm_eps;
        let transformer = |channels: usize| SpatialTransformerConfig {
            channels,
            heads: config.heads,
            context_dim: config.cross_attention_dim,
            depth: config.transformer_depth,
            groups,
            linear_projection: config.linear_projection,
        };
        let mut sites = Vec::new();

        let mut res = latent;
        let mut down = Vec::with_capacity(n);
        let mut out_ch = ch[0];
        for i in 0..n {
            let in_ch = out_ch;
            out_ch = ch[i];
            let vbi = vb.pp("down_blocks").pp(i);
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for k in 0..config.layers_per_block {
                let cin = if k == 0 { in_ch } else { out_ch };
                resnets.push(ResnetBlock::new(cin, out_ch, Some(temb), groups, eps, vbi.pp("resnets").pp(k))?);
                if config.down_attention[i] {
                    let st = SpatialTransformer::new(
                        &transformer(out_ch),
                        &format!("down_blocks.{i}.attentions.{k}"),
                        res,
                        vbi.pp("attentions").pp(k),
                    )?;
                    sites.extend(st.sites.iter().cloned());
                    attentions.push(st);
                }
            }
            let downsample = if i + 1 < n {
                res = (res.0.div_ceil(2), res.1.div_ceil(2));
                Some(Downsample::new(out_ch, false, vbi.pp("downsamplers").pp(0))?)
            } else {
                None
            };
            down.push(DownBlock {
                resnets,
                attentions,
                downsample,
            });
        }

        let last = ch[n - 1];
        let vbm = vb.pp("mid_block");
        let resnet_in = ResnetBlock::new(last, last, Some(temb), groups, eps, vbm.pp("resnets").pp(0))?;
        let attention = if config.mid_attention {
            let st = SpatialTransformer::new(&transformer(last), "mid_block.attentions.0", res, vbm.pp("attentions").pp(0))?;
            sites.extend(st.sites.iter().cloned());
            Some(st)
        } else {
            None
        };
        let resnet_out = ResnetBlock::new(last, last, Some(temb), groups, eps, vbm.pp("resnets").pp(1))?;

        let rev: Vec<usize> = ch.iter().rev().copied().collect();
        let up_attention: Vec<bool> = config.up_attention.clone();
        let mut up = Vec::with_capacity(n);
        let mut out_ch = rev[0];
        for i in 0..n {
            let prev_out = out_ch;
            out_ch = rev[i];
            let in_ch = rev[(i + 1).min(n - 1)];
            let vbi = vb.pp("up_blocks").pp(i);
            let layers = config.layers_per_block + 1;
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for k in 0..layers {
                let skip = if k + 1 == layers { in_ch } else { out_ch };
                let cin = if k == 0 { prev_out } else { out_ch };
                resnets.push(ResnetBlock::new(cin + skip, out_ch, Some(temb), groups, eps, vbi.pp("resnets").pp(k))?);
                if up_attention[i] {
                    let st = SpatialTransformer::new(
                        &transformer(out_ch),
                        &format!("up_blocks.{i}.attentions.{k}"),
                        res,
                        vbi.pp("attentions").pp(k),
                    )?;
                    sites.extend(st.sites.iter().cloned());
                    attentions.push(st);
                }
            }
            let upsample = if i + 1 < n {
                res = (res.0 * 2, res.1 * 2);
                Some(Upsample::new(out_ch, vbi.pp("upsamplers").pp(0))?)
            } else {
                None
            };
            up.push(UpBlock {
                resnets,
                attentions,
                upsample,
            });
        }

        Ok(Unet {
            config: config.clone(),
            conv_in: conv(config.in_channels, ch[0], 3, 1, 1, vb.pp("conv_in"))?,
            time_linear_1: candle_nn::linear(ch[0], temb, vb.pp("time_embedding").pp("linear_1"))?,
            time_linear_2: candle_nn::linear(temb, temb, vb.pp("time_embedding").pp("linear_2"))?,
            down,
            mid: MidBlock {
                resnet_in,
                attention,
                resnet_out,
            },
            up,
            norm_out: GroupNorm::new(groups, ch[0], eps, vb.pp("conv_norm_out"))?,
            conv_out: conv(ch[0], config.out_channels, 3, 1, 1, vb.pp("conv_out"))?,
            sites,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    /// Self-attention sites in forward order.
    pub fn sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    /// Noise prediction. `context` has batch 1 and is shared by every view.
    pub fn forward(
        &self,
        x: &Tensor,
        timestep: f64,
        context: &Tensor,
        mode: &AttentionMode<'_>,
        capture: &mut CaptureBuffer,
    ) -> Result<Tensor> {
        Ok(self
            .run(x, timestep, context, mode, capture, false)?
            .expect("full forward returns the prediction"))
    }

    /// Runs only as far as the last self-attention site.
    pub fn capture_only(
        &self,
        x: &Tensor,
        timestep: f64,
        context: &Tensor,
        mode: &AttentionMode<'_>,
        capture: &mut CaptureBuffer,
    ) -> Result<()> {
        self.run(x, timestep, context, mode, capture, true).map(|_| ())
    }

    fn run(
        &self,
        x: &Tensor,
        timestep: f64,
        context: &Tensor,
        mode: &AttentionMode<'_>,
        capture: &mut CaptureBuffer,
        early_exit: bool,
    ) -> Result<Option<Tensor>> {
        let total = capture.layers.len() + self.sites.len();
        let done = |c: &CaptureBuffer| early_exit && c.layers.len() == total;
        let n = x.dim(0)?;
        let (_, l, dc) = context.dims3()?;
        let context = context.broadcast_as((n, l, dc))?.contiguous()?;
        let t = timestep_features(&vec![timestep; n], self.config.block_out_channels[0], x.dtype(), x.device())?;
        let temb = self.time_linear_2.forward(&self.time_linear_1.forward(&t)?.silu()?)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for block in &self.down {
            for (k, resnet) in block.resnets.iter().enumerate() {
                h = resnet.forward(&h, Some(&temb))?;
                if let Some(attn) = block.attentions.get(k) {
                    h = attn.forward(&h, &context, mode, capture)?;
                }
                skips.push(h.clone());
            }
            if let Some(ds) = &block.downsample {
                h = ds.forward(&h)?;
                skips.push(h.clone());
            }
        }

        if done(capture) {
            return Ok(None);
        }
        h = self.mid.resnet_in.forward(&h, Some(&temb))?;
        if let Some(attn) = &self.mid.attention {
            h = attn.forward(&h, &context, mode, capture)?;
        }
        if done(capture) {
            return Ok(None);
        }
        h = self.mid.resnet_out.forward(&h, Some(&temb))?;

        for block in &self.up {
            for (k, resnet) in block.resnets.iter().enumerate() {
                let skip = skips.pop().expect("skip connection per up resnet");
                h = resnet.forward(&Tensor::cat(&[&h, &skip], 1)?, Some(&temb))?;
                if let Some(attn) = block.attentions.get(k) {
                    h = attn.forward(&h, &context, mode, capture)?;
                    if done(capture) {
                        return Ok(None);
                    }
                }
            }
            if let Some(us) = &block.upsample {
                h = us.forward(&h)?;
            }
        }
        Ok(Some(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?))
    }
}

//! Encoder half of the KL autoencoder: image in `[0, 1]` to scaled latent
//! mean.

use candle_core::{Module, Result, Tensor};
use candle_nn::{Conv2d, VarBuilder};
use serde::{Deserialize, Serialize};

use super::nn::{conv, Downsample, GroupNorm, ResnetBlock, VaeAttention};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub block_out_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub norm_groups: usize,
    pub mid_attention: bool,
    pub scaling_factor: f64,
}

impl VaeConfig {
    pub fn sd15() -> Self {
        VaeConfig {
            in_channels: 3,
            latent_channels: 4,
            block_out_channels: vec![128, 256, 512, 512],
            layers_per_block: 2,
            norm_groups: 32,
            mid_attention: true,
            scaling_factor: 0.18215,
        }
    }

    pub fn tiny() -> Self {
        VaeConfig {
            in_channels: 3,
            latent_channels: 4,
            block_out_channels: vec![8, 16, 16, 16],
            layers_per_block: 1,
            norm_groups: 4,
            mid_attention: true,
            scaling_factor: 1.0,
        }
    }

    /// Spatial reduction factor.
    pub fn downscale(&self) -> usize {
        1 << (self.block_out_channels.len() - 1)
    }
}

const EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct VaeEncoder {
    config: VaeConfig,
    conv_in: Conv2d,
    blocks: Vec<(Vec<ResnetBlock>, Option<Downsample>)>,
    mid_in: ResnetBlock,
    mid_attention: Option<VaeAttention>,
    mid_out: ResnetBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    quant_conv: Conv2d,
}

impl VaeEncoder {
    /// `vb` is rooted at the autoencoder, so parameters are read from
    /// `encoder.*` and `quant_conv.*`.
    pub fn new(config: &VaeConfig, vb: VarBuilder) -> Result<Self> {
        let ch = &config.block_out_channels;
        if ch.is_empty() {
            candle_core::bail!("autoencoder needs at least one block");
        }
        let groups = config.norm_groups;
        let enc = vb.pp("encoder");
        let mut blocks = Vec::new();
        let mut out_ch = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let in_ch = out_ch;
            out_ch = c;
            let vbi = enc.pp("down_blocks").pp(i);
            let resnets = (0..config.layers_per_block)
                .map(|k| {
                    let cin = if k == 0 { in_ch } else { out_ch };
                    ResnetBlock::new(cin, out_ch, None, groups, EPS, vbi.pp("resnets").pp(k))
                })
                .collect::<Result<Vec<_>>>()?;
            let ds = if i + 1 < ch.len() {
                Some(Downsample::new(out_ch, true, vbi.pp("downsamplers").pp(0))?)
            } else {
                None
            };
            blocks.push((resnets, ds));
        }
        let last = *ch.last().unwrap();
        let mid = enc.pp("mid_block");
        let z2 = 2 * config.latent_channels;
        Ok(VaeEncoder {
            config: config.clone(),
            conv_in: conv(config.in_channels, ch[0], 3, 1, 1, enc.pp("conv_in"))?,
            blocks,
            mid_in: ResnetBlock::new(last, last, None, groups, EPS, mid.pp("resnets").pp(0))?,
            mid_attention: if config.mid_attention {
                Some(VaeAttention::new(last, groups, EPS, mid.pp("attentions").pp(0))?)
            } else {
                None
            },
            mid_out: ResnetBlock::new(last, last, None, groups, EPS, mid.pp("resnets").pp(1))?,
            norm_out: GroupNorm::new(groups, last, EPS, enc.pp("conv_norm_out"))?,
            conv_out: conv(last, z2, 3, 1, 1, enc.pp("conv_out"))?,
            quant_conv: conv(z2, z2, 1, 1, 0, vb.pp("quant_conv"))?,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    /// `images` is `(n, 3, h, w)` with values in `[0, 1]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let x = ((images * 2.0)? - 1.0)?;
        let mut h = self.conv_in.forward(&x)?;
        for (resnets, ds) in &self.blocks {
            for r in resnets {
                h = r.forward(&h, None)?;
            }
            if let Some(ds) = ds {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid_in.forward(&h, None)?;
        if let Some(attn) = &self.mid_attention {
            h = attn.forward(&h)?;
        }
        h = self.mid_out.forward(&h, None)?;
        let moments = self
            .quant_conv
            .forward(&self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)?;
        let mean = moments.narrow(1, 0, self.config.latent_channels)?;
        mean * self.config.scaling_factor
    }
}

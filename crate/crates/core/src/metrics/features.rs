//! Image feature extractors used by the evaluation metrics.
//!
//! Pretrained extractors read safetensors files from a weights directory:
//! `clip_vision.safetensors` (CLIP ViT-B/32 vision tower in the Hugging Face
//! layout) and `vgg19.safetensors` (torchvision `features.*` layout). The
//! seeded random network has no pretrained meaning; it exists so that the
//! metric plumbing can be exercised without downloads.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Linear, VarBuilder};

use crate::backbone::nn::{conv, LayerNorm};
use crate::backbone::{images_to_tensor, weights};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;

/// Channel-major feature map `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Ok(FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        })
    }
}

/// Global image embedding (CLIP-class).
pub trait ImageEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn pretrained(&self) -> bool;
    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Multi-layer convolutional features (VGG-class).
pub trait FeaturePyramid: Send + Sync {
    fn name(&self) -> &str;
    fn pretrained(&self) -> bool;
    fn features(&self, image: &RgbImage) -> Result<Vec<FeatureMap>>;
}

fn normalized_input(image: &RgbImage, size: Option<usize>, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor> {
    let img = match size {
        Some(s) => image.resized(s, s),
        None => image.clone(),
    };
    let data: Vec<f64> = img
        .data
        .chunks(3)
        .flat_map(|px| (0..3).map(move |c| (px[c] - mean[c]) / std[c]))
        .collect();
    images_to_tensor(&[&data], img.height, img.width, DType::F32, &Device::Cpu)
}

/// Seeded random convolutional network: five conv+ReLU stages separated by
/// 2× average pooling. Serves as both embedder (concatenated global means)
/// and feature pyramid.
pub struct RandomConvFeatures {
    convs: Vec<Conv2d>,
}

impl RandomConvFeatures {
    pub const CHANNELS: [usize; 5] = [16, 32, 32, 64, 64];

    pub fn new(seed: u64) -> Result<Self> {
        let (vb, _) = weights::seeded_var_builder(seed, DType::F32, &Device::Cpu);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in Self::CHANNELS.iter().enumerate() {
            convs.push(conv(cin, c, 3, 1, 1, vb.pp(format!("stage{i}")))?);
            cin = c;
        }
        Ok(RandomConvFeatures { convs })
    }

    fn stages(&self, image: &RgbImage) -> Result<Vec<Tensor>> {
        let mut x = normalized_input(image, None, [0.5; 3], [0.25; 3])?;
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            if i > 0 {
                let (_, _, h, w) = x.dims4()?;
                if h >= 2 && w >= 2 {
                    x = x.avg_pool2d(2)?;
                }
            }
            x = c.forward(&x)?.relu()?;
            out.push(x.get(0)?);
        }
        Ok(out)
    }
}

impl ImageEmbedder for RandomConvFeatures {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn pretrained(&self) -> bool {
        false
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let mut v = Vec::new();
        for s in self.stages(image)? {
            v.extend(s.flatten_from(1)?.mean(D::Minus1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(v)
    }
}

impl FeaturePyramid for RandomConvFeatures {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn pretrained(&self) -> bool {
        false
    }

    fn features(&self, image: &RgbImage) -> Result<Vec<FeatureMap>> {
        self.stages(image)?.iter().map(FeatureMap::from_tensor).collect()
    }
}

/// VGG19 convolutional trunk; features after the ReLUs of conv1_1 through
/// conv5_1.
pub struct Vgg19 {
    convs: Vec<Conv2d>,
}

/// `(torchvision index, output channels)` for the conv layers up to conv5_1.
const VGG19_CONVS: [(usize, usize); 13] = [
    (0, 64),
    (2, 64),
    (5, 128),
    (7, 128),
    (10, 256),
    (12, 256),
    (14, 256),
    (16, 256),
    (19, 512),
    (21, 512),
    (23, 512),
    (25, 512),
    (28, 512),
];
const VGG19_TAPS: [usize; 5] = [0, 5, 10, 19, 28];
const VGG19_POOL_AFTER: [usize; 4] = [2, 7, 16, 25];

impl Vgg19 {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "VGG19 weights not found"),
            ));
        }
        let (vb, _) = weights::safetensors_var_builder(path, DType::F32, &Device::Cpu)?;
        Self::new(vb.pp("features"))
    }

    fn new(vb: VarBuilder) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (idx, c) in VGG19_CONVS {
            convs.push(conv(cin, c, 3, 1, 1, vb.pp(idx))?);
            cin = c;
        }
        Ok(Vgg19 { convs })
    }
}

impl FeaturePyramid for Vgg19 {
    fn name(&self) -> &str {
        "vgg19"
    }

    fn pretrained(&self) -> bool {
        true
    }

    fn features(&self, image: &RgbImage) -> Result<Vec<FeatureMap>> {
        let mut x = normalized_input(image, None, [0.485, 0.456, 0.406], [0.229, 0.224, 0.225])?;
        let mut out = Vec::new();
        for ((idx, _), c) in VGG19_CONVS.iter().zip(&self.convs) {
            x = c.forward(&x)?.relu()?;
            if VGG19_TAPS.contains(idx) {
                out.push(FeatureMap::from_tensor(&x.get(0)?)?);
            }
            if VGG19_POOL_AFTER.contains(idx) {
                x = x.max_pool2d(2)?;
            }
        }
        Ok(out)
    }
}

struct ClipLayer {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// CLIP ViT-B/32 image tower with its projection head.
pub struct ClipVision {
    patch: Conv2d,
    class_embedding: Tensor,
    positions: Tensor,
    pre_norm: LayerNorm,
    layers: Vec<ClipLayer>,
    post_norm: LayerNorm,
    projection: Linear,
}

const CLIP_WIDTH: usize = 768;
const CLIP_HEADS: usize = 12;
const CLIP_LAYERS: usize = 12;
const CLIP_PATCH: usize = 32;
const CLIP_SIZE: usize = 224;
const CLIP_PROJECTION: usize = 512;

impl ClipVision {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "CLIP vision weights not found"),
            ));
        }
        let (vb, _) = weights::safetensors_var_builder(path, DType::F32, &Device::Cpu)?;
        let vm = vb.pp("vision_model");
        let emb = vm.pp("embeddings");
        let patch = candle_nn::conv2d_no_bias(
            3,
            CLIP_WIDTH,
            CLIP_PATCH,
            candle_nn::Conv2dConfig {
                stride: CLIP_PATCH,
                ..Default::default()
            },
            emb.pp("patch_embedding"),
        )?;
        let tokens = (CLIP_SIZE / CLIP_PATCH).pow(2) + 1;
        let layers = (0..CLIP_LAYERS)
            .map(|i| {
                let l = vm.pp("encoder").pp("layers").pp(i);
                let attn = l.pp("self_attn");
                Ok(ClipLayer {
                    norm1: LayerNorm::new(CLIP_WIDTH, 1e-5, l.pp("layer_norm1"))?,
                    q: candle_nn::linear(CLIP_WIDTH, CLIP_WIDTH, attn.pp("q_proj"))?,
                    k: candle_nn::linear(CLIP_WIDTH, CLIP_WIDTH, attn.pp("k_proj"))?,
                    v: candle_nn::linear(CLIP_WIDTH, CLIP_WIDTH, attn.pp("v_proj"))?,
                    out: candle_nn::linear(CLIP_WIDTH, CLIP_WIDTH, attn.pp("out_proj"))?,
                    norm2: LayerNorm::new(CLIP_WIDTH, 1e-5, l.pp("layer_norm2"))?,
                    fc1: candle_nn::linear(CLIP_WIDTH, 4 * CLIP_WIDTH, l.pp("mlp").pp("fc1"))?,
                    fc2: candle_nn::linear(4 * CLIP_WIDTH, CLIP_WIDTH, l.pp("mlp").pp("fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipVision {
            patch,
            class_embedding: emb.get(CLIP_WIDTH, "class_embedding")?,
            positions: emb.get((tokens, CLIP_WIDTH), "position_embedding.weight")?,
            pre_norm: LayerNorm::new(CLIP_WIDTH, 1e-5, vm.pp("pre_layrnorm"))?,
            layers,
            post_norm: LayerNorm::new(CLIP_WIDTH, 1e-5, vm.pp("post_layernorm"))?,
            projection: candle_nn::linear_no_bias(CLIP_WIDTH, CLIP_PROJECTION, vb.pp("visual_projection"))?,
        })
    }
}

impl ImageEmbedder for ClipVision {
    fn name(&self) -> &str {
        "clip-vit-b32"
    }

    fn pretrained(&self) -> bool {
        true
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let x = normalized_input(
            image,
            Some(CLIP_SIZE),
            [0.48145466, 0.4578275, 0.40821073],
            [0.26862954, 0.26130258, 0.27577711],
        )?;
        let patches = self.patch.forward(&x)?.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.class_embedding.reshape((1, 1, CLIP_WIDTH))?;
        let mut h = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.positions)?;
        h = self.pre_norm.forward(&h)?;
        for l in &self.layers {
            let n = l.norm1.forward(&h)?;
            let a = crate::attention::attention(&l.q.forward(&n)?, &l.k.forward(&n)?, &l.v.forward(&n)?, CLIP_HEADS, None)?;
            h = (h + l.out.forward(&a)?)?;
            let n = l.norm2.forward(&h)?;
            let f = l.fc1.forward(&n)?;
            // quick GELU
            let f = (&f * candle_nn::ops::sigmoid(&(&f * 1.702)?)?)?;
            h = (h + l.fc2.forward(&f)?)?;
        }
        let pooled = self.post_norm.forward(&h.narrow(1, 0, 1)?.squeeze(1)?)?;
        Ok(self
            .projection
            .forward(&pooled)?
            .squeeze(0)?
            .to_dtype(DType::F64)?
            .to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(size: usize) -> RgbImage {
        let data = (0..size * size)
            .flat_map(|i| {
                let v = if (i / size + i % size) % 2 == 0 { 0.9 } else { 0.1 };
                [v, 1.0 - v, 0.5]
            })
            .collect();
        RgbImage::new(size, size, data).unwrap()
    }

    #[test]
    fn random_features_have_five_levels() {
        let net = RandomConvFeatures::new(0).unwrap();
        let feats = net.features(&checker(32)).unwrap();
        assert_eq!(feats.len(), 5);
        assert_eq!((feats[0].height, feats[0].width), (32, 32));
        assert_eq!((feats[4].height, feats[4].width), (2, 2));
        for (f, c) in feats.iter().zip(RandomConvFeatures::CHANNELS) {
            assert_eq!(f.channels, c);
            assert_eq!(f.data.len(), f.channels * f.height * f.width);
        }
        let e = net.embed(&checker(32)).unwrap();
        assert_eq!(e.len(), RandomConvFeatures::CHANNELS.iter().sum::<usize>());
    }

    #[test]
    fn random_features_are_deterministic() {
        let a = RandomConvFeatures::new(5).unwrap().embed(&checker(16)).unwrap();
        let b = RandomConvFeatures::new(5).unwrap().embed(&checker(16)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_pretrained_weights_are_reported() {
        assert!(Vgg19::load(Path::new("/nonexistent/vgg19.safetensors")).is_err());
        assert!(ClipVision::load(Path::new("/nonexistent/clip_vision.safetensors")).is_err());
    }
}

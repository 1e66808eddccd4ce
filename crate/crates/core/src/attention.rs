//! Attention operators: multi-head scaled dot-product attention with an
//! optional additive bias, the per-token centering/normalization used by the
//! losses, the key/value-injection style signal and cross-view key/value
//! augmentation.
//!
//! Token tensors are laid out `(views, tokens, channels)`.

use candle_core::{bail, DType, Device, Result, Tensor, D};

use crate::geometry::{GeometryGuidance, GuidanceLevel};

/// Added to the centered norm before division.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Softmax over the last dimension. The row maximum is detached, which
/// leaves the gradient unchanged and keeps masked (−∞) logits finite.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, t, d) = x.dims3()?;
    if d % heads != 0 {
        bail!("channel width {d} is not divisible by {heads} heads");
    }
    x.reshape((n, t, heads, d / heads))?.transpose(1, 2)?.contiguous()
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (n, h, t, dh) = x.dims4()?;
    x.transpose(1, 2)?.contiguous()?.reshape((n, t, h * dh))
}

/// Rejects biases that mask every key of some query row.
fn check_bias(bias: &Tensor) -> Result<()> {
    let row_max = bias.max_keepdim(D::Minus1)?.flatten_all()?.to_dtype(DType::F64)?;
    if row_max
        .to_vec1::<f64>()?
        .iter()
        .any(|&m| m == f64::NEG_INFINITY || m.is_nan())
    {
        bail!("attention bias masks every key of at least one query");
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √d_head + bias) V`, computed per head and concatenated.
///
/// `q` is `(n, tq, d)`, `k`/`v` are `(n, tk, d)` and `bias`, if given, is
/// `(n, tq, tk)` or `(n, 1, tk)`; the same bias applies to every head.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, _, d) = q.dims3()?;
    let (nk, tk, dk) = k.dims3()?;
    if nk != n || dk != d || v.dims3()? != (nk, tk, d) {
        bail!(
            "attention shape mismatch: q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        );
    }
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    let mut logits = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
    if let Some(bias) = bias {
        check_bias(bias)?;
        logits = logits.broadcast_add(&bias.unsqueeze(1)?)?;
    }
    let weights = softmax_last(&logits)?;
    merge_heads(&weights.matmul(&vh)?)
}

/// Per token: subtract the channel mean and divide by the norm of the
/// centered vector plus [`NORMALIZE_EPS`]. Constant tokens map to zero.
pub fn center_normalize(a: &Tensor) -> Result<Tensor> {
    let centered = a.broadcast_sub(&a.mean_keepdim(D::Minus1)?)?;
    // the tiny inner term keeps the sqrt gradient finite at zero
    let norm = (centered.sqr()?.sum_keepdim(D::Minus1)? + 1e-30)?.sqrt()?;
    centered.broadcast_div(&(norm + NORMALIZE_EPS)?)
}

fn broadcast_views(t: &Tensor, views: usize) -> Result<Tensor> {
    let (n, tok, d) = t.dims3()?;
    match n {
        _ if n == views => Ok(t.clone()),
        1 => t.broadcast_as((views, tok, d))?.contiguous(),
        _ => bail!("style tensors have batch {n}, expected 1 or {views}"),
    }
}

/// Style target for one layer: queries attend to the style image's keys and
/// values. The result is detached.
pub fn style_signal(
    queries: &Tensor,
    style_keys: &Tensor,
    style_values: &Tensor,
    heads: usize,
    normalize: bool,
) -> Result<Tensor> {
    let views = queries.dim(0)?;
    let ks = broadcast_views(style_keys, views)?;
    let vs = broadcast_views(style_values, views)?;
    let a = attention(&queries.detach(), &ks.detach(), &vs.detach(), heads, None)?;
    let a = if normalize { center_normalize(&a)? } else { a };
    Ok(a.detach())
}

/// Cross-view warp of one attention resolution, prepared as gather indices
/// and weights over the flattened token tensor of all views.
#[derive(Debug, Clone)]
pub struct GgaLevel {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Row `views * tokens` of the padded source is all zeros.
    tap_index: Vec<Tensor>,
    tap_weight: Vec<Tensor>,
    /// `(views, 1, views * tokens)`; 0 on attendable keys, −∞ elsewhere.
    pub bias: Tensor,
}

impl GgaLevel {
    pub fn new(level: &GuidanceLevel, dtype: DType, device: &Device) -> Result<Self> {
        let n = level.views;
        let t = level.height * level.width;
        let pad_row = (n * t) as u32;
        let rows = n * (n - 1) * t;
        let mut index = vec![vec![pad_row; rows]; 4];
        let mut weight = vec![vec![0f64; rows]; 4];
        let mut bias = vec![0f64; n * n * t];
        for b in 0..n {
            for (slot, j) in (0..n).filter(|&j| j != b).enumerate() {
                let plan = level
                    .plan(b, j)
                    .ok_or_else(|| candle_core::Error::Msg(format!("missing warp plan {b}<-{j}")))?;
                let vis = level
                    .visibility(b, j)
                    .ok_or_else(|| candle_core::Error::Msg(format!("missing visibility {b}<-{j}")))?;
                if plan.taps.len() != t || vis.data.len() != t || plan.source_len != t {
                    bail!(
                        "guidance at {}x{} does not match {} tokens",
                        level.height,
                        level.width,
                        t
                    );
                }
                let base = (b * (n - 1) + slot) * t;
                for (p, taps) in plan.taps.iter().enumerate() {
                    for (k, tap) in taps.iter().enumerate() {
                        if let Some((src, w)) = tap {
                            index[k][base + p] = (j * t + src) as u32;
                            weight[k][base + p] = *w;
                        }
                    }
                    if !vis.data[p] {
                        bias[b * n * t + (slot + 1) * t + p] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let tap_index = index
            .into_iter()
            .map(|ix| Tensor::from_vec(ix, rows, device))
            .collect::<Result<Vec<_>>>()?;
        let tap_weight = weight
            .into_iter()
            .map(|w| Tensor::from_vec(w, (rows, 1), device)?.to_dtype(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(GgaLevel {
            views: n,
            height: level.height,
            width: level.width,
            tap_index,
            tap_weight,
            bias: Tensor::from_vec(bias, (n, 1, n * t), device)?.to_dtype(dtype)?,
        })
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Warped tokens of every other view, `(views, (views-1) * tokens, d)`,
    /// in ascending source-view order.
    pub fn warp(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, d) = x.dims3()?;
        if n != self.views || t != self.tokens() {
            bail!(
                "features {:?} do not match guidance for {} views at {}x{}",
                x.dims(),
                self.views,
                self.height,
                self.width
            );
        }
        let flat = Tensor::cat(&[x.reshape((n * t, d))?, Tensor::zeros((1, d), x.dtype(), x.device())?], 0)?
            .contiguous()?;
        let mut acc: Option<Tensor> = None;
        for (idx, w) in self.tap_index.iter().zip(&self.tap_weight) {
            let term = flat.index_select(idx, 0)?.broadcast_mul(w)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        acc.expect("four taps").reshape((n, (n - 1) * t, d))
    }
}

/// Self tokens followed by the warped tokens of every other view.
#[derive(Debug, Clone)]
pub struct AugmentedKV {
    pub keys: Tensor,
    pub values: Tensor,
    pub bias: Tensor,
}

pub fn augment_kv(keys: &Tensor, values: &Tensor, level: &GgaLevel) -> Result<AugmentedKV> {
    if level.views == 1 {
        let (n, t, _) = keys.dims3()?;
        return Ok(AugmentedKV {
            keys: keys.clone(),
            values: values.clone(),
            bias: Tensor::zeros((n, 1, t), keys.dtype(), keys.device())?,
        });
    }
    Ok(AugmentedKV {
        keys: Tensor::cat(&[keys, &level.warp(keys)?], 1)?,
        values: Tensor::cat(&[values, &level.warp(values)?], 1)?,
        bias: level.bias.clone(),
    })
}

/// Attention over augmented keys/values. With a single view this is plain
/// attention.
pub fn geometry_guided_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, level: &GgaLevel) -> Result<Tensor> {
    if level.views == 1 {
        return attention(q, k, v, heads, None);
    }
    let aug = augment_kv(k, v, level)?;
    attention(q, &aug.keys, &aug.values, heads, Some(&aug.bias))
}

/// Prepared guidance for every attention resolution of a backbone.
#[derive(Debug, Clone)]
pub struct GgaGuidance {
    pub views: usize,
    levels: Vec<GgaLevel>,
}

impl GgaGuidance {
    pub fn new(guidance: &GeometryGuidance, resolutions: &[(usize, usize)], dtype: DType, device: &Device) -> Result<Self> {
        let levels = resolutions
            .iter()
            .map(|&(h, w)| guidance.at_resolution(h, w))
            .collect::<Vec<_>>();
        Self::from_levels(&levels, dtype, device)
    }

    pub fn from_levels(levels: &[GuidanceLevel], dtype: DType, device: &Device) -> Result<Self> {
        let Some(first) = levels.first() else {
            bail!("no guidance levels");
        };
        let views = first.views;
        let mut out: Vec<GgaLevel> = Vec::new();
        for level in levels {
            if level.views != views {
                bail!("guidance levels disagree on the view count");
            }
            if out.iter().all(|l| (l.height, l.width) != (level.height, level.width)) {
                out.push(GgaLevel::new(level, dtype, device)?);
            }
        }
        Ok(GgaGuidance { views, levels: out })
    }

    pub fn level(&self, height: usize, width: usize) -> Result<&GgaLevel> {
        self.levels
            .iter()
            .find(|l| (l.height, l.width) == (height, width))
            .ok_or_else(|| candle_core::Error::Msg(format!("no guidance prepared for {height}x{width}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn t3(data: &[f64], shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn scalar_softmax_example() {
        let q = t3(&[1.0], (1, 1, 1));
        let k = t3(&[1.0, 0.0], (1, 2, 1));
        let v = t3(&[2.0, 4.0], (1, 2, 1));
        let a = attention(&q, &k, &v, 1, None).unwrap();
        let w0 = 1f64.exp() / (1f64.exp() + 1.0);
        let expected = 2.0 * w0 + 4.0 * (1.0 - w0);
        assert_relative_eq!(values(&a)[0], expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 2.5378, epsilon = 1e-4);
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = t3(&[0.3, -2.0, 5.0, 1.0], (1, 1, 4));
        let k = t3(&[1.0, 2.0, 3.0, 4.0], (1, 1, 4));
        let v = t3(&[7.0, 8.0, 9.0, 10.0], (1, 1, 4));
        let a = attention(&q, &k, &v, 2, None).unwrap();
        assert_eq!(values(&a), vec![7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn zero_query_averages_values() {
        let q = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let k = t3(&[1.0, 2.0, -3.0, 4.0, 0.5, 0.5], (1, 3, 2));
        let v = t3(&[1.0, 10.0, 2.0, 20.0, 6.0, 60.0], (1, 3, 2));
        let a = values(&attention(&q, &k, &v, 1, None).unwrap());
        for row in a.chunks(2) {
            assert_relative_eq!(row[0], 3.0, epsilon = 1e-12);
            assert_relative_eq!(row[1], 30.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let q = t3(&[1.0], (1, 1, 1));
        let k = t3(&[1.0, 0.0], (1, 2, 1));
        let bias = t3(&[f64::NEG_INFINITY, f64::NEG_INFINITY], (1, 1, 2));
        assert!(attention(&q, &k, &k, 1, Some(&bias)).is_err());
    }

    #[test]
    fn masked_key_is_ignored() {
        let q = t3(&[0.4, -1.0], (1, 1, 2));
        let k = t3(&[1.0, 0.0, 0.0, 1.0, 3.0, 3.0], (1, 3, 2));
        let v = t3(&[1.0, 2.0, 3.0, 4.0, 100.0, 100.0], (1, 3, 2));
        let bias = t3(&[0.0, 0.0, f64::NEG_INFINITY], (1, 1, 3));
        let masked = attention(&q, &k, &v, 1, Some(&bias)).unwrap();
        let k2 = k.narrow(1, 0, 2).unwrap();
        let v2 = v.narrow(1, 0, 2).unwrap();
        let plain = attention(&q, &k2, &v2, 1, None).unwrap();
        for (a, b) in values(&masked).iter().zip(values(&plain)) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn center_normalize_hand_example() {
        let a = t3(&[1.0, 2.0, 3.0], (1, 1, 3));
        let out = values(&center_normalize(&a).unwrap());
        let s = 2f64.sqrt();
        let expected = [-1.0 / (s + NORMALIZE_EPS), 0.0, 1.0 / (s + NORMALIZE_EPS)];
        for (o, e) in out.iter().zip(expected) {
            assert_relative_eq!(*o, e, epsilon = 1e-12);
        }
        assert_relative_eq!(out[0], -0.7071, epsilon = 1e-4);
    }

    #[test]
    fn constant_token_maps_to_zero() {
        let a = t3(&[4.0; 5], (1, 1, 5));
        assert!(values(&center_normalize(&a).unwrap()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn center_normalize_gradient_is_finite_for_constant_tokens() {
        let a = candle_core::Var::from_tensor(&t3(&[2.0; 4], (1, 1, 4))).unwrap();
        let loss = center_normalize(a.as_tensor()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = values(grads.get(a.as_tensor()).unwrap());
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn style_signal_self_injection_matches_rendered_branch() {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f64, 1.0, (2, 6, 8), &dev).unwrap();
        let k = Tensor::randn(0f64, 1.0, (2, 6, 8), &dev).unwrap();
        let v = Tensor::randn(0f64, 1.0, (2, 6, 8), &dev).unwrap();
        let own = center_normalize(&attention(&q, &k, &v, 2, None).unwrap()).unwrap();
        let injected = style_signal(&q, &k, &v, 2, true).unwrap();
        assert_eq!(values(&own), values(&injected));
    }

    #[test]
    fn style_signal_single_style_token_is_broadcast_value() {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f64, 1.0, (3, 5, 4), &dev).unwrap();
        let ks = Tensor::randn(0f64, 1.0, (1, 1, 4), &dev).unwrap();
        let vs = t3(&[0.5, -1.0, 2.0, 0.0], (1, 1, 4));
        let out = values(&style_signal(&q, &ks, &vs, 2, true).unwrap());
        let expected = values(&center_normalize(&vs).unwrap());
        for tok in out.chunks(4) {
            for (a, b) in tok.iter().zip(&expected) {
                assert_relative_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    fn token_stats(t: &Tensor) -> Vec<(f64, f64)> {
        let d = t.dim(D::Minus1).unwrap();
        values(t)
            .chunks(d)
            .map(|c| {
                let mean = c.iter().sum::<f64>() / d as f64;
                let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                (mean, norm)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 24)) {
            let x = t3(&data, (2, 3, 4));
            let s = values(&softmax_last(&x).unwrap());
            for row in s.chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn center_normalize_invariants(
            data in prop::collection::vec(-10.0f64..10.0, 8),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
        ) {
            let a = t3(&data, (1, 1, 8));
            let out = center_normalize(&a).unwrap();
            let (mean, norm) = token_stats(&out)[0];
            prop_assert!(mean.abs() <= 1e-6);
            let spread = data.iter().cloned().fold(f64::MIN, f64::max) - data.iter().cloned().fold(f64::MAX, f64::min);
            if spread > 1e-3 {
                prop_assert!((norm - 1.0).abs() <= 1e-5);
            }
            let again = values(&center_normalize(&out).unwrap());
            let once = values(&out);
            let moved = values(&center_normalize(&((a * scale).unwrap() + shift).unwrap()).unwrap());
            for i in 0..8 {
                prop_assert!((again[i] - once[i]).abs() <= 1e-5);
                prop_assert!((moved[i] - once[i]).abs() <= 1e-5);
            }
        }
    }
}

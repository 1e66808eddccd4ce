//! Attention-space style and content losses and their masked combination.
//!
//! The per-token error is the channel mean of the squared difference, so a
//! pair of antipodal unit tokens of width `d` costs `4 / d`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mask2d;

/// Channel-mean squared difference per token, `(views, tokens)`.
pub fn token_errors(a: &Tensor, target: &Tensor) -> Result<Tensor> {
    if a.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "loss operands differ: {:?} vs {:?}",
            a.dims(),
            target.dims()
        )));
    }
    Ok((a - target)?.sqr()?.mean(D::Minus1)?)
}

/// Mean over views, tokens and channels of the squared difference.
pub fn style_loss(rendered: &Tensor, style_target: &Tensor) -> Result<Tensor> {
    Ok(token_errors(rendered, style_target)?.mean_all()?)
}

/// Same contract as [`style_loss`] with the content branch as target.
pub fn content_loss(rendered: &Tensor, content_target: &Tensor) -> Result<Tensor> {
    Ok(token_errors(rendered, content_target)?.mean_all()?)
}

/// `Σ M e / max(Σ M, 1)` pooled over every view and token.
pub fn masked_mean(errors: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if errors.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match errors {:?}",
            mask.dims(),
            errors.dims()
        )));
    }
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(((errors * mask)?.sum_all()? / count.max(1.0))?)
}

/// `(views, tokens)` 0/1 tensor from per-view masks.
pub fn mask_tensor(masks: &[Mask2d], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::Shape("no masks".into()));
    };
    let t = first.height * first.width;
    let mut data = Vec::with_capacity(masks.len() * t);
    for m in masks {
        if m.data.len() != t {
            return Err(Error::Shape("masks differ in size".into()));
        }
        data.extend(m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Ok(Tensor::from_vec(data, (masks.len(), t), device)?.to_dtype(dtype)?)
}

/// Rendered-branch output with its two targets at one attention site.
#[derive(Debug, Clone)]
pub struct LayerTerms {
    pub name: String,
    pub rendered: Tensor,
    pub style_target: Tensor,
    pub content_target: Tensor,
    /// `(views, tokens)` mask.
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub layers: Vec<String>,
    pub style_per_layer: Vec<f64>,
    pub content_per_layer: Vec<f64>,
    pub style: f64,
    pub content: f64,
    pub total: f64,
    pub lambda: f64,
    /// Fraction of tokens kept by the mask, over all layers and views.
    pub mask_fill_rate: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.style.is_finite()
            && self.content.is_finite()
            && self.style_per_layer.iter().chain(&self.content_per_layer).all(|v| v.is_finite())
    }
}

/// Sums `masked(style + λ content)` over layers. Returns the differentiable
/// total alongside its report.
pub fn total_loss(layers: &[LayerTerms], lambda: f64) -> Result<(Tensor, LossReport)> {
    if layers.is_empty() {
        return Err(Error::Shape("no attention layers to build a loss from".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be non-negative, got {lambda}")));
    }
    let mut total: Option<Tensor> = None;
    let mut report = LossReport {
        layers: Vec::new(),
        style_per_layer: Vec::new(),
        content_per_layer: Vec::new(),
        style: 0.0,
        content: 0.0,
        total: 0.0,
        lambda,
        mask_fill_rate: 0.0,
    };
    let (mut kept, mut all) = (0.0, 0usize);
    for l in layers {
        let count = l.mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if count <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "the geometry mask removes every token at {}; use a larger or more varied camera batch",
                l.name
            )));
        }
        kept += count;
        all += l.mask.elem_count();
        let es = token_errors(&l.rendered, &l.style_target)?;
        let ec = token_errors(&l.rendered, &l.content_target)?;
        let combined = (&es + (&ec * lambda)?)?;
        let term = masked_mean(&combined, &l.mask)?;
        let s = masked_mean(&es.detach(), &l.mask)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let c = masked_mean(&ec.detach(), &l.mask)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        report.layers.push(l.name.clone());
        report.style_per_layer.push(s);
        report.content_per_layer.push(c);
        report.style += s;
        report.content += c;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.expect("at least one layer");
    report.total = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    report.mask_fill_rate = kept / all as f64;
    Ok((total, report))
}

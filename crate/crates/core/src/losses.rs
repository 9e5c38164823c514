//! Self-supervised objective: photometric warping error of the composed flow
//! plus centering and smoothness regularizers.
//!
//! - render: mean squared difference between frame 1 and frame 2 sampled at
//!   `u + Φ(u)`.
//! - center: for every capsule, squared norm of the occupancy-weighted
//!   centroid of its canonical-frame mask, summed over capsules. It pushes
//!   part placement into the pose rather than into the decoder.
//! - smooth: mean squared forward difference of the composed flow, per axis.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CoordGrid;
use crate::model::{warp, CapsuleModel, PairOutput};

/// Guards the centroid division for empty masks.
pub const CENTER_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_center: f64,
    pub w_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_center: 1e-2,
            w_smooth: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if ok(self.w_center) && ok(self.w_smooth) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub render: f64,
    pub center: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.render, self.center, self.smooth, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable loss terms of one batch.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub render: Tensor,
    pub center: Tensor,
    pub smooth: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let get = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBreakdown {
            render: get(&self.render)?,
            center: get(&self.center)?,
            smooth: get(&self.smooth)?,
            total: get(&self.total)?,
        })
    }
}

/// Mean squared error between `image_a` and `image_b` warped by `flow`.
///
/// Images are `(B, 3, H, W)`, flow is `(B, 2, H, W)` in pixels.
pub fn render_loss(image_a: &Tensor, image_b: &Tensor, flow: &Tensor) -> Result<Tensor> {
    if image_a.dims() != image_b.dims() {
        return Err(Error::Shape(format!(
            "frames differ in shape: {:?} vs {:?}",
            image_a.dims(),
            image_b.dims()
        )));
    }
    let predicted = warp(image_b, flow)?;
    Ok((image_a - predicted)?.sqr()?.mean_all()?)
}

/// Batch mean of `Σ_k ‖centroid_k‖²` for canonical-frame masks `(B, K, P)`
/// sampled on `grid` (`P = grid.len()`).
pub fn center_loss(canonical_masks: &Tensor, grid: &CoordGrid) -> Result<Tensor> {
    let (b, _k, p) = canonical_masks.dims3()?;
    if p != grid.len() {
        return Err(Error::Shape(format!(
            "{p} mask samples for a grid of {} points",
            grid.len()
        )));
    }
    let (xs, ys) = grid.tensors(canonical_masks.device(), canonical_masks.dtype())?;
    let xs = xs.unsqueeze(0)?;
    let ys = ys.unsqueeze(0)?;
    let mass = (canonical_masks.sum_keepdim(2)? + CENTER_EPS)?;
    let cx = canonical_masks.broadcast_mul(&xs)?.sum_keepdim(2)?.div(&mass)?;
    let cy = canonical_masks.broadcast_mul(&ys)?.sum_keepdim(2)?.div(&mass)?;
    let per_sample = (cx.sqr()? + cy.sqr()?)?.sum_all()?;
    Ok((per_sample / b as f64)?)
}

/// Mean squared forward difference along x plus the same along y, each
/// summed over both flow channels. `flow` is `(B, 2, H, W)`.
pub fn smooth_loss(flow: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = flow.dims4()?;
    let zero = || Tensor::zeros((), flow.dtype(), flow.device());
    let x_term = if w > 1 {
        let d = (flow.narrow(3, 1, w - 1)? - flow.narrow(3, 0, w - 1)?)?;
        (d.sqr()?.sum_all()? / (b * h * (w - 1)) as f64)?
    } else {
        zero()?
    };
    let y_term = if h > 1 {
        let d = (flow.narrow(2, 1, h - 1)? - flow.narrow(2, 0, h - 1)?)?;
        (d.sqr()?.sum_all()? / (b * (h - 1) * w) as f64)?
    } else {
        zero()?
    };
    debug_assert_eq!(c, 2);
    Ok((x_term + y_term)?)
}

/// Combines the terms computed from a Siamese forward pass.
pub fn loss_terms(
    output: &PairOutput,
    images_a: &Tensor,
    images_b: &Tensor,
    canonical: &CoordGrid,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let render = render_loss(images_a, images_b, &output.flow)?;
    let center = center_loss(&output.canonical_masks, canonical)?;
    let smooth = smooth_loss(&output.flow)?;
    let total = ((&render + (&center * weights.w_center)?)? + (&smooth * weights.w_smooth)?)?;
    Ok(LossTerms {
        render,
        center,
        smooth,
        total,
    })
}

/// Encodes both frames with the shared encoder, composes flow and
/// evaluates the weighted objective.
pub fn total_loss(
    model: &CapsuleModel,
    images_a: &Tensor,
    images_b: &Tensor,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let images_a = images_a.to_dtype(model.dtype())?;
    let images_b = images_b.to_dtype(model.dtype())?;
    let output = model.forward_pair(&images_a, &images_b)?;
    loss_terms(&output, &images_a, &images_b, model.canonical_grid(), weights)
}

//! Differentiable image-formation operators: depth-ordered visibility,
//! pose-parametric flow and bilinear warping.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::geometry::{check_scales, AffineBatch, CoordGrid};

/// Per-pixel softmax over parts of the depth-weighted masks `d_k · Λ_k(u)`.
///
/// `raw_masks` is `(B, K, H, W)`, `depth_logits` is `(B, K)`. When
/// `occlusion` is false every part gets the uniform weight `1/K`.
pub fn visibility(raw_masks: &Tensor, depth_logits: &Tensor, occlusion: bool) -> Result<Tensor> {
    let (b, k, _, _) = raw_masks.dims4()?;
    if depth_logits.dims() != [b, k] {
        return Err(Error::Shape(format!(
            "depth logits {:?} do not match masks {:?}",
            depth_logits.dims(),
            raw_masks.dims()
        )));
    }
    if !occlusion {
        return Ok((raw_masks.ones_like()? / k as f64)?);
    }
    let logits = raw_masks.broadcast_mul(&depth_logits.reshape((b, k, 1, 1))?)?;
    let max = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Dense flow from frame 1 to frame 2, in pixels, `(B, 2, H, W)`.
///
/// Each part contributes the rigid flow `T_k u - u` with
/// `T_k = P_b,k ∘ P_a,k⁻¹`, weighted by its frame-1 visibility. The flow is
/// evaluated as `P_b,k v - P_a,k v` with `v = P_a,k⁻¹ u`, so identical
/// poses produce exactly zero flow.
pub fn compose_flow(
    poses_a: &Tensor,
    poses_b: &Tensor,
    visible_a: &Tensor,
    grid: &CoordGrid,
) -> Result<Tensor> {
    let (b, k, _) = poses_a.dims3()?;
    if poses_b.dims() != poses_a.dims() {
        return Err(Error::Shape(format!(
            "pose sets differ in shape: {:?} vs {:?}",
            poses_a.dims(),
            poses_b.dims()
        )));
    }
    if visible_a.dims() != [b, k, grid.height, grid.width] {
        return Err(Error::Shape(format!(
            "visibility {:?} does not match {b}x{k} parts on a {}x{} grid",
            visible_a.dims(),
            grid.height,
            grid.width
        )));
    }
    let flat_a = poses_a.reshape((b * k, 4))?;
    let flat_b = poses_b.reshape((b * k, 4))?;
    check_scales(&flat_a)?;
    check_scales(&flat_b)?;
    let (xs, ys) = grid.tensors(poses_a.device(), poses_a.dtype())?;
    let inv_a = AffineBatch::inverse_from_poses(&flat_a)?;
    let (vx, vy) = inv_a.apply(&xs, &ys)?;

    let fa = AffineBatch::from_poses(&flat_a)?;
    let fb = AffineBatch::from_poses(&flat_b)?;
    let diff = AffineBatch {
        m00: (&fb.m00 - &fa.m00)?,
        m01: (&fb.m01 - &fa.m01)?,
        m10: (&fb.m10 - &fa.m10)?,
        m11: (&fb.m11 - &fa.m11)?,
        t0: (&fb.t0 - &fa.t0)?,
        t1: (&fb.t1 - &fa.t1)?,
    };
    let (dx, dy) = diff.apply(&vx, &vy)?;

    let p = grid.len();
    let vis = visible_a.reshape((b, k, p))?;
    let fx = (vis.clone() * dx.reshape((b, k, p))?)?.sum(1)?;
    let fy = (vis * dy.reshape((b, k, p))?)?.sum(1)?;
    let fx = (fx * (grid.width as f64 / 2.0))?;
    let fy = (fy * (grid.height as f64 / 2.0))?;
    Ok(Tensor::stack(&[fx, fy], 1)?.reshape((b, 2, grid.height, grid.width))?)
}

/// Samples `image` at `u + flow(u)` with bilinear interpolation; sample
/// positions outside the image are clamped to the border.
///
/// `image` is `(B, C, H, W)`, `flow` is `(B, 2, H, W)` in pixels.
pub fn warp(image: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = image.dims4()?;
    if flow.dims() != [b, 2, h, w] {
        return Err(Error::Shape(format!(
            "flow {:?} does not match image {:?}",
            flow.dims(),
            image.dims()
        )));
    }
    let device = image.device();
    let dtype = image.dtype();
    let p = h * w;
    let cols = Tensor::arange(0u32, w as u32, device)?
        .to_dtype(dtype)?
        .reshape((1, 1, w))?
        .broadcast_as((1, h, w))?;
    let rows = Tensor::arange(0u32, h as u32, device)?
        .to_dtype(dtype)?
        .reshape((1, h, 1))?
        .broadcast_as((1, h, w))?;
    let sx = flow
        .narrow(1, 0, 1)?
        .squeeze(1)?
        .broadcast_add(&cols)?
        .clamp(0.0, (w - 1) as f64)?
        .reshape((b, 1, p))?;
    let sy = flow
        .narrow(1, 1, 1)?
        .squeeze(1)?
        .broadcast_add(&rows)?
        .clamp(0.0, (h - 1) as f64)?
        .reshape((b, 1, p))?;

    let x0 = sx.detach().floor()?;
    let y0 = sy.detach().floor()?;
    let wx = (&sx - &x0)?;
    let wy = (&sy - &y0)?;
    let x1 = (&x0 + 1.0)?.minimum((w - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.minimum((h - 1) as f64)?;

    let flat = image.reshape((b, c, p))?;
    let gather = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = ((yy * w as f64)? + xx)?
            .to_dtype(DType::U32)?
            .broadcast_as((b, c, p))?
            .contiguous()?;
        Ok(flat.gather(&idx, D::Minus1)?)
    };
    let i00 = gather(&y0, &x0)?;
    let i01 = gather(&y0, &x1)?;
    let i10 = gather(&y1, &x0)?;
    let i11 = gather(&y1, &x1)?;

    let one_wx = (1.0 - &wx)?;
    let one_wy = (1.0 - &wy)?;
    let top = (i00.broadcast_mul(&one_wx)? + i01.broadcast_mul(&wx)?)?;
    let bottom = (i10.broadcast_mul(&one_wx)? + i11.broadcast_mul(&wx)?)?;
    let out = (top.broadcast_mul(&one_wy)? + bottom.broadcast_mul(&wy)?)?;
    Ok(out.reshape((b, c, h, w))?)
}

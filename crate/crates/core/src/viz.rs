//! PNG renderings: per-part masks, a part-colored overlay, flow on the
//! Middlebury color wheel and the warped second frame.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::model::{warp, CapsuleModel};
use crate::raster::{stack_frames, RgbFrame};

/// Segment lengths of the wheel: red→yellow, yellow→green, green→cyan,
/// cyan→blue, blue→magenta, magenta→red.
pub const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55 wheel colors, 0–255 per channel.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    let ramp = |i: usize, n: usize| (255.0 * i as f64 / n as f64).floor();
    let mut w = Vec::with_capacity(55);
    w.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
    w.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
    w.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
    w.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
    w.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
    w.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
    w
}

/// Color of a flow vector already divided by the normalization radius.
/// Vectors longer than 1 are dimmed; the zero vector is white.
pub fn flow_color(wheel: &[[f64; 3]], u: f64, v: f64) -> [u8; 3] {
    let n = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = fk.floor() as usize % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    [0, 1, 2].map(|c| {
        let col = (1.0 - f) * wheel[k0][c] / 255.0 + f * wheel[k1][c] / 255.0;
        let col = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
        (255.0 * col).floor().clamp(0.0, 255.0) as u8
    })
}

/// Flow field as an image. Vectors are divided by `max_radius`, or by the
/// largest magnitude in the field when `None`.
pub fn flow_to_image(flow: &FlowField, max_radius: Option<f64>) -> RgbImage {
    let wheel = color_wheel();
    let max = max_radius.unwrap_or_else(|| {
        flow.data
            .iter()
            .map(|[u, v]| (*u as f64).hypot(*v as f64))
            .filter(|r| r.is_finite())
            .fold(0.0, f64::max)
    });
    let scale = if max > f64::EPSILON { 1.0 / max } else { 0.0 };
    RgbImage::from_fn(flow.width as u32, flow.height as u32, |x, y| {
        let [u, v] = flow.get(y as usize, x as usize);
        let (u, v) = (u as f64, v as f64);
        if !(u.is_finite() && v.is_finite()) {
            return Rgb([0, 0, 0]);
        }
        Rgb(flow_color(&wheel, u * scale, v * scale))
    })
}

/// Grayscale rendering of a `[0, 1]` field.
pub fn field_to_image(values: &[f64], height: usize, width: usize) -> GrayImage {
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Distinct saturated colors for `k` parts.
pub fn part_palette(k: usize) -> Vec<[f32; 3]> {
    (0..k)
        .map(|i| {
            let h = (i as f32 * 0.618_034).fract() * 6.0;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            match h as usize {
                0 => [1.0, x, 0.0],
                1 => [x, 1.0, 0.0],
                2 => [0.0, 1.0, x],
                3 => [0.0, x, 1.0],
                4 => [x, 0.0, 1.0],
                _ => [1.0, 0.0, x],
            }
        })
        .collect()
}

/// Blends the image with the visibility-weighted part colors.
pub fn overlay(image: &RgbFrame, visible: &[Vec<f64>]) -> RgbFrame {
    let palette = part_palette(visible.len());
    let mut out = image.clone();
    for (p, px) in out.data.iter_mut().enumerate() {
        let mut tint = [0f32; 3];
        for (k, field) in visible.iter().enumerate() {
            for c in 0..3 {
                tint[c] += field[p] as f32 * palette[k][c];
            }
        }
        for c in 0..3 {
            px[c] = 0.4 * px[c] + 0.6 * tint[c].clamp(0.0, 1.0);
        }
    }
    out
}

fn save(img: &impl ImageSave, path: PathBuf, written: &mut Vec<PathBuf>) -> Result<()> {
    img.save_to(&path)?;
    written.push(path);
    Ok(())
}

trait ImageSave {
    fn save_to(&self, path: &Path) -> Result<()>;
}

impl ImageSave for RgbImage {
    fn save_to(&self, path: &Path) -> Result<()> {
        self.save(path).map_err(|e| Error::image(path, e))
    }
}

impl ImageSave for GrayImage {
    fn save_to(&self, path: &Path) -> Result<()> {
        self.save(path).map_err(|e| Error::image(path, e))
    }
}

/// Writes `mask_{k}.png` for every capsule and `overlay.png`; with a second
/// frame also `flow.png` and `warped.png` (frame 2 sampled back into
/// frame 1). Returns the written paths.
pub fn render(
    model: &CapsuleModel,
    image_a: &RgbFrame,
    image_b: Option<&RgbFrame>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let cfg = model.config();
    if (image_a.height, image_a.width) != (cfg.height, cfg.width) {
        return Err(Error::InvalidArgument(format!(
            "image is {}x{} but the model expects {}x{}",
            image_a.height, image_a.width, cfg.height, cfg.width
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = (cfg.height, cfg.width);
    let a = stack_frames([image_a], model.device(), model.dtype())?;
    let b = match image_b {
        Some(f) => stack_frames([f], model.device(), model.dtype())?,
        None => a.clone(),
    };
    let out = model.forward_pair(&a, &b)?;
    let fields = |t: &candle_core::Tensor| -> Result<Vec<Vec<f64>>> {
        let flat: Vec<f64> = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
        Ok(flat.chunks(h * w).map(<[f64]>::to_vec).collect())
    };
    let raw = fields(&out.raw_masks)?;
    let visible = fields(&out.visible)?;

    let mut written = Vec::new();
    for (k, m) in raw.iter().enumerate() {
        save(&field_to_image(m, h, w), out_dir.join(format!("mask_{k}.png")), &mut written)?;
    }
    save(&overlay(image_a, &visible).to_image(), out_dir.join("overlay.png"), &mut written)?;
    if image_b.is_some() {
        let flow = FlowField::from_tensor(&out.flow)?;
        save(&flow_to_image(&flow, None), out_dir.join("flow.png"), &mut written)?;
        let warped = RgbFrame::from_tensor(&warp(&b, &out.flow)?)?;
        save(&warped.to_image(), out_dir.join("warped.png"), &mut written)?;
    }
    Ok(written)
}

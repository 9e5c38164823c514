//! Plain in-memory images and binary masks, plus their PNG encodings.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f32; 3]>,
}

impl RgbFrame {
    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Self {
        RgbFrame {
            height,
            width,
            data: vec![color; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, color: [f32; 3]) {
        self.data[row * self.width + col] = color;
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        RgbFrame {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|c| c.map(|v| to_u8(v) as f32 / 255.0))
                .collect(),
        }
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(self.get(y as usize, x as usize).map(to_u8))
        })
    }

    pub fn from_image(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| p.0.map(|v| v as f32 / 255.0))
            .collect();
        RgbFrame {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        Ok(Self::from_image(&img.to_rgb8()))
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let n = self.data.len();
        let mut planar = vec![0f32; 3 * n];
        for (i, px) in self.data.iter().enumerate() {
            for c in 0..3 {
                planar[c * n + i] = px[c];
            }
        }
        Ok(Tensor::from_vec(planar, (3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`; values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.dims() {
            [1, 3, _, _] => t.squeeze(0)?,
            [3, _, _] => t.clone(),
            d => return Err(Error::Shape(format!("expected a (3, H, W) image, got {d:?}"))),
        };
        let (_, height, width) = t.dims3()?;
        let planar: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let n = height * width;
        let data = (0..n)
            .map(|i| [0, 1, 2].map(|c| planar[c * n + i].clamp(0.0, 1.0)))
            .collect();
        Ok(RgbFrame {
            height,
            width,
            data,
        })
    }
}

/// Stacks equally sized frames into a `(B, 3, H, W)` batch.
pub fn stack_frames<'a>(
    frames: impl IntoIterator<Item = &'a RgbFrame>,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let ts = frames
        .into_iter()
        .map(|f| f.to_tensor(device, dtype))
        .collect::<Result<Vec<_>>>()?;
    if ts.is_empty() {
        return Err(Error::InvalidArgument("cannot stack an empty frame list".into()));
    }
    Ok(Tensor::stack(&ts, 0)?)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::image(path, e))?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(Mask {
            height: h as usize,
            width: w as usize,
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        })
    }
}

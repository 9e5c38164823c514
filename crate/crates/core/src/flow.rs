//! Dense flow fields and the Middlebury `.flo` format.
//!
//! A `.flo` file is little-endian: the float32 tag `202021.25`, int32 width,
//! int32 height, then `width * height` interleaved float32 `(u, v)` pairs in
//! row-major order.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const FLO_TAG: f32 = 202021.25;

/// Per-pixel displacement from frame 1 to frame 2, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    /// Row-major `(u, v)` pairs.
    pub data: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![[0.0; 2]; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 2] {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: [f32; 2]) {
        self.data[row * self.width + col] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v[0].is_finite() && v[1].is_finite())
    }

    /// `(2, H, W)` tensor with channels `(u, v)`.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let n = self.data.len();
        let mut planar = vec![0f32; 2 * n];
        for (i, [u, v]) in self.data.iter().enumerate() {
            planar[i] = *u;
            planar[n + i] = *v;
        }
        Ok(Tensor::from_vec(planar, (2, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`FlowField::to_tensor`]; accepts `(2, H, W)` or `(1, 2, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.dims() {
            [1, 2, _, _] => t.squeeze(0)?,
            [2, _, _] => t.clone(),
            d => return Err(Error::Shape(format!("expected a (2, H, W) flow, got {d:?}"))),
        };
        let (_, height, width) = t.dims3()?;
        let planar: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let n = height * width;
        let data = (0..n).map(|i| [planar[i], planar[n + i]]).collect();
        Ok(FlowField {
            height,
            width,
            data,
        })
    }

    pub fn write_flo<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(12 + 8 * self.data.len());
        buf.extend_from_slice(&FLO_TAG.to_le_bytes());
        buf.extend_from_slice(&(self.width as i32).to_le_bytes());
        buf.extend_from_slice(&(self.height as i32).to_le_bytes());
        for [u, v] in &self.data {
            buf.extend_from_slice(&u.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_flo<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<flo stream>", e))?;
        Self::from_flo_bytes(&bytes)
    }

    pub fn from_flo_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
        if bytes.len() < 12 {
            return Err(Error::InvalidArgument("truncated .flo header".into()));
        }
        if f32::from_le_bytes(word(0)) != FLO_TAG {
            return Err(Error::InvalidArgument("bad .flo tag".into()));
        }
        let width = i32::from_le_bytes(word(4));
        let height = i32::from_le_bytes(word(8));
        if width <= 0 || height <= 0 {
            return Err(Error::InvalidArgument(format!(
                "bad .flo dimensions {width}x{height}"
            )));
        }
        let (width, height) = (width as usize, height as usize);
        let expected = 12 + 8 * width * height;
        if bytes.len() != expected {
            return Err(Error::InvalidArgument(format!(
                ".flo payload is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let data = (0..width * height)
            .map(|i| {
                let o = 12 + 8 * i;
                [f32::from_le_bytes(word(o)), f32::from_le_bytes(word(o + 4))]
            })
            .collect();
        Ok(FlowField {
            height,
            width,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_flo(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_flo_bytes(&bytes).map_err(|e| match e {
            Error::InvalidArgument(msg) => {
                Error::InvalidArgument(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut f = FlowField::zeros(2, 3);
        f.set(1, 2, [1.5, -2.0]);
        let mut bytes = Vec::new();
        f.write_flo(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 12 + 8 * 6);
        assert_eq!(&bytes[0..4], &202021.25f32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3i32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2i32.to_le_bytes());
        let last = 12 + 8 * 5;
        assert_eq!(&bytes[last..last + 4], &1.5f32.to_le_bytes());
        assert_eq!(&bytes[last + 4..last + 8], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(FlowField::from_flo_bytes(&[0; 8]).is_err());
        let mut bytes = Vec::new();
        FlowField::zeros(2, 2).write_flo(&mut bytes).unwrap();
        bytes[0] ^= 1;
        assert!(FlowField::from_flo_bytes(&bytes).is_err());
        let mut bytes = Vec::new();
        FlowField::zeros(2, 2).write_flo(&mut bytes).unwrap();
        bytes.pop();
        assert!(FlowField::from_flo_bytes(&bytes).is_err());
    }

    #[test]
    fn tensor_conversion() {
        let mut f = FlowField::zeros(2, 3);
        f.set(0, 1, [1.0, 2.0]);
        let t = f.to_tensor(&Device::Cpu, DType::F32).unwrap();
        let v: Vec<Vec<Vec<f32>>> = t.to_vec3().unwrap();
        assert_eq!(v[0][0][1], 1.0);
        assert_eq!(v[1][0][1], 2.0);
        assert_eq!(FlowField::from_tensor(&t).unwrap(), f);
    }

    proptest! {
        #[test]
        fn flo_byte_round_trip(
            h in 1usize..6,
            w in 1usize..6,
            seed in proptest::collection::vec(-1e4f32..1e4, 72),
        ) {
            let data = (0..h * w).map(|i| [seed[2 * i % 72], seed[(2 * i + 1) % 72]]).collect();
            let f = FlowField { height: h, width: w, data };
            let mut bytes = Vec::new();
            f.write_flo(&mut bytes).unwrap();
            let back = FlowField::from_flo_bytes(&bytes).unwrap();
            let mut again = Vec::new();
            back.write_flo(&mut again).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(again, bytes);
        }
    }
}

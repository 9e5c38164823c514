use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors. Names are dotted paths such as
/// `encoder.conv0.weight`; iteration order is lexicographic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Uniform `U(-bound, bound)` initialization from the given generator.
    pub(crate) fn uniform(
        &mut self,
        name: String,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
        device: &Device,
        dtype: DType,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        let t = Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub(crate) fn constant(
        &mut self,
        name: String,
        shape: &[usize],
        value: f64,
        device: &Device,
        dtype: DType,
    ) -> Result<Tensor> {
        let t = (Tensor::ones(shape, dtype, device)? * value)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// Tensor view of an existing parameter, checked against the expected shape.
    pub(crate) fn fetch(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let var = self.get(name)?;
        if var.dims() != shape {
            return Err(Error::Incompatible(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                var.dims()
            )));
        }
        Ok(var.as_tensor().clone())
    }
}

/// Where layer parameters come from: freshly initialized or an existing store.
pub(crate) enum Source<'a> {
    Init {
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
        device: &'a Device,
        dtype: DType,
    },
    Load(&'a ParamStore),
}

impl Source<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Tensor> {
        match self {
            Source::Init {
                store,
                rng,
                device,
                dtype,
            } => store.uniform(name, shape, bound, rng, device, *dtype),
            Source::Load(store) => store.fetch(&name, shape),
        }
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Tensor> {
        match self {
            Source::Init {
                store,
                device,
                dtype,
                ..
            } => store.constant(name, shape, value, device, *dtype),
            Source::Load(store) => store.fetch(&name, shape),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// `gain` multiplies the default `1/sqrt(fan_in)` weight bound.
    pub fn new(
        src: &mut Source<'_>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: src.uniform(format!("{name}.weight"), &[fan_out, fan_in], gain * bound)?,
            bias: src.uniform(format!("{name}.bias"), &[fan_out], gain * bound)?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// `(N, in) -> (N, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// 3×3 convolution, stride 2, padding 1.
#[derive(Debug, Clone)]
pub(crate) struct DownConv {
    weight: Tensor,
    bias: Tensor,
}

impl DownConv {
    pub fn new(src: &mut Source<'_>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * 9) as f64).sqrt();
        Ok(DownConv {
            weight: src.uniform(format!("{name}.weight"), &[c_out, c_in, 3, 3], bound)?,
            bias: src.uniform(format!("{name}.bias"), &[c_out], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, 1, 2, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn output_size(size: usize) -> usize {
        size.div_ceil(2)
    }
}

/// Group normalization with a learned per-channel affine.
#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(src: &mut Source<'_>, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(GroupNorm {
            groups,
            gamma: src.constant(format!("{name}.gamma"), &[channels], 1.0)?,
            beta: src.constant(format!("{name}.beta"), &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Logistic sigmoid, expressed through `tanh` so it stays differentiable.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

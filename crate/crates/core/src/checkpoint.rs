//! Checkpoint container: a safetensors file holding named parameter arrays,
//! with a JSON header stored under the `flowparts` metadata key.
//!
//! Model parameters are stored as `model/<name>`; training state (optimizer
//! moments) uses other prefixes and is ignored when only loading a model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CapsuleModel, ModelConfig, ParamStore};

pub const FORMAT: &str = "flowparts-checkpoint/1";
const HEADER_KEY: &str = "flowparts";
pub const MODEL_PREFIX: &str = "model/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    /// `C`.
    pub capsule_dim: usize,
    /// `K`.
    pub num_capsules: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub architecture: ModelConfig,
    pub step: u64,
    /// Training configuration echo, when written by the trainer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

impl CheckpointHeader {
    pub fn new(architecture: &ModelConfig, step: u64) -> Self {
        CheckpointHeader {
            format: FORMAT.to_string(),
            capsule_dim: architecture.capsule_dim,
            num_capsules: architecture.num_capsules,
            resolution: [architecture.height, architecture.width],
            architecture: architecture.clone(),
            step,
            training: None,
        }
    }

    /// Fails unless `K`, `C` and resolution agree with `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_capsules != config.num_capsules {
            problems.push(format!("K {} vs {}", self.num_capsules, config.num_capsules));
        }
        if self.capsule_dim != config.capsule_dim {
            problems.push(format!("C {} vs {}", self.capsule_dim, config.capsule_dim));
        }
        if self.resolution != [config.height, config.width] {
            problems.push(format!(
                "resolution {:?} vs {:?}",
                self.resolution,
                [config.height, config.width]
            ));
        }
        if self.architecture != *config {
            problems.push("architecture settings differ".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(problems.join(", ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

impl Checkpoint {
    pub fn from_model(model: &CapsuleModel, step: u64) -> Result<Self> {
        let tensors = model
            .params()
            .iter()
            .map(|(name, var)| (format!("{MODEL_PREFIX}{name}"), var.as_tensor().detach()))
            .collect();
        Ok(Checkpoint {
            header: CheckpointHeader::new(model.config(), step),
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let (dtype, bytes) = to_bytes(t)?;
                Ok((name.clone(), dtype, t.dims().to_vec(), bytes))
            })
            .collect::<Result<_>>()?;
        let views = encoded
            .iter()
            .map(|(name, dtype, shape, bytes)| {
                safetensors::tensor::TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.as_str(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert(HEADER_KEY.to_string(), serde_json::to_string(&self.header)?);
        let bytes = safetensors::serialize(views, Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let header_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| bad("missing checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_str(header_json)?;
        if header.format != FORMAT {
            return Err(bad(format!("unsupported format `{}`", header.format)));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let data = view.data();
            let t = match view.dtype() {
                Dtype::F64 => {
                    let v: Vec<f64> = data
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, shape, device)?
                }
                Dtype::F32 => {
                    let v: Vec<f32> = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, shape, device)?
                }
                other => return Err(bad(format!("unsupported dtype {other:?} for `{name}`"))),
            };
            tensors.insert(name, t);
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    /// Rebuilds the model; parameters become fresh trainable variables.
    pub fn model(&self) -> Result<CapsuleModel> {
        let mut params = ParamStore::new();
        for (name, t) in self.group(MODEL_PREFIX) {
            params.insert(name, Var::from_tensor(&t)?);
        }
        CapsuleModel::from_params(self.header.architecture.clone(), params)
    }
}

pub fn load_model(path: impl AsRef<Path>, device: &Device) -> Result<(CapsuleModel, CheckpointHeader)> {
    let ckpt = Checkpoint::load(path, device)?;
    Ok((ckpt.model()?, ckpt.header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_capsules: 2,
            capsule_dim: 7,
            height: 8,
            width: 8,
            encoder_channels: vec![4],
            encoder_hidden: 8,
            norm_groups: 2,
            decoder_layers: 2,
            decoder_width: 6,
            canonical_grid: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for dtype in [DType::F32, DType::F64] {
            let m = CapsuleModel::new(tiny(), 4, &Device::Cpu, dtype).unwrap();
            let path = dir.path().join(format!("{dtype:?}.safetensors"));
            Checkpoint::from_model(&m, 17).unwrap().save(&path).unwrap();
            let (back, header) = load_model(&path, &Device::Cpu).unwrap();
            assert_eq!(header.step, 17);
            assert_eq!(header.num_capsules, 2);
            assert_eq!(header.capsule_dim, 7);
            assert_eq!(header.resolution, [8, 8]);
            assert_eq!(back.dtype(), dtype);
            for ((n1, v1), (n2, v2)) in m.params().iter().zip(back.params().iter()) {
                assert_eq!(n1, n2);
                let a: Vec<f64> = v1.as_tensor().to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                let b: Vec<f64> = v2.as_tensor().to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn header_compatibility() {
        let h = CheckpointHeader::new(&tiny(), 0);
        assert!(h.check_compatible(&tiny()).is_ok());
        let other = ModelConfig {
            num_capsules: 3,
            ..tiny()
        };
        assert!(matches!(h.check_compatible(&other), Err(Error::Incompatible(_))));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path, &Device::Cpu).is_err());
    }
}

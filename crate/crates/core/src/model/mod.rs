//! The capsule encoder, the implicit mask decoder and the flow-rendering
//! forward pass that ties them together.

mod layers;
pub mod ops;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_scales, make_grid, AffineBatch, CoordGrid, SimilarityPose, SCALE_EPS};

pub use layers::{sigmoid, ParamStore};
use layers::{DownConv, GroupNorm, Linear, Source};
pub use ops::{compose_flow, visibility, warp};

/// Number of capsule entries that are not shape code: 4 pose + 1 depth.
pub const POSE_AND_DEPTH: usize = 5;

/// Architecture hyper-parameters. Everything here is stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `K`.
    pub num_capsules: usize,
    /// `C`: shape code, pose and depth together.
    pub capsule_dim: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the stride-2 convolution blocks.
    pub encoder_channels: Vec<usize>,
    pub encoder_hidden: usize,
    pub norm_groups: usize,
    /// Number of hidden layers in the mask decoder.
    pub decoder_layers: usize,
    pub decoder_width: usize,
    /// Depth-ordered visibility; when off, every part gets weight `1/K`.
    pub occlusion: bool,
    /// Side of the canonical-frame grid used by the centering loss.
    pub canonical_grid: usize,
    /// Multiplier on the default init bound of the capsule head.
    pub head_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_capsules: 8,
            capsule_dim: 32,
            height: 64,
            width: 64,
            encoder_channels: vec![32, 64, 128, 256, 256],
            encoder_hidden: 512,
            norm_groups: 8,
            decoder_layers: 4,
            decoder_width: 64,
            occlusion: true,
            canonical_grid: 32,
            head_init_gain: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn shape_dim(&self) -> usize {
        self.capsule_dim.saturating_sub(POSE_AND_DEPTH)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_capsules == 0 {
            return fail("num_capsules must be at least 1".into());
        }
        if self.capsule_dim < POSE_AND_DEPTH + 1 {
            return fail(format!(
                "capsule_dim {} leaves no room for a shape code (need >= 6)",
                self.capsule_dim
            ));
        }
        if self.height == 0 || self.width == 0 {
            return fail("resolution must be positive".into());
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return fail("encoder_channels must be a non-empty list of positive widths".into());
        }
        if self.decoder_layers == 0 || self.decoder_width == 0 || self.encoder_hidden == 0 {
            return fail("layer counts and widths must be positive".into());
        }
        if self.canonical_grid == 0 || self.norm_groups == 0 {
            return fail("canonical_grid and norm_groups must be positive".into());
        }
        Ok(())
    }

    fn trunk_output(&self) -> (usize, usize) {
        self.encoder_channels.iter().fold((self.height, self.width), |(h, w), _| {
            (DownConv::output_size(h), DownConv::output_size(w))
        })
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Convolutional trunk plus a fully connected head emitting `K × C` values.
#[derive(Debug, Clone)]
struct Encoder {
    blocks: Vec<(DownConv, GroupNorm)>,
    fc: Linear,
    head: Linear,
    num_capsules: usize,
    capsule_dim: usize,
}

impl Encoder {
    fn new(src: &mut Source<'_>, cfg: &ModelConfig) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.encoder_channels.iter().enumerate() {
            let conv = DownConv::new(src, &format!("encoder.conv{i}"), c_in, c_out)?;
            let norm = GroupNorm::new(
                src,
                &format!("encoder.norm{i}"),
                gcd(cfg.norm_groups, c_out),
                c_out,
            )?;
            blocks.push((conv, norm));
            c_in = c_out;
        }
        let (h, w) = cfg.trunk_output();
        let flat = c_in * h * w;
        let fc = Linear::new(src, "encoder.fc", flat, cfg.encoder_hidden, 1.0)?;
        let head = Linear::new(
            src,
            "encoder.head",
            cfg.encoder_hidden,
            cfg.num_capsules * cfg.capsule_dim,
            cfg.head_init_gain,
        )?;
        Ok(Encoder {
            blocks,
            fc,
            head,
            num_capsules: cfg.num_capsules,
            capsule_dim: cfg.capsule_dim,
        })
    }

    /// `(B, 3, H, W) -> (B, K, C)` raw capsule values.
    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for (conv, norm) in &self.blocks {
            x = norm.forward(&conv.forward(&x)?)?.silu()?;
        }
        let b = x.dim(0)?;
        let x = self.fc.forward(&x.flatten_from(1)?)?.silu()?;
        let raw = self.head.forward(&x)?;
        Ok(raw.reshape((b, self.num_capsules, self.capsule_dim))?)
    }
}

/// Pointwise MLP on `[v; s]` with a sigmoid output.
#[derive(Debug, Clone)]
struct Decoder {
    input: Linear,
    hidden: Vec<Linear>,
    output: Linear,
    shape_dim: usize,
}

impl Decoder {
    fn new(src: &mut Source<'_>, cfg: &ModelConfig) -> Result<Self> {
        let s = cfg.shape_dim();
        let width = cfg.decoder_width;
        let input = Linear::new(src, "decoder.layer0", 2 + s, width, 1.0)?;
        let hidden = (1..cfg.decoder_layers)
            .map(|i| Linear::new(src, &format!("decoder.layer{i}"), width, width, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(src, "decoder.output", width, 1, 1.0)?;
        Ok(Decoder {
            input,
            hidden,
            output,
            shape_dim: s,
        })
    }

    /// Occupancy of `N` shape codes at canonical points.
    ///
    /// `codes` is `(N, S)`; `xs`, `ys` are `(N, P)` or `(1, P)`. Returns `(N, P)`.
    fn forward(&self, codes: &Tensor, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
        let (n, s) = codes.dims2()?;
        if s != self.shape_dim {
            return Err(Error::Shape(format!(
                "shape code has {s} entries, decoder expects {}",
                self.shape_dim
            )));
        }
        let p = xs.dim(1)?;
        let w = self.input.weight();
        let width = w.dim(0)?;
        let wx = w.narrow(1, 0, 1)?.reshape((1, 1, width))?;
        let wy = w.narrow(1, 1, 1)?.reshape((1, 1, width))?;
        let ws = w.narrow(1, 2, s)?;
        let code_proj = codes
            .matmul(&ws.t()?)?
            .broadcast_add(self.input.bias())?
            .reshape((n, 1, width))?;
        let h = (xs.unsqueeze(2)?.broadcast_mul(&wx)? + ys.unsqueeze(2)?.broadcast_mul(&wy)?)?
            .broadcast_add(&code_proj)?
            .silu()?;
        let mut h = h.reshape((n * p, width))?;
        for layer in &self.hidden {
            h = layer.forward(&h)?.silu()?;
        }
        let out = sigmoid(&self.output.forward(&h)?)?;
        Ok(out.reshape((n, p))?)
    }
}

/// One part: shape code `s`, similarity pose `θ` and depth logit `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub shape_code: Vec<f64>,
    pub pose: SimilarityPose,
    pub depth_logit: f64,
}

impl Capsule {
    /// Concatenated `(s, θ, d)`; length `C`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.shape_code.clone();
        v.extend_from_slice(&self.pose.as_array());
        v.push(self.depth_logit);
        v
    }
}

/// `K` capsules of one image; index `k` is the part identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsuleSet {
    pub capsules: Vec<Capsule>,
}

impl CapsuleSet {
    pub fn features(&self) -> Vec<f64> {
        self.capsules.iter().flat_map(Capsule::to_vec).collect()
    }
}

/// Encoder output for a batch, kept as tensors for differentiation.
#[derive(Debug, Clone)]
pub struct CapsuleBatch {
    /// `(B, K, C-5)`.
    pub shape_codes: Tensor,
    /// `(B, K, 4)` with columns `(tx, ty, rot, scale)`.
    pub poses: Tensor,
    /// `(B, K)`.
    pub depth_logits: Tensor,
}

impl CapsuleBatch {
    /// Splits raw `(B, K, C)` head values. Translation goes through `tanh`,
    /// scale through `exp`; rotation and depth are used as is.
    fn from_raw(raw: &Tensor, shape_dim: usize) -> Result<Self> {
        let shape_codes = raw.narrow(2, 0, shape_dim)?;
        let translation = raw.narrow(2, shape_dim, 2)?.tanh()?;
        let rot = raw.narrow(2, shape_dim + 2, 1)?;
        let scale = raw.narrow(2, shape_dim + 3, 1)?.exp()?;
        let depth_logits = raw.narrow(2, shape_dim + 4, 1)?.squeeze(2)?;
        let poses = Tensor::cat(&[translation, rot, scale], 2)?;
        Ok(CapsuleBatch {
            shape_codes,
            poses,
            depth_logits,
        })
    }

    pub fn from_sets(sets: &[CapsuleSet], device: &Device, dtype: DType) -> Result<Self> {
        let b = sets.len();
        let k = sets.first().map(|s| s.capsules.len()).unwrap_or(0);
        let s = sets
            .first()
            .and_then(|s| s.capsules.first())
            .map(|c| c.shape_code.len())
            .unwrap_or(0);
        let mut codes = Vec::with_capacity(b * k * s);
        let mut poses = Vec::with_capacity(b * k * 4);
        let mut depths = Vec::with_capacity(b * k);
        for set in sets {
            if set.capsules.len() != k {
                return Err(Error::Shape("capsule sets differ in size".into()));
            }
            for c in &set.capsules {
                if c.shape_code.len() != s {
                    return Err(Error::Shape("shape codes differ in length".into()));
                }
                codes.extend_from_slice(&c.shape_code);
                poses.extend_from_slice(&c.pose.as_array());
                depths.push(c.depth_logit);
            }
        }
        Ok(CapsuleBatch {
            shape_codes: Tensor::from_vec(codes, (b, k, s), device)?.to_dtype(dtype)?,
            poses: Tensor::from_vec(poses, (b, k, 4), device)?.to_dtype(dtype)?,
            depth_logits: Tensor::from_vec(depths, (b, k), device)?.to_dtype(dtype)?,
        })
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.poses.dim(0)?)
    }

    pub fn num_capsules(&self) -> Result<usize> {
        Ok(self.poses.dim(1)?)
    }

    pub fn to_sets(&self) -> Result<Vec<CapsuleSet>> {
        let codes: Vec<Vec<Vec<f64>>> = self.shape_codes.to_dtype(DType::F64)?.to_vec3()?;
        let poses: Vec<Vec<Vec<f64>>> = self.poses.to_dtype(DType::F64)?.to_vec3()?;
        let depths: Vec<Vec<f64>> = self.depth_logits.to_dtype(DType::F64)?.to_vec2()?;
        Ok(codes
            .into_iter()
            .zip(poses)
            .zip(depths)
            .map(|((codes, poses), depths)| CapsuleSet {
                capsules: codes
                    .into_iter()
                    .zip(poses)
                    .zip(depths)
                    .map(|((shape_code, p), depth_logit)| Capsule {
                        shape_code,
                        pose: SimilarityPose::from_array([p[0], p[1], p[2], p[3]]),
                        depth_logit,
                    })
                    .collect(),
            })
            .collect())
    }
}

/// Everything the training objective needs from a frame pair.
#[derive(Debug, Clone)]
pub struct PairOutput {
    pub caps_a: CapsuleBatch,
    pub caps_b: CapsuleBatch,
    /// `Λ` of frame 1, `(B, K, H, W)`.
    pub raw_masks: Tensor,
    /// `Λ⁺` of frame 1, `(B, K, H, W)`.
    pub visible: Tensor,
    /// Frame-1 to frame-2 flow in pixels, `(B, 2, H, W)`.
    pub flow: Tensor,
    /// Decoder output on the canonical grid, `(B, K, G*G)`.
    pub canonical_masks: Tensor,
}

/// Capsule encoder and mask decoder with shared parameters.
#[derive(Debug, Clone)]
pub struct CapsuleModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    device: Device,
    dtype: DType,
    grid: CoordGrid,
    canonical: CoordGrid,
}

impl CapsuleModel {
    /// Freshly initialized model; initialization is a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, decoder) = {
            let mut src = Source::Init {
                store: &mut params,
                rng: &mut rng,
                device,
                dtype,
            };
            (Encoder::new(&mut src, &config)?, Decoder::new(&mut src, &config)?)
        };
        Self::assemble(config, params, encoder, decoder, device, dtype)
    }

    /// Builds a model around existing parameters (e.g. from a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let first = params
            .iter()
            .next()
            .ok_or_else(|| Error::Checkpoint("empty parameter store".into()))?
            .1;
        let (device, dtype) = (first.device().clone(), first.dtype());
        let (encoder, decoder) = {
            let mut src = Source::Load(&params);
            (Encoder::new(&mut src, &config)?, Decoder::new(&mut src, &config)?)
        };
        Self::assemble(config, params, encoder, decoder, &device, dtype)
    }

    fn assemble(
        config: ModelConfig,
        params: ParamStore,
        encoder: Encoder,
        decoder: Decoder,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        let grid = make_grid(config.height, config.width)?;
        let canonical = make_grid(config.canonical_grid, config.canonical_grid)?;
        Ok(CapsuleModel {
            config,
            params,
            encoder,
            decoder,
            device: device.clone(),
            dtype,
            grid,
            canonical,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn grid(&self) -> &CoordGrid {
        &self.grid
    }

    pub fn canonical_grid(&self) -> &CoordGrid {
        &self.canonical
    }

    /// Encodes `(B, 3, H, W)` images with values in `[0, 1]`.
    pub fn encode(&self, images: &Tensor) -> Result<CapsuleBatch> {
        match images.dims() {
            [_, 3, h, w] if *h == self.config.height && *w == self.config.width => {}
            d => {
                return Err(Error::Shape(format!(
                    "expected images of shape (B, 3, {}, {}), got {d:?}",
                    self.config.height, self.config.width
                )))
            }
        }
        let raw = self.encoder.forward(&images.to_dtype(self.dtype)?)?;
        CapsuleBatch::from_raw(&raw, self.config.shape_dim())
    }

    /// `D(v; s)`: `codes` is `(N, S)`, `points` is `(P, 2)` shared by all
    /// codes or `(N, P, 2)`. Returns `(N, P)` occupancies in `[0, 1]`.
    pub fn decode_canonical(&self, codes: &Tensor, points: &Tensor) -> Result<Tensor> {
        let (xs, ys) = match points.dims() {
            [p, 2] => (
                points.narrow(1, 0, 1)?.reshape((1, *p))?,
                points.narrow(1, 1, 1)?.reshape((1, *p))?,
            ),
            [n, p, 2] => (
                points.narrow(2, 0, 1)?.reshape((*n, *p))?,
                points.narrow(2, 1, 1)?.reshape((*n, *p))?,
            ),
            d => return Err(Error::Shape(format!("bad point tensor shape {d:?}"))),
        };
        self.decoder.forward(&codes.to_dtype(self.dtype)?, &xs.to_dtype(self.dtype)?, &ys.to_dtype(self.dtype)?)
    }

    /// `Λ_k(u) = D(P⁻¹_θk u; s_k)` on the image grid, `(B, K, H, W)`.
    pub fn mask_in_image(&self, caps: &CapsuleBatch) -> Result<Tensor> {
        self.masks_on_grid(caps, &self.grid)
    }

    /// [`CapsuleModel::mask_in_image`] on an arbitrary grid.
    pub fn masks_on_grid(&self, caps: &CapsuleBatch, grid: &CoordGrid) -> Result<Tensor> {
        let (b, k, s) = caps.shape_codes.dims3()?;
        let flat_poses = caps.poses.reshape((b * k, 4))?;
        check_scales(&flat_poses)?;
        let (xs, ys) = grid.tensors(&self.device, self.dtype)?;
        let (vx, vy) = AffineBatch::inverse_from_poses(&flat_poses)?.apply(&xs, &ys)?;
        let codes = caps.shape_codes.reshape((b * k, s))?;
        let masks = self.decoder.forward(&codes, &vx, &vy)?;
        Ok(masks.reshape((b, k, grid.height, grid.width))?)
    }

    /// Decoder output on the canonical grid, `(B, K, G*G)`.
    pub fn canonical_masks(&self, caps: &CapsuleBatch) -> Result<Tensor> {
        let (b, k, s) = caps.shape_codes.dims3()?;
        let (xs, ys) = self.canonical.tensors(&self.device, self.dtype)?;
        let codes = caps.shape_codes.reshape((b * k, s))?;
        Ok(self.decoder.forward(&codes, &xs, &ys)?.reshape((b, k, self.canonical.len()))?)
    }

    /// Mask of a single capsule on `grid`, row-major.
    pub fn mask_for_capsule(&self, capsule: &Capsule, grid: &CoordGrid) -> Result<Vec<f64>> {
        if !(capsule.pose.scale > SCALE_EPS) {
            return Err(Error::DegeneratePose(capsule.pose.scale));
        }
        let set = CapsuleSet {
            capsules: vec![capsule.clone()],
        };
        let caps = CapsuleBatch::from_sets(&[set], &self.device, self.dtype)?;
        Ok(self
            .masks_on_grid(&caps, grid)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?)
    }

    pub fn visibility(&self, raw_masks: &Tensor, caps: &CapsuleBatch) -> Result<Tensor> {
        visibility(raw_masks, &caps.depth_logits, self.config.occlusion)
    }

    /// Siamese forward pass over a pair of `(B, 3, H, W)` image batches.
    pub fn forward_pair(&self, images_a: &Tensor, images_b: &Tensor) -> Result<PairOutput> {
        let caps_a = self.encode(images_a)?;
        let caps_b = self.encode(images_b)?;
        let raw_masks = self.mask_in_image(&caps_a)?;
        let visible = self.visibility(&raw_masks, &caps_a)?;
        let flow = compose_flow(&caps_a.poses, &caps_b.poses, &visible, &self.grid)?;
        let canonical_masks = self.canonical_masks(&caps_a)?;
        Ok(PairOutput {
            caps_a,
            caps_b,
            raw_masks,
            visible,
            flow,
            canonical_masks,
        })
    }
}

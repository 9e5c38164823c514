//! Procedural moving-shape frame pairs with exact ground truth.
//!
//! Each scene holds a few circles, squares and triangles layered by depth.
//! Every shape undergoes its own similarity motion between the two frames
//! (integer-pixel translations for generated data), so the forward flow,
//! the full (amodal) masks and the visible masks are all known exactly.
//!
//! Two appearance modes exist: `geo` paints flat colors on a flat
//! background, `geo_plus` samples backgrounds and shape textures from
//! user-supplied image directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{make_grid, CoordGrid, SimilarityPose};
use crate::raster::{Mask, RgbFrame};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Half side of the canonical square.
const SQUARE_HALF_SIDE: f64 = 0.85;
/// Circumradius of the canonical (upward-pointing, centroid-centered) triangle.
const TRIANGLE_RADIUS: f64 = 1.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Membership of a point given in the shape's canonical frame.
    pub fn contains(&self, [x, y]: [f64; 2]) -> bool {
        match self {
            ShapeKind::Circle => x * x + y * y <= 1.0,
            ShapeKind::Square => x.abs() <= SQUARE_HALF_SIDE && y.abs() <= SQUARE_HALF_SIDE,
            ShapeKind::Triangle => {
                // Inradius is half the circumradius; edge normals at 90°, 210°, 330°.
                let r = TRIANGLE_RADIUS / 2.0;
                let h = 3f64.sqrt() / 2.0;
                y <= r && (-h * x - 0.5 * y) <= r && (h * x - 0.5 * y) <= r
            }
        }
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    #[default]
    Geo,
    GeoPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetConfig {
    pub backgrounds: PathBuf,
    pub textures: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, usize)> {
        [("train", self.train), ("val", self.val), ("test", self.test)].into_iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub mode: DatasetMode,
    pub height: usize,
    pub width: usize,
    pub splits: SplitSizes,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Shape radius range, in normalized units (fraction of the image side).
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-axis translation bound in pixels; motions are integer shifts.
    pub max_translation_px: i64,
    /// Static shape orientations are drawn from `[-r, r]` radians.
    pub max_shape_rotation: f64,
    /// Minimum max-channel difference between a shape color and the background.
    pub min_contrast: f32,
    pub seed: u64,
    pub assets: Option<AssetConfig>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            mode: DatasetMode::Geo,
            height: 64,
            width: 64,
            splits: SplitSizes {
                train: 100_000,
                val: 1_000,
                test: 10_000,
            },
            min_shapes: 1,
            max_shapes: 3,
            kinds: ShapeKind::ALL.to_vec(),
            scale_min: 0.15,
            scale_max: 0.4,
            max_translation_px: 6,
            max_shape_rotation: 0.0,
            min_contrast: 0.1,
            seed: 0,
            assets: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return fail(format!("resolution {}x{} must be positive", self.height, self.width));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return fail(format!(
                "shape count range [{}, {}] must satisfy 1 <= min <= max",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.kinds.is_empty() {
            return fail("at least one shape kind must be allowed".into());
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return fail(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max",
                self.scale_min, self.scale_max
            ));
        }
        if self.max_translation_px < 0 {
            return fail("max_translation_px must be non-negative".into());
        }
        if !(self.max_shape_rotation >= 0.0 && self.max_shape_rotation.is_finite()) {
            return fail("max_shape_rotation must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.min_contrast) {
            return fail("min_contrast must lie in [0, 1]".into());
        }
        if self.mode == DatasetMode::GeoPlus && self.assets.is_none() {
            return Err(Error::Asset(
                "geo_plus mode requires `assets` with background and texture directories".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<CoordGrid> {
        make_grid(self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Appearance {
    Color([f32; 3]),
    /// Texture index (taken modulo the number of textures) and the integer
    /// pixel anchor the texture is pinned to.
    Texture { id: u32, anchor: [i64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    pub scale: f64,
    pub rot: f64,
    pub appearance: Appearance,
    /// Larger is nearer.
    pub depth_rank: usize,
}

impl ShapeSpec {
    pub fn pose(&self) -> SimilarityPose {
        SimilarityPose {
            tx: self.center[0],
            ty: self.center[1],
            rot: self.rot,
            scale: self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Color([f32; 3]),
    /// Background image index, taken modulo the number of backgrounds.
    Image(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    pub background: Background,
    /// Frame-1 to frame-2 transform of each shape, in image coordinates.
    pub motions: Vec<SimilarityPose>,
}

impl SceneSpec {
    /// The scene as seen in the second frame: every shape moved by its
    /// motion, with identity motions left behind.
    pub fn advance(&self, grid: &CoordGrid) -> Result<SceneSpec> {
        if self.motions.len() != self.shapes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} shapes but {} motions",
                self.shapes.len(),
                self.motions.len()
            )));
        }
        let shapes = self
            .shapes
            .iter()
            .zip(&self.motions)
            .map(|(shape, motion)| {
                let pose = motion.compose(&shape.pose())?;
                let appearance = match &shape.appearance {
                    Appearance::Texture { id, anchor } => {
                        let [dx, dy] = grid.to_pixel_displacement([motion.tx, motion.ty]);
                        Appearance::Texture {
                            id: *id,
                            anchor: [anchor[0] + dx.round() as i64, anchor[1] + dy.round() as i64],
                        }
                    }
                    other => other.clone(),
                };
                Ok(ShapeSpec {
                    center: [pose.tx, pose.ty],
                    rot: pose.rot,
                    scale: pose.scale,
                    appearance,
                    ..shape.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneSpec {
            motions: vec![SimilarityPose::IDENTITY; shapes.len()],
            shapes,
            background: self.background.clone(),
        })
    }
}

/// Deterministic scene sampling from a seed.
pub fn sample_scene(seed: u64, config: &GenConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = config.grid()?;
    let n = rng.random_range(config.min_shapes..=config.max_shapes);

    let background = match config.mode {
        DatasetMode::Geo => Background::Color(random_color(&mut rng)),
        DatasetMode::GeoPlus => Background::Image(rng.random()),
    };

    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(&mut rng);

    let mut shapes = Vec::with_capacity(n);
    let mut motions = Vec::with_capacity(n);
    for depth_rank in ranks {
        let kind = config.kinds[rng.random_range(0..config.kinds.len())];
        let scale = if config.scale_min == config.scale_max {
            config.scale_min
        } else {
            rng.random_range(config.scale_min..=config.scale_max)
        };
        let lim = (1.0 - scale).max(0.0);
        let center = [rng.random_range(-lim..=lim), rng.random_range(-lim..=lim)];
        let rot = if config.max_shape_rotation > 0.0 {
            rng.random_range(-config.max_shape_rotation..=config.max_shape_rotation)
        } else {
            0.0
        };
        let appearance = match (&config.mode, &background) {
            (DatasetMode::Geo, Background::Color(bg)) => {
                Appearance::Color(contrasting_color(&mut rng, bg, config.min_contrast))
            }
            _ => {
                let [px, py] = grid.to_pixel_position(center);
                Appearance::Texture {
                    id: rng.random(),
                    anchor: [px.floor() as i64, py.floor() as i64],
                }
            }
        };
        shapes.push(ShapeSpec {
            kind,
            center,
            scale,
            rot,
            appearance,
            depth_rank,
        });
        let m = config.max_translation_px;
        let shift = [rng.random_range(-m..=m) as f64, rng.random_range(-m..=m) as f64];
        let [tx, ty] = grid.to_normalized_displacement(shift);
        motions.push(SimilarityPose::translation(tx, ty));
    }
    Ok(SceneSpec {
        shapes,
        background,
        motions,
    })
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn contrasting_color(rng: &mut impl Rng, bg: &[f32; 3], min_contrast: f32) -> [f32; 3] {
    let mut color = random_color(rng);
    for _ in 0..1000 {
        let contrast = (0..3).map(|c| (color[c] - bg[c]).abs()).fold(0f32, f32::max);
        if contrast >= min_contrast {
            break;
        }
        color = random_color(rng);
    }
    color
}

/// Background and texture images for `geo_plus` scenes.
#[derive(Debug, Clone, Default)]
pub struct AssetStore {
    pub backgrounds: Vec<image::RgbImage>,
    pub textures: Vec<image::RgbImage>,
}

impl AssetStore {
    pub fn load(config: &AssetConfig) -> Result<Self> {
        Ok(AssetStore {
            backgrounds: load_image_dir(&config.backgrounds)?,
            textures: load_image_dir(&config.textures)?,
        })
    }

    fn background(&self, id: u32, height: usize, width: usize) -> Result<RgbFrame> {
        if self.backgrounds.is_empty() {
            return Err(Error::Asset("no background images loaded".into()));
        }
        let img = &self.backgrounds[id as usize % self.backgrounds.len()];
        let resized = image::imageops::resize(
            img,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Ok(RgbFrame::from_image(&resized))
    }

    fn texel(&self, id: u32, anchor: [i64; 2], row: usize, col: usize) -> Result<[f32; 3]> {
        if self.textures.is_empty() {
            return Err(Error::Asset("no texture images loaded".into()));
        }
        let tex = &self.textures[id as usize % self.textures.len()];
        let (tw, th) = (tex.width() as i64, tex.height() as i64);
        let x = (col as i64 - anchor[0]).rem_euclid(tw);
        let y = (row as i64 - anchor[1]).rem_euclid(th);
        Ok(tex.get_pixel(x as u32, y as u32).0.map(|v| v as f32 / 255.0))
    }
}

fn load_image_dir(dir: &Path) -> Result<Vec<image::RgbImage>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Asset(format!("cannot read asset directory {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Asset(format!(
            "asset directory {} contains no png/jpg images",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            image::open(p)
                .map(|img| img.to_rgb8())
                .map_err(|e| Error::Asset(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: RgbFrame,
    /// Full shape of each part, ignoring occlusion; indexed like `scene.shapes`.
    pub amodal_masks: Vec<Mask>,
    pub visible_masks: Vec<Mask>,
}

/// Paints shapes back to front by depth rank. Masks are rasterized by exact
/// membership tests at pixel centers.
pub fn render_scene(
    scene: &SceneSpec,
    height: usize,
    width: usize,
    assets: Option<&AssetStore>,
) -> Result<Rendered> {
    let grid = make_grid(height, width)?;
    let need_assets = || {
        assets.ok_or_else(|| Error::Asset("textured scene rendered without assets".into()))
    };
    let mut image = match &scene.background {
        Background::Color(c) => RgbFrame::filled(height, width, *c),
        Background::Image(id) => need_assets()?.background(*id, height, width)?,
    };

    let inverses = scene
        .shapes
        .iter()
        .map(|s| s.pose().inverse())
        .collect::<Result<Vec<_>>>()?;
    let amodal_masks: Vec<Mask> = scene
        .shapes
        .iter()
        .zip(&inverses)
        .map(|(shape, inv)| Mask {
            height,
            width,
            data: grid
                .coords
                .iter()
                .map(|&u| shape.kind.contains(inv.apply_point(u)))
                .collect(),
        })
        .collect();

    let mut order: Vec<usize> = (0..scene.shapes.len()).collect();
    order.sort_by_key(|&k| scene.shapes[k].depth_rank);

    // owner[p] = index of the nearest shape covering pixel p
    let mut owner: Vec<Option<usize>> = vec![None; height * width];
    for &k in &order {
        let shape = &scene.shapes[k];
        for (p, covered) in amodal_masks[k].data.iter().enumerate() {
            if !covered {
                continue;
            }
            owner[p] = Some(k);
            let (row, col) = (p / width, p % width);
            let color = match &shape.appearance {
                Appearance::Color(c) => *c,
                Appearance::Texture { id, anchor } => need_assets()?.texel(*id, *anchor, row, col)?,
            };
            image.data[p] = color;
        }
    }

    let visible_masks = (0..scene.shapes.len())
        .map(|k| Mask {
            height,
            width,
            data: owner.iter().map(|o| *o == Some(k)).collect(),
        })
        .collect();

    Ok(Rendered {
        image,
        amodal_masks,
        visible_masks,
    })
}

/// Forward flow: on each visible pixel of shape `k`, the displacement of the
/// pixel center under `motions[k]`, in pixels; zero elsewhere.
pub fn gt_flow(
    scene: &SceneSpec,
    visible_masks: &[Mask],
    height: usize,
    width: usize,
) -> Result<FlowField> {
    if scene.motions.len() != scene.shapes.len() || visible_masks.len() != scene.shapes.len() {
        return Err(Error::InvalidArgument(
            "every shape needs a motion and a visible mask".into(),
        ));
    }
    let grid = make_grid(height, width)?;
    let mut flow = FlowField::zeros(height, width);
    for (motion, mask) in scene.motions.iter().zip(visible_masks) {
        if mask.height != height || mask.width != width {
            return Err(Error::Shape("visible mask size differs from flow size".into()));
        }
        for (p, &on) in mask.data.iter().enumerate() {
            if on {
                let u = grid.coords[p];
                let moved = motion.apply_point(u);
                let [dx, dy] = grid.to_pixel_displacement([moved[0] - u[0], moved[1] - u[1]]);
                flow.data[p] = [dx as f32, dy as f32];
            }
        }
    }
    Ok(flow)
}

/// A generated training/evaluation example.
#[derive(Debug, Clone)]
pub struct FramePairSample {
    pub scene: SceneSpec,
    pub image_a: RgbFrame,
    pub image_b: RgbFrame,
    pub gt_flow: FlowField,
    pub amodal_masks: Vec<Mask>,
    pub visible_masks: Vec<Mask>,
    /// Frame-2 visible masks, used for occlusion-aware consistency checks.
    pub visible_masks_b: Vec<Mask>,
    pub labels: Vec<ShapeKind>,
}

pub fn generate_sample(
    seed: u64,
    config: &GenConfig,
    assets: Option<&AssetStore>,
) -> Result<FramePairSample> {
    let scene = sample_scene(seed, config)?;
    let (h, w) = (config.height, config.width);
    let a = render_scene(&scene, h, w, assets)?;
    let b = render_scene(&scene.advance(&config.grid()?)?, h, w, assets)?;
    let gt_flow = gt_flow(&scene, &a.visible_masks, h, w)?;
    Ok(FramePairSample {
        labels: scene.shapes.iter().map(|s| s.kind).collect(),
        scene,
        image_a: a.image,
        image_b: b.image,
        gt_flow,
        amodal_masks: a.amodal_masks,
        visible_masks: a.visible_masks,
        visible_masks_b: b.visible_masks,
    })
}

/// Per-sample seed derived from the master seed, split and index
/// (SplitMix64 finalizer over the packed triple).
pub fn sample_seed(master: u64, split: &str, idx: usize) -> u64 {
    let split_id: u64 = match split {
        "train" => 1,
        "val" => 2,
        "test" => 3,
        other => other.bytes().fold(0xcbf29ce484222325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100000001b3)
        }),
    };
    let mut z = master
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(split_id.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(idx as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub idx: usize,
    pub shapes: Vec<ShapeKind>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_echo: GenConfig,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// File layout of one sample inside a dataset directory.
pub struct SamplePaths {
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub flow: PathBuf,
    pub amodal: Vec<PathBuf>,
    pub visible: Vec<PathBuf>,
}

impl SamplePaths {
    pub fn new(root: &Path, split: &str, idx: usize, parts: usize) -> Self {
        let dir = root.join(split);
        SamplePaths {
            image_a: dir.join(format!("{idx}_a.png")),
            image_b: dir.join(format!("{idx}_b.png")),
            flow: dir.join(format!("{idx}_flow.flo")),
            amodal: (0..parts)
                .map(|k| dir.join(format!("{idx}_amodal_{k}.png")))
                .collect(),
            visible: (0..parts)
                .map(|k| dir.join(format!("{idx}_visible_{k}.png")))
                .collect(),
        }
    }
}

fn write_sample(root: &Path, split: &str, idx: usize, sample: &FramePairSample) -> Result<()> {
    let paths = SamplePaths::new(root, split, idx, sample.labels.len());
    sample.image_a.save_png(&paths.image_a)?;
    sample.image_b.save_png(&paths.image_b)?;
    sample.gt_flow.save(&paths.flow)?;
    for (mask, path) in sample.amodal_masks.iter().zip(&paths.amodal) {
        mask.save_png(path)?;
    }
    for (mask, path) in sample.visible_masks.iter().zip(&paths.visible) {
        mask.save_png(path)?;
    }
    Ok(())
}

/// Generates every split and writes images, flows, masks and the manifest.
/// Output bytes do not depend on the number of worker threads.
pub fn write_dataset(config: &GenConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let assets = match (&config.mode, &config.assets) {
        (DatasetMode::GeoPlus, Some(a)) => Some(AssetStore::load(a)?),
        _ => None,
    };
    let mut splits = BTreeMap::new();
    for (split, count) in config.splits.iter() {
        let dir = out_dir.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let entries = (0..count)
            .into_par_iter()
            .map(|idx| {
                let seed = sample_seed(config.seed, split, idx);
                let sample = generate_sample(seed, config, assets.as_ref())?;
                write_sample(out_dir, split, idx, &sample)?;
                Ok(ManifestEntry {
                    idx,
                    shapes: sample.labels,
                    seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        splits.insert(split.to_string(), entries);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config_echo: config.clone(),
        splits,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A sample as read back from disk.
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub image_a: RgbFrame,
    pub image_b: RgbFrame,
    pub gt_flow: FlowField,
    pub amodal_masks: Vec<Mask>,
    pub visible_masks: Vec<Mask>,
    pub labels: Vec<ShapeKind>,
}

/// Read access to a dataset directory written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                manifest.version
            )));
        }
        Ok(Dataset { root, manifest })
    }

    /// Checks that every file named by the manifest exists.
    pub fn validate(&self) -> Result<()> {
        for (split, entries) in &self.manifest.splits {
            for entry in entries {
                let p = SamplePaths::new(&self.root, split, entry.idx, entry.shapes.len());
                let files = [&p.image_a, &p.image_b, &p.flow]
                    .into_iter()
                    .chain(&p.amodal)
                    .chain(&p.visible);
                for f in files {
                    if !f.is_file() {
                        return Err(Error::Config(format!(
                            "dataset file {} listed in manifest is missing",
                            f.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.manifest.config_echo.height, self.manifest.config_echo.width)
    }

    pub fn entries(&self, split: &str) -> Result<&[ManifestEntry]> {
        self.manifest
            .splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("dataset has no `{split}` split")))
    }

    pub fn load_images(&self, split: &str, entry: &ManifestEntry) -> Result<(RgbFrame, RgbFrame)> {
        let p = SamplePaths::new(&self.root, split, entry.idx, 0);
        Ok((RgbFrame::load(&p.image_a)?, RgbFrame::load(&p.image_b)?))
    }

    pub fn load_sample(&self, split: &str, entry: &ManifestEntry) -> Result<StoredSample> {
        let p = SamplePaths::new(&self.root, split, entry.idx, entry.shapes.len());
        Ok(StoredSample {
            image_a: RgbFrame::load(&p.image_a)?,
            image_b: RgbFrame::load(&p.image_b)?,
            gt_flow: FlowField::load(&p.flow)?,
            amodal_masks: p.amodal.iter().map(Mask::load).collect::<Result<_>>()?,
            visible_masks: p.visible.iter().map(Mask::load).collect::<Result<_>>()?,
            labels: entry.shapes.clone(),
        })
    }
}

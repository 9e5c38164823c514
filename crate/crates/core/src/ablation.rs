//! Ablation sweeps: each listed value of an axis replaces the base setting,
//! one axis at a time, and every variant is trained and evaluated per seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::load_model;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::POSE_AND_DEPTH;
use crate::training::{train, TrainConfig};

pub const REPORT_JSON: &str = "ablation.json";
pub const REPORT_MARKDOWN: &str = "ablation.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    NumCapsules,
    ShapeDim,
    DecoderLayers,
    Occlusion,
}

impl Axis {
    pub fn label(&self) -> &'static str {
        match self {
            Axis::NumCapsules => "K",
            Axis::ShapeDim => "|s|",
            Axis::DecoderLayers => "decoder depth",
            Axis::Occlusion => "occlusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Count(usize),
    Flag(bool),
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisValue::Count(n) => write!(f, "{n}"),
            AxisValue::Flag(true) => write!(f, "on"),
            AxisValue::Flag(false) => write!(f, "off"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub num_capsules: Vec<usize>,
    /// Shape-code lengths; the capsule dimension becomes `|s| + 5`.
    pub shape_dim: Vec<usize>,
    pub decoder_layers: Vec<usize>,
    pub occlusion: Vec<bool>,
    pub seeds: Vec<u64>,
    pub eval_split: String,
    pub eval_samples: Option<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            num_capsules: Vec::new(),
            shape_dim: Vec::new(),
            decoder_layers: Vec::new(),
            occlusion: Vec::new(),
            seeds: vec![0],
            eval_split: "test".into(),
            eval_samples: None,
        }
    }
}

impl SweepSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Variants in table order.
    pub fn variants(&self) -> Vec<(Axis, AxisValue)> {
        let mut v = Vec::new();
        v.extend(self.num_capsules.iter().map(|&n| (Axis::NumCapsules, AxisValue::Count(n))));
        v.extend(self.shape_dim.iter().map(|&n| (Axis::ShapeDim, AxisValue::Count(n))));
        v.extend(self.decoder_layers.iter().map(|&n| (Axis::DecoderLayers, AxisValue::Count(n))));
        v.extend(self.occlusion.iter().map(|&b| (Axis::Occlusion, AxisValue::Flag(b))));
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants().is_empty() {
            return Err(Error::Config("sweep lists no axis values".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep lists no seeds".into()));
        }
        Ok(())
    }
}

/// Base config with one axis overridden.
pub fn apply_variant(base: &TrainConfig, axis: Axis, value: AxisValue) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match (axis, value) {
        (Axis::NumCapsules, AxisValue::Count(n)) => cfg.model.num_capsules = n,
        (Axis::ShapeDim, AxisValue::Count(n)) => cfg.model.capsule_dim = n + POSE_AND_DEPTH,
        (Axis::DecoderLayers, AxisValue::Count(n)) => cfg.model.decoder_layers = n,
        (Axis::Occlusion, AxisValue::Flag(b)) => cfg.model.occlusion = b,
        (axis, value) => {
            return Err(Error::Config(format!("value {value} does not fit axis {axis:?}")))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub iou: Option<f64>,
    pub epe: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: AxisValue,
    pub runs: Vec<RunResult>,
}

impl AblationRow {
    pub fn median_iou(&self) -> Option<f64> {
        median(self.runs.iter().filter_map(|r| r.iou).collect())
    }

    pub fn median_epe(&self) -> Option<f64> {
        median(self.runs.iter().filter_map(|r| r.epe).collect())
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, axis: Axis, value: AxisValue) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.axis == axis && r.value == value)
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        let mut s = String::from("| Setting | Value | IoU (median) | IoU per seed | EPE (median) | Failed runs |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for row in &self.rows {
            let per_seed: Vec<String> = row.runs.iter().map(|r| fmt(r.iou)).collect();
            let failed = row.runs.iter().filter(|r| r.error.is_some()).count();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                row.axis.label(),
                row.value,
                fmt(row.median_iou()),
                per_seed.join(", "),
                fmt(row.median_epe()),
                failed
            );
        }
        s
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let json = out_dir.join(REPORT_JSON);
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let md = out_dir.join(REPORT_MARKDOWN);
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }
}

fn run_dir(out_dir: &Path, axis: Axis, value: AxisValue, seed: u64) -> PathBuf {
    let axis = serde_json::to_value(axis)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    out_dir.join(format!("{axis}_{value}")).join(format!("seed_{seed}"))
}

fn run_one(cfg: TrainConfig, dir: &Path, sweep: &SweepSpec) -> Result<(f64, Option<f64>)> {
    let dataset_dir = cfg
        .dataset_dir
        .clone()
        .ok_or_else(|| Error::Config("no dataset directory configured".into()))?;
    let outcome = train(cfg, dir)?;
    let ckpt = outcome
        .checkpoint
        .ok_or_else(|| Error::Checkpoint("training wrote no checkpoint".into()))?;
    let (model, _) = load_model(&ckpt, &candle_core::Device::Cpu)?;
    let report = evaluate(
        &model,
        &Dataset::open(dataset_dir)?,
        &EvalOptions {
            split: sweep.eval_split.clone(),
            max_samples: sweep.eval_samples,
            ..EvalOptions::default()
        },
    )?;
    Ok((report.amodal.overall, report.epe))
}

/// Trains and evaluates every variant and seed, then writes
/// [`REPORT_JSON`] and [`REPORT_MARKDOWN`] into `out_dir`. A failing run is
/// recorded in its row and the sweep moves on.
pub fn run_ablation(base: &TrainConfig, sweep: &SweepSpec, out_dir: &Path) -> Result<AblationReport> {
    sweep.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for (axis, value) in sweep.variants() {
        let mut runs = Vec::new();
        for &seed in &sweep.seeds {
            let result = apply_variant(base, axis, value).and_then(|mut cfg| {
                cfg.seed = seed;
                run_one(cfg, &run_dir(out_dir, axis, value, seed), sweep)
            });
            let run = match result {
                Ok((iou, epe)) => RunResult {
                    seed,
                    iou: Some(iou),
                    epe,
                    error: None,
                },
                Err(e) => {
                    log::warn!("ablation run {axis:?}={value} seed {seed} failed: {e}");
                    RunResult {
                        seed,
                        iou: None,
                        epe: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(run);
        }
        rows.push(AblationRow { axis, value, runs });
        // Keep partial results on disk while the sweep runs.
        AblationReport { rows: rows.clone() }.save(out_dir)?;
    }
    let report = AblationReport { rows };
    report.save(out_dir)?;
    Ok(report)
}

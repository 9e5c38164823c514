use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowparts::ablation::{run_ablation, SweepSpec};
use flowparts::checkpoint::load_model;
use flowparts::datagen::{write_dataset, AssetStore, Dataset, GenConfig};
use flowparts::eval::{evaluate, EvalOptions, LabelExtractor};
use flowparts::raster::RgbFrame;
use flowparts::training::{TrainConfig, Trainer};
use flowparts::{viz, Error, Result};

const SEED_ENV: &str = "FLOWPARTS_SEED";

#[derive(Parser)]
#[command(name = "flowparts", version, about = "Part discovery from motion: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic frame-pair dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and score one-axis variants of a base config.
    Ablate(AblateArgs),
    /// Render masks, overlay and flow images for one input.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Print what would be generated without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Single-threaded, bit-reproducible run.
    #[arg(long)]
    deterministic: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Labels {
    ShapeSet,
    ShapeCount,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Also run k-means classification with this many clusters.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long, value_enum, default_value = "shape-set")]
    labels: Labels,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    /// Dataset directory, if the base config does not name one.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["sample", "image"]))]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Index of a dataset pair (needs --data).
    #[arg(long)]
    sample: Option<usize>,
    /// A single image file.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Optional second frame for --image, enabling flow output.
    #[arg(long, requires = "image")]
    image_b: Option<PathBuf>,
    #[arg(long, requires = "sample")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(path)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_gen(args: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = read_json(&args.config)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if args.dry_run {
        if let Some(assets) = &cfg.assets {
            AssetStore::load(assets)?;
        }
        let s = &cfg.splits;
        println!(
            "would write {} samples (train {}, val {}, test {}) at {}x{} into {}",
            s.total(),
            s.train,
            s.val,
            s.test,
            cfg.height,
            cfg.width,
            args.out.display()
        );
        return Ok(());
    }
    let manifest = write_dataset(&cfg, &args.out)?;
    println!("wrote {} samples into {}", manifest.len(), args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_train_config(&args.config)?;
    cfg.dataset_dir = Some(args.data);
    cfg.deterministic |= args.deterministic;
    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg, &args.out)?,
        None => Trainer::new(cfg, &args.out)?,
    };
    let outcome = trainer.run(None)?;
    if let Some(last) = outcome.epoch_losses.last() {
        println!(
            "finished at step {}: total {:.6} (render {:.6}, center {:.6}, smooth {:.6})",
            outcome.progress.step, last.total, last.render, last.center, last.smooth
        );
    }
    if let Some(ckpt) = outcome.checkpoint {
        println!("checkpoint: {}", ckpt.display());
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (model, _) = load_model(&args.ckpt, &candle_core::Device::Cpu)?;
    let dataset = Dataset::open(&args.data)?;
    let options = EvalOptions {
        split: args.split,
        batch_size: args.batch_size,
        max_samples: args.max_samples,
        clusters: args.clusters,
        labels: match args.labels {
            Labels::ShapeSet => LabelExtractor::ShapeSet,
            Labels::ShapeCount => LabelExtractor::ShapeCount,
        },
        kmeans_seed: seed_override()?.unwrap_or(0),
    };
    let mut report = evaluate(&model, &dataset, &options)?;
    report.checkpoint = Some(args.ckpt.display().to_string());
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&args.report, serde_json::to_vec_pretty(&report)?)
        .map_err(|e| Error::io(&args.report, e))?;
    println!(
        "amodal IoU {:.4} over {} samples; EPE {}",
        report.amodal.overall,
        report.amodal.n_samples,
        report.epe.map_or("n/a".into(), |e| format!("{e:.4} px"))
    );
    if let Some(c) = &report.cluster {
        println!(
            "k-means accuracy {:.4} (majority baseline {:.4}, {} non-empty clusters)",
            c.accuracy, c.majority_baseline, c.nonempty_clusters
        );
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let mut base = load_train_config(&args.config)?;
    if let Some(data) = args.data {
        base.dataset_dir = Some(data);
    }
    let sweep = SweepSpec::from_json_file(&args.sweep)?;
    let report = run_ablation(&base, &sweep, &args.out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn run_viz(args: VizArgs) -> Result<()> {
    let (model, _) = load_model(&args.ckpt, &candle_core::Device::Cpu)?;
    let (a, b) = match (args.sample, &args.image) {
        (Some(idx), _) => {
            let data = args
                .data
                .ok_or_else(|| Error::InvalidArgument("--sample needs --data".into()))?;
            let dataset = Dataset::open(data)?;
            let entry = dataset
                .entries(&args.split)?
                .iter()
                .find(|e| e.idx == idx)
                .cloned()
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("split `{}` has no sample {idx}", args.split))
                })?;
            let (a, b) = dataset.load_images(&args.split, &entry)?;
            (a, Some(b))
        }
        (None, Some(path)) => {
            let b = args.image_b.as_ref().map(RgbFrame::load).transpose()?;
            (RgbFrame::load(path)?, b)
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    for path in viz::render(&model, &a, b.as_ref(), &args.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Command::Train(t) = &cli.command {
        if t.deterministic {
            // Must happen before any thread pool exists.
            std::env::set_var("RAYON_NUM_THREADS", "1");
        }
    }
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Viz(a) => run_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}

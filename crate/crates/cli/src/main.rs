use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vwcam::cam;
use vwcam::codebook;
use vwcam::data::{self, DataConfig, Dataset, Sample};
use vwcam::eval::{self, AblationGrid};
use vwcam::training::{self, TrainConfig, TrainOptions, TrainedModel};

/// Visual-words CAM pipeline: synthetic data, training, evaluation and
/// ablations.
#[derive(Parser)]
#[command(name = "vwcam", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset to a directory.
    GenerateData(GenerateArgs),
    /// Train one model and write checkpoints plus a step log.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Train and score a grid of variants over several seeds.
    Ablate(AblateArgs),
    /// Vary one config key across values (several seeds each).
    Sweep(SweepArgs),
    /// Write CAM overlays for held-out images.
    ExportHeatmaps(ExportHeatmapsArgs),
    /// Write image tiles for the pixels assigned to each visual word.
    ExportWords(ExportWordsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2200)]
    num_samples: usize,
    #[arg(long, default_value_t = 5)]
    num_classes: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

/// Where the data lives and how it is split.
#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory written by `generate-data`.
    #[arg(long)]
    data: PathBuf,
    /// Number of trailing samples held out for evaluation.
    #[arg(long, default_value_t = 200)]
    eval_size: usize,
}

/// Config file plus overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file with flat `key = value` entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set k=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for checkpoints, log and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs (resume later with `--resume`).
    #[arg(long)]
    stop_after_epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write `eval.json`; printed only if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    /// GAP baseline, +HP, +HP+learning, +HP+memory bank.
    Standard,
    /// Baseline classifier with each pooling operator.
    Pooling,
    /// Learning strategy with and without DeCov.
    Decov,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    grid: GridKind,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Config key to vary.
    #[arg(long)]
    key: String,
    /// Comma-separated values for the key.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct ExportHeatmapsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of held-out images to export.
    #[arg(long, default_value_t = 8)]
    count: usize,
}

#[derive(Args)]
struct ExportWordsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tiles per word.
    #[arg(long, default_value_t = 16)]
    per_word: usize,
    /// Tile side in pixels.
    #[arg(long, default_value_t = 12)]
    crop: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.downcast_ref::<vwcam::Error>().map_or("runtime", |e| e.category());
            eprintln!("error [{category}]: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::ExportHeatmaps(a) => export_heatmaps(a),
        Command::ExportWords(a) => export_words(a),
    }
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let cfg = DataConfig {
        num_samples: a.num_samples,
        num_classes: a.num_classes,
        height: a.height,
        width: a.width,
        ..DataConfig::default()
    };
    let ds = data::generate_dataset(&cfg, a.seed)?;
    data::save_dataset(&ds, &a.out)?;
    log::info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn load_split(a: &DataArgs) -> anyhow::Result<(Dataset, Dataset)> {
    let ds = data::load_dataset(&a.data)?;
    if a.eval_size == 0 || a.eval_size >= ds.len() {
        bail!(vwcam::Error::Config(format!(
            "eval size {} must be in 1..{} for a dataset of {} samples",
            a.eval_size,
            ds.len(),
            ds.len()
        )));
    }
    Ok(ds.split_at(ds.len() - a.eval_size))
}

fn resolve_config(a: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| vwcam::Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        cfg = eval::with_override(&cfg, key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&a.config)?;
    let (train_set, _) = load_split(&a.data)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml_string())?;
    let options = TrainOptions {
        checkpoint_dir: Some(a.out.join("checkpoints")),
        log_path: Some(a.out.join("train_log.jsonl")),
        resume_from: a.resume,
        stop_after_epochs: a.stop_after_epochs,
    };
    let (model, records) = training::train(&cfg, &train_set, &options)?;
    training::save_checkpoint(&model.to_checkpoint(), &a.out.join("model.ckpt"))?;
    if let Some(last) = records.last() {
        println!("steps {} final loss {:.4}", last.step + 1, last.total);
    }
    println!("checkpoint {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<TrainedModel> {
    Ok(training::load_checkpoint(path)?.into())
}

fn evaluate(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (train_set, eval_set) = load_split(&a.data)?;
    let search = eval::evaluate_cams(&model, &eval_set, &model.config().theta_grid)?;
    let word_acc = match model.codebook() {
        Some(_) => Some(eval::word_frequency_accuracy(&model, &train_set, &eval_set)?),
        None => None,
    };
    println!("mIoU {:.2} at theta {:.2}", search.best.miou * 100.0, search.best_theta);
    println!("per-class IoU {:?}", search.best.per_class_iou);
    if let Some(acc) = word_acc {
        println!("word-frequency accuracy {acc:.4}");
    }
    if let Some(out) = a.out {
        std::fs::create_dir_all(&out)?;
        let json = serde_json::json!({
            "config_hash": model.config_hash,
            "miou": search.best.miou,
            "best_theta": search.best_theta,
            "per_class_iou": search.best.per_class_iou,
            "confusion": search.best.confusion,
            "curve": search.curve,
            "word_frequency_accuracy": word_acc,
        });
        std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn run_dir(out: &Path) -> anyhow::Result<PathBuf> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
    let dir = out.join(format!("run_{stamp}"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run_grid(variants: Vec<eval::Variant>, seeds: Vec<u64>, data: &DataArgs, out: &Path) -> anyhow::Result<()> {
    let (train_set, eval_set) = load_split(data)?;
    let dir = run_dir(out)?;
    let grid = AblationGrid { variants, seeds };
    let rows = eval::run_ablation(&grid, &train_set, &eval_set, |r| {
        log::info!(
            "{} seed {}: mIoU {:.4} theta {:.2} ({:.0}s) {}",
            r.variant,
            r.seed,
            r.miou,
            r.best_theta,
            r.wall_time_s,
            r.status
        )
    });
    eval::write_metric_table(&rows, &dir.join("metrics.csv"))?;
    eval::write_summary(&rows, &grid.variants, &dir.join("summary.json"))?;
    print!("{}", eval::format_summary(&rows));
    println!("results in {}", dir.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let base = resolve_config(&a.config)?;
    let variants = match a.grid {
        GridKind::Standard => eval::standard_variants(&base),
        GridKind::Pooling => eval::pooling_variants(&base),
        GridKind::Decov => eval::sweep_variants(
            &TrainConfig {
                strategy: training::Strategy::Learning,
                ..base
            },
            "decov",
            &["true".into(), "false".into()],
        )?,
    };
    run_grid(variants, a.seeds, &a.data, &a.out)
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let base = resolve_config(&a.config)?;
    let variants = eval::sweep_variants(&base, &a.key, &a.values)?;
    run_grid(variants, a.seeds, &a.data, &a.out)
}

fn export_heatmaps(a: ExportHeatmapsArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (_, eval_set) = load_split(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    let picked: Vec<&Sample> = eval_set.samples.iter().take(a.count).collect();
    let cams = model.cams(&picked)?;
    let mut written = 0;
    for (i, (s, c)) in picked.iter().zip(&cams).enumerate() {
        let prefix = format!("{i:04}");
        vwcam::imageio::write_rgb(&a.out.join(format!("{prefix}_image.png")), &s.image)?;
        written += cam::export_heatmaps(&s.image, c, &s.present_classes(), &eval_set.class_names, &prefix, &a.out)?.len();
    }
    println!("wrote {written} heatmaps to {}", a.out.display());
    Ok(())
}

fn export_words(a: ExportWordsArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let cb = model
        .codebook()
        .ok_or_else(|| vwcam::Error::Contract("checkpoint has no codebook".into()))?;
    let (_, eval_set) = load_split(&a.data)?;
    let mut images = Vec::with_capacity(eval_set.len());
    let mut labels = Vec::with_capacity(eval_set.len());
    let mut feature_size = (0, 0);
    for chunk in eval_set.samples.chunks(32) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let feats = model.features(&refs)?;
        for (s, f) in chunk.iter().zip(feats.outer_iter()) {
            let (h, w, d) = f.dim();
            feature_size = (h, w);
            let flat = f.as_standard_layout().into_owned().into_shape_with_order((h * w, d))?;
            let wa = codebook::encode(flat.view(), cb, model.config().tau)?;
            images.push(s.image.clone());
            labels.push(wa.y);
        }
    }
    let files = codebook::export_word_tiles(&images, &labels, feature_size, cb.k(), a.crop, a.per_word, &a.out)?;
    println!("wrote {} word tiles to {}", files.len(), a.out.display());
    Ok(())
}

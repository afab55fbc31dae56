//! `cops`: train, evaluate and run the zero-shot anomaly detector.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cops_core::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use cops_core::config::{RunConfig, Variant};
use cops_core::data::{heatmap_png, list_images, load_mvtec_layout, read_image, synth_dataset, write_mvtec_layout, Sample, Split};
use cops_core::inference::{encode_raw_map, predict};
use cops_core::metrics::evaluate;
use cops_core::model::CopsModel;
use cops_core::training::{loss_log, train_items, TrainItem, Trainer};

#[derive(Parser)]
#[command(name = "cops", version, about = "Zero-shot anomaly detection with synthesized prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on an MVTec-style folder and write a checkpoint plus loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an MVTec-style folder.
    Eval(EvalArgs),
    /// Score one image or every PNG in a directory.
    Predict(PredictArgs),
    /// Write a synthetic train/test pair in the folder layout.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data root; falls back to `data.train_dir` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the loss log; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ablation variant: a..g or full. Overrides the module switches.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Overrides `inference.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `report.txt` and `metrics.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of PNGs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    categories: usize,
    #[arg(long, default_value_t = 32)]
    per_category: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<cops_core::CopsError> for Failure {
    fn from(e: cops_core::CopsError) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_toml_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<CopsModel, Failure> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display())).map_err(Failure::Runtime)
}

fn load_data(root: &Path) -> Result<cops_core::data::DatasetManifest, Failure> {
    if !root.is_dir() {
        return Err(Failure::Usage(format!("data directory {} does not exist", root.display())));
    }
    Ok(load_mvtec_layout(root)?)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(v) = &args.variant {
        let v = Variant::parse(v).ok_or_else(|| Failure::Usage(format!("unknown variant {v}; use a..g or full")))?;
        cfg.train.apply_variant(v);
    }
    let root = args
        .data
        .or_else(|| cfg.data.train_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Failure::Usage("no training data: pass --data or set data.train_dir".into()))?;
    let mut manifest = load_data(&root)?;
    manifest.split = Split::Train;
    if manifest.is_empty() {
        return Err(Failure::Runtime(anyhow!("no training images under {}", root.display())));
    }
    log::info!("training on {} images from {} categories", manifest.len(), manifest.categories().len());

    let model = CopsModel::new(cfg)?;
    let items = manifest.samples.iter().map(|s| TrainItem::from_sample(&model, s)).collect::<cops_core::Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(model);
    println!("{:>5} {:>6} {:>12} {:>12} {:>12}", "epoch", "steps", "ests", "icts", "saga");
    let summaries = train_items(&mut trainer, &items, |e| println!("{}", e.log_line()))?;

    let out_dir = match args.out {
        Some(d) => d,
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let out_dir = if out_dir.as_os_str().is_empty() { PathBuf::from(".") } else { out_dir };
    std::fs::create_dir_all(&out_dir).context("creating output directory")?;
    if let Some(parent) = args.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).context("creating checkpoint directory")?;
    }
    write_atomic(&out_dir.join("loss_log.txt"), loss_log(&summaries).as_bytes())?;
    save_checkpoint(&args.checkpoint, &trainer.model)?;
    log::info!("checkpoint written to {}", args.checkpoint.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let model = load_model(&args.checkpoint)?;
    let manifest = load_data(&args.data)?;
    let seed = args.seed.unwrap_or(model.config.inference.seed);
    let report = evaluate(&model, &manifest, seed)?;
    let table = report.to_table();
    print!("{table}");
    std::fs::create_dir_all(&args.out).context("creating output directory")?;
    write_atomic(&args.out.join("report.txt"), table.as_bytes())?;
    write_atomic(&args.out.join("metrics.txt"), report.to_key_values().as_bytes())?;
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CmdResult {
    let model = load_model(&args.checkpoint)?;
    let paths = if args.data.is_dir() {
        list_images(&args.data)?
    } else if args.data.is_file() {
        vec![args.data.clone()]
    } else {
        return Err(Failure::Usage(format!("{} does not exist", args.data.display())));
    };
    std::fs::create_dir_all(&args.out).context("creating output directory")?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(model.config.inference.seed));
    let (h, w) = (model.config.model.image_height, model.config.model.image_width);
    let mut scores = OpenOptions::new().create(true).append(true).open(args.out.join("scores.txt")).context("opening scores file")?;
    for path in paths {
        let image = read_image(&path)?;
        let sample = Sample { path: Some(path.clone()), image, mask: None, label: 0, category: String::new() };
        let result = predict(&sample.image_resized(h, w)?, &model, &mut rng)?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        write_atomic(&args.out.join(format!("{stem}.raw")), &encode_raw_map(&result.map))?;
        write_atomic(&args.out.join(format!("{stem}.png")), &heatmap_png(&result.map)?)?;
        writeln!(scores, "{}\t{:.9}", path.display(), result.score).context("writing scores file")?;
        println!("{}\t{:.6}", path.display(), result.score);
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let (train, test) = synth_dataset(args.categories, args.per_category, (args.size, args.size), args.seed)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    write_mvtec_layout(&args.out.join("train"), &train)?;
    write_mvtec_layout(&args.out.join("test"), &test)?;
    println!("train: {} images, test: {} images", train.len(), test.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COPS_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::SynthData(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

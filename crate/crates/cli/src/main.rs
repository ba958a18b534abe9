//! `revfp`: blind reverberation-fingerprint estimation pipeline.
//!
//! Subcommands cover the full chain: simulate-rooms -> generate ->
//! featurize -> train / grid-search -> evaluate -> predict.
//! Logs go to stderr; data (tables, predictions) to stdout.
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use revfp_core::dataset::{SnrMode, Split};
use revfp_core::features::Recipe;
use revfp_core::nn::{ArchConfig, GridAxes, TargetMode, TrainConfig};
use revfp_core::pipeline::{
    evaluate_pipeline, featurize, generate, grid_search_pipeline, predict_wav, simulate_rooms,
    train_pipeline, FeaturizeConfig, GenerateConfig, SimulateRoomsConfig, TrainPipelineConfig,
};

#[derive(Parser)]
#[command(
    name = "revfp",
    about = "Blind room volume and RT60 estimation from noisy reverberant speech",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample shoebox rooms and synthesize labeled image-source RIRs.
    SimulateRooms(SimulateRoomsArgs),
    /// Render the noisy reverberant dataset from rooms + dry speech.
    Generate(GenerateArgs),
    /// Compute feature tensors for every dataset record.
    Featurize(FeaturizeArgs),
    /// Train a regressor on a feature recipe.
    Train(TrainArgs),
    /// Cartesian hyperparameter search, selecting by validation loss.
    GridSearch(GridSearchArgs),
    /// Evaluate a checkpoint on a split; writes report JSON + scatter CSV.
    Evaluate(EvaluateArgs),
    /// Estimate volume and RT60 for a single WAV file.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SimulateRoomsArgs {
    /// Number of rooms.
    #[arg(long, default_value_t = 30)]
    count: usize,
    /// Volume range in cubic meters, sampled log-uniformly.
    #[arg(long, default_value_t = 30.0)]
    volume_min: f64,
    #[arg(long, default_value_t = 500.0)]
    volume_max: f64,
    /// Uniform wall-absorption range.
    #[arg(long, default_value_t = 0.1)]
    alpha_min: f64,
    #[arg(long, default_value_t = 0.7)]
    alpha_max: f64,
    #[arg(long, default_value_t = 5)]
    receivers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (rooms.jsonl + rirs/).
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Directory containing rooms.jsonl and rirs/.
    #[arg(long, default_value = ".")]
    rooms_dir: PathBuf,
    /// Output dataset directory.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Directory of dry mono speech WAVs; omitted = synthetic corpus.
    #[arg(long)]
    speech_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    synth_clips: usize,
    #[arg(long, default_value_t = 20)]
    per_room: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replicate every sample at all five SNR levels instead of drawing one.
    #[arg(long)]
    replicate_snr: bool,
    /// Allow simulated rooms in the test split (simulated-data experiments).
    #[arg(long)]
    allow_simulated_test: bool,
    /// Re-render audio even if cached files exist.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long, default_value = ".")]
    dataset_dir: PathBuf,
    /// baseline | plus-phase | plus-continuity
    #[arg(long, default_value = "plus-phase", value_parser = parse_recipe)]
    recipe: Recipe,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = ".")]
    dataset_dir: PathBuf,
    #[arg(long, default_value = "plus-phase", value_parser = parse_recipe)]
    recipe: Recipe,
    /// volume | rt60 | joint
    #[arg(long, default_value = "volume", value_parser = parse_target)]
    target: TargetMode,
    #[arg(long, default_value = "model.rfck")]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 25)]
    lr_patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional training config JSON; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline grid search "lr=1e-3,1e-4;batch=16,32;l2=1e-4" before training.
    #[arg(long)]
    grid: Option<String>,
    /// Epoch budget per grid point.
    #[arg(long, default_value_t = 30)]
    grid_epochs: usize,
}

#[derive(Args)]
struct GridSearchArgs {
    #[arg(long, default_value = ".")]
    dataset_dir: PathBuf,
    #[arg(long, default_value = "plus-phase", value_parser = parse_recipe)]
    recipe: Recipe,
    #[arg(long, default_value = "volume", value_parser = parse_target)]
    target: TargetMode,
    /// Grid spec, e.g. "lr=1e-3,1e-4;batch=16,32;l2=0,1e-4".
    #[arg(long)]
    grid: String,
    #[arg(long, default_value_t = 30)]
    grid_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, default_value = ".")]
    dataset_dir: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Add per-SNR metric groups to the report.
    #[arg(long)]
    group_by_snr: bool,
    #[arg(long, default_value = "reports")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input WAV (>= 4 s; resampled to 16 kHz if needed).
    wav: PathBuf,
}

fn parse_recipe(s: &str) -> Result<Recipe, String> {
    s.parse()
}

fn parse_target(s: &str) -> Result<TargetMode, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

/// Parses "lr=1e-3,1e-4;batch=16,32;l2=0,1e-4" into grid axes. Missing axes
/// fall back to the base config's single value.
fn parse_grid(spec: &str, base: &TrainConfig) -> Result<GridAxes, String> {
    let mut axes = GridAxes {
        batch_sizes: vec![base.batch_size],
        initial_lrs: vec![base.initial_lr],
        l2_lambdas: vec![base.l2_lambda],
    };
    for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| format!("grid axis '{part}' is not key=v1,v2"))?;
        match key.trim() {
            "lr" => {
                axes.initial_lrs = values
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad lr '{v}'")))
                    .collect::<Result<_, _>>()?;
            }
            "l2" => {
                axes.l2_lambdas = values
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad l2 '{v}'")))
                    .collect::<Result<_, _>>()?;
            }
            "batch" => {
                axes.batch_sizes = values
                    .split(',')
                    .map(|v| {
                        v.trim().parse::<usize>().map_err(|_| format!("bad batch size '{v}'"))
                    })
                    .collect::<Result<_, _>>()?;
            }
            other => return Err(format!("unknown grid axis '{other}' (lr, batch, l2)")),
        }
    }
    Ok(axes)
}

/// REVFP_CACHE overrides directories left at their "." default.
fn cache_dir(explicit: &PathBuf) -> PathBuf {
    if explicit.as_os_str() == "." {
        if let Ok(dir) = std::env::var("REVFP_CACHE") {
            return PathBuf::from(dir);
        }
    }
    explicit.clone()
}

fn train_config_from_args(args: &TrainArgs) -> Result<TrainConfig, String> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| format!("bad config {}: {e}", path.display()))?
        }
        None => TrainConfig { arch: ArchConfig::default(), ..TrainConfig::default() },
    };
    // Flags win over the config file.
    config.epochs = args.epochs;
    config.batch_size = args.batch_size;
    config.initial_lr = args.lr;
    config.l2_lambda = args.l2;
    config.lr_patience = args.lr_patience;
    config.seed = args.seed;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), (i32, String)> {
    let usage = |msg: String| (1, msg);
    let pipeline = |e: revfp_core::pipeline::PipelineError| (e.exit_code(), e.to_string());

    match cli.command {
        Command::SimulateRooms(args) => {
            if args.volume_min <= 0.0 || args.volume_max <= args.volume_min {
                return Err(usage("volume range must be positive and increasing".into()));
            }
            let cfg = SimulateRoomsConfig {
                count: args.count,
                volume_range: (args.volume_min, args.volume_max),
                alpha_range: (args.alpha_min, args.alpha_max),
                receivers_per_room: args.receivers,
                seed: args.seed,
                out_dir: cache_dir(&args.out_dir),
            };
            let rooms = simulate_rooms(&cfg).map_err(pipeline)?;
            println!(
                "wrote {} rooms to {}",
                rooms.len(),
                cfg.out_dir.join("rooms.jsonl").display()
            );
            Ok(())
        }
        Command::Generate(args) => {
            let cfg = GenerateConfig {
                rooms_dir: cache_dir(&args.rooms_dir),
                out_dir: cache_dir(&args.out_dir),
                speech_dir: args.speech_dir.clone(),
                synth_clips: args.synth_clips,
                per_room: args.per_room,
                seed: args.seed,
                snr_mode: if args.replicate_snr { SnrMode::Replicate } else { SnrMode::Random },
                allow_simulated_test: args.allow_simulated_test,
                force: args.force,
                ..GenerateConfig::default()
            };
            let manifest = generate(&cfg).map_err(pipeline)?;
            println!("manifest: {} records", manifest.records.len());
            Ok(())
        }
        Command::Featurize(args) => {
            let cfg = FeaturizeConfig {
                dataset_dir: cache_dir(&args.dataset_dir),
                recipe: args.recipe,
                force: args.force,
            };
            featurize(&cfg).map_err(pipeline)?;
            println!("features ready for recipe {}", args.recipe);
            Ok(())
        }
        Command::Train(args) => {
            let mut config = train_config_from_args(&args).map_err(usage)?;
            let dataset_dir = cache_dir(&args.dataset_dir);
            let cfg = TrainPipelineConfig {
                dataset_dir,
                recipe: args.recipe,
                target_mode: args.target,
                train: config.clone(),
                checkpoint_path: args.out.clone(),
                stop_at_train_mse: None,
            };
            if let Some(grid) = &args.grid {
                let axes = parse_grid(grid, &config).map_err(usage)?;
                let result =
                    grid_search_pipeline(&cfg, &axes, args.grid_epochs).map_err(pipeline)?;
                config.batch_size = result.best.batch_size;
                config.initial_lr = result.best.initial_lr;
                config.l2_lambda = result.best.l2_lambda;
                println!(
                    "grid best: batch {} lr {:.3e} l2 {:.3e}",
                    config.batch_size, config.initial_lr, config.l2_lambda
                );
            }
            let cfg = TrainPipelineConfig { train: config, ..cfg };
            let outcome = train_pipeline(&cfg).map_err(pipeline)?;
            let best_val = outcome
                .history
                .iter()
                .map(|e| e.val_loss)
                .fold(f64::INFINITY, f64::min);
            println!(
                "trained {} epochs, best val loss {best_val:.5}, checkpoint {}",
                outcome.history.len(),
                cfg.checkpoint_path.display()
            );
            Ok(())
        }
        Command::GridSearch(args) => {
            let base = TrainConfig { seed: args.seed, ..TrainConfig::default() };
            let axes = parse_grid(&args.grid, &base).map_err(usage)?;
            let cfg = TrainPipelineConfig {
                dataset_dir: cache_dir(&args.dataset_dir),
                recipe: args.recipe,
                target_mode: args.target,
                train: base,
                checkpoint_path: PathBuf::from("unused.rfck"),
                stop_at_train_mse: None,
            };
            let result = grid_search_pipeline(&cfg, &axes, args.grid_epochs).map_err(pipeline)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "batch  lr        l2        best_val").ok();
            for (config, val) in &result.runs {
                writeln!(
                    out,
                    "{:<6} {:<9.3e} {:<9.3e} {val:.6}",
                    config.batch_size, config.initial_lr, config.l2_lambda
                )
                .ok();
            }
            writeln!(
                out,
                "best: batch {} lr {:.3e} l2 {:.3e}",
                result.best.batch_size, result.best.initial_lr, result.best.l2_lambda
            )
            .ok();
            Ok(())
        }
        Command::Evaluate(args) => {
            let reports = evaluate_pipeline(
                &cache_dir(&args.dataset_dir),
                &args.checkpoint,
                args.split,
                args.group_by_snr,
                &args.out_dir,
            )
            .map_err(pipeline)?;
            for report in &reports {
                println!(
                    "{}/{}: n={} mse={:.4} rho={:.4} mean_mult={:.4} vr={:.4}",
                    report.target,
                    report.split,
                    report.n,
                    report.mse,
                    report.pearson_rho,
                    report.mean_mult,
                    report.variance_ratio
                );
            }
            Ok(())
        }
        Command::Predict(args) => {
            let (volume, rt60) = predict_wav(&args.checkpoint, &args.wav).map_err(pipeline)?;
            if let Some(v) = volume {
                println!("volume_m3 {v:.2}");
            }
            if let Some(rt) = rt60 {
                println!("rt60_s {rt:.3}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(buf, "{} {} {}", record.level(), record.target(), record.args())
        })
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version output is success; real parse errors are usage
            // failures (exit 1).
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("ERROR revfp {msg}");
            ExitCode::from(code as u8)
        }
    }
}

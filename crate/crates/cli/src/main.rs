//! Command-line surface: dataset generation, two-stage training, predictor
//! training, sample generation, cohort evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use morphldm::eval::{evaluate_cohorts, write_montage, EvalOptions};
use morphldm::phantoms::{read_dataset, read_manifest, write_dataset, DataError, PhantomSpec};
use morphldm::pipelines::{
    generate_samples, train_predictor, train_stage1, train_stage2, PredictorCheckpoint,
    PredictorTrainConfig, RunConfig, SamplePlan, TrainError,
};

#[derive(Parser)]
#[command(
    name = "morphldm",
    about = "Generative anatomy by deforming a learned template: phantom data, two-stage training, sampling, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with ground-truth labels.
    GenData(GenDataArgs),
    /// Train stage 1 (autoencoder) or stage 2 (latent diffusion) from a config file.
    Train(TrainArgs),
    /// Train the age/sex attribute predictor on a real dataset.
    TrainPredictor(TrainPredictorArgs),
    /// Generate conditioned samples from trained checkpoints.
    Sample(SampleArgs),
    /// Evaluate a synthetic cohort against a real dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Optional phantom spec JSON; defaults to the standard 64x64 family.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of samples to generate.
    #[arg(long)]
    n: usize,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Age range as lo:hi years.
    #[arg(long, default_value = "5:100")]
    age_range: String,
    /// Fraction of male samples.
    #[arg(long, default_value_t = 0.5)]
    sex_balance: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training stage: 1 (autoencoder) or 2 (diffusion).
    #[arg(long)]
    stage: u32,
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Resume stage 1 from its checkpoint.
    #[arg(long, default_value_t = false)]
    resume: bool,
}

#[derive(Args)]
struct TrainPredictorArgs {
    /// Real dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    /// Run configuration JSON (checkpoints are read from its out_dir).
    #[arg(long)]
    config: PathBuf,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Age sweep as lo:hi years, linearly spaced.
    #[arg(long, default_value = "5:100")]
    ages: String,
    /// Fraction of male samples.
    #[arg(long, default_value_t = 0.5)]
    sex_balance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output sample-set directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Real dataset directory.
    #[arg(long)]
    real: PathBuf,
    /// Synthetic sample-set directory.
    #[arg(long)]
    synth: PathBuf,
    /// Attribute-predictor checkpoint directory.
    #[arg(long)]
    predictor: PathBuf,
    /// Output report directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of MS-SSIM pairs.
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Command failure with its exit code.
struct CmdError {
    code: u8,
    message: String,
}

impl CmdError {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, message: msg.into() }
    }

    fn data(msg: impl Into<String>) -> Self {
        Self { code: 2, message: msg.into() }
    }

    fn abort(msg: impl Into<String>) -> Self {
        Self { code: 3, message: msg.into() }
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NanAbort { .. } => CmdError::abort(e.to_string()),
            TrainError::InvalidConfig(_)
            | TrainError::Net(_)
            | TrainError::Loss(_)
            | TrainError::Diffusion(_)
            | TrainError::Field(_) => CmdError::usage(e.to_string()),
            TrainError::Data(_) | TrainError::Checkpoint(_) | TrainError::Io(_) => {
                CmdError::data(e.to_string())
            }
        }
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::InvalidSpec(_) | DataError::InvalidCondition(_) => {
                CmdError::usage(e.to_string())
            }
            _ => CmdError::data(e.to_string()),
        }
    }
}

fn parse_range(s: &str) -> Result<(f64, f64), CmdError> {
    let (lo, hi) =
        s.split_once(':').ok_or_else(|| CmdError::usage(format!("range '{s}' must be lo:hi")))?;
    let lo: f64 = lo.trim().parse().map_err(|_| CmdError::usage(format!("bad range '{s}'")))?;
    let hi: f64 = hi.trim().parse().map_err(|_| CmdError::usage(format!("bad range '{s}'")))?;
    Ok((lo, hi))
}

fn load_run_config(path: &Path) -> Result<RunConfig, CmdError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CmdError::data(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_str(&raw)
        .map_err(|e| CmdError::usage(format!("cannot parse config {}: {e}", path.display())))?;
    config.validate().map_err(CmdError::from)?;
    Ok(config)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<String, CmdError> {
    if args.n == 0 {
        return Err(CmdError::usage("--n must be >= 1"));
    }
    let spec = match &args.spec {
        Some(path) => {
            let raw = std::fs::read_to_string(path).map_err(|e| {
                CmdError::usage(format!("cannot read spec {}: {e}", path.display()))
            })?;
            serde_json::from_str::<PhantomSpec>(&raw)
                .map_err(|e| CmdError::usage(format!("bad phantom spec: {e}")))?
        }
        None => PhantomSpec::default(),
    };
    let age_range = parse_range(&args.age_range)?;
    let manifest = write_dataset(&spec, args.n, age_range, args.sex_balance, args.seed, &args.out)?;
    Ok(format!(
        "wrote {} samples (spec {}) to {}",
        manifest.samples.len(),
        manifest.spec_hash,
        args.out.display()
    ))
}

fn cmd_train(args: TrainArgs) -> Result<String, CmdError> {
    let config = load_run_config(&args.config)?;
    match args.stage {
        1 => {
            let ckpt = train_stage1(&config, args.resume)?;
            let val = ckpt
                .meta
                .extra
                .get("val_l1")
                .map(|v| format!(", held-out L1 {v:.4}"))
                .unwrap_or_default();
            Ok(format!(
                "stage 1 ({}) finished at step {}{} -> {}",
                config.variant.name(),
                ckpt.meta.step,
                val,
                config.stage1_dir().display()
            ))
        }
        2 => {
            if !config.stage1_dir().join("meta.json").is_file() {
                return Err(CmdError::usage(format!(
                    "stage 2 requires a stage-1 checkpoint at {}",
                    config.stage1_dir().display()
                )));
            }
            let ckpt = train_stage2(&config, &config.stage1_dir())?;
            let last = ckpt
                .meta
                .extra
                .get("last_loss")
                .map(|v| format!(", last denoising loss {v:.4}"))
                .unwrap_or_default();
            Ok(format!(
                "stage 2 ({}) finished at step {}{} -> {}",
                config.variant.name(),
                ckpt.meta.step,
                last,
                config.stage2_dir().display()
            ))
        }
        other => Err(CmdError::usage(format!("--stage must be 1 or 2, got {other}"))),
    }
}

fn cmd_train_predictor(args: TrainPredictorArgs) -> Result<String, CmdError> {
    let manifest = read_manifest(&args.data)?;
    let first =
        manifest.samples.first().ok_or_else(|| CmdError::data("dataset has no samples"))?;
    let net = morphldm::nets::NetConfig {
        image_channels: first.shape[0],
        spatial_rank: first.shape.len() - 1,
        ..Default::default()
    };
    let cfg = PredictorTrainConfig {
        net,
        steps: args.steps,
        batch_size: args.batch,
        lr: args.lr,
        seed: args.seed,
        ..Default::default()
    };
    let ckpt = train_predictor(&args.data, &args.out, &cfg)?;
    let mae = ckpt.meta.extra.get("val_age_mae").copied().unwrap_or(f64::NAN);
    let acc = ckpt.meta.extra.get("val_sex_acc").copied().unwrap_or(f64::NAN);
    Ok(format!(
        "predictor trained ({} steps), held-out age MAE {mae:.2}y, sex acc {acc:.3} -> {}",
        ckpt.meta.step,
        args.out.display()
    ))
}

fn cmd_sample(args: SampleArgs) -> Result<String, CmdError> {
    let config = load_run_config(&args.config)?;
    for (dir, what) in [(config.stage1_dir(), "stage-1"), (config.stage2_dir(), "stage-2")] {
        if !dir.join("meta.json").is_file() || !dir.join("params.bin").is_file() {
            return Err(CmdError::data(format!(
                "missing {what} checkpoint at {}",
                dir.display()
            )));
        }
    }
    let (age_lo, age_hi) = parse_range(&args.ages)?;
    let plan =
        SamplePlan { n: args.n, age_lo, age_hi, sex_balance: args.sex_balance, seed: args.seed };
    let manifest = generate_samples(&config, &plan, &args.out)?;
    Ok(format!(
        "generated {} samples ({}) to {}",
        manifest.samples.len(),
        config.variant.name(),
        args.out.display()
    ))
}

fn cmd_eval(args: EvalArgs) -> Result<String, CmdError> {
    let real = read_dataset::<f32>(&args.real)?;
    let synth = read_dataset::<f32>(&args.synth)?;
    if !args.predictor.join("meta.json").is_file() {
        return Err(CmdError::data(format!(
            "missing predictor checkpoint at {}",
            args.predictor.display()
        )));
    }
    let predictor = PredictorCheckpoint::load(&args.predictor)?;
    let opts = EvalOptions { n_pairs: args.pairs, seed: args.seed };
    let report = evaluate_cohorts(&real, &synth, &predictor.predictor, &predictor.params, &opts)
        .map_err(|e| CmdError::data(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(|e| CmdError::data(e.to_string()))?;
    std::fs::write(args.out.join("report.json"), report.to_json())
        .map_err(|e| CmdError::data(e.to_string()))?;
    std::fs::write(args.out.join("regions.csv"), report.regions_csv())
        .map_err(|e| CmdError::data(e.to_string()))?;
    std::fs::write(args.out.join("decade_mae.csv"), report.decade_csv())
        .map_err(|e| CmdError::data(e.to_string()))?;
    let synth_refs: Vec<_> = synth.images.iter().collect();
    write_montage(&synth_refs, &synth.conditions, 8, &args.out.join("synth_montage.png"))
        .map_err(|e| CmdError::data(e.to_string()))?;
    let real_refs: Vec<_> = real.images.iter().collect();
    write_montage(&real_refs, &real.conditions, 8, &args.out.join("real_montage.png"))
        .map_err(|e| CmdError::data(e.to_string()))?;
    Ok(format!(
        "eval: ms_ssim {:.4} (real {:.4}), age_mae {:.2}y, sex_acc {:.3}, fd_phantom {:.3} -> {}",
        report.metrics.ms_ssim,
        report.real_baseline.ms_ssim,
        report.metrics.age_mae,
        report.metrics.sex_acc,
        report.metrics.fd_phantom,
        args.out.display()
    ))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::TrainPredictor(args) => cmd_train_predictor(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

//! Command-line driver: train a source checkpoint, rank traversal
//! permutations, run adaptation methods, sweep ablation axes, and summarize
//! emitted CSVs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use trust_tta::adapt::{ExecMode, Mode, Polarity};
use trust_tta::data::CorruptionKind;
use trust_tta::error::Result;
use trust_tta::model::{ModelConfig, TrainConfig};
use trust_tta::runner::{
    ablation_csv, accuracy_csv, rank_report_json, run_ablation, run_experiment, summarize_csv_dir,
    train_checkpoint, AblationAxis, ExperimentConfig, Method, RankConfig,
};
use trust_tta::scan2d::Permutation;

#[derive(Parser)]
#[command(
    name = "trust-tta",
    about = "Traversal-permutation test-time adaptation for a micro VMamba-style classifier",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source checkpoint on the synthetic dataset.
    Train(TrainArgs),
    /// Rank traversal permutations by mean prediction entropy.
    Rank(RankArgs),
    /// Run an adaptation method over a corrupted target stream.
    Adapt(AdaptArgs),
    /// Sweep one ablation axis across seeds.
    Ablate(AblateArgs),
    /// Aggregate emitted CSVs into a summary table.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Base seed for dataset generation, init, and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset size (multiple of 8); 80% trains, 20% is the held-out stream.
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StreamArgs {
    /// Source checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corruption kind applied to the held-out stream.
    #[arg(long, default_value = "gaussian_noise")]
    corruption: CorruptionKind,
    /// Severity 0..=5 (0 = clean).
    #[arg(long, default_value_t = 3)]
    severity: u8,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leading stream batches used for the offline entropy ranking.
    #[arg(long, default_value_t = 4)]
    calib_batches: usize,
    /// Rank on the clean variant of the calibration batches.
    #[arg(long, default_value_t = false)]
    rank_on_clean: bool,
    /// Candidate permutations: "all" or a comma-separated list like
    /// "abcd,badc".
    #[arg(long, default_value = "all")]
    pool: String,
}

impl StreamArgs {
    fn pool_list(&self) -> Result<Option<Vec<Permutation>>> {
        if self.pool == "all" {
            return Ok(None);
        }
        let perms = self
            .pool
            .split(',')
            .map(Permutation::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(perms))
    }
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    stream: StreamArgs,
    /// Output path for the ranking JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    stream: StreamArgs,
    #[arg(long, default_value = "trust")]
    method: Method,
    #[arg(long, default_value = "online")]
    mode: ModeArg,
    #[arg(long, default_value = "sequential")]
    exec: ExecArg,
    /// Number of selected permutations.
    #[arg(long, default_value_t = 6)]
    k: usize,
    /// Adaptation iterations per batch.
    #[arg(long, default_value_t = 1)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Select highest-entropy permutations instead of lowest.
    #[arg(long, default_value = "lowest")]
    polarity: PolarityArg,
    /// Weight the averaged snapshots by entropy softmax.
    #[arg(long, default_value_t = false)]
    entropy_weighted: bool,
    /// Re-run the exact configuration embedded in an emitted report JSON
    /// (other flags are ignored).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the report JSON and accuracy CSV.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    stream: StreamArgs,
    /// Axis to sweep: k | iters | batch | polarity | eval-perm.
    #[arg(long)]
    axis: AblationAxis,
    #[arg(long, default_value = "trust")]
    method: Method,
    #[arg(long, default_value = "online")]
    mode: ModeArg,
    #[arg(long, default_value = "sequential")]
    exec: ExecArg,
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Number of seeds (seed, seed+1, …).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of emitted CSVs.
    #[arg(long)]
    dir: PathBuf,
    /// Output summary CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Online,
    Standard,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PolarityArg {
    Lowest,
    Highest,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Online => Mode::Online,
            ModeArg::Standard => Mode::Standard,
        }
    }
}

impl From<ExecArg> for ExecMode {
    fn from(e: ExecArg) -> ExecMode {
        match e {
            ExecArg::Sequential => ExecMode::Sequential,
            ExecArg::Parallel => ExecMode::Parallel,
        }
    }
}

impl From<PolarityArg> for Polarity {
    fn from(p: PolarityArg) -> Polarity {
        match p {
            PolarityArg::Lowest => Polarity::Lowest,
            PolarityArg::Highest => Polarity::Highest,
        }
    }
}

fn experiment_config(
    stream: &StreamArgs,
    method: Method,
    mode: ModeArg,
    exec: ExecArg,
    k: usize,
    iters: usize,
    lr: f64,
    polarity: PolarityArg,
    entropy_weighted: bool,
) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::new(&stream.checkpoint.to_string_lossy(), method);
    config.mode = mode.into();
    config.exec = exec.into();
    config.k = k;
    config.iterations = iters;
    config.lr = lr;
    config.batch_size = stream.batch;
    config.seed = stream.seed;
    config.corruption = stream.corruption;
    config.severity = stream.severity;
    config.calib_batches = stream.calib_batches;
    config.polarity = polarity.into();
    config.pool = stream.pool_list()?;
    config.entropy_weighted = entropy_weighted;
    config.rank_on_clean = stream.rank_on_clean;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let model_config = ModelConfig::default();
            let train_config = TrainConfig {
                epochs: args.epochs,
                lr: args.lr,
                batch_size: args.batch,
                seed: args.seed,
            };
            let (checkpoint, clean) =
                train_checkpoint(&model_config, args.seed, args.n, &train_config)?;
            checkpoint.save(&args.out)?;
            println!(
                "trained on {} samples, clean test accuracy {:.1}%, checkpoint at {}",
                args.n,
                clean * 100.0,
                args.out.display()
            );
        }
        Command::Rank(args) => {
            let config = RankConfig {
                checkpoint: args.stream.checkpoint.to_string_lossy().into_owned(),
                corruption: args.stream.corruption,
                severity: args.stream.severity,
                batch_size: args.stream.batch,
                seed: args.stream.seed,
                calib_batches: args.stream.calib_batches,
                rank_on_clean: args.stream.rank_on_clean,
                pool: args.stream.pool_list()?,
            };
            let json = rank_report_json(&config)?;
            std::fs::write(&args.out, json)?;
            println!("ranking written to {}", args.out.display());
        }
        Command::Adapt(args) => {
            let config = match &args.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let report: trust_tta::runner::RunReport = serde_json::from_str(&text)?;
                    report.config
                }
                None => experiment_config(
                    &args.stream,
                    args.method,
                    args.mode,
                    args.exec,
                    args.k,
                    args.iters,
                    args.lr,
                    args.polarity,
                    args.entropy_weighted,
                )?,
            };
            std::fs::create_dir_all(&args.out_dir)?;
            let report = run_experiment(&config)?;
            let stem = format!(
                "{}_{}_s{}_seed{}",
                config.method, config.corruption, config.severity, config.seed
            );
            let report_path = args.out_dir.join(format!("report_{stem}.json"));
            let csv_path = args.out_dir.join(format!("accuracy_{stem}.csv"));
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            std::fs::write(&csv_path, accuracy_csv(&report))?;
            println!(
                "{}: mean accuracy {:.1}% over {} batches ({} samples); report at {}",
                config.method,
                report.mean_accuracy_pct,
                report.batches,
                report.test_samples,
                report_path.display()
            );
        }
        Command::Ablate(args) => {
            let base = experiment_config(
                &args.stream,
                args.method,
                args.mode,
                args.exec,
                args.k,
                args.iters,
                args.lr,
                PolarityArg::Lowest,
                false,
            )?;
            let seeds: Vec<u64> = (0..args.seeds).map(|i| args.stream.seed + i).collect();
            let rows = run_ablation(args.axis, &base, &seeds)?;
            std::fs::write(&args.out, ablation_csv(&rows))?;
            println!(
                "{} rows for axis {} written to {}",
                rows.len(),
                args.axis,
                args.out.display()
            );
        }
        Command::Report(args) => {
            let summary = summarize_csv_dir(&args.dir)?;
            std::fs::write(&args.out, &summary)?;
            println!("summary written to {}", args.out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

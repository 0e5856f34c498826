//! `blockskip`: train a teacher, learn a block-skipping mask, rectify it,
//! sample with it and evaluate the result.
//!
//! Every verb takes `--config run.toml` (see [`config`]) and prints a JSON
//! object describing what it wrote. Failures exit nonzero with
//! `{"error": {"kind": …, "message": …}}` as the last line on stderr.

mod artifacts;
mod commands;
mod config;
mod failure;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clap::error::ErrorKind;

#[derive(Parser, Debug)]
#[command(name = "blockskip", version, about = "Learned block skipping for diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the frozen teacher denoiser.
    TrainTeacher(TeacherArgs),
    /// Learn a per-timestep block mask against the teacher.
    TrainMask(MaskArgs),
    /// Drop mask cells whose output nothing reads.
    Rectify(RectifyArgs),
    /// Draw samples, optionally under a mask.
    Sample(SampleArgs),
    /// Compare masked samples with unmasked ones, or run an ablation grid.
    Evaluate(EvaluateArgs),
    /// Export heatmap, histogram, sparsity and distortion tables for a mask.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, conflicts_with = "resume")]
    force: bool,
    /// Keep existing outputs whose config hash matches; refuse mismatches.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct TeacherArgs {
    #[command(flatten)]
    common: Common,
    /// Container directory [default: <output_dir>/teacher].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Continuous,
    #[value(alias = "bernoulli_st")]
    BernoulliSt,
    #[value(alias = "gumbel-softmax", alias = "gumbel_softmax")]
    Gumbel,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainerOverrides {
    #[arg(long)]
    lambda_sparse: Option<f64>,
    #[arg(long)]
    lambda_bimodal: Option<f64>,
    #[arg(long, value_enum)]
    sampling_mode: Option<ModeArg>,
    /// Gumbel-softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Use w(t) = 1 for every timestep.
    #[arg(long)]
    no_loss_scaling: bool,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[command(flatten)]
    common: Common,
    /// Teacher container [default: <output_dir>/teacher].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Mask file [default: <output_dir>/mask.json].
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainerOverrides,
    /// Train one mask per λ₁ value, each in its own process, written to
    /// <output_dir>/mask_ls<λ₁>.json.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["out", "lambda_sparse"])]
    sweep_lambda_sparse: Vec<f64>,
}

#[derive(Args, Debug)]
struct RectifyArgs {
    #[arg(long)]
    mask: PathBuf,
    /// Rectified mask [default: <mask>.rectified.json].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Needed for `--verify` and for MAC figures in the report.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sample with both masks and record the deviations.
    #[arg(long, requires = "config")]
    verify: bool,
    /// Number of chains used by `--verify`.
    #[arg(long, default_value_t = 8)]
    seeds: usize,
    #[arg(long, conflicts_with = "resume")]
    force: bool,
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sample under this mask; unmasked when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Seed of the first chain; chain i uses first_seed + i.
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Number of chains [default: evaluation.samples].
    #[arg(long)]
    count: Option<usize>,
    /// Sample file: CSV for points, raw f32 plus JSON sidecar for images
    /// [default: <output_dir>/samples.csv or samples.f32].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GridArg {
    /// Continuous, Bernoulli straight-through and Gumbel-softmax training, each
    /// with and without rectification.
    #[value(alias = "sampling-mode×rectify", alias = "sampling-mode-x-rectify")]
    SamplingMode,
    /// Rectification, loss scaling and the bi-modal term switched one at a time.
    Toggles,
    All,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Unmasked samples the others are compared against.
    #[arg(long, required_unless_present = "grid")]
    reference: Option<PathBuf>,
    /// Independent unmasked samples; their distance to the reference is the noise floor.
    #[arg(long, required_unless_present = "grid")]
    baseline: Option<PathBuf>,
    /// Samples drawn under the mask.
    #[arg(long, required_unless_present = "grid")]
    masked: Option<PathBuf>,
    /// Mask used for the masked samples; all-ones when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Summary file [default: <output_dir>/summary.json].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also time masked against unmasked sampling this many times.
    #[arg(long, default_value_t = 0)]
    timing_reps: usize,
    /// Run an ablation grid end to end instead.
    #[arg(long, value_enum, conflicts_with_all = ["reference", "baseline", "masked", "mask"])]
    grid: Option<GridArg>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    mask: PathBuf,
    /// [default: <output_dir>/report]
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    match cli.command {
        Command::TrainTeacher(a) => commands::train_teacher(&a),
        Command::TrainMask(a) => commands::train_mask(&a),
        Command::Rectify(a) => commands::rectify(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Evaluate(a) => match a.grid {
            Some(g) => grid::run(&a, g),
            None => commands::evaluate(&a),
        },
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            let msg = e.to_string();
            let err = failure::fail("usage", msg.lines().next().unwrap_or_default().trim_start_matches("error: "));
            eprintln!("{}", failure::to_json(&err));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", failure::to_json(&e));
            ExitCode::FAILURE
        }
    }
}

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mr2", version, about = "Class-wise margin regularization: data, training, evaluation and bounds")]
struct Cli {
    /// Worker threads for Monte-Carlo bounds and ablation arms.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    /// Overrides the seed of the spec, config, or estimator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/test pair from a spec file.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Evaluate the generalization bounds for a checkpoint on a dataset.
    Bounds(BoundsArgs),
    /// Compute the margin schedule from per-class spread values.
    Gamma(GammaArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train every ablation arm over several seeds and summarize.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training set.
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for the per-epoch metrics; defaults to the training set.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Log path; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-class table path.
    #[arg(long)]
    per_class: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = mr2_core::bounds::DEFAULT_DELTA)]
    delta: f64,
    /// Feature norm exponent; `inf` for the sup norm.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = mr2_core::bounds::DEFAULT_DRAWS)]
    draws: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GammaArgs {
    /// Per-class spread values, comma separated.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 2.0)]
    cbar: f64,
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// Decimal places printed.
    #[arg(long, default_value_t = 4)]
    digits: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = mr2_core::gradcheck::DEFAULT_INSTANCES)]
    instances: usize,
    #[arg(long, default_value_t = mr2_core::gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Per-instance CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Training seeds; defaults to the single config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Arms to train; defaults to the six-arm component analysis.
    #[arg(long, value_delimiter = ',')]
    arms: Vec<String>,
    /// Summary path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-run table path.
    #[arg(long)]
    runs_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads as usize).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    match commands::dispatch(cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

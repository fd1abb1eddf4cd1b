//! `augdetect` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "augdetect", version, about = "Adversarial-example detection from augmentation neighbors")]
pub struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed propagated into every section seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact and results root.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Replace existing results for the same run id.
    #[arg(long, global = true)]
    pub force: bool,
    /// Results directory name under `<out>/runs`.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train, calibration and test containers.
    GenData(DataArgs),
    /// Train the target classifier.
    TrainClf(TrainArgs),
    /// Train the self-supervised encoder.
    TrainSsl(TrainArgs),
    /// Train the classification head on the frozen encoder.
    Probe(TrainArgs),
    /// Calibrate detector thresholds on the calibration split.
    Calibrate(DetectArgs),
    /// Attack the correctly classified test inputs and save the results.
    Attack(AttackArgs),
    /// Run the detector on a dataset container.
    Detect(DetectInput),
    /// Attack, detect and report ROC metrics.
    Eval(AttackArgs),
    /// Sweep neighbors, alpha, epsilon or the mechanism ablation.
    Sweep(SweepArgs),
    /// Feature-gap and perturbation-ordering checks.
    Theory(TheoryArgs),
    /// Parameter, FLOP and wall-time accounting.
    Cost(CostArgs),
    /// Collect every run summary into one table.
    Report,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub calib_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Neighbors per input.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub target_fpr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// fgsm, pgd, adaptive, orthogonal or selection.
    #[arg(long)]
    pub kind: Option<String>,
    /// Budget as a decimal or a fraction such as 8/255.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k_eot: Option<usize>,
    /// Attack at most this many test inputs.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub detect: DetectArgs,
}

#[derive(Debug, Args)]
pub struct DetectInput {
    /// Dataset container to screen.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// neighbors, alpha, epsilon or ablation.
    #[arg(long)]
    pub sweep: String,
    /// Comma-separated grid; budgets accept fractions.
    #[arg(long)]
    pub grid: Option<String>,
    #[command(flatten)]
    pub attack: AttackArgs,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub k: Option<usize>,
    /// Inputs per timed detection pass.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("error:{}:{}: {e}", e.module(), e.kind());
            eprintln!("{line}");
            commands::log_error(&cli.out, &line);
            ExitCode::from(1)
        }
    }
}

//! `tumorcast`: phantom synthesis, preprocessing, training, personalization,
//! prediction and leave-one-out evaluation from one binary.

mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use setup::Profile;

#[derive(Parser)]
#[command(name = "tumorcast", version, about = "Voxel-wise tumor growth prediction")]
struct Cli {
    /// JSON file overriding fields of the selected profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings the config file is layered onto.
    #[arg(long, global = true, value_enum, default_value = "paper")]
    profile: Profile,
    /// Worker threads; falls back to TUMORCAST_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort.
    Synth(SynthArgs),
    /// Align a case and write its invasion and expansion channels.
    Preprocess(CaseOut),
    /// Estimate mask flow for one interval and render it as PPM slices.
    Flow(FlowArgs),
    /// Train the networks of one kind on a cohort.
    Train(TrainArgs),
    /// Pick the snapshot and threshold for one patient.
    Personalize(PersonalizeArgs),
    /// Forecast the third mask of a case.
    Predict(PredictArgs),
    /// Score a predicted mask against ground truth.
    Evaluate(EvaluateArgs),
    /// Leave-one-out evaluation over a cohort.
    Loocv(LoocvArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Nonlinear,stable,shrinking counts; defaults to a 60/20/20 split.
    #[arg(long, value_delimiter = ',')]
    pub mix: Option<Vec<usize>>,
}

#[derive(Args)]
pub struct CaseOut {
    /// Case directory or its case.json.
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FlowArgs {
    #[command(flatten)]
    pub io: CaseOut,
    /// First timepoint of the interval (1 or 2).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub from: u8,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// invasion, expansion, early, late or end2end.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Patient ids left out of the population.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
}

#[derive(Args)]
pub struct PersonalizeArgs {
    /// Output directory of `train`.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Invasion training run supplying snapshot and threshold for kinds
    /// without an invasion stream.
    #[arg(long)]
    pub invasion_train: Option<PathBuf>,
    /// Final-epoch snapshot and fixed threshold 0.5.
    #[arg(long)]
    pub no_personalization: bool,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Output directory of `personalize`, or `linear`.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub io: CaseOut,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Predicted mask volume (.vol.json).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth mask volume.
    #[arg(long, conflicts_with = "case", required_unless_present = "case")]
    pub truth: Option<PathBuf>,
    /// Case whose aligned t3 mask is the ground truth.
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct LoocvArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long, default_value = "invasion,expansion,early,late,end2end,linear")]
    pub kinds: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the per-slice PPM overlays.
    #[arg(long)]
    pub no_overlays: bool,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Finite-difference probes per parameter tensor.
    #[arg(long, default_value_t = 6)]
    pub probes: usize,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let threads = setup::init_pool(setup::resolve_threads(cli.threads)?)?;
    let cfg = setup::load_config(cli.profile, cli.config.as_deref(), cli.seed)?;
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Preprocess(_) => "preprocess",
        Command::Flow(_) => "flow",
        Command::Train(_) => "train",
        Command::Personalize(_) => "personalize",
        Command::Predict(_) => "predict",
        Command::Evaluate(_) => "evaluate",
        Command::Loocv(_) => "loocv",
        Command::Gradcheck(_) => "gradcheck",
    };
    let ctx = setup::RunContext {
        command: name,
        cfg: &cfg,
        threads,
    };
    match &cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Preprocess(a) => commands::preprocess(&ctx, a),
        Command::Flow(a) => commands::flow(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Personalize(a) => commands::personalize(&ctx, a),
        Command::Predict(a) => commands::predict(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Loocv(a) => commands::loocv(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
    }
}

fn error_code(e: &anyhow::Error) -> &'static str {
    if let Some(c) = e.downcast_ref::<tumorcast_core::CoreError>() {
        c.code()
    } else if e.downcast_ref::<tumorcast_nnet::NnetError>().is_some() {
        "nnet"
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    // clap prints usage and exits 2 on unknown flags or subcommands
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            let record = json!({ "error": { "code": error_code(&e), "message": e.to_string(), "chain": chain } });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

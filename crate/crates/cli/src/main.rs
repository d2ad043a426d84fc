use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Cascaded liver and tumor segmentation with residual attention U-Nets.
#[derive(Parser, Debug)]
#[command(name = "raunet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic CT case with liver and tumor ground truth.
    Phantom(PhantomArgs),
    /// Window and normalize a CT volume.
    Preprocess(PreprocessArgs),
    /// Train one stage on one or more cases.
    Train(TrainArgs),
    /// Run a single stage.
    Infer(InferArgs),
    /// Run localization, liver and tumor stages end to end.
    Cascade(CascadeArgs),
    /// Score a segmentation against ground truth as CSV.
    Eval(EvalArgs),
    /// Describe a volume file, a network or a configuration.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Loc,
    Liver,
    Tumor,
    Brain,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Output directory; receives ct.rvol, liver.rvol, tumor.rvol and phantom.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the additive HU noise.
    #[arg(long)]
    pub noise: Option<f32>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Case directory (repeatable). Liver cases hold ct.rvol, liver.rvol and
    /// tumor.rvol; brain cases hold t1, t1ce, t2, flair and labels .rvol files.
    #[arg(long = "case", required = true)]
    pub cases: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hold out this cross-validation fold (0-based) for validation.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Network name overriding the stage default from the config.
    #[arg(long)]
    pub net: Option<String>,
    /// Checkpoint written after training.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Raw HU volume.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Coarse liver mask bounding the liver stage, or liver mask restricting
    /// the tumor stage.
    #[arg(long)]
    pub roi: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CascadeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub loc: PathBuf,
    /// Liver checkpoints; several are ensembled.
    #[arg(long = "liver", required = true)]
    pub liver: Vec<PathBuf>,
    /// Tumor checkpoints; several are ensembled.
    #[arg(long = "tumor", required = true)]
    pub tumor: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for liver.rvol and tumor.rvol (and report.csv).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, requires = "tumor_gt")]
    pub liver_gt: Option<PathBuf>,
    #[arg(long, requires = "liver_gt")]
    pub tumor_gt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub seg: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "case")]
    pub case: String,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct InspectArgs {
    /// Print the header of an RVOL file.
    #[arg(long)]
    pub rvol: Option<PathBuf>,
    /// Print the layer shape trace and parameter count of a network.
    #[arg(long)]
    pub net: Option<String>,
    /// Print a configuration (defaults when no file is given) with provenance.
    #[arg(long)]
    pub config: Option<Option<PathBuf>>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use raunet::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Cascade(a) => commands::cascade(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

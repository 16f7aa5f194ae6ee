//! `neuropt` command-line entry point.

mod commands;
mod overrides;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] neuropt::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "neuropt",
    version,
    about = "Multi-task pretraining of 3D Swin encoders on brain volumes",
    arg_required_else_help = true,
    after_help = "Configuration keys can be overridden with --section.key VALUE (for example --losses.tau 0.2) or --set key=value.\nDAMT_LOG_LEVEL=debug|info|warn sets verbosity."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Multi-task pretraining.
    Pretrain(PretrainArgs),
    /// Cross-validated fine-tuning of one arm.
    Finetune(FinetuneArgs),
    /// Metrics from a predictions CSV written by finetune.
    Eval(EvalArgs),
    /// Label-fraction sweep, pretrained against scratch.
    Sweep(SweepArgs),
    /// Extract raw radiomics features for every sample of a dataset.
    Radiomics(RadiomicsArgs),
    /// Print a checkpoint manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelKind {
    None,
    /// Alternating classes; class 1 gets a bright foreground offset.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size encoder and views.
    Default,
    /// 32^3 views and a 12-channel encoder.
    Toy,
    /// 16^3 views and a two-stage 6-channel encoder.
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskKind {
    Classify,
    Regress,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub regions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = LabelKind::None)]
    pub label: LabelKind,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON configuration file layered over the preset.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Base settings; defaults to the checkpoint's configuration when one is
    /// given, else `default`.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long, value_enum, default_value_t = TaskKind::Classify)]
    pub task: TaskKind,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Pretrained checkpoint; omitted means training from scratch.
    #[arg(long)]
    pub checkpoint: Option<std::path::PathBuf>,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub predictions: std::path::PathBuf,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args)]
pub struct RadiomicsArgs {
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = neuropt::radiomics::DEFAULT_LEVELS)]
    pub levels: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: std::path::PathBuf,
    /// Also verify the payload hash.
    #[arg(long)]
    pub verify: bool,
}

fn init_logging() {
    let level = match std::env::var("DAMT_LOG_LEVEL").as_deref() {
        Ok("debug") => log::LevelFilter::Debug,
        Ok("warn") => log::LevelFilter::Warn,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).target(env_logger::Target::Stderr).init();
}

fn run(argv: Vec<String>) -> Result<(), CliError> {
    let (argv, dotted) = overrides::split_dotted(argv);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    match cli.command {
        Command::Phantom(a) => no_dotted(&dotted).and_then(|_| commands::phantom(&a)),
        Command::Pretrain(a) => commands::pretrain(&a, &dotted),
        Command::Finetune(a) => commands::finetune(&a, &dotted),
        Command::Eval(a) => no_dotted(&dotted).and_then(|_| commands::eval(&a)),
        Command::Sweep(a) => commands::sweep(&a, &dotted),
        Command::Radiomics(a) => no_dotted(&dotted).and_then(|_| commands::radiomics(&a)),
        Command::Inspect(a) => no_dotted(&dotted).and_then(|_| commands::inspect(&a)),
    }
}

fn no_dotted(dotted: &[(String, String)]) -> Result<(), CliError> {
    match dotted.first() {
        Some((k, _)) => Err(CliError::Usage(format!("this subcommand takes no configuration overrides (got --{k})"))),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("{}", msg.trim_end()),
                CliError::Run(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(e.code())
        }
    }
}

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spatial_prompt::eval::{Ablation, Dataset, EvalError};
use spatial_prompt::synth::PathKind;
use spatial_prompt::Error;

use self::config::SettingArgs;

#[derive(Debug, Parser)]
#[command(name = "spatial-prompt", version, about = "Keyframe prompts for spatial questions over RGB-D scans")]
pub struct Cli {
    #[command(flatten)]
    settings: SettingArgs,
    /// Print the effective settings as TOML and exit
    #[arg(long, global = true)]
    print_config: bool,
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scene with embeddings
    Synth(SynthArgs),
    /// Select keyframes for a scene
    Extract(ExtractArgs),
    /// Build a prompt bundle for one query
    Prompt(PromptArgs),
    /// Ask a question (or many, interactively) about a scene
    Ask(AskArgs),
    /// Score a question set against a directory of scenes
    Eval(EvalArgs),
    /// Render the few-shot annotation from training questions
    Bank(BankArgs),
    /// Summarize any JSON artifact produced by this tool
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value = "circle", value_parser = clap::value_parser!(PathKind))]
    path: PathKind,
    /// Scene id; defaults to the output directory name
    #[arg(long)]
    scene_id: Option<String>,
    #[arg(long, default_value_t = 32)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 48)]
    height: u32,
    #[arg(long, default_value_t = 0.15)]
    blur_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Greedy,
    Uniform,
}

#[derive(Debug, Args)]
struct SceneArgs {
    /// Scene manifest (scene.json)
    #[arg(long)]
    scene: PathBuf,
    /// Embedding header; defaults to embeddings.json next to the manifest
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Keep every k-th frame before selection
    #[arg(long, value_name = "K")]
    decimate: Option<usize>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, value_enum, default_value = "greedy")]
    strategy: StrategyArg,
    /// Write the keyframe set here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record every pruning step in the output and on stderr
    #[arg(long)]
    log_removals: bool,
    /// Also write per-frame features to this file
    #[arg(long)]
    features_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PromptSource {
    #[command(flatten)]
    scene: SceneArgs,
    /// Keyframe set from `extract`; selection runs when omitted
    #[arg(long)]
    keyframes: Option<PathBuf>,
    /// default, zero-shot, none, or @FILE
    #[arg(long, default_value = "default")]
    annotation: String,
    #[arg(long, value_parser = clap::value_parser!(Ablation))]
    ablation: Option<Ablation>,
}

#[derive(Debug, Args)]
struct PromptArgs {
    #[command(flatten)]
    source: PromptSource,
    #[arg(long)]
    query: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the text rendering instead of JSON
    #[arg(long)]
    text: bool,
    /// Compare the output with this file; exit 1 on any difference
    #[arg(long, value_name = "FILE")]
    golden_check: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Http,
    Replay,
    Record,
    Echo,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "http")]
    backend: BackendArg,
    /// Replay file (read by `replay`, appended to by `record`)
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AskArgs {
    #[command(flatten)]
    source: PromptSource,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, required_unless_present = "interactive")]
    query: Option<String>,
    /// Read one question per line from stdin
    #[arg(long)]
    interactive: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_parser = clap::value_parser!(Dataset))]
    dataset: Dataset,
    /// Question file, one JSON object per line
    #[arg(long)]
    questions: PathBuf,
    /// Directory holding <scene_id>/scene.json and embeddings.json
    #[arg(long)]
    scenes: PathBuf,
    /// Training questions for the few-shot answer bank
    #[arg(long)]
    train: Option<PathBuf>,
    /// Annotation when no --train is given: default, zero-shot, none, or @FILE
    #[arg(long)]
    annotation: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(Ablation))]
    ablation: Option<Ablation>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Report JSON destination
    #[arg(long)]
    out: Option<PathBuf>,
    /// Aggregate CSV destination
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Cache keyframe selections here
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Exit with status 4 when any item is unscored
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct BankArgs {
    #[arg(long, value_parser = clap::value_parser!(Dataset))]
    dataset: Dataset,
    #[arg(long)]
    train: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    file: PathBuf,
}

/// Process outcome besides success.
pub enum Failure {
    /// Ran fine but a check did not hold.
    CheckFailed(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Llm(_) => 3,
        Error::Eval(EvalError::Incomplete { .. }) => 4,
        _ => 2,
    }
}

pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            1
        }
        Err(Failure::Error(e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            exit_code(&e)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let settings = cli.settings.resolve()?;
    if cli.print_config {
        print!("{}", settings.to_toml_lines());
        return Ok(());
    }
    if settings.jobs > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(settings.jobs).build_global();
    }
    let Some(command) = cli.command else {
        return Err(Error::Invalid("no subcommand given; see --help".into()).into());
    };
    match command {
        Command::Synth(a) => commands::synth(a),
        Command::Extract(a) => commands::extract(&settings, a),
        Command::Prompt(a) => commands::prompt(&settings, a),
        Command::Ask(a) => commands::ask(&settings, a),
        Command::Eval(a) => commands::eval(&settings, a),
        Command::Bank(a) => commands::bank(a),
        Command::Inspect(a) => commands::inspect(a),
    }
}

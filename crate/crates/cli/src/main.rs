use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qagen_cli::config::{PipelineConfig, Profile};
use qagen_cli::error::{CliError, EXIT_USAGE};
use qagen_cli::stages::{EvalInputs, Stage};

/// Answer-conditioned question generation pipeline.
///
/// Configuration is resolved from the profile defaults, then the TOML file,
/// then QAGEN_<SECTION>__<FIELD> environment variables, then the flags below.
#[derive(Parser, Debug)]
#[command(name = "qagen", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in defaults to start from.
    #[arg(long, global = true, default_value = "paper")]
    profile: Profile,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured work directory.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// Parallel workers for scoring, generation and evaluation.
    #[arg(long, global = true, default_value_t = default_workers())]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalise the QA pairs, materials and dictionary (or synthesise the fixture).
    Prep,
    /// Train skip-gram word embeddings on the materials.
    Embed,
    /// Score every phrase's significance against the materials.
    Score,
    /// Train the word-type tagger.
    TrainTyper,
    /// Train the question generator.
    TrainGen,
    /// Regenerate non-key phrases for every pair.
    Generate,
    /// Evaluate candidate files against the reference pairs.
    Eval {
        /// Reference pairs file (defaults to the prepared pairs).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Candidate file as NAME=PATH; repeat for several table rows.
        #[arg(long = "candidates", value_parser = parse_candidate)]
        candidates: Vec<(String, PathBuf)>,
    },
    /// Every stage in order.
    Pipeline,
    /// Print the resolved configuration.
    ShowConfig,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_candidate(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    if name.is_empty() || path.is_empty() {
        return Err("expected NAME=PATH".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn resolve(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|_| CliError::MissingFile(p.clone()))?),
        None => None,
    };
    let mut config = PipelineConfig::resolve(cli.profile, text.as_deref(), std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.workdir {
        config.paths.workdir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let config = resolve(&cli)?;
    let mut eval = EvalInputs::default();
    let stages: Vec<Stage> = match cli.command {
        Command::Prep => vec![Stage::Prep],
        Command::Embed => vec![Stage::Embed],
        Command::Score => vec![Stage::Score],
        Command::TrainTyper => vec![Stage::TrainTyper],
        Command::TrainGen => vec![Stage::TrainGen],
        Command::Generate => vec![Stage::Generate],
        Command::Eval { reference, candidates } => {
            eval = EvalInputs { reference, candidates };
            vec![Stage::Eval]
        }
        Command::Pipeline => Stage::ALL.to_vec(),
        Command::ShowConfig => {
            print!("{}", config.to_toml());
            return Ok(());
        }
    };
    qagen_cli::run(&stages, &config, &eval, cli.workers)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

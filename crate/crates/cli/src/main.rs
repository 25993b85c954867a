use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use talkface_cli::{commands, CliError, RunConfig};

/// Speech-driven facial behavior: data pipeline, adversarial model,
/// objective evaluation and rating study.
#[derive(Parser)]
#[command(name = "talkface", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for relative artifact paths.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus in raw extractor formats.
    Synth,
    /// Parse and align raw corpora into canonical tracks.
    Ingest,
    /// Clean canonical tracks and cut them into clips.
    Preprocess,
    /// Train generator and critic on the training clips.
    Train,
    /// Generate a behavior CSV from a speech CSV.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        speech: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Objective metrics for ground truth and every configured condition.
    Evaluate,
    /// Rating study service and analysis.
    Study {
        #[command(subcommand)]
        command: StudyCommand,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Serve the rating study until interrupted.
    Serve,
    /// Descriptive statistics and repeated-measures ANOVA over stored ratings.
    Analyze {
        /// Include participants who did not finish.
        #[arg(long)]
        include_incomplete: bool,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(cli.seed, cli.out);
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Ingest => commands::ingest(&cfg),
        Command::Preprocess => commands::preprocess(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Generate {
            checkpoint,
            speech,
            output,
        } => commands::generate(&cfg, &checkpoint, &speech, &output),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Study { command } => match command {
            StudyCommand::Analyze { include_incomplete } => commands::study_analyze(&cfg, include_incomplete),
            StudyCommand::Serve => {
                let rt = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
                    stage: "study serve",
                    path: PathBuf::from("tokio runtime"),
                    source,
                })?;
                rt.block_on(commands::study_serve(&cfg))
            }
        },
        Command::Config => Ok(cfg.to_toml()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

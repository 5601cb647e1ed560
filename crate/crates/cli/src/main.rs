use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use vitsteer_harness::{ExperimentConfig, HarnessError, Pipeline, Stage};
use vitsteer_server::AppState;

/// Head-gated ViT, sparse autoencoder and latent steering experiments.
///
/// Exit status: 0 on success, 2 on configuration errors, 3 when a stage's
/// input artifacts are missing or come from a different config, 1 otherwise.
#[derive(Parser, Debug)]
#[command(name = "vitsteer", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; toy defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppresses progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trains the gated ViT jointly with the head budget.
    TrainVit,
    /// Writes final-layer CLS embeddings of the training split.
    ExtractEmbeddings,
    /// Trains the TopK sparse autoencoder on the embeddings.
    TrainSae,
    /// Counts latent activation frequencies per class.
    Stats,
    /// Runs the steering α sweep.
    Sweep,
    /// Writes the head-frequency, overlap and summary reports.
    Report,
    /// Runs several stages in order; all of them by default.
    Run {
        /// Comma-separated stage names; an empty value only validates the config.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Prints the effective config and its hash.
    Config,
    /// Serves the trained artifacts over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn stages_of(command: &Command) -> Result<Option<Vec<Stage>>, HarnessError> {
    Ok(Some(match command {
        Command::TrainVit => vec![Stage::TrainVit],
        Command::ExtractEmbeddings => vec![Stage::Extract],
        Command::TrainSae => vec![Stage::TrainSae],
        Command::Stats => vec![Stage::Stats],
        Command::Sweep => vec![Stage::Sweep],
        Command::Report => vec![Stage::Report],
        Command::Run { stages: None } => Stage::ALL.to_vec(),
        Command::Run { stages: Some(names) } => names
            .iter()
            .filter(|n| !n.trim().is_empty())
            .map(|n| n.trim().parse())
            .collect::<Result<_, _>>()?,
        Command::Config | Command::Serve { .. } => return Ok(None),
    }))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let config = load_config(&cli.common)?;
    if let Some(stages) = stages_of(&cli.command)? {
        let mut pipeline = Pipeline::new(config)?.verbose(!cli.common.quiet);
        let outcome = pipeline.run(&stages)?;
        if !cli.common.quiet {
            let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ");
            eprintln!(
                "[vitsteer] config {} in {}: ran [{}], up to date [{}]",
                pipeline.hash(),
                pipeline.layout().dir.display(),
                names(&outcome.executed),
                names(&outcome.skipped)
            );
        }
        return Ok(());
    }
    match cli.command {
        Command::Config => {
            println!("# config_hash = {}", config.hash());
            print!("{}", config.to_toml_string());
            Ok(())
        }
        Command::Serve { addr } => {
            let state = Arc::new(AppState::load(&config)?);
            if !cli.common.quiet {
                eprintln!("[vitsteer] serving {} on http://{addr}", config.out_dir.display());
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| HarnessError::Io { path: addr.clone().into(), source: e })?;
            rt.block_on(vitsteer_server::serve(state, &addr))
                .map_err(|e| HarnessError::Io { path: addr.into(), source: e })
        }
        _ => unreachable!("stage commands handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

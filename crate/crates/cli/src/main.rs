use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bnn_cli::config::{ExperimentConfig, GenerateConfig};
use bnn_cli::error::{AtStage, StageError, StageResult, EXIT_OK};
use bnn_cli::{compare, generate, run};

#[derive(Parser)]
#[command(name = "bnn", version, about = "Bayesian neural network experiments")]
struct Cli {
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it as CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// A `.csv` file, or a directory to write `<generator>.csv` into.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit, predict, evaluate and optionally distill.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate the metrics of several runs as CSV.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize one run directory.
    Inspect { run: PathBuf },
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn execute(cli: &Cli) -> StageResult<()> {
    match &cli.command {
        Command::Generate { config, out, seed } => {
            let text = std::fs::read_to_string(config).at("config")?;
            let mut cfg: GenerateConfig = serde_json::from_str(&text).at("config")?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            let path = generate(&cfg, out)?;
            if !cli.quiet {
                println!("{}", path.display());
            }
        }
        Command::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::from_file(config)?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            let outcome = run(&cfg, &base_dir(config), out)?;
            if !cli.quiet {
                print!("{}", compare::inspect(&outcome.artifacts.dir).at("inspect")?);
            }
        }
        Command::Compare { runs, out } => {
            let table = compare::table(&compare::collect(runs));
            match out {
                Some(p) => bnn_cli::artifacts::write_atomic(p, table.as_bytes()).at("write")?,
                None => print!("{table}"),
            }
        }
        Command::Inspect { run } => print!("{}", compare::inspect(run).at("inspect")?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => report(e),
    }
}

fn report(e: StageError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

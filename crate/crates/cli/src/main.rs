use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coagent::experiment::{bundled, load_config, parse_config, run, write_outcome, ExperimentConfig, BUNDLED};
use coagent::Error;

/// Run coagent-network experiments from JSON configs.
#[derive(Parser)]
#[command(name = "coagent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a bundled config name.
    Run {
        /// Path to a JSON config, or the name of a bundled config.
        config: String,
        /// Override the number of trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's `output`, else `results/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List bundled configs.
    List,
    /// Print a bundled config.
    Show { name: String },
}

fn resolve(config: &str) -> Result<(String, ExperimentConfig), Error> {
    let path = Path::new(config);
    if path.exists() {
        let stem = path.file_stem().map_or("experiment".into(), |s| s.to_string_lossy().into_owned());
        return Ok((stem, load_config(path)?));
    }
    match bundled(config) {
        Some(text) => Ok((config.to_string(), parse_config(text)?)),
        None => Err(Error::Config(format!("config: no file or bundled config named '{config}'"))),
    }
}

fn exit_code(err: &Error) -> ExitCode {
    if err.is_numeric() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn run_command(config: &str, trials: Option<usize>, seed: Option<u64>, out: Option<PathBuf>) -> Result<bool, Error> {
    let (name, config) = resolve(config)?;
    let config = config.with_overrides(trials, seed)?;
    let outcome = run(&config)?;
    let dir = out
        .or_else(|| config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("results").join(&name));
    write_outcome(&dir, &config, &outcome)?;
    print!("{}", outcome.summary);
    println!("status={} output={}", if outcome.passed { "pass" } else { "fail" }, dir.display());
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Command::Show { name } => match bundled(&name) {
            Some(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            None => {
                eprintln!("error: no bundled config named '{name}'");
                ExitCode::from(1)
            }
        },
        Command::Run { config, trials, seed, out } => match run_command(&config, trials, seed, out) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&e)
            }
        },
    }
}

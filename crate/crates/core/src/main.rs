use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use dressed_thermo::scenario::{execute, Command, ExperimentConfig};
use dressed_thermo::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Spectrum,
    Robustness,
    Thermal,
    TimeResolved,
}

/// Dressed-state NV thermometry simulations.
#[derive(Debug, Parser)]
#[command(name = "dressed-thermo", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `out` from the config, else `out/<scenario>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed (default: `seed` from the config, else 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "DRESSED_THERMO_THREADS")]
    threads: Option<usize>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(if e.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_NUMERICAL
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let command = match cli.command {
        Cmd::Spectrum => Command::Spectrum,
        Cmd::Robustness => Command::Robustness,
        Cmd::Thermal => Command::Thermal,
        Cmd::TimeResolved => Command::TimeResolved,
    };
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.scenario));
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match execute(command, &cfg, &cli.config, &out, seed) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "grasp",
    version,
    about = "Planted spurious-factor identification and rank-1 gradient projection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Replace existing output files.
    #[arg(long, global = true)]
    force: bool,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,

    /// Exit with status 6 when a guaranteed property does not hold.
    #[arg(long, global = true)]
    check: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic gradient stream and write it to `<out>/stream_<seed>.grasp`.
    Gen,
    /// Extract the top singular pair from a stream or checkpoint.
    Identify { path: PathBuf },
    /// Train the toy model, naively or with frozen-probe projection.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Reuse this naive checkpoint instead of training one first.
        #[arg(long)]
        naive: Option<PathBuf>,
    },
    /// Compare rank-1 alignment ratios of a naive and a projected checkpoint.
    Leakage { naive: PathBuf, projected: PathBuf },
    /// Run a grid of experiments and write one table.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Naive,
    Grasp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SweepKind {
    Identify,
    Selectivity,
    Leakage,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Csv,
    Text,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already print their cause, so skip repeats
            let mut message = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !message.contains(&c) {
                    message = format!("{message}: {c}");
                }
            }
            eprintln!("error: {message}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

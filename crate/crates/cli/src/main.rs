//! `v2x-coop` command-line front end.
//!
//! Every subcommand prints one JSON document on stdout. Failures print
//! `{"error": {"kind": ..., "message": ...}}` on stderr and exit nonzero:
//! 2 for usage errors, 1 for everything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "v2x-coop", version, about = "Cooperative driving simulator with MoE routing and V2X fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario batch and write reports, messages and checkpoints.
    Simulate {
        #[arg(long)]
        seed: u64,
        /// Run configuration (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ego parameters to load instead of the seeded initialisation.
        #[arg(long)]
        ego_checkpoint: Option<PathBuf>,
    },
    /// Evaluate every toggle combination listed in a grid file.
    Ablate {
        /// JSON array of toggle objects or 4-bit integers (P, M, Enc, Dec).
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the pipeline at a list of bandwidth caps.
    Sweep {
        /// Ascending caps in bytes per second; `inf` for unlimited.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every trainable block and the joint loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Coordinates sampled per tensor in the end-to-end case.
        #[arg(long, default_value_t = 4)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Gradient descent on one fixed scene.
    TrainSmoke {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run configuration; the micro model is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = commands::Criterion::BevIou)]
        criterion: commands::Criterion,
        #[arg(long, default_value_t = v2x_coop::metrics::MISS_THRESHOLD_M)]
        miss_threshold: f64,
    },
    /// Byte accounting of a length-prefixed message stream.
    Bps {
        #[arg(long)]
        messages: PathBuf,
        #[arg(long, default_value_t = v2x_coop::comm::DEFAULT_FREQUENCY_HZ)]
        frequency_hz: f64,
        /// Also report the stream after fitting it into this cap.
        #[arg(long)]
        cap: Option<f64>,
    },
}

fn emit_error(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return emit_error("usage", e.to_string().trim_end(), 2),
    };
    let result = match cli.command {
        Command::Simulate { seed, config, out, ego_checkpoint } => {
            commands::simulate(seed, config.as_deref(), &out, ego_checkpoint.as_deref())
        }
        Command::Ablate { grid, config, out } => commands::ablate(&grid, config.as_deref(), out.as_deref()),
        Command::Sweep { budgets, config, out } => commands::sweep(&budgets, config.as_deref(), out.as_deref()),
        Command::Gradcheck { eps, coords, seed, tol } => commands::gradcheck(eps, coords, seed, tol),
        Command::TrainSmoke { steps, lr, seed, config, out } => {
            commands::train_smoke(steps, lr, seed, config.as_deref(), out.as_deref())
        }
        Command::Metrics { pred, gt, criterion, miss_threshold } => {
            commands::metrics(&pred, &gt, criterion, miss_threshold)
        }
        Command::Bps { messages, frequency_hz, cap } => commands::bps(&messages, frequency_hz, cap),
    };
    match result.and_then(|v| serde_json::to_string_pretty(&v).map_err(Into::into)) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => emit_error(e.kind, &e.message, 1),
    }
}

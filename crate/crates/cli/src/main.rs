mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pstnet::Error;

#[derive(Debug, Parser)]
#[command(name = "pstnet", version, about = "Point spatio-temporal convolution on point cloud sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Cls,
    Seg,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic moving-digit dataset (PCSQ1 records plus manifest.json).
    Generate {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 144)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// IDX image file, or `builtin` for the synthetic stroke digits.
        #[arg(long, default_value = "builtin")]
        digits: String,
        /// Every n-th record goes to the test split (0 disables the split).
        #[arg(long, default_value_t = 5)]
        test_every: usize,
    },
    /// Write a run configuration with the standard architecture.
    InitConfig {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated layer widths (6 for cls, 8 for seg).
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        clip_len: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train a network and write checkpoints, a run manifest and a CSV metric log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 35)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: clip-averaged accuracy (cls) or mIoU (seg).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate; `all` uses every record.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        clip_len: Option<usize>,
        #[arg(long, default_value_t = 1)]
        frame_stride: usize,
    },
    /// Predict one PCSQ1 record.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        frame_stride: usize,
    },
    /// Finite-difference check of every op and a micro network (plus `--config`'s network).
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = pstnet::gradcheck::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = pstnet::gradcheck::DEFAULT_EPS)]
        eps: f64,
    },
    /// Print per-layer output shapes and tube statistics.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "L")]
        frames: Option<usize>,
        #[arg(long = "N")]
        points: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 2,
        _ => 1,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("PSTCONV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("PSTCONV_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidState(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    match cli.command {
        Command::Generate { task, out, count, seed, digits, test_every } => {
            commands::generate(task, &out, count, seed, &digits, test_every)
        }
        Command::InitConfig { task, out, widths, radius, clip_len, classes } => {
            commands::init_config(task, &out, widths, radius, clip_len, classes)
        }
        Command::Train { config, data, epochs, batch, seed, out } => {
            commands::train(&config, &data, epochs, batch, seed, &out)
        }
        Command::Eval { checkpoint, data, split, clip_len, frame_stride } => {
            commands::eval(&checkpoint, &data, &split, clip_len, frame_stride)
        }
        Command::Predict { checkpoint, input, frame_stride } => commands::predict(&checkpoint, &input, frame_stride),
        Command::Gradcheck { config, seed, tol, eps } => commands::gradcheck(config.as_deref(), seed, tol, eps),
        Command::Inspect { config, frames, points } => commands::inspect(&config, frames, points),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

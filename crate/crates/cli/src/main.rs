use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use regstream::commands::{self, BenchArgs, InferArgs, MaskFormat, TrainArgs};
use regstream::verify::VerifyOptions;
use regstream::CliResult;

/// Dual-mode streaming encoder with online registers.
#[derive(Parser)]
#[command(name = "regstream", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ascii,
    Csv,
    Layout,
}

#[derive(Subcommand)]
enum Command {
    /// Print the online attention mask (or slot layout) for a geometry.
    MaskDump {
        #[arg(long = "frames", short = 't')]
        frames: usize,
        #[arg(long, short = 'c')]
        chunk: usize,
        #[arg(long, short = 'l', default_value_t = 0)]
        lookahead: usize,
        #[arg(long, short = 'r', default_value_t = 0)]
        registers: usize,
        #[arg(long, value_enum, default_value_t = Format::Ascii)]
        format: Format,
    },
    /// Run a property suite; exits 1 if any property fails.
    Verify {
        /// Suite name, or `all`.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Toy pre-training on synthetic data; writes a checkpoint and metrics.csv.
    Train {
        /// `key = value` training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        registers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream a matrix file through a checkpoint in single precision.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frames as a binary matrix file, or CSV when the name ends in .csv.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        chunk: usize,
        #[arg(long, default_value_t = 0)]
        lookahead: usize,
        #[arg(long)]
        registers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Write CSV instead of binary matrices.
        #[arg(long)]
        csv: bool,
    },
    /// Streaming wall time, cache size and algorithmic latency per chunk size.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32])]
        chunks: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        lookahead: usize,
        /// Registers of the freshly initialised model used without --checkpoint.
        #[arg(long, default_value_t = 1)]
        registers: usize,
        #[arg(long, default_value_t = 128)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MaskDump {
            frames,
            chunk,
            lookahead,
            registers,
            format,
        } => {
            let format = match format {
                Format::Ascii => MaskFormat::Ascii,
                Format::Csv => MaskFormat::Csv,
                Format::Layout => MaskFormat::Layout,
            };
            print!("{}", commands::mask_dump(frames, chunk, lookahead, registers, format)?);
        }
        Command::Verify {
            suite,
            seed,
            inject_fault,
        } => {
            let reports = commands::verify(&suite, VerifyOptions { seed, inject_fault })?;
            for r in &reports {
                print!("{r}");
            }
            commands::require_pass(&reports)?;
        }
        Command::Train {
            config,
            steps,
            seed,
            registers,
            out,
        } => {
            let reports = commands::train(&TrainArgs {
                config,
                steps,
                seed,
                registers,
                out: out.clone(),
            })?;
            if let Some(last) = reports.last() {
                println!(
                    "trained {} steps; final L_total {:.4}, accuracy {:.3}; wrote {}",
                    last.step,
                    last.loss.total,
                    last.accuracy_offline,
                    out.display()
                );
            }
        }
        Command::Infer {
            checkpoint,
            input,
            chunk,
            lookahead,
            registers,
            out,
            csv,
        } => {
            let res = commands::infer(&InferArgs {
                checkpoint,
                input,
                chunk,
                lookahead,
                registers,
                out: out.clone(),
                csv,
            })?;
            let (f, r) = commands::output_paths(&out, csv);
            println!(
                "{} frames -> {}; {} chunks of registers -> {}",
                res.frames.rows(),
                f.display(),
                res.registers.len(),
                r.display()
            );
        }
        Command::Bench {
            checkpoint,
            chunks,
            lookahead,
            registers,
            frames,
            seed,
        } => {
            let rows = commands::bench(&BenchArgs {
                checkpoint,
                chunks,
                lookahead,
                registers,
                frames,
                seed,
            })?;
            print!("{}", commands::bench_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Subcommand bodies, callable in-process.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regstream_core::stream::{stream_utterance, UtteranceOutput};
use regstream_core::train::StepReport;
use regstream_core::{
    build_online_mask, latency_report, open_stream, ChunkLayout, Mat, ModelConfig, Params,
    StreamConfig, TrainConfig, Trainer,
};

use crate::verify::{SuiteReport, VerifyOptions, SUITES};
use crate::{checkpoint, config, matfile, render};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Failed(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Verification(_) | CliError::Failed(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskFormat {
    Ascii,
    Csv,
    /// The slot layout, `position kind chunk time` per line.
    Layout,
}

pub fn mask_dump(
    frames: usize,
    chunk: usize,
    lookahead: usize,
    registers: usize,
    format: MaskFormat,
) -> CliResult<String> {
    let cfg = StreamConfig::new(frames, chunk, lookahead, registers, 1).map_err(usage)?;
    let layout = ChunkLayout::new(&cfg).map_err(usage)?;
    Ok(match format {
        MaskFormat::Ascii => render::mask_ascii(&build_online_mask(&layout)),
        MaskFormat::Csv => render::mask_csv(&build_online_mask(&layout)),
        MaskFormat::Layout => render::layout_dump(&layout),
    })
}

/// Runs one suite, or every suite for `"all"`.
pub fn verify(suite: &str, opts: VerifyOptions) -> CliResult<Vec<SuiteReport>> {
    let names: Vec<&str> = if suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&suite) {
        vec![suite]
    } else {
        return Err(usage(format!(
            "unknown suite `{suite}`; expected one of: all, {}",
            SUITES.join(", ")
        )));
    };
    let reports: Vec<SuiteReport> = names
        .iter()
        .map(|s| crate::verify::run(s, opts).expect("listed suite"))
        .collect();
    Ok(reports)
}

pub fn require_pass(reports: &[SuiteReport]) -> CliResult<()> {
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.suite).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub registers: Option<usize>,
    pub out: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str =
    "step,L_off,L_on,L_d,L_fp,L_total,accuracy,L_dual,accuracy_online,chunk,lookahead,learning_rate";

pub fn resolve_train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(|e| usage(format!("{e:#}")))?;
        let kv = config::parse(&text).map_err(usage)?;
        config::apply_train(&kv, &mut cfg).map_err(usage)?;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.registers {
        cfg.model.registers = r;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn metrics_line(r: &StepReport) -> String {
    let l = &r.loss;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        l.offline,
        l.online,
        l.diversity,
        l.future,
        l.total,
        r.accuracy_offline,
        l.dual,
        r.accuracy_online,
        r.chunk,
        r.lookahead,
        r.learning_rate
    )
}

/// Trains, then writes the checkpoint and `metrics.csv` into `args.out`.
pub fn train(args: &TrainArgs) -> CliResult<Vec<StepReport>> {
    let cfg = resolve_train_config(args)?;
    let mut trainer = Trainer::new(cfg).map_err(usage)?;
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for _ in 0..cfg.steps {
        let r = trainer
            .step()
            .context("training step failed")?;
        if r.step % 50 == 0 || r.step == cfg.steps {
            log::info!(
                "step {} C={} L={} L_dual={:.4} L_fp={:.4} acc={:.3}",
                r.step,
                r.chunk,
                r.lookahead,
                r.loss.dual,
                r.loss.future,
                r.accuracy_offline
            );
        }
        csv.push_str(&metrics_line(&r));
        csv.push('\n');
        reports.push(r);
    }
    checkpoint::save(&args.out, trainer.params())?;
    let path = args.out.join(METRICS_FILE);
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(reports)
}

#[derive(Clone, Debug)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub chunk: usize,
    pub lookahead: usize,
    /// Must match the checkpoint when given.
    pub registers: Option<usize>,
    pub out: PathBuf,
    pub csv: bool,
}

pub fn output_paths(out: &Path, csv: bool) -> (PathBuf, PathBuf) {
    let ext = if csv { "csv" } else { "rmat" };
    (
        out.join(format!("frames.{ext}")),
        out.join(format!("registers.{ext}")),
    )
}

/// Streams the input in single precision. Writes the `T × d` frame outputs
/// and the `N·R × d` register outputs, chunk-major.
pub fn infer(args: &InferArgs) -> CliResult<UtteranceOutput<f32>> {
    let params = checkpoint::load(&args.checkpoint)?;
    let model = params.config();
    if let Some(r) = args.registers {
        if r != model.registers {
            return Err(usage(format!(
                "--registers {r} does not match the checkpoint's {}",
                model.registers
            )));
        }
    }
    let frames = matfile::read(&args.input)?;
    if frames.cols() != model.width || frames.rows() == 0 {
        return Err(usage(format!(
            "input is {}x{}, model expects T x {} with T >= 1",
            frames.rows(),
            frames.cols(),
            model.width
        )));
    }
    let cfg = StreamConfig::new(
        frames.rows(),
        args.chunk,
        args.lookahead,
        model.registers,
        model.width,
    )
    .map_err(usage)?;
    let out = stream_utterance(&params.cast::<f32>(), &cfg, &frames)
        .context("streaming inference failed")?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let (fp, rp) = output_paths(&args.out, args.csv);
    matfile::write(&fp, &out.frames)?;
    let regs: Vec<&Mat<f32>> = out.registers.iter().collect();
    let stacked = if regs.is_empty() {
        Mat::zeros(0, model.width)
    } else {
        Mat::vstack(&regs)
    };
    matfile::write(&rp, &stacked)?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    pub checkpoint: Option<PathBuf>,
    pub chunks: Vec<usize>,
    pub lookahead: usize,
    pub registers: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self {
            checkpoint: None,
            chunks: vec![8, 16, 32],
            lookahead: 0,
            registers: 1,
            frames: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub chunk: usize,
    pub lookahead: usize,
    pub latency_ms: f64,
    pub latency_with_lookahead_ms: f64,
    pub ms_per_chunk: f64,
    pub cache_bytes: usize,
}

pub fn bench(args: &BenchArgs) -> CliResult<Vec<BenchRow>> {
    let params = match &args.checkpoint {
        Some(dir) => checkpoint::load(dir)?,
        None => Params::init(
            ModelConfig {
                registers: args.registers,
                ..ModelConfig::default()
            },
            args.seed,
        )
        .map_err(usage)?,
    };
    let p32 = params.cast::<f32>();
    let d = params.config().width;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let x: Mat<f32> = Mat::from_fn(args.frames, d, |_, _| rng.random_range(-1.0..1.0));
    let mut rows = Vec::with_capacity(args.chunks.len());
    for &c in &args.chunks {
        let cfg = StreamConfig::new(args.frames, c, args.lookahead, params.config().registers, d)
            .map_err(usage)?;
        let mut state = open_stream(&p32, cfg).map_err(usage)?;
        let full = args.frames / c;
        let start = Instant::now();
        for i in 1..=full {
            let chunk: Vec<usize> = ((i - 1) * c..i * c).collect();
            let look: Vec<usize> = (i * c..(i * c + args.lookahead).min(args.frames)).collect();
            state
                .push_chunk(&x.select_rows(&chunk), &x.select_rows(&look))
                .context("push failed")?;
        }
        let tail: Vec<usize> = (full * c..args.frames).collect();
        let pushes = full + usize::from(!tail.is_empty());
        state.finalize(&x.select_rows(&tail)).context("finalize failed")?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let lat = latency_report(&cfg);
        rows.push(BenchRow {
            chunk: c,
            lookahead: args.lookahead,
            latency_ms: lat.chunk_ms,
            latency_with_lookahead_ms: lat.with_lookahead_ms,
            ms_per_chunk: elapsed / pushes.max(1) as f64,
            cache_bytes: state.cache_bytes(),
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = String::from("chunk lookahead latency_ms latency_with_lookahead_ms ms_per_chunk cache_bytes\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{} {} {} {} {:.3} {}",
            r.chunk,
            r.lookahead,
            r.latency_ms,
            r.latency_with_lookahead_ms,
            r.ms_per_chunk,
            r.cache_bytes
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 2);
        assert_eq!(CliError::Verification(String::new()).exit_code(), 1);
    }

    #[test]
    fn mask_dump_rejects_zero_chunk() {
        assert_eq!(mask_dump(4, 0, 0, 0, MaskFormat::Ascii).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn csv_has_one_row_per_slot() {
        let csv = mask_dump(7, 3, 2, 2, MaskFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 3 * 3 + 3 * 2 + 3 * 2);
    }

    #[test]
    fn unknown_suite_is_usage_error() {
        let err = verify("nope", VerifyOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

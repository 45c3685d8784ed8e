//! Property suites behind `regstream verify`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regstream_core::stream::stream_utterance;
use regstream_core::{
    build_online_mask, encode_offline, encode_online, extract_frame_outputs,
    extract_register_outputs, latency_report, AttentionMask, ChunkLayout, Mat, ModelConfig,
    Params, Real, StreamConfig,
};

pub const SUITES: &[&str] = &[
    "mask-oracle",
    "degeneracy",
    "streaming",
    "causality",
    "registers",
    "latency",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Property {
    pub name: &'static str,
    pub checked: usize,
    pub failed: usize,
    /// First failure, if any.
    pub example: Option<String>,
}

impl Property {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checked: 0,
            failed: 0,
            example: None,
        }
    }

    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.failed += 1;
            if self.example.is_none() {
                self.example = Some(what());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub properties: Vec<Property>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.failed == 0)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.properties {
            let status = if p.failed == 0 { "ok" } else { "FAIL" };
            write!(
                f,
                "{} {}: {status} ({} checked, {} failed)",
                self.suite, p.name, p.checked, p.failed
            )?;
            if let Some(e) = &p.example {
                write!(f, " first failure: {e}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Deliberately corrupts the artifact under test so the suite must fail.
    pub inject_fault: bool,
}

pub fn run(suite: &str, opts: VerifyOptions) -> Option<SuiteReport> {
    let report = match suite {
        "mask-oracle" => mask_oracle(opts),
        "degeneracy" => degeneracy(opts),
        "streaming" => streaming(opts, 100),
        "causality" => causality(opts, 50),
        "registers" => registers(opts, 20),
        "latency" => latency(opts),
        _ => return None,
    };
    Some(report)
}

/// Visibility computed from position arithmetic alone.
fn oracle_allowed(t: usize, c: usize, l: usize, r: usize, q: usize, k: usize) -> bool {
    let n = t.div_ceil(c);
    // (chunk, is_frame, is_real)
    let decode = |p: usize| -> (usize, bool, bool) {
        if p < n * c {
            (p / c + 1, true, p < t)
        } else if p < n * c + n * l {
            let off = p - n * c;
            let chunk = off / l + 1;
            (chunk, false, chunk * c + off % l < t)
        } else {
            ((p - n * c - n * l) / r + 1, false, true)
        }
    };
    let (qc, _, _) = decode(q);
    let (kc, k_frame, k_real) = decode(k);
    k_real && if k_frame { kc <= qc } else { kc == qc }
}

pub fn oracle_mask(t: usize, c: usize, l: usize, r: usize) -> AttentionMask {
    let size = t.div_ceil(c) * (c + l + r);
    AttentionMask::from_fn(size, |q, k| oracle_allowed(t, c, l, r, q, k))
}

fn mask_oracle(opts: VerifyOptions) -> SuiteReport {
    let mut entries = Property::new("entries-match");
    let mut sizes = Property::new("size");
    for t in 1..=12 {
        for c in 1..=6 {
            for l in 0..=c {
                for r in 0..=3 {
                    let cfg = StreamConfig::new(t, c, l, r, 1).expect("valid config");
                    let layout = ChunkLayout::new(&cfg).expect("valid layout");
                    let mut fast = build_online_mask(&layout);
                    if opts.inject_fault && (t, c, l, r) == (6, 2, 1, 1) {
                        let v = fast.is_allowed(0, 0);
                        fast.set(0, 0, !v);
                    }
                    let want = oracle_mask(t, c, l, r);
                    sizes.record(fast.size() == want.size(), || {
                        format!("T={t} C={c} L={l} R={r}: size {}", fast.size())
                    });
                    if fast.size() != want.size() {
                        continue;
                    }
                    for q in 0..want.size() {
                        for k in 0..want.size() {
                            entries.record(fast.is_allowed(q, k) == want.is_allowed(q, k), || {
                                format!("T={t} C={c} L={l} R={r} ({q},{k})")
                            });
                        }
                    }
                }
            }
        }
    }
    SuiteReport {
        suite: "mask-oracle",
        properties: vec![sizes, entries],
    }
}

pub fn model(width: usize, registers: usize) -> ModelConfig {
    ModelConfig {
        width,
        layers: 2,
        heads: 2,
        ff_width: 2 * width,
        registers,
        groups: 2,
        entries: 4,
        gumbel_tau: 1.0,
    }
}

fn random_frames<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| T::of(rng.random_range(-1.0..1.0)))
}

fn max_diff<T: Real>(a: &Mat<T>, b: &Mat<T>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b).to_f64()
}

fn degeneracy(opts: VerifyOptions) -> SuiteReport {
    let mut prop = Property::new("online-equals-offline");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for case in 0..10 {
        let t = rng.random_range(1..=16);
        let params = Params::<f64>::init(model(16, 0), opts.seed + case).expect("valid model");
        let x = random_frames::<f64>(t, 16, &mut rng);
        let off = encode_offline(&x, &params).expect("offline forward");
        let cfg = StreamConfig::new(t, t, 0, 0, 16).expect("valid config");
        let (out, layout) = encode_online(&x, &cfg, &params).expect("online forward");
        let mut on = extract_frame_outputs(&out, &layout).expect("frame rows");
        if opts.inject_fault {
            on.set(0, 0, on.get(0, 0) + 1e-6);
        }
        let d = max_diff(&on, &off);
        prop.record(d < 1e-10, || format!("T={t}: max diff {d:e}"));
    }
    SuiteReport {
        suite: "degeneracy",
        properties: vec![prop],
    }
}

/// Seeded random `(T, C, L, R)` with `T <= 24`, `C` in `2..=8`, `L <= C`,
/// `R <= 3`.
pub fn random_stream_config(rng: &mut ChaCha8Rng, width: usize) -> StreamConfig {
    let c = rng.random_range(2..=8);
    StreamConfig::new(
        rng.random_range(1..=24),
        c,
        rng.random_range(0..=c),
        rng.random_range(0..=3),
        width,
    )
    .expect("valid config")
}

fn stream_vs_full<T: Real>(
    params: &Params<T>,
    cfg: &StreamConfig,
    x: &Mat<T>,
    fault: bool,
) -> f64 {
    let mut streamed = stream_utterance(params, cfg, x).expect("stream");
    if fault {
        let v = streamed.frames.get(0, 0);
        streamed.frames.set(0, 0, v + T::of(1e-3));
    }
    let (out, layout) = encode_online(x, cfg, params).expect("online forward");
    let frames = extract_frame_outputs(&out, &layout).expect("frame rows");
    let regs = extract_register_outputs(&out, &layout).expect("register rows");
    let mut d = max_diff(&streamed.frames, &frames);
    if streamed.registers.len() != regs.len() {
        return f64::INFINITY;
    }
    for (a, b) in streamed.registers.iter().zip(&regs) {
        d = d.max(max_diff(a, b));
    }
    d
}

fn streaming(opts: VerifyOptions, cases: u64) -> SuiteReport {
    let mut single = Property::new("cached-equals-full-f32");
    let mut double = Property::new("cached-equals-full-f64");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for case in 0..cases {
        let cfg = random_stream_config(&mut rng, 16);
        let p64 = Params::<f64>::init(model(16, cfg.registers), opts.seed + case)
            .expect("valid model");
        let x64 = random_frames::<f64>(cfg.frames, 16, &mut rng);
        let d = stream_vs_full(&p64, &cfg, &x64, opts.inject_fault);
        double.record(d < 1e-10, || format!("{cfg:?}: max diff {d:e}"));
        let d = stream_vs_full(&p64.cast::<f32>(), &cfg, &x64.cast::<f32>(), false);
        single.record(d < 1e-5, || format!("{cfg:?}: max diff {d:e}"));
    }
    SuiteReport {
        suite: "streaming",
        properties: vec![single, double],
    }
}

fn causality(opts: VerifyOptions, cases: u64) -> SuiteReport {
    let mut prop = Property::new("future-frames-invisible");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for case in 0..cases {
        let cfg = random_stream_config(&mut rng, 16);
        let params = Params::<f64>::init(model(16, cfg.registers), opts.seed + case)
            .expect("valid model");
        let x = random_frames::<f64>(cfg.frames, 16, &mut rng);
        let frames_of = |x: &Mat<f64>| {
            let (out, layout) = encode_online(x, &cfg, &params).expect("online forward");
            extract_frame_outputs(&out, &layout).expect("frame rows")
        };
        let base = frames_of(&x);
        let t_pert = rng.random_range(1..=cfg.frames);
        let mut y = x.clone();
        for v in y.row_mut(t_pert - 1) {
            *v += rng.random_range(0.5..2.0);
        }
        if opts.inject_fault && t_pert > 1 {
            y.set(0, 0, y.get(0, 0) + 1.0);
        }
        let moved = frames_of(&y);
        for t in 1..=cfg.frames {
            let i = (t - 1) / cfg.chunk + 1;
            if t_pert > i * cfg.chunk + cfg.lookahead {
                prop.record(base.row(t - 1) == moved.row(t - 1), || {
                    format!("{cfg:?}: frame {t} moved when frame {t_pert} changed")
                });
            }
        }
    }
    SuiteReport {
        suite: "causality",
        properties: vec![prop],
    }
}

fn registers(opts: VerifyOptions, cases: u64) -> SuiteReport {
    let mut prop = Property::new("offline-ignores-registers");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for case in 0..cases {
        let r = rng.random_range(1..=3);
        let t = rng.random_range(1..=24);
        let mut params = Params::<f64>::init(model(16, r), opts.seed + case).expect("valid model");
        let x = random_frames::<f64>(t, 16, &mut rng);
        let before = encode_offline(&x, &params).expect("offline forward");
        let idx = regstream_core::params::REGISTERS;
        *params.get_mut(idx) = random_frames(r, 16, &mut rng);
        if opts.inject_fault {
            let ln = params.config().layer(0).ln1_gain;
            params.get_mut(ln).set(0, 0, 2.0);
        }
        let after = encode_offline(&x, &params).expect("offline forward");
        prop.record(before == after, || format!("T={t} R={r}: offline output changed"));
    }
    SuiteReport {
        suite: "registers",
        properties: vec![prop],
    }
}

fn latency(opts: VerifyOptions) -> SuiteReport {
    let mut prop = Property::new("chunk-duration");
    for (c, want) in [(8, 160.0), (16, 320.0), (32, 640.0)] {
        let cfg = StreamConfig::new(c, c, 0, 1, 1).expect("valid config");
        let mut got = latency_report(&cfg).chunk_ms;
        if opts.inject_fault {
            got += 20.0;
        }
        prop.record(got == want, || format!("C={c}: {got} ms, expected {want} ms"));
    }
    SuiteReport {
        suite: "latency",
        properties: vec![prop],
    }
}

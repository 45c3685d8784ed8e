//! One line per acceptance criterion, then a single assertion over all of them.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the report.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regstream::commands::{bench, mask_dump, BenchArgs, MaskFormat};
use regstream_core::gradcheck::{compare_by_group, finite_difference_grads};
use regstream_core::losses::{contrastive_loss, future_prediction_loss, future_targets, sample_distractors, total_loss};
use regstream_core::objective::{evaluate, evaluate_frozen, freeze, BatchPlan, LossTerm, UtterancePlan};
use regstream_core::params::REGISTERS;
use regstream_core::quantizer::gumbel_noise;
use regstream_core::stream::stream_utterance;
use regstream_core::train::{sample_dynamic_config, StepReport};
use regstream_core::{
    build_online_mask, encode_offline, encode_online, extract_frame_outputs, extract_register_outputs,
    ChunkLayout, LossWeights, Mat, MaskingPlan, ModelConfig, ParamGroup, Params, Real, StreamConfig,
    TrainConfig, Trainer,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

fn model(width: usize, layers: usize, registers: usize) -> ModelConfig {
    ModelConfig {
        width,
        layers,
        heads: 2,
        ff_width: 2 * width,
        registers,
        groups: 2,
        entries: 4,
        gumbel_tau: 1.0,
    }
}

fn frames<T: Real>(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat<T> {
    Mat::from_fn(t, d, |_, _| T::of(rng.random_range(-1.0..1.0)))
}

// position arithmetic only: [N·C frame slots | N·L look-ahead slots | N·R registers]
#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Frame,
    Extra,
    Pad,
}

fn slot(t_max: usize, c: usize, l: usize, r: usize, p: usize) -> (Kind, usize) {
    let n = t_max.div_ceil(c);
    if p < n * c {
        let t = p + 1;
        (if t <= t_max { Kind::Frame } else { Kind::Pad }, (t - 1) / c + 1)
    } else if p < n * c + n * l {
        let q = p - n * c;
        let i = q / l + 1;
        let t = i * c + q % l + 1;
        (if t <= t_max { Kind::Extra } else { Kind::Pad }, i)
    } else {
        (Kind::Extra, (p - n * c - n * l) / r + 1)
    }
}

fn brute_force(t: usize, c: usize, l: usize, r: usize, q: usize, k: usize) -> bool {
    let (_, qi) = slot(t, c, l, r, q);
    match slot(t, c, l, r, k) {
        (Kind::Pad, _) => false,
        (Kind::Frame, ki) => ki <= qi,
        (Kind::Extra, ki) => ki == qi,
    }
}

fn online_mask(t: usize, c: usize, l: usize, r: usize) -> regstream_core::AttentionMask {
    let cfg = StreamConfig::new(t, c, l, r, 4).unwrap();
    build_online_mask(&ChunkLayout::new(&cfg).unwrap())
}

fn c01_mask_oracle() -> Outcome {
    let start = Instant::now();
    let mut entries = 0usize;
    for t in 1..=12 {
        for c in 1..=6 {
            for l in 0..=c {
                for r in 0..=3 {
                    let m = online_mask(t, c, l, r);
                    let n = t.div_ceil(c);
                    ensure(m.size() == n * (c + l + r), || format!("size T={t} C={c} L={l} R={r}"))?;
                    for q in 0..m.size() {
                        for k in 0..m.size() {
                            let want = brute_force(t, c, l, r, q, k);
                            ensure(m.is_allowed(q, k) == want, || {
                                format!("T={t} C={c} L={l} R={r} entry ({q},{k}) should be {want}")
                            })?;
                            entries += 1;
                        }
                    }
                }
            }
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("{entries} entries equal, {took:.2?}"))
}

fn c02_golden_mask() -> Outcome {
    let golden = include_str!("golden/mask_t6_c2_l1_r1.txt");
    let rendered = mask_dump(6, 2, 1, 1, MaskFormat::Ascii).map_err(|e| e.to_string())?;
    ensure(rendered.trim_end() == golden.trim_end(), || format!("rendered:\n{rendered}"))?;
    // the checked-in grid itself must follow the visibility rule
    for (q, line) in golden.lines().enumerate() {
        for (k, ch) in line.chars().enumerate() {
            ensure((ch == '#') == brute_force(6, 2, 1, 1, q, k), || format!("golden entry ({q},{k})"))?;
        }
    }
    Ok("12x12 grid matches".into())
}

fn c03_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for t in 1..=24 {
        let p = Params::<f64>::init(model(16, 2, 0), t as u64).map_err(|e| e.to_string())?;
        let x = frames::<f64>(t, 16, &mut rng);
        let cfg = StreamConfig::new(t, t, 0, 0, 16).unwrap();
        let (out, layout) = encode_online(&x, &cfg, &p).unwrap();
        let on = extract_frame_outputs(&out, &layout).unwrap();
        worst = worst.max(on.max_abs_diff(&encode_offline(&x, &p).unwrap()));
    }
    ensure(worst < 1e-10, || format!("max abs diff {worst:e}"))?;
    Ok(format!("max abs diff {worst:.1e} over T=1..24"))
}

fn random_config(rng: &mut ChaCha8Rng, d: usize) -> StreamConfig {
    let c = rng.random_range(2..=8);
    StreamConfig::new(rng.random_range(1..=24), c, rng.random_range(0..=c), rng.random_range(0..=3), d).unwrap()
}

fn stream_gap<T: Real>(p: &Params<T>, cfg: &StreamConfig, x: &Mat<T>) -> f64 {
    let s = stream_utterance(p, cfg, x).unwrap();
    let (out, layout) = encode_online(x, cfg, p).unwrap();
    let mut gap = s.frames.max_abs_diff(&extract_frame_outputs(&out, &layout).unwrap()).to_f64();
    for (a, b) in s.registers.iter().zip(extract_register_outputs(&out, &layout).unwrap()) {
        gap = gap.max(a.max_abs_diff(&b).to_f64());
    }
    gap
}

fn c04_streaming() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let cfg = random_config(&mut rng, 16);
        let p = Params::<f64>::init(model(16, 2, cfg.registers), case).unwrap();
        let x = frames::<f64>(cfg.frames, 16, &mut rng);
        w64 = w64.max(stream_gap(&p, &cfg, &x));
        w32 = w32.max(stream_gap(&p.cast::<f32>(), &cfg, &x.cast::<f32>()));
    }
    let took = start.elapsed();
    ensure(w64 < 1e-10 && w32 < 1e-5, || format!("f64 {w64:e}, f32 {w32:e}"))?;
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("100 configs, f64 {w64:.1e}, f32 {w32:.1e}, {took:.2?}"))
}

fn c05_causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut compared = 0usize;
    for case in 0..50 {
        let cfg = random_config(&mut rng, 16);
        let p = Params::<f64>::init(model(16, 2, cfg.registers), case).unwrap();
        let x = frames::<f64>(cfg.frames, 16, &mut rng);
        let (a, layout) = encode_online(&x, &cfg, &p).unwrap();
        let fa = extract_frame_outputs(&a, &layout).unwrap();
        let ra = extract_register_outputs(&a, &layout).unwrap();
        for tp in 1..=cfg.frames {
            let mut y = x.clone();
            for v in y.row_mut(tp - 1) {
                *v += 1.0 + rng.random::<f64>();
            }
            let (b, _) = encode_online(&y, &cfg, &p).unwrap();
            let fb = extract_frame_outputs(&b, &layout).unwrap();
            let rb = extract_register_outputs(&b, &layout).unwrap();
            for t in 1..=cfg.frames {
                let i = (t - 1) / cfg.chunk + 1;
                if tp > i * cfg.chunk + cfg.lookahead {
                    ensure(fa.row(t - 1) == fb.row(t - 1), || format!("{cfg:?} t={t} t'={tp}"))?;
                    compared += 1;
                }
            }
            for (i, (ra, rb)) in ra.iter().zip(&rb).enumerate() {
                if tp > (i + 1) * cfg.chunk + cfg.lookahead {
                    ensure(ra == rb, || format!("{cfg:?} registers of chunk {} t'={tp}", i + 1))?;
                }
            }
        }
    }
    ensure(compared > 0, || "no frame was ever out of reach".into())?;
    Ok(format!("50 cases, every t', {compared} frame rows bit-identical"))
}

fn c06_offline_ignores_registers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..20 {
        let r = rng.random_range(1..=3);
        let t = rng.random_range(1..=24);
        let mut p = Params::<f64>::init(model(16, 2, r), case).unwrap();
        let x = frames::<f64>(t, 16, &mut rng);
        let before = encode_offline(&x, &p).unwrap();
        *p.get_mut(REGISTERS) = Mat::from_fn(r, 16, |_, _| rng.random_range(-5.0..5.0));
        ensure(before == encode_offline(&x, &p).unwrap(), || format!("case {case}"))?;
    }
    Ok("20 cases bit-identical".into())
}

fn tiny() -> ModelConfig {
    ModelConfig {
        width: 8,
        layers: 2,
        heads: 2,
        ff_width: 16,
        registers: 1,
        groups: 1,
        entries: 4,
        gumbel_tau: 1.0,
    }
}

fn tiny_plan(seed: u64) -> BatchPlan<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utt = |masked: Vec<usize>| {
        let m = masked.len();
        UtterancePlan {
            frames: frames(6, 8, &mut rng),
            masking: MaskingPlan::new(6, masked).unwrap(),
            distractors: (0..m).map(|j| (0..m).filter(|&k| k != j).collect()).collect(),
            noise: Some(gumbel_noise(m, 4, &mut rng)),
        }
    };
    let utterances = vec![utt(vec![1, 3, 4]), utt(vec![2, 5, 6])];
    BatchPlan { chunk: 2, lookahead: 1, utterances, hard_quantizer: false }
}

fn grads(p: &Params<f64>, plan: &BatchPlan<f64>, term: LossTerm) -> Vec<Option<Mat<f64>>> {
    evaluate(p, plan, &LossWeights::default(), Some(term)).unwrap().grads.unwrap()
}

fn c07_gradient_check() -> Outcome {
    let w = LossWeights::default();
    let p = Params::<f64>::init(tiny(), 7).unwrap();
    let plan = tiny_plan(7);
    let analytic = grads(&p, &plan, LossTerm::Total);
    // stop-gradient quantities are held at their current values, which is
    // the function the analytic gradient differentiates
    let frozen = freeze(&p, &plan, &w).unwrap();
    let numeric = finite_difference_grads(&p, 1e-5, |q| {
        evaluate_frozen(q, &plan, &w, None, Some(&frozen)).unwrap().breakdown.total
    });
    let mut worst = 0.0f64;
    for g in compare_by_group(&p, &analytic, &numeric) {
        ensure(g.relative < 1e-4, || format!("{}: relative {:e}", g.group.name(), g.relative))?;
        ensure(g.group == ParamGroup::PadEmbedding || g.analytic_norm > 1e-6, || {
            format!("{} gradient vanished", g.group.name())
        })?;
        worst = worst.max(g.relative);
    }
    Ok(format!("worst group relative error {worst:.1e}"))
}

fn all_zero(g: &Option<Mat<f64>>) -> bool {
    g.as_ref().is_none_or(|m| m.as_slice().iter().all(|&v| v == 0.0))
}

fn c08_stop_gradient() -> Outcome {
    let w = LossWeights::default();
    let p = Params::<f64>::init(tiny(), 8).unwrap();
    let plan = tiny_plan(8);
    let q = p.config().quantizer();
    let on = grads(&p, &plan, LossTerm::Online);
    for idx in [q.logits_weight, q.logits_bias, q.codebook, q.proj_weight, q.proj_bias] {
        ensure(all_zero(&on[idx]), || format!("L_on reached {}", p.names()[idx]))?;
    }
    // with the offline targets frozen the gradient must not move at all
    let live = grads(&p, &plan, LossTerm::Future);
    let frozen = freeze(&p, &plan, &w).unwrap();
    let held = evaluate_frozen(&p, &plan, &w, Some(LossTerm::Future), Some(&frozen)).unwrap().grads.unwrap();
    ensure(live == held, || "L_fp gradient flows through the offline targets".into())?;
    ensure(!all_zero(&live[REGISTERS]), || "L_fp does not reach the registers".into())?;
    Ok("quantizer grads of L_on are 0; L_fp grads equal the frozen-target grads bit for bit".into())
}

fn c09_loss_arithmetic() -> Outcome {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..40.0));
        let l = total_loss(v[0], v[1], v[2], v[3], &w).map_err(|e| e.to_string())?;
        let dual = 0.5 * (v[0] + v[1]) + 0.1 * v[2];
        worst = worst.max((l.dual - dual).abs()).max((l.total - (dual + v[3])).abs());
    }
    ensure(worst < 1e-12, || format!("error {worst:e}"))?;
    Ok(format!("1000 draws, max error {worst:.1e}"))
}

fn c10_contrastive_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for masked in [11usize, 17, 40] {
        let q = Mat::<f64>::from_fn(masked, 8, |_, c| (c + 1) as f64);
        let y = frames::<f64>(masked, 8, &mut rng);
        let steps: Vec<usize> = (0..masked).collect();
        let ds: Vec<Vec<usize>> = (0..masked).map(|j| sample_distractors(&steps, j, 10, &mut rng).unwrap()).collect();
        let l = contrastive_loss(&y, &q, &ds, 0.1).unwrap();
        let want = masked as f64 * 11f64.ln();
        ensure((l - want).abs() < 1e-9, || format!("|T_M|={masked}: {l} vs {want}"))?;
    }
    let cfg = StreamConfig::new(13, 3, 1, 2, 6).unwrap();
    let offline = frames::<f64>(13, 6, &mut rng);
    let fut: Vec<Mat<f64>> = (1..=cfg.num_chunks()).map(|i| future_targets(&offline, &cfg, i).unwrap()).collect();
    let u: Vec<Mat<f64>> = fut
        .iter()
        .map(|f| {
            let mut m = frames::<f64>(2, 6, &mut rng);
            for k in 0..f.rows() {
                m.row_mut(k).copy_from_slice(f.row(k));
            }
            m
        })
        .collect();
    let fp = future_prediction_loss(&u, &fut).unwrap();
    ensure(fp == 0.0, || format!("L_fp = {fp:e} with U = target"))?;
    Ok("ln(11) per masked step; L_fp exactly 0".into())
}

fn c11_dynamic_sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000usize;
    let mut by_c = [0usize; 33];
    let mut by_cl = [[0usize; 33]; 33];
    for _ in 0..n {
        let (c, l) = sample_dynamic_config(&mut rng, 2, 32);
        ensure((2..=32).contains(&c) && l <= c, || format!("draw ({c},{l})"))?;
        by_c[c] += 1;
        by_cl[c][l] += 1;
    }
    let p = 1.0 / 31.0;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    let mut worst_z = 0.0f64;
    for c in 2..=32 {
        worst_z = worst_z.max((by_c[c] as f64 - n as f64 * p).abs() / sd);
        let m = by_c[c] as f64;
        let q = 1.0 / (c + 1) as f64;
        let sd = (m * q * (1.0 - q)).sqrt();
        for l in 0..=c {
            worst_z = worst_z.max((by_cl[c][l] as f64 - m * q).abs() / sd);
        }
    }
    ensure(worst_z < 5.0, || format!("a frequency is {worst_z:.2} sigma off"))?;
    Ok(format!("10000 draws in range, worst deviation {worst_z:.2} sigma"))
}

fn run(registers: usize) -> Vec<StepReport> {
    let mut cfg = TrainConfig::default();
    cfg.model.registers = registers;
    let mut t = Trainer::new(cfg).unwrap();
    (0..cfg.steps).map(|_| t.step().unwrap()).collect()
}

fn mean(rs: &[StepReport], f: impl Fn(&StepReport) -> f64) -> f64 {
    rs.iter().map(f).sum::<f64>() / rs.len() as f64
}

fn c12_toy_training() -> Outcome {
    let cfg = TrainConfig::default();
    ensure(
        cfg.steps == 500 && cfg.batch == 8 && (cfg.frames_min, cfg.frames_max) == (48, 48)
            && cfg.model.width == 32 && cfg.weights.beta == 1.0 && cfg.weights.distractors == 10,
        || format!("default run is not the 500-step, batch 8, T=48, d=32, beta=1 setup: {cfg:?}"),
    )?;
    let start = Instant::now();
    let with = run(1);
    let without = run(0);
    let took = start.elapsed();
    let first = mean(&with[..50], |r| r.loss.dual);
    let last = mean(&with[450..], |r| r.loss.dual);
    let drop = 1.0 - last / first;
    let acc = mean(&with[450..], |r| r.accuracy_offline);
    let on_with = mean(&with[450..], |r| r.loss.online);
    let on_without = mean(&without[450..], |r| r.loss.online);
    let summary = format!(
        "(a) L_dual {first:.3} -> {last:.3}, drop {:.1}%; (b) accuracy {acc:.3}; \
         (c) final L_on R=1 {on_with:.3} vs R=0 {on_without:.3}; {took:.1?}",
        100.0 * drop
    );
    let mut failed = Vec::new();
    if drop < 0.30 {
        failed.push("(a)");
    }
    if acc <= 0.27 {
        failed.push("(b)");
    }
    if on_with > on_without {
        failed.push("(c)");
    }
    if took >= Duration::from_secs(300) {
        failed.push("runtime");
    }
    if failed.is_empty() { Ok(summary) } else { Err(format!("{} failed: {summary}", failed.join(" "))) }
}

fn c13_latency_table() -> Outcome {
    let rows = bench(&BenchArgs { chunks: vec![8, 16, 32], frames: 64, ..BenchArgs::default() })
        .map_err(|e| e.to_string())?;
    let got: Vec<(usize, f64)> = rows.iter().map(|r| (r.chunk, r.latency_ms)).collect();
    ensure(got == [(8, 160.0), (16, 320.0), (32, 640.0)], || format!("{got:?}"))?;
    for r in &rows {
        ensure(r.latency_with_lookahead_ms == r.latency_ms, || format!("L=0 row {r:?}"))?;
    }
    Ok("C=8/16/32 -> 160/320/640 ms".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("mask oracle equivalence", c01_mask_oracle),
        ("golden 6/2/1/1 mask", c02_golden_mask),
        ("dual-mode degeneracy", c03_degeneracy),
        ("streaming equivalence", c04_streaming),
        ("causality", c05_causality),
        ("offline register independence", c06_offline_ignores_registers),
        ("gradient check", c07_gradient_check),
        ("stop-gradient", c08_stop_gradient),
        ("loss arithmetic", c09_loss_arithmetic),
        ("contrastive symmetry", c10_contrastive_symmetry),
        ("dynamic sampling", c11_dynamic_sampling),
        ("toy training", c12_toy_training),
        ("latency table", c13_latency_table),
    ];
    let mut failures = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                println!("FAIL {:>2} {name}: {detail}", i + 1);
                failures.push(i + 1);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}

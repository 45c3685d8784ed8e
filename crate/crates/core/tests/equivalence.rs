use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regstream_core::params::REGISTERS;
use regstream_core::stream::{reference_stream, stream_utterance};
use regstream_core::{
    encode_offline, encode_online, extract_frame_outputs, extract_register_outputs,
    sinusoidal_pe, Mat, ModelConfig, Params, Real,
    SlotKind, StreamConfig,
};

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

fn random_config(rng: &mut ChaCha8Rng, d: usize) -> StreamConfig {
    let c = rng.random_range(2..=8);
    StreamConfig::new(
        rng.random_range(1..=24),
        c,
        rng.random_range(0..=c),
        rng.random_range(0..=3),
        d,
    )
    .unwrap()
}

/// Textbook pre-norm transformer over plain vectors; `visible(q, k)` decides
/// attention and `pos[r]` the 1-based time whose encoding row `r` gets.
fn oracle_encoder(
    x: &Mat<f64>,
    pos: &[Option<usize>],
    visible: impl Fn(usize, usize) -> bool,
    p: &Params<f64>,
) -> Vec<Vec<f64>> {
    let cfg = p.config();
    let (n, d, dh) = (x.rows(), cfg.width, cfg.width / cfg.heads);
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let pe = pos[r].map_or(vec![0.0; d], |t| {
                (0..d)
                    .map(|j| {
                        let w = ((t - 1) as f64) / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
                        if j % 2 == 0 { w.sin() } else { w.cos() }
                    })
                    .collect()
            });
            x.row(r).iter().zip(&pe).map(|(a, b)| a + b).collect()
        })
        .collect();
    let ln = |v: &[f64], g: &Mat<f64>, b: &Mat<f64>| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
        (0..v.len())
            .map(|j| (v[j] - m) / (var + 1e-5).sqrt() * g.get(0, j) + b.get(0, j))
            .collect()
    };
    let lin = |v: &[f64], w: &Mat<f64>, b: &Mat<f64>| -> Vec<f64> {
        (0..w.cols())
            .map(|j| b.get(0, j) + (0..w.rows()).map(|i| v[i] * w.get(i, j)).sum::<f64>())
            .collect()
    };
    let gelu = |z: f64| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh());
    for l in 0..cfg.layers {
        let ix = cfg.layer(l);
        let g = |i: usize| p.get(i);
        let normed: Vec<Vec<f64>> = h.iter().map(|v| ln(v, g(ix.ln1_gain), g(ix.ln1_bias))).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|v| lin(v, g(ix.wq), g(ix.bq))).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|v| lin(v, g(ix.wk), g(ix.bk))).collect();
        let val: Vec<Vec<f64>> = normed.iter().map(|v| lin(v, g(ix.wv), g(ix.bv))).collect();
        let mut attn_out = Vec::with_capacity(n);
        for r in 0..n {
            let mut cat = vec![0.0; d];
            for hd in 0..cfg.heads {
                let cols = hd * dh..(hd + 1) * dh;
                let keys: Vec<usize> = (0..n).filter(|&c| visible(r, c)).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&c| cols.clone().map(|j| q[r][j] * k[c][j]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (&c, s) in keys.iter().zip(&scores) {
                    let a = (s - mx).exp() / z;
                    for j in cols.clone() {
                        cat[j] += a * val[c][j];
                    }
                }
            }
            let o = lin(&cat, g(ix.wo), g(ix.bo));
            attn_out.push(o);
        }
        for (hr, o) in h.iter_mut().zip(&attn_out) {
            hr.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        for r in 0..n {
            let n2 = ln(&h[r], g(ix.ln2_gain), g(ix.ln2_bias));
            let f: Vec<f64> = lin(&n2, g(ix.w1), g(ix.b1)).into_iter().map(gelu).collect();
            let f = lin(&f, g(ix.w2), g(ix.b2));
            h[r] = h[r].iter().zip(&f).map(|(a, b)| a + b).collect();
        }
    }
    h
}

fn max_diff_rows(a: &Mat<f64>, rows: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (r, want) in rows.iter().enumerate() {
        for (x, y) in a.row(r).iter().zip(want) {
            m = m.max((x - y).abs());
        }
    }
    m
}

#[test]
fn positional_encoding_closed_form() {
    let d = 10;
    for t in [1usize, 2, 7, 300] {
        let pe = sinusoidal_pe::<f64>(t, d);
        for j in 0..d {
            let w = (t - 1) as f64 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let want = if j % 2 == 0 { w.sin() } else { w.cos() };
            assert!((pe[j] - want).abs() < 1e-15);
        }
    }
    // position 0 is (0, 1, 0, 1, ...)
    let first = sinusoidal_pe::<f64>(1, 4);
    assert_eq!(first, [0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn zero_layers_is_input_plus_encoding() {
    let p = Params::<f64>::init(model(8, 0, 0), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = frames::<f64>(5, 8, &mut rng);
    let y = encode_offline(&x, &p).unwrap();
    for t in 1..=5 {
        let pe = sinusoidal_pe::<f64>(t, 8);
        for j in 0..8 {
            assert!((y.get(t - 1, j) - x.get(t - 1, j) - pe[j]).abs() < 1e-15);
        }
    }
}

#[test]
fn offline_forward_matches_plain_loop_transformer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..4 {
        let p = Params::<f64>::init(model(8, 2, 1), seed).unwrap();
        let t = rng.random_range(1..=9);
        let x = frames::<f64>(t, 8, &mut rng);
        let pos: Vec<Option<usize>> = (1..=t).map(Some).collect();
        let want = oracle_encoder(&x, &pos, |_, _| true, &p);
        assert!(max_diff_rows(&encode_offline(&x, &p).unwrap(), &want) < 1e-12);
    }
}

#[test]
fn online_forward_matches_plain_loop_transformer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..12 {
        let cfg = random_config(&mut rng, 8);
        let p = Params::<f64>::init(model(8, 2, cfg.registers), seed).unwrap();
        let x = frames::<f64>(cfg.frames, 8, &mut rng);
        let (out, layout) = encode_online(&x, &cfg, &p).unwrap();
        let slots = layout.slots();
        let n = layout.len();
        // assembled rows and their encodings, built by hand from the slots
        let mut input = Mat::zeros(n, 8);
        let mut pos = Vec::with_capacity(n);
        for (r, s) in slots.iter().enumerate() {
            match s.kind {
                SlotKind::Frame | SlotKind::LookAhead => {
                    let t = s.time.unwrap();
                    input.row_mut(r).copy_from_slice(x.row(t - 1));
                    pos.push(Some(t));
                }
                SlotKind::Pad => {
                    input.row_mut(r).copy_from_slice(p.pad_embedding().row(0));
                    pos.push(s.time);
                }
                SlotKind::Register => {
                    let k = s.register_index.unwrap();
                    input.row_mut(r).copy_from_slice(p.get(REGISTERS).row(k - 1));
                    pos.push(None);
                }
            }
        }
        let visible = |q: usize, k: usize| {
            let (qs, ks) = (slots[q], slots[k]);
            match ks.kind {
                SlotKind::Pad => false,
                SlotKind::Frame => ks.chunk <= qs.chunk,
                _ => ks.chunk == qs.chunk,
            }
        };
        let want = oracle_encoder(&input, &pos, visible, &p);
        assert!(max_diff_rows(&out, &want) < 1e-12, "{cfg:?}");
    }
}

#[test]
fn single_chunk_online_equals_offline() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in 1..=20 {
        let p = Params::<f64>::init(model(16, 2, 0), t as u64).unwrap();
        let x = frames::<f64>(t, 16, &mut rng);
        let cfg = StreamConfig::new(t, t, 0, 0, 16).unwrap();
        let (out, layout) = encode_online(&x, &cfg, &p).unwrap();
        let on = extract_frame_outputs(&out, &layout).unwrap();
        let off = encode_offline(&x, &p).unwrap();
        assert!(on.max_abs_diff(&off) < 1e-10, "T={t}");
    }
}

fn full_outputs<T: Real>(p: &Params<T>, cfg: &StreamConfig, x: &Mat<T>) -> (Mat<T>, Vec<Mat<T>>) {
    let (out, layout) = encode_online(x, cfg, p).unwrap();
    (
        extract_frame_outputs(&out, &layout).unwrap(),
        extract_register_outputs(&out, &layout).unwrap(),
    )
}

fn stream_gap<T: Real>(p: &Params<T>, cfg: &StreamConfig, x: &Mat<T>) -> f64 {
    let s = stream_utterance(p, cfg, x).unwrap();
    let (f, r) = full_outputs(p, cfg, x);
    assert_eq!(s.registers.len(), r.len());
    let mut gap = s.frames.max_abs_diff(&f).to_f64();
    for (a, b) in s.registers.iter().zip(&r) {
        gap = gap.max(a.max_abs_diff(b).to_f64());
    }
    gap
}

#[test]
fn cached_streaming_equals_full_forward_100_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let cfg = random_config(&mut rng, 16);
        let p = Params::<f64>::init(model(16, 2, cfg.registers), case).unwrap();
        let x = frames::<f64>(cfg.frames, 16, &mut rng);
        worst64 = worst64.max(stream_gap(&p, &cfg, &x));
        worst32 = worst32.max(stream_gap(&p.cast::<f32>(), &cfg, &x.cast::<f32>()));
    }
    assert!(worst64 < 1e-10, "double precision gap {worst64:e}");
    assert!(worst32 < 1e-5, "single precision gap {worst32:e}");
}

#[test]
fn cached_streaming_equals_prefix_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..30 {
        let cfg = random_config(&mut rng, 16);
        let p = Params::<f64>::init(model(16, 2, cfg.registers), case).unwrap();
        let x = frames::<f64>(cfg.frames, 16, &mut rng);
        let s = stream_utterance(&p, &cfg, &x).unwrap();
        let r = reference_stream(&p, &cfg, &x).unwrap();
        assert!(s.frames.max_abs_diff(&r.frames) < 1e-10);
        for (a, b) in s.registers.iter().zip(&r.registers) {
            assert!(a.max_abs_diff(b) < 1e-10);
        }
    }
}

#[test]
fn frames_beyond_lookahead_are_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50 {
        let cfg = random_config(&mut rng, 16);
        let p = Params::<f64>::init(model(16, 2, cfg.registers), case).unwrap();
        let x = frames::<f64>(cfg.frames, 16, &mut rng);
        let (f0, r0) = full_outputs(&p, &cfg, &x);
        let tp = rng.random_range(1..=cfg.frames);
        let mut y = x.clone();
        for v in y.row_mut(tp - 1) {
            *v += 1.0 + rng.random::<f64>();
        }
        let (f1, r1) = full_outputs(&p, &cfg, &y);
        for t in 1..=cfg.frames {
            let i = (t - 1) / cfg.chunk + 1;
            if tp > i * cfg.chunk + cfg.lookahead {
                assert_eq!(f0.row(t - 1), f1.row(t - 1), "{cfg:?} t={t} t'={tp}");
            }
        }
        for (i, (a, b)) in r0.iter().zip(&r1).enumerate() {
            if tp > (i + 1) * cfg.chunk + cfg.lookahead {
                assert_eq!(a, b, "{cfg:?} registers of chunk {}", i + 1);
            }
        }
    }
}

#[test]
fn offline_output_ignores_registers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20 {
        let r = rng.random_range(1..=3);
        let t = rng.random_range(1..=24);
        let mut p = Params::<f64>::init(model(16, 2, r), case).unwrap();
        let x = frames::<f64>(t, 16, &mut rng);
        let before = encode_offline(&x, &p).unwrap();
        *p.get_mut(REGISTERS) = Mat::from_fn(r, 16, |_, _| rng.random_range(-5.0..5.0));
        assert_eq!(before, encode_offline(&x, &p).unwrap());
    }
}

#[test]
fn registers_change_online_output_when_present() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = StreamConfig::new(8, 4, 1, 2, 16).unwrap();
    let mut p = Params::<f64>::init(model(16, 2, 2), 0).unwrap();
    let x = frames::<f64>(8, 16, &mut rng);
    let (f0, _) = full_outputs(&p, &cfg, &x);
    *p.get_mut(REGISTERS) = Mat::from_fn(2, 16, |_, _| rng.random_range(-5.0..5.0));
    let (f1, _) = full_outputs(&p, &cfg, &x);
    assert!(f0.max_abs_diff(&f1) > 1e-3);
}

#[test]
fn pad_keys_never_influence_outputs() {
    // changing the pad embedding moves only pad rows of the online output
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = StreamConfig::new(7, 3, 2, 1, 16).unwrap();
    let mut p = Params::<f64>::init(model(16, 2, 1), 0).unwrap();
    let x = frames::<f64>(7, 16, &mut rng);
    let (a, layout) = encode_online(&x, &cfg, &p).unwrap();
    *p.get_mut(regstream_core::params::PAD_EMBEDDING) = Mat::filled(1, 16, 3.0);
    let (b, _) = encode_online(&x, &cfg, &p).unwrap();
    for (r, s) in layout.slots().iter().enumerate() {
        if s.kind != SlotKind::Pad {
            assert_eq!(a.row(r), b.row(r), "row {r}");
        }
    }
}

//! Incremental chunk-by-chunk inference with per-layer key/value caching.
//!
//! Step `i` encodes `[C_i, L_i, R_i]` against the cached keys and values of
//! every earlier chunk's frames. A committed frame's cached state at each
//! layer was computed while it saw exactly what the training mask allows
//! (past chunks, its own chunk, look-ahead and registers), so the cached path
//! reproduces the full-sequence masked forward.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::StreamConfig;
use crate::encoder::{encode, sinusoidal_pe};
use crate::error::{Error, Result};
use crate::layout::ChunkLayout;
use crate::mask::build_online_mask;
use crate::mat::{attention, gelu, layer_norm, Mat, Real};
use crate::params::Params;

/// Algorithmic latency per chunk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyReport {
    /// `C · frame_ms`
    pub chunk_ms: f64,
    /// `(C + L) · frame_ms`
    pub with_lookahead_ms: f64,
}

pub fn latency_report(config: &StreamConfig) -> LatencyReport {
    LatencyReport {
        chunk_ms: config.chunk as f64 * config.frame_ms,
        with_lookahead_ms: (config.chunk + config.lookahead) as f64 * config.frame_ms,
    }
}

/// Outputs of one streaming step.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkOutput<T> {
    /// One row per real frame of the chunk.
    pub frames: Mat<T>,
    /// `R × d` register outputs `U_i`.
    pub registers: Mat<T>,
}

struct LayerCache<T> {
    keys: Mat<T>,
    values: Mat<T>,
}

/// Incremental inference state for one utterance. `config.frames` is not
/// consulted: the stream length is discovered as chunks arrive.
pub struct StreamState<'p, T> {
    params: &'p Params<T>,
    config: StreamConfig,
    caches: Vec<LayerCache<T>>,
    frames_consumed: usize,
    next_chunk: usize,
    finalized: bool,
}

pub fn open_stream<'p, T: Real>(
    params: &'p Params<T>,
    config: StreamConfig,
) -> Result<StreamState<'p, T>> {
    StreamState::new(params, config)
}

impl<'p, T: Real> StreamState<'p, T> {
    pub fn new(params: &'p Params<T>, config: StreamConfig) -> Result<Self> {
        config.validate()?;
        let mc = params.config();
        if config.width != mc.width {
            return Err(Error::invalid(format!(
                "stream width {} differs from model width {}",
                config.width, mc.width
            )));
        }
        if config.registers != mc.registers {
            return Err(Error::invalid(format!(
                "stream uses {} registers but the model has {}",
                config.registers, mc.registers
            )));
        }
        let caches = (0..mc.layers)
            .map(|_| LayerCache {
                keys: Mat::zeros(0, mc.width),
                values: Mat::zeros(0, mc.width),
            })
            .collect();
        Ok(Self {
            params,
            config,
            caches,
            frames_consumed: 0,
            next_chunk: 1,
            finalized: false,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn frames_consumed(&self) -> usize {
        self.frames_consumed
    }

    /// 1-based index of the chunk the next push will produce.
    pub fn next_chunk(&self) -> usize {
        self.next_chunk
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Cached key rows per layer; `(i − 1)·C` after `i − 1` committed chunks.
    pub fn cached_rows(&self) -> usize {
        self.caches.first().map_or(0, |c| c.keys.rows())
    }

    pub fn cache_bytes(&self) -> usize {
        self.caches
            .iter()
            .map(|c| (c.keys.as_slice().len() + c.values.as_slice().len()) * core::mem::size_of::<T>())
            .sum()
    }

    /// Encodes one full chunk of `C` frames with up to `L` look-ahead frames.
    /// Missing look-ahead rows (end of stream) are treated as padding.
    pub fn push_chunk(&mut self, chunk: &Mat<T>, lookahead: &Mat<T>) -> Result<ChunkOutput<T>> {
        self.check_open()?;
        let (c, l, d) = (self.config.chunk, self.config.lookahead, self.config.width);
        if chunk.shape() != (c, d) {
            return Err(Error::shape(format!("chunk {c}x{d}"), format!("{}x{}", chunk.rows(), chunk.cols())));
        }
        if lookahead.rows() > l || (lookahead.rows() > 0 && lookahead.cols() != d) {
            return Err(Error::shape(
                format!("at most {l} look-ahead rows of width {d}"),
                format!("{}x{}", lookahead.rows(), lookahead.cols()),
            ));
        }
        let out = self.step(chunk, c, lookahead)?;
        Ok(out)
    }

    /// Encodes the trailing partial chunk (fewer than `C` frames), padding it
    /// with the pad embedding, and closes the stream.
    pub fn finalize(&mut self, trailing: &Mat<T>) -> Result<ChunkOutput<T>> {
        self.check_open()?;
        let (c, d) = (self.config.chunk, self.config.width);
        if trailing.rows() >= c || (trailing.rows() > 0 && trailing.cols() != d) {
            return Err(Error::shape(
                format!("fewer than {c} trailing rows of width {d}"),
                format!("{}x{}", trailing.rows(), trailing.cols()),
            ));
        }
        let out = if trailing.rows() == 0 {
            ChunkOutput {
                frames: Mat::zeros(0, d),
                registers: Mat::zeros(0, d),
            }
        } else {
            let pad = self.params.pad_embedding();
            let mut padded = Mat::zeros(c, d);
            for r in 0..c {
                let src = if r < trailing.rows() { trailing.row(r) } else { pad.row(0) };
                padded.row_mut(r).copy_from_slice(src);
            }
            self.step(&padded, trailing.rows(), &Mat::zeros(0, d))?
        };
        self.finalized = true;
        Ok(out)
    }

    fn check_open(&self) -> Result<()> {
        if self.finalized {
            return Err(Error::Stream(String::from("stream already finalized")));
        }
        Ok(())
    }

    fn step(&mut self, chunk: &Mat<T>, real: usize, lookahead: &Mat<T>) -> Result<ChunkOutput<T>> {
        if !chunk.is_finite() || !lookahead.is_finite() {
            return Err(Error::NonFinite(String::from("stream input")));
        }
        let params = self.params;
        let mc = *params.config();
        let (c, l, r, d) = (
            self.config.chunk,
            self.config.lookahead,
            self.config.registers,
            self.config.width,
        );
        let i = self.next_chunk;
        let rows = c + l + r;
        let pad = params.pad_embedding();

        // input rows: chunk frames, look-ahead (pad-filled), registers
        let mut x = Mat::zeros(rows, d);
        let mut key_ok = Vec::with_capacity(rows);
        for k in 0..c {
            x.row_mut(k).copy_from_slice(chunk.row(k));
            add_pe(x.row_mut(k), (i - 1) * c + k + 1);
            key_ok.push(k < real);
        }
        for k in 0..l {
            let src = if k < lookahead.rows() { lookahead.row(k) } else { pad.row(0) };
            x.row_mut(c + k).copy_from_slice(src);
            add_pe(x.row_mut(c + k), i * c + k + 1);
            key_ok.push(k < lookahead.rows());
        }
        for k in 0..r {
            x.row_mut(c + l + k).copy_from_slice(params.registers().row(k));
            key_ok.push(true);
        }

        let past = self.cached_rows();
        let mask = Mat::from_fn(rows, past + rows, |_, key| {
            if key < past || key_ok[key - past] {
                T::zero()
            } else {
                T::neg_infinity()
            }
        });

        let dh = mc.head_width();
        let scale = T::of(1.0 / libm::sqrt(dh as f64));
        for (layer, cache) in self.caches.iter_mut().enumerate() {
            let ix = mc.layer(layer);
            let p = |k: usize| params.get(k);
            let h = layer_norm(&x, p(ix.ln1_gain), p(ix.ln1_bias));
            let q = affine(&h, p(ix.wq), p(ix.bq));
            let k_cur = affine(&h, p(ix.wk), p(ix.bk));
            let v_cur = affine(&h, p(ix.wv), p(ix.bv));
            let keys = Mat::vstack(&[&cache.keys, &k_cur]);
            let values = Mat::vstack(&[&cache.values, &v_cur]);
            let heads: Vec<Mat<T>> = (0..mc.heads)
                .map(|hd| {
                    attention(
                        &q.columns(hd * dh, dh),
                        &keys.columns(hd * dh, dh),
                        &values.columns(hd * dh, dh),
                        &mask,
                        scale,
                    )
                    .0
                })
                .collect();
            let refs: Vec<&Mat<T>> = heads.iter().collect();
            let o = affine(&Mat::hstack(&refs), p(ix.wo), p(ix.bo));
            x.add_assign(&o);
            let h = layer_norm(&x, p(ix.ln2_gain), p(ix.ln2_bias));
            let f = affine(&h, p(ix.w1), p(ix.b1)).map(gelu);
            x.add_assign(&affine(&f, p(ix.w2), p(ix.b2)));

            let commit: Vec<usize> = (0..c).collect();
            cache.keys = Mat::vstack(&[&cache.keys, &k_cur.select_rows(&commit)]);
            cache.values = Mat::vstack(&[&cache.values, &v_cur.select_rows(&commit)]);
        }

        self.frames_consumed += real;
        self.next_chunk += 1;
        let frame_rows: Vec<usize> = (0..real).collect();
        let reg_rows: Vec<usize> = (c + l..rows).collect();
        Ok(ChunkOutput {
            frames: x.select_rows(&frame_rows),
            registers: x.select_rows(&reg_rows),
        })
    }
}

fn add_pe<T: Real>(row: &mut [T], t: usize) {
    let pe = sinusoidal_pe::<T>(t, row.len());
    for (v, p) in row.iter_mut().zip(pe) {
        *v += p;
    }
}

fn affine<T: Real>(x: &Mat<T>, w: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut y = x.matmul(w);
    y.add_row_broadcast(b);
    y
}

/// Frame outputs (`T × d`) and per-chunk register outputs of a whole utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceOutput<T> {
    pub frames: Mat<T>,
    pub registers: Vec<Mat<T>>,
}

/// Drives a fresh stream over `frames`, feeding each chunk exactly the
/// look-ahead rows that exist.
pub fn stream_utterance<T: Real>(
    params: &Params<T>,
    config: &StreamConfig,
    frames: &Mat<T>,
) -> Result<UtteranceOutput<T>> {
    let mut state = open_stream(params, *config)?;
    let (t_max, c, l) = (frames.rows(), config.chunk, config.lookahead);
    let mut outs = Vec::new();
    let mut regs = Vec::new();
    let full = t_max / c;
    for i in 1..=full {
        let chunk: Vec<usize> = ((i - 1) * c..i * c).collect();
        let look: Vec<usize> = (i * c..(i * c + l).min(t_max)).collect();
        let o = state.push_chunk(&frames.select_rows(&chunk), &frames.select_rows(&look))?;
        outs.push(o.frames);
        regs.push(o.registers);
    }
    let tail: Vec<usize> = (full * c..t_max).collect();
    let o = state.finalize(&frames.select_rows(&tail))?;
    if o.frames.rows() > 0 {
        outs.push(o.frames);
        regs.push(o.registers);
    }
    let refs: Vec<&Mat<T>> = outs.iter().collect();
    Ok(UtteranceOutput {
        frames: Mat::vstack(&refs),
        registers: regs,
    })
}

/// Slow reference: for each chunk `i`, re-encodes from scratch every slot of
/// chunks `1..=i` (their frames, look-ahead and registers) with the online
/// mask, using only frames up to `iC + L`. Later frames are replaced by NaN so
/// any leak would surface as a non-finite input error.
pub fn reference_stream<T: Real>(
    params: &Params<T>,
    config: &StreamConfig,
    frames: &Mat<T>,
) -> Result<UtteranceOutput<T>> {
    let cfg = StreamConfig {
        frames: frames.rows(),
        ..*config
    };
    let layout = ChunkLayout::new(&cfg)?;
    let mask = build_online_mask(&layout);
    let positions = layout.positions();
    let mut out = Mat::zeros(frames.rows(), cfg.width);
    let mut regs = Vec::with_capacity(layout.num_chunks());
    for i in 1..=layout.num_chunks() {
        let visible = (i * cfg.chunk + cfg.lookahead).min(frames.rows());
        let mut seen = frames.clone();
        for r in visible..frames.rows() {
            seen.row_mut(r).iter_mut().for_each(|v| *v = T::nan());
        }
        let (assembled, _) = crate::layout::assemble_online_input(
            &seen,
            &cfg,
            params.registers(),
            params.pad_embedding(),
        )?;
        let keep = layout.prefix(i);
        let sub_pos: Vec<Option<usize>> = keep.iter().map(|&p| positions[p]).collect();
        let enc = encode(&assembled.select_rows(&keep), &sub_pos, &mask.restrict(&keep), params)?;
        for (k, &p) in keep.iter().enumerate() {
            let s = layout.slots()[p];
            if s.chunk == i && s.kind == crate::layout::SlotKind::Frame {
                out.row_mut(s.time.unwrap() - 1).copy_from_slice(enc.row(k));
            }
        }
        let reg_pos: Vec<usize> = layout.register_positions(i).collect();
        let reg_rows: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(_, p)| reg_pos.contains(p))
            .map(|(k, _)| k)
            .collect();
        regs.push(enc.select_rows(&reg_rows));
    }
    Ok(UtteranceOutput {
        frames: out,
        registers: regs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode_online;
    use crate::layout::{extract_frame_outputs, extract_register_outputs};
    use crate::params::ModelConfig;

    fn model(registers: usize) -> Params<f64> {
        Params::init(
            ModelConfig {
                width: 8,
                layers: 2,
                heads: 2,
                ff_width: 16,
                registers,
                groups: 2,
                entries: 4,
                gumbel_tau: 1.0,
            },
            11,
        )
        .unwrap()
    }

    fn frames(t: usize) -> Mat<f64> {
        Mat::from_fn(t, 8, |r, c| libm::sin(0.3 * (r * 8 + c) as f64) * 1.5)
    }

    fn full(params: &Params<f64>, cfg: &StreamConfig, x: &Mat<f64>) -> (Mat<f64>, Vec<Mat<f64>>) {
        let (out, layout) = encode_online(x, cfg, params).unwrap();
        (
            extract_frame_outputs(&out, &layout).unwrap(),
            extract_register_outputs(&out, &layout).unwrap(),
        )
    }

    #[test]
    fn fresh_stream_is_empty() {
        let p = model(1);
        let s = open_stream(&p, StreamConfig::new(6, 2, 1, 1, 8).unwrap()).unwrap();
        assert_eq!(s.cached_rows(), 0);
        assert_eq!(s.next_chunk(), 1);
        assert_eq!(s.cache_bytes(), 0);
    }

    #[test]
    fn figure_two_geometry_matches_full_forward() {
        let p = model(1);
        let cfg = StreamConfig::new(6, 2, 1, 1, 8).unwrap();
        let x = frames(6);
        let (f, u) = full(&p, &cfg, &x);
        let s = stream_utterance(&p, &cfg, &x).unwrap();
        assert!(s.frames.max_abs_diff(&f) < 1e-12);
        assert_eq!(s.registers.len(), 3);
        for (a, b) in s.registers.iter().zip(&u) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn first_push_equals_isolated_first_chunk() {
        let p = model(1);
        let cfg = StreamConfig::new(6, 2, 1, 1, 8).unwrap();
        let x = frames(6);
        let mut s = open_stream(&p, cfg).unwrap();
        let o = s.push_chunk(&x.select_rows(&[0, 1]), &x.select_rows(&[2])).unwrap();
        // [C_1, L_1, R_1] alone: every slot sees every other
        let input = Mat::vstack(&[&x.select_rows(&[0, 1, 2]), p.registers()]);
        let pos = [Some(1), Some(2), Some(3), None];
        let direct = encode(&input, &pos, &crate::mask::build_offline_mask(4), &p).unwrap();
        assert!(o.frames.max_abs_diff(&direct.select_rows(&[0, 1])) < 1e-12);
        assert!(o.registers.max_abs_diff(&direct.select_rows(&[3])) < 1e-12);
        assert_eq!(s.cached_rows(), 2);
    }

    #[test]
    fn partial_final_chunk() {
        let p = model(1);
        let cfg = StreamConfig::new(5, 2, 1, 1, 8).unwrap();
        let x = frames(5);
        let (f, _) = full(&p, &cfg, &x);
        let s = stream_utterance(&p, &cfg, &x).unwrap();
        assert_eq!(s.frames.rows(), 5);
        assert!(s.frames.max_abs_diff(&f) < 1e-12);

        // pad content is invisible to real frames
        let mut q = p.clone();
        q.get_mut(crate::params::PAD_EMBEDDING).as_mut_slice()[0] = 3.0;
        let s2 = stream_utterance(&q, &cfg, &x).unwrap();
        assert_eq!(s.frames, s2.frames);
    }

    #[test]
    fn finalize_with_nothing_emits_nothing() {
        let p = model(0);
        let cfg = StreamConfig::new(4, 2, 0, 0, 8).unwrap();
        let mut s = open_stream(&p, cfg).unwrap();
        let x = frames(4);
        s.push_chunk(&x.select_rows(&[0, 1]), &Mat::zeros(0, 8)).unwrap();
        s.push_chunk(&x.select_rows(&[2, 3]), &Mat::zeros(0, 8)).unwrap();
        let o = s.finalize(&Mat::zeros(0, 8)).unwrap();
        assert_eq!(o.frames.rows(), 0);
        assert!(matches!(s.finalize(&Mat::zeros(0, 8)), Err(Error::Stream(_))));
        assert!(matches!(
            s.push_chunk(&x.select_rows(&[0, 1]), &Mat::zeros(0, 8)),
            Err(Error::Stream(_))
        ));
    }

    #[test]
    fn rejects_wrong_row_counts() {
        let p = model(1);
        let cfg = StreamConfig::new(6, 2, 1, 1, 8).unwrap();
        let mut s = open_stream(&p, cfg).unwrap();
        let x = frames(6);
        assert!(s.push_chunk(&x.select_rows(&[0]), &Mat::zeros(0, 8)).is_err());
        assert!(s.push_chunk(&x.select_rows(&[0, 1]), &x.select_rows(&[2, 3])).is_err());
        assert!(s.finalize(&x.select_rows(&[0, 1])).is_err());
    }

    #[test]
    fn cache_holds_committed_frames_only() {
        let p = model(2);
        let cfg = StreamConfig::new(12, 3, 2, 2, 8).unwrap();
        let x = frames(12);
        let mut s = open_stream(&p, cfg).unwrap();
        for i in 1..=3 {
            let chunk: Vec<usize> = ((i - 1) * 3..i * 3).collect();
            let look: Vec<usize> = (i * 3..i * 3 + 2).collect();
            s.push_chunk(&x.select_rows(&chunk), &x.select_rows(&look)).unwrap();
            assert_eq!(s.cached_rows(), i * 3);
            assert_eq!(s.cache_bytes(), 2 * 2 * i * 3 * 8 * 8);
        }
    }

    #[test]
    fn reference_matches_cached_path() {
        let p = model(2);
        let cfg = StreamConfig::new(11, 3, 2, 2, 8).unwrap();
        let x = frames(11);
        let a = stream_utterance(&p, &cfg, &x).unwrap();
        let b = reference_stream(&p, &cfg, &x).unwrap();
        assert!(a.frames.max_abs_diff(&b.frames) < 1e-12);
        for (u, v) in a.registers.iter().zip(&b.registers) {
            assert!(u.max_abs_diff(v) < 1e-12);
        }
    }

    #[test]
    fn latency_examples() {
        let lat = |c, l| latency_report(&StreamConfig::new(64, c, l, 1, 8).unwrap());
        assert_eq!(lat(8, 0).chunk_ms, 160.0);
        assert_eq!(lat(32, 0).chunk_ms, 640.0);
        assert_eq!(lat(8, 0).with_lookahead_ms, lat(8, 0).chunk_ms);
        assert_eq!(lat(8, 2).with_lookahead_ms, 200.0);
    }
}

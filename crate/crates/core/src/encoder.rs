//! Dual-mode transformer encoder: full-context forward for offline mode and a
//! masked forward over the assembled chunk sequence for online mode.

use alloc::vec::Vec;

use crate::config::StreamConfig;
use crate::error::{Error, Result};
use crate::layout::{ChunkLayout, SlotSource};
use crate::mask::{build_offline_mask, build_online_mask, AttentionMask};
use crate::mat::{Mat, Real};
use crate::params::{ModelConfig, Params, MASK_EMBEDDING, PAD_EMBEDDING, REGISTERS};
use crate::tape::{Tape, Var};

/// Sinusoidal encoding of 1-based time `t` (position `t - 1`): even entries
/// `sin(pos / 10000^(2k/d))`, odd entries the matching cosine.
pub fn sinusoidal_pe<T: Real>(t: usize, width: usize) -> Vec<T> {
    debug_assert!(t >= 1);
    let pos = (t - 1) as f64;
    (0..width)
        .map(|j| {
            let k = (j / 2) as f64;
            let angle = pos / libm::pow(10_000.0, 2.0 * k / width as f64);
            T::of(if j % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            })
        })
        .collect()
}

/// Positional encodings for a sequence of slots; `None` rows stay zero.
pub fn positional_matrix<T: Real>(positions: &[Option<usize>], width: usize) -> Mat<T> {
    let mut pe = Mat::zeros(positions.len(), width);
    for (r, t) in positions.iter().enumerate() {
        if let Some(t) = t {
            pe.row_mut(r).copy_from_slice(&sinusoidal_pe(*t, width));
        }
    }
    pe
}

/// Set of masked time steps `T_M` (1-based, sorted) for one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    frames: usize,
    masked: Vec<usize>,
}

impl MaskingPlan {
    pub fn new(frames: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.iter().any(|&t| t == 0 || t > frames) {
            return Err(Error::invalid("masked time outside [1, T]"));
        }
        Ok(Self { frames, masked })
    }

    pub fn empty(frames: usize) -> Self {
        Self {
            frames,
            masked: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.masked.binary_search(&t).is_ok()
    }

    /// 0-based rows of the masked steps.
    pub fn rows(&self) -> Vec<usize> {
        self.masked.iter().map(|t| t - 1).collect()
    }

    fn gather_index(&self) -> Vec<(usize, usize)> {
        (1..=self.frames)
            .map(|t| if self.contains(t) { (1, 0) } else { (0, t - 1) })
            .collect()
    }
}

/// Replaces masked rows with the mask embedding.
pub fn apply_time_mask<T: Real>(
    frames: &Mat<T>,
    plan: &MaskingPlan,
    mask_embedding: &Mat<T>,
) -> Result<Mat<T>> {
    if plan.frames() != frames.rows() {
        return Err(Error::shape(
            alloc::format!("{} frames", plan.frames()),
            alloc::format!("{} frames", frames.rows()),
        ));
    }
    let mut out = frames.clone();
    for r in plan.rows() {
        out.row_mut(r).copy_from_slice(mask_embedding.row(0));
    }
    Ok(out)
}

/// Parameters bound as tape leaves, in store order.
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub config: ModelConfig,
}

impl BoundParams {
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &Params<T>) -> Self {
        Self {
            vars: params.mats().iter().map(|m| tape.leaf(m.clone())).collect(),
            config: *params.config(),
        }
    }

    #[inline]
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }
}

fn layer_norm_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.normalize(x);
    let g = tape.mul_row(n, gain);
    tape.add_row(g, bias)
}

fn linear_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

/// Adds positional encodings and runs the layer stack on the tape.
pub fn encode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    positions: &[Option<usize>],
    mask: &Mat<T>,
    params: &BoundParams,
) -> Var {
    let cfg = params.config;
    let pe = tape.leaf(positional_matrix(positions, cfg.width));
    let mut x = tape.add(input, pe);
    let dh = cfg.head_width();
    let scale = T::of(1.0 / libm::sqrt(dh as f64));
    for l in 0..cfg.layers {
        let ix = cfg.layer(l);
        let p = |i: usize| params.var(i);
        let h = layer_norm_on_tape(tape, x, p(ix.ln1_gain), p(ix.ln1_bias));
        let q = linear_on_tape(tape, h, p(ix.wq), p(ix.bq));
        let k = linear_on_tape(tape, h, p(ix.wk), p(ix.bk));
        let v = linear_on_tape(tape, h, p(ix.wv), p(ix.bv));
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = tape.columns(q, head * dh, dh);
            let kh = tape.columns(k, head * dh, dh);
            let vh = tape.columns(v, head * dh, dh);
            let s = tape.matmul_t(qh, kh);
            let a = tape.masked_softmax(s, mask, scale);
            heads.push(tape.matmul(a, vh));
        }
        let o = tape.hstack(&heads);
        let o = linear_on_tape(tape, o, p(ix.wo), p(ix.bo));
        x = tape.add(x, o);
        let h = layer_norm_on_tape(tape, x, p(ix.ln2_gain), p(ix.ln2_bias));
        let f = linear_on_tape(tape, h, p(ix.w1), p(ix.b1));
        let f = tape.gelu(f);
        let f = linear_on_tape(tape, f, p(ix.w2), p(ix.b2));
        x = tape.add(x, f);
    }
    x
}

/// Encoder forward over `input` rows with the given additive mask.
/// `positions[r]` is the time index whose encoding row `r` receives.
pub fn encode<T: Real>(
    input: &Mat<T>,
    positions: &[Option<usize>],
    mask: &AttentionMask,
    params: &Params<T>,
) -> Result<Mat<T>> {
    let d = params.config().width;
    if input.cols() != d {
        return Err(Error::shape(
            alloc::format!("width {d}"),
            alloc::format!("width {}", input.cols()),
        ));
    }
    if mask.size() != input.rows() || positions.len() != input.rows() {
        return Err(Error::shape(
            alloc::format!("mask and positions for {} rows", input.rows()),
            alloc::format!("mask {} / positions {}", mask.size(), positions.len()),
        ));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite(alloc::string::String::from("encoder input")));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let x = tape.leaf(input.clone());
    let out = encode_on_tape(&mut tape, x, positions, &mask.additive(), &bound);
    Ok(tape.value(out).clone())
}

/// Offline forward of an (already time-masked) frame matrix.
pub fn encode_offline<T: Real>(frames: &Mat<T>, params: &Params<T>) -> Result<Mat<T>> {
    let positions: Vec<Option<usize>> = (1..=frames.rows()).map(Some).collect();
    encode(frames, &positions, &build_offline_mask(frames.rows()), params)
}

/// Online forward of the assembled sequence for `config`; returns the raw
/// encoder output over every slot together with its layout.
pub fn encode_online<T: Real>(
    frames: &Mat<T>,
    config: &StreamConfig,
    params: &Params<T>,
) -> Result<(Mat<T>, ChunkLayout)> {
    let (assembled, layout) = crate::layout::assemble_online_input(
        frames,
        config,
        params.registers(),
        params.pad_embedding(),
    )?;
    let out = encode(
        &assembled,
        &layout.positions(),
        &build_online_mask(&layout),
        params,
    )?;
    Ok((out, layout))
}

/// Outputs of one dual-mode pass.
#[derive(Clone, Debug)]
pub struct DualOutput<T> {
    pub offline: Mat<T>,
    pub online: Mat<T>,
    /// Register outputs `U_i`, one `R × d` block per chunk.
    pub registers: Vec<Mat<T>>,
}

/// Tape nodes of one dual-mode pass.
pub struct DualNodes {
    pub offline: Var,
    pub online_raw: Var,
    pub online: Var,
    pub registers: Vec<Var>,
    pub layout: ChunkLayout,
}

/// Dual forward on the tape; `frames` is the clean (unmasked) frame leaf.
pub fn encode_dual_on_tape<T: Real>(
    tape: &mut Tape<T>,
    frames: Var,
    plan: &MaskingPlan,
    config: &StreamConfig,
    params: &BoundParams,
) -> Result<DualNodes> {
    let layout = ChunkLayout::new(config)?;
    let masked = tape.gather(
        &[frames, params.var(MASK_EMBEDDING)],
        &plan.gather_index(),
    );

    let offline_positions: Vec<Option<usize>> = (1..=config.frames).map(Some).collect();
    let offline_mask = build_offline_mask(config.frames).additive();
    let offline = encode_on_tape(tape, masked, &offline_positions, &offline_mask, params);

    let index: Vec<(usize, usize)> = layout
        .sources()
        .into_iter()
        .map(|s| match s {
            SlotSource::Frame(r) => (0, r),
            SlotSource::Pad => (1, 0),
            SlotSource::Register(k) => (2, k),
        })
        .collect();
    let assembled = tape.gather(
        &[masked, params.var(PAD_EMBEDDING), params.var(REGISTERS)],
        &index,
    );
    let online_mask = build_online_mask(&layout).additive();
    let online_raw = encode_on_tape(tape, assembled, &layout.positions(), &online_mask, params);
    let frame_rows: Vec<usize> = (1..=config.frames).map(|t| layout.frame_position(t)).collect();
    let online = tape.select_rows(online_raw, &frame_rows);
    let registers = (1..=layout.num_chunks())
        .map(|i| {
            let rows: Vec<usize> = layout.register_positions(i).collect();
            tape.select_rows(online_raw, &rows)
        })
        .collect();
    Ok(DualNodes {
        offline,
        online_raw,
        online,
        registers,
        layout,
    })
}

/// Offline and online outputs for the same masking plan and weights.
pub fn encode_dual<T: Real>(
    frames: &Mat<T>,
    plan: &MaskingPlan,
    config: &StreamConfig,
    params: &Params<T>,
) -> Result<DualOutput<T>> {
    if frames.shape() != (config.frames, params.config().width) || config.width != params.config().width {
        return Err(Error::shape(
            alloc::format!("frames {}x{}", config.frames, params.config().width),
            alloc::format!("{}x{}", frames.rows(), frames.cols()),
        ));
    }
    if config.registers != params.config().registers {
        return Err(Error::invalid("stream register count differs from model"));
    }
    if !frames.is_finite() {
        return Err(Error::NonFinite(alloc::string::String::from("frames")));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let x = tape.leaf(frames.clone());
    let nodes = encode_dual_on_tape(&mut tape, x, plan, config, &bound)?;
    Ok(DualOutput {
        offline: tape.value(nodes.offline).clone(),
        online: tape.value(nodes.online).clone(),
        registers: nodes
            .registers
            .iter()
            .map(|&u| tape.value(u).clone())
            .collect(),
    })
}

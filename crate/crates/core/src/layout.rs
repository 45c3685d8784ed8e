//! Chunk partitioning and the assembled online-mode sequence.
//!
//! The assembled sequence is laid out block-wise: all chunk frames first, then
//! every chunk's look-ahead segment, then every chunk's register block:
//!
//! ```text
//! [C_1, C_2, .., C_N, L_1, L_2, .., L_N, R_1, R_2, .., R_N]
//! ```
//!
//! Chunk, time and register indices in [`SlotDescriptor`] are 1-based; slot
//! positions (row indices into the assembled matrix) are 0-based.

use alloc::vec::Vec;

use crate::config::StreamConfig;
use crate::error::{Error, Result};
use crate::mat::{Mat, Real};

/// Contiguous 1-based time range `[start, start + len)` owned by one chunk.
/// Times above `T` are padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeRange {
    pub chunk: usize,
    pub start: usize,
    pub len: usize,
    /// Number of leading positions that index real frames (`t <= T`).
    pub valid: usize,
}

impl TimeRange {
    fn new(chunk: usize, start: usize, len: usize, frames: usize) -> Self {
        let valid = (frames + 1).saturating_sub(start).min(len);
        Self {
            chunk,
            start,
            len,
            valid,
        }
    }

    /// Inclusive last time index; `start - 1` for an empty range.
    pub fn end(&self) -> usize {
        self.start + self.len - 1
    }

    pub fn pads(&self) -> usize {
        self.len - self.valid
    }

    pub fn times(&self) -> impl Iterator<Item = usize> {
        self.start..self.start + self.len
    }

    pub fn is_pad(&self, t: usize) -> bool {
        t >= self.start + self.valid
    }
}

/// Per-chunk frame ranges `C_i = X[(i-1)C+1 ..= iC]`; only the last chunk
/// may carry padding.
pub fn partition_chunks(frames: usize, chunk: usize) -> Result<Vec<TimeRange>> {
    if frames == 0 || chunk == 0 {
        return Err(Error::invalid("partition needs T >= 1 and C >= 1"));
    }
    let n = frames.div_ceil(chunk);
    Ok((1..=n)
        .map(|i| TimeRange::new(i, (i - 1) * chunk + 1, chunk, frames))
        .collect())
}

/// Per-chunk look-ahead ranges `L_i = X[iC+1 ..= iC+L]`.
pub fn lookahead_ranges(frames: usize, chunk: usize, lookahead: usize) -> Result<Vec<TimeRange>> {
    if frames == 0 || chunk == 0 {
        return Err(Error::invalid("look-ahead needs T >= 1 and C >= 1"));
    }
    let n = frames.div_ceil(chunk);
    Ok((1..=n)
        .map(|i| TimeRange::new(i, i * chunk + 1, lookahead, frames))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Frame,
    LookAhead,
    Register,
    Pad,
}

impl SlotKind {
    pub fn name(self) -> &'static str {
        match self {
            SlotKind::Frame => "frame",
            SlotKind::LookAhead => "lookahead",
            SlotKind::Register => "register",
            SlotKind::Pad => "pad",
        }
    }
}

/// Semantic identity of one assembled slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SlotDescriptor {
    pub kind: SlotKind,
    pub chunk: usize,
    /// Original time index for frames and look-ahead copies; for pads, the
    /// out-of-range time they stand in for. `None` for registers.
    pub time: Option<usize>,
    /// `1..=R` for registers.
    pub register_index: Option<usize>,
}

/// Where an assembled row is copied from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotSource {
    /// 0-based row of the frame matrix.
    Frame(usize),
    Pad,
    /// 0-based register row.
    Register(usize),
}

/// Indexed layout of the assembled online sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkLayout {
    config: StreamConfig,
    slots: Vec<SlotDescriptor>,
}

impl ChunkLayout {
    pub fn new(config: &StreamConfig) -> Result<Self> {
        config.validate()?;
        let (t_max, c, l, r) = (
            config.frames,
            config.chunk,
            config.lookahead,
            config.registers,
        );
        let mut slots = Vec::with_capacity(config.online_len());
        for range in partition_chunks(t_max, c)? {
            for t in range.times() {
                let kind = if range.is_pad(t) {
                    SlotKind::Pad
                } else {
                    SlotKind::Frame
                };
                slots.push(SlotDescriptor {
                    kind,
                    chunk: range.chunk,
                    time: Some(t),
                    register_index: None,
                });
            }
        }
        for range in lookahead_ranges(t_max, c, l)? {
            for t in range.times() {
                let kind = if range.is_pad(t) {
                    SlotKind::Pad
                } else {
                    SlotKind::LookAhead
                };
                slots.push(SlotDescriptor {
                    kind,
                    chunk: range.chunk,
                    time: Some(t),
                    register_index: None,
                });
            }
        }
        for i in 1..=config.num_chunks() {
            for k in 1..=r {
                slots.push(SlotDescriptor {
                    kind: SlotKind::Register,
                    chunk: i,
                    time: None,
                    register_index: Some(k),
                });
            }
        }
        debug_assert_eq!(slots.len(), config.online_len());
        Ok(Self {
            config: *config,
            slots,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_chunks(&self) -> usize {
        self.config.num_chunks()
    }

    pub fn slots(&self) -> &[SlotDescriptor] {
        &self.slots
    }

    pub fn slot_of(&self, position: usize) -> Option<&SlotDescriptor> {
        self.slots.get(position)
    }

    /// Inverse of [`slot_of`](Self::slot_of), computed from the block
    /// arithmetic rather than by search.
    pub fn layout_index(&self, slot: &SlotDescriptor) -> Option<usize> {
        let StreamConfig {
            chunk: c,
            lookahead: l,
            registers: r,
            ..
        } = self.config;
        let n = self.num_chunks();
        if slot.chunk == 0 || slot.chunk > n {
            return None;
        }
        let i = slot.chunk;
        let in_frames = |t: usize| t > (i - 1) * c && t <= i * c;
        let in_lookahead = |t: usize| t > i * c && t <= i * c + l;
        let pos = match (slot.kind, slot.time, slot.register_index) {
            (SlotKind::Frame, Some(t), None) if in_frames(t) && t <= self.config.frames => t - 1,
            (SlotKind::LookAhead, Some(t), None) if in_lookahead(t) && t <= self.config.frames => {
                n * c + (i - 1) * l + (t - i * c - 1)
            }
            (SlotKind::Pad, Some(t), None) if t > self.config.frames => {
                if in_frames(t) {
                    t - 1
                } else if in_lookahead(t) {
                    n * c + (i - 1) * l + (t - i * c - 1)
                } else {
                    return None;
                }
            }
            (SlotKind::Register, None, Some(k)) if k >= 1 && k <= r => {
                n * c + n * l + (i - 1) * r + (k - 1)
            }
            _ => return None,
        };
        Some(pos)
    }

    /// Position of frame `t` (1-based) in the frame block.
    pub fn frame_position(&self, t: usize) -> usize {
        t - 1
    }

    /// Positions of chunk `i`'s register block (1-based chunk).
    pub fn register_positions(&self, i: usize) -> core::ops::Range<usize> {
        let StreamConfig {
            chunk: c,
            lookahead: l,
            registers: r,
            ..
        } = self.config;
        let n = self.num_chunks();
        let start = n * c + n * l + (i - 1) * r;
        start..start + r
    }

    pub fn sources(&self) -> Vec<SlotSource> {
        self.slots
            .iter()
            .map(|s| match s.kind {
                SlotKind::Frame | SlotKind::LookAhead => SlotSource::Frame(s.time.unwrap() - 1),
                SlotKind::Pad => SlotSource::Pad,
                SlotKind::Register => SlotSource::Register(s.register_index.unwrap() - 1),
            })
            .collect()
    }

    /// Time index each slot's positional encoding is taken from.
    pub fn positions(&self) -> Vec<Option<usize>> {
        self.slots.iter().map(|s| s.time).collect()
    }

    /// Layout restricted to chunks `1..=upto`, in the same block order.
    /// Slots of later chunks are invisible to earlier ones under the online
    /// mask, so encoding this prefix reproduces the full pass for its chunks.
    pub fn prefix(&self, upto: usize) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&p| self.slots[p].chunk <= upto)
            .collect()
    }
}

/// Builds the assembled online input and its layout.
pub fn assemble_online_input<T: Real>(
    frames: &Mat<T>,
    config: &StreamConfig,
    registers: &Mat<T>,
    pad_embedding: &Mat<T>,
) -> Result<(Mat<T>, ChunkLayout)> {
    check_inputs(frames, config, registers, pad_embedding)?;
    let layout = ChunkLayout::new(config)?;
    let d = config.width;
    let mut out = Mat::zeros(layout.len(), d);
    for (p, src) in layout.sources().into_iter().enumerate() {
        let row = match src {
            SlotSource::Frame(t) => frames.row(t),
            SlotSource::Pad => pad_embedding.row(0),
            SlotSource::Register(k) => registers.row(k),
        };
        out.row_mut(p).copy_from_slice(row);
    }
    Ok((out, layout))
}

pub(crate) fn check_inputs<T: Real>(
    frames: &Mat<T>,
    config: &StreamConfig,
    registers: &Mat<T>,
    pad_embedding: &Mat<T>,
) -> Result<()> {
    let d = config.width;
    if frames.shape() != (config.frames, d) {
        return Err(Error::shape(
            alloc::format!("frames {}x{}", config.frames, d),
            alloc::format!("{}x{}", frames.rows(), frames.cols()),
        ));
    }
    if registers.shape() != (config.registers, d) {
        return Err(Error::shape(
            alloc::format!("registers {}x{}", config.registers, d),
            alloc::format!("{}x{}", registers.rows(), registers.cols()),
        ));
    }
    if pad_embedding.shape() != (1, d) {
        return Err(Error::shape(
            alloc::format!("pad embedding 1x{d}"),
            alloc::format!("{}x{}", pad_embedding.rows(), pad_embedding.cols()),
        ));
    }
    Ok(())
}

fn check_output_len<T: Real>(output: &Mat<T>, layout: &ChunkLayout) -> Result<()> {
    if output.rows() != layout.len() {
        return Err(Error::shape(
            alloc::format!("{} rows (layout length)", layout.len()),
            alloc::format!("{} rows", output.rows()),
        ));
    }
    Ok(())
}

/// Picks the frame-block row of every real frame, in time order.
pub fn extract_frame_outputs<T: Real>(output: &Mat<T>, layout: &ChunkLayout) -> Result<Mat<T>> {
    check_output_len(output, layout)?;
    let idx: Vec<usize> = (1..=layout.config().frames)
        .map(|t| layout.frame_position(t))
        .collect();
    Ok(output.select_rows(&idx))
}

/// Register outputs `U_i`, one `R × d` block per chunk.
pub fn extract_register_outputs<T: Real>(
    output: &Mat<T>,
    layout: &ChunkLayout,
) -> Result<Vec<Mat<T>>> {
    check_output_len(output, layout)?;
    Ok((1..=layout.num_chunks())
        .map(|i| {
            let idx: Vec<usize> = layout.register_positions(i).collect();
            output.select_rows(&idx)
        })
        .collect())
}

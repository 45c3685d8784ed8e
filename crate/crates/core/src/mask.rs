//! Additive attention masks for the two encoder modes.

use alloc::vec;
use alloc::vec::Vec;

use crate::layout::{lookahead_ranges, ChunkLayout, SlotDescriptor, SlotKind};
use crate::mat::{Mat, Real};

/// Square visibility matrix over assembled slots. Rendered additively as
/// `0` (allowed) or `-inf` (forbidden).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for q in 0..size {
            for k in 0..size {
                allowed.push(f(q, k));
            }
        }
        Self { size, allowed }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn set(&mut self, query: usize, key: usize, allowed: bool) {
        self.allowed[query * self.size + key] = allowed;
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.size..(query + 1) * self.size]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Additive form for attention logits.
    pub fn additive<T: Real>(&self) -> Mat<T> {
        Mat::from_vec(
            self.size,
            self.size,
            self.allowed
                .iter()
                .map(|&a| if a { T::zero() } else { T::neg_infinity() })
                .collect(),
        )
    }

    /// Sub-mask over the given positions, in order.
    pub fn restrict(&self, positions: &[usize]) -> Self {
        Self::from_fn(positions.len(), |q, k| {
            self.is_allowed(positions[q], positions[k])
        })
    }
}

/// Online visibility rule. A query belonging to chunk `i` (whatever its kind)
/// sees real frames of chunks `j <= i`, the look-ahead of chunk `i` and the
/// registers of chunk `i`. Pad keys are never visible.
pub fn allowed(query: &SlotDescriptor, key: &SlotDescriptor) -> bool {
    let i = query.chunk;
    match key.kind {
        SlotKind::Frame => key.chunk <= i,
        SlotKind::LookAhead | SlotKind::Register => key.chunk == i,
        SlotKind::Pad => false,
    }
}

/// Online mask built block-wise from the layout geometry.
pub fn build_online_mask(layout: &ChunkLayout) -> AttentionMask {
    let cfg = layout.config();
    let (t_max, c, l, r) = (cfg.frames, cfg.chunk, cfg.lookahead, cfg.registers);
    let n = layout.num_chunks();
    let size = layout.len();
    let look = lookahead_ranges(t_max, c, l).expect("layout config already validated");

    let mut allowed = vec![false; size * size];
    let mut pattern = vec![false; size];
    for i in 1..=n {
        pattern.iter_mut().for_each(|a| *a = false);
        // real frames of chunks 1..=i occupy positions 0..min(iC, T)
        pattern[..(i * c).min(t_max)].iter_mut().for_each(|a| *a = true);
        let la_start = n * c + (i - 1) * l;
        pattern[la_start..la_start + look[i - 1].valid]
            .iter_mut()
            .for_each(|a| *a = true);
        let reg = layout.register_positions(i);
        pattern[reg].iter_mut().for_each(|a| *a = true);

        let frame_rows = (i - 1) * c..i * c;
        let la_rows = la_start..la_start + l;
        let reg_rows = layout.register_positions(i);
        debug_assert_eq!(reg_rows.len(), r);
        for q in frame_rows.chain(la_rows).chain(reg_rows) {
            allowed[q * size..(q + 1) * size].copy_from_slice(&pattern);
        }
    }
    AttentionMask { size, allowed }
}

/// Full-context mask over `frames` real frames.
pub fn build_offline_mask(frames: usize) -> AttentionMask {
    AttentionMask {
        size: frames,
        allowed: vec![true; frames * frames],
    }
}

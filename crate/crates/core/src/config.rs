use crate::error::{Error, Result};

/// Frame interval of the feature front end, in milliseconds.
pub const DEFAULT_FRAME_MS: f64 = 20.0;

/// Geometry of one dual-mode pass: `T` frames cut into chunks of `C`, each
/// chunk followed by `L` look-ahead frames and `R` register slots, width `d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamConfig {
    pub frames: usize,
    pub chunk: usize,
    pub lookahead: usize,
    pub registers: usize,
    pub width: usize,
    pub frame_ms: f64,
}

impl StreamConfig {
    pub fn new(
        frames: usize,
        chunk: usize,
        lookahead: usize,
        registers: usize,
        width: usize,
    ) -> Result<Self> {
        let cfg = Self {
            frames,
            chunk,
            lookahead,
            registers,
            width,
            frame_ms: DEFAULT_FRAME_MS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_frame_ms(mut self, frame_ms: f64) -> Self {
        self.frame_ms = frame_ms;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("frame count must be positive"));
        }
        if self.chunk == 0 {
            return Err(Error::invalid("chunk size must be positive"));
        }
        if self.width == 0 {
            return Err(Error::invalid("model width must be positive"));
        }
        if !(self.frame_ms > 0.0) {
            return Err(Error::invalid("frame interval must be positive"));
        }
        Ok(())
    }

    /// `N = ceil(T / C)`.
    #[inline]
    pub fn num_chunks(&self) -> usize {
        self.frames.div_ceil(self.chunk)
    }

    /// Row count of the assembled online sequence, `N·C + N·L + N·R`.
    #[inline]
    pub fn online_len(&self) -> usize {
        self.num_chunks() * (self.chunk + self.lookahead + self.registers)
    }
}

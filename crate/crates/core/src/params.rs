//! Model hyperparameters and the flat, named parameter store.
//!
//! Every trainable array lives in one ordered list so that gradients,
//! optimizer moments and checkpoints share a single indexing scheme.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::encoder::sinusoidal_pe;
use crate::error::{Error, Result};
use crate::mat::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Registers per chunk.
    pub registers: usize,
    /// Quantizer codebook groups `G`.
    pub groups: usize,
    /// Entries per group `V`.
    pub entries: usize,
    /// Gumbel-softmax temperature.
    pub gumbel_tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 2,
            ff_width: 64,
            registers: 1,
            groups: 2,
            entries: 16,
            gumbel_tau: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.ff_width == 0 {
            return Err(Error::invalid("width, heads and ff_width must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.groups == 0 || self.width % self.groups != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by {} codebook groups",
                self.width, self.groups
            )));
        }
        if self.groups * self.entries < 2 {
            return Err(Error::invalid("codebook needs G*V >= 2"));
        }
        if !(self.gumbel_tau > 0.0) {
            return Err(Error::invalid("gumbel temperature must be positive"));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn codebook_size(&self) -> usize {
        self.groups * self.entries
    }

    pub fn num_params(&self) -> usize {
        EMBED_COUNT + self.layers * PER_LAYER + QUANT_COUNT
    }

    pub fn layer(&self, l: usize) -> LayerIdx {
        let b = EMBED_COUNT + l * PER_LAYER;
        LayerIdx {
            ln1_gain: b,
            ln1_bias: b + 1,
            wq: b + 2,
            bq: b + 3,
            wk: b + 4,
            bk: b + 5,
            wv: b + 6,
            bv: b + 7,
            wo: b + 8,
            bo: b + 9,
            ln2_gain: b + 10,
            ln2_bias: b + 11,
            w1: b + 12,
            b1: b + 13,
            w2: b + 14,
            b2: b + 15,
        }
    }

    pub fn quantizer(&self) -> QuantIdx {
        let b = EMBED_COUNT + self.layers * PER_LAYER;
        QuantIdx {
            logits_weight: b,
            logits_bias: b + 1,
            codebook: b + 2,
            proj_weight: b + 3,
            proj_bias: b + 4,
        }
    }
}

pub const MASK_EMBEDDING: usize = 0;
pub const PAD_EMBEDDING: usize = 1;
pub const REGISTERS: usize = 2;
const EMBED_COUNT: usize = 3;
const PER_LAYER: usize = 16;
const QUANT_COUNT: usize = 5;

/// Indices of one encoder layer's arrays in the flat store.
#[derive(Clone, Copy, Debug)]
pub struct LayerIdx {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Indices of the quantizer arrays. The codebook stacks the `G` group
/// codebooks vertically: `G·V × d/G`.
#[derive(Clone, Copy, Debug)]
pub struct QuantIdx {
    pub logits_weight: usize,
    pub logits_bias: usize,
    pub codebook: usize,
    pub proj_weight: usize,
    pub proj_bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Quantizer,
    Registers,
    MaskEmbedding,
    PadEmbedding,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Quantizer,
        ParamGroup::Registers,
        ParamGroup::MaskEmbedding,
        ParamGroup::PadEmbedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Quantizer => "quantizer",
            ParamGroup::Registers => "registers",
            ParamGroup::MaskEmbedding => "mask_embedding",
            ParamGroup::PadEmbedding => "pad_embedding",
        }
    }
}

/// Shapes and names of every array, in store order.
/// Registers carry no positional encoding, but every frame row does, and the
/// sinusoidal encoding has a large near-constant part (the low-frequency
/// cosines). Registers start at the average encoding so they sit in the same
/// region as frames; starting near zero lets the future-prediction loss chase
/// that constant gap through the shared biases without end.
const REGISTER_ANCHOR_FRAMES: usize = 64;

fn mean_positional_encoding(width: usize, frames: usize) -> Vec<f64> {
    let mut mean = alloc::vec![0.0; width];
    for t in 1..=frames {
        for (m, v) in mean.iter_mut().zip(sinusoidal_pe::<f64>(t, width)) {
            *m += v / frames as f64;
        }
    }
    mean
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.width;
    let mut specs = Vec::with_capacity(cfg.num_params());
    specs.push((String::from("mask_embedding"), (1, d)));
    specs.push((String::from("pad_embedding"), (1, d)));
    specs.push((String::from("registers"), (cfg.registers, d)));
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        specs.extend([
            (p("ln1.gain"), (1, d)),
            (p("ln1.bias"), (1, d)),
            (p("attn.q.weight"), (d, d)),
            (p("attn.q.bias"), (1, d)),
            (p("attn.k.weight"), (d, d)),
            (p("attn.k.bias"), (1, d)),
            (p("attn.v.weight"), (d, d)),
            (p("attn.v.bias"), (1, d)),
            (p("attn.out.weight"), (d, d)),
            (p("attn.out.bias"), (1, d)),
            (p("ln2.gain"), (1, d)),
            (p("ln2.bias"), (1, d)),
            (p("ff.in.weight"), (d, cfg.ff_width)),
            (p("ff.in.bias"), (1, cfg.ff_width)),
            (p("ff.out.weight"), (cfg.ff_width, d)),
            (p("ff.out.bias"), (1, d)),
        ]);
    }
    let gv = cfg.codebook_size();
    specs.extend([
        (String::from("quantizer.logits.weight"), (d, gv)),
        (String::from("quantizer.logits.bias"), (1, gv)),
        (String::from("quantizer.codebook"), (gv, d / cfg.groups)),
        (String::from("quantizer.proj.weight"), (d, d)),
        (String::from("quantizer.proj.bias"), (1, d)),
    ]);
    specs
}

pub fn group_of(cfg: &ModelConfig, index: usize) -> ParamGroup {
    match index {
        MASK_EMBEDDING => ParamGroup::MaskEmbedding,
        PAD_EMBEDDING => ParamGroup::PadEmbedding,
        REGISTERS => ParamGroup::Registers,
        i if i >= cfg.quantizer().logits_weight => ParamGroup::Quantizer,
        _ => ParamGroup::Encoder,
    }
}

/// All trainable arrays of the encoder, embeddings and quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    config: ModelConfig,
    mats: Vec<Mat<T>>,
}

/// Stream ids used to split the init RNG so that changing `R` leaves every
/// other array's initial value untouched.
const INIT_STREAM: u64 = 1;
const REGISTER_STREAM: u64 = 2;

/// Std of the code-selection weights: logits start at a few units, so early
/// selections are informative but not yet one-hot.
const SELECTION_INIT_STD: f64 = 0.3;

impl<T: Real> Params<T> {
    /// Seeded initialisation: uniform `±1/sqrt(fan_in)` weights, zero biases,
    /// unit layer-norm gains, `N(0, 0.02²)` mask embedding, registers at the
    /// mean positional encoding plus `N(0, 0.02²)`, zero pad embedding,
    /// `N(0, 1)` codewords and `N(0, 0.3²)` code-selection weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut reg_rng = ChaCha8Rng::seed_from_u64(seed);
        reg_rng.set_stream(REGISTER_STREAM);
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let quant = config.quantizer();

        let mut mats = Vec::with_capacity(config.num_params());
        for (idx, (name, (r, c))) in param_specs(&config).into_iter().enumerate() {
            let m = match idx {
                MASK_EMBEDDING => Mat::from_fn(r, c, |_, _| T::of(small.sample(&mut rng))),
                PAD_EMBEDDING => Mat::zeros(r, c),
                REGISTERS => {
                    let anchor = mean_positional_encoding(c, REGISTER_ANCHOR_FRAMES);
                    Mat::from_fn(r, c, |_, j| T::of(anchor[j] + small.sample(&mut reg_rng)))
                }
                // unit-scale codewords keep targets well away from the
                // projection bias
                i if i == quant.codebook => {
                    Mat::from_fn(r, c, |_, _| T::of(rng.sample::<f64, _>(StandardNormal)))
                }
                i if i == quant.logits_weight => Mat::from_fn(r, c, |_, _| {
                    T::of(SELECTION_INIT_STD * rng.sample::<f64, _>(StandardNormal))
                }),
                _ if name.ends_with(".gain") => Mat::filled(r, c, T::one()),
                _ if name.ends_with(".bias") => Mat::zeros(r, c),
                _ => {
                    let bound = 1.0 / libm::sqrt(r as f64);
                    Mat::from_fn(r, c, |_, _| T::of(rng.random_range(-bound..bound)))
                }
            };
            mats.push(m);
        }
        Ok(Self { config, mats })
    }

    /// Rebuilds a store from arrays in [`param_specs`] order, checking shapes.
    pub fn from_mats(config: ModelConfig, mats: Vec<Mat<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != mats.len() {
            return Err(Error::shape(
                format!("{} arrays", specs.len()),
                format!("{} arrays", mats.len()),
            ));
        }
        for ((name, shape), m) in specs.iter().zip(&mats) {
            if m.shape() != *shape {
                return Err(Error::shape(
                    format!("{name} {}x{}", shape.0, shape.1),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(Self { config, mats })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mats(&self) -> &[Mat<T>] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.mats
    }

    pub fn get(&self, index: usize) -> &Mat<T> {
        &self.mats[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Mat<T> {
        &mut self.mats[index]
    }

    pub fn names(&self) -> Vec<String> {
        param_specs(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn mask_embedding(&self) -> &Mat<T> {
        &self.mats[MASK_EMBEDDING]
    }

    pub fn pad_embedding(&self) -> &Mat<T> {
        &self.mats[PAD_EMBEDDING]
    }

    pub fn registers(&self) -> &Mat<T> {
        &self.mats[REGISTERS]
    }

    pub fn scalar_count(&self) -> usize {
        self.mats.iter().map(|m| m.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(Mat::is_finite)
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            config: self.config,
            mats: self.mats.iter().map(Mat::cast).collect(),
        }
    }
}

//! Toy dual-mode pre-training: synthetic periodic data, dynamic chunk
//! sampling, span masking, the dual objective and Adam updates.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::MaskingPlan;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::mat::Mat;
use crate::objective::{evaluate, BatchPlan, LossTerm, UtterancePlan};
use crate::params::{ModelConfig, Params};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub steps: usize,
    pub batch: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub chunk_min: usize,
    pub chunk_max: usize,
    /// Span-start probability `p`.
    pub mask_prob: f64,
    /// Span length `M`.
    pub mask_span: usize,
    pub lr_peak: f64,
    /// Fraction of `steps` spent warming up linearly to `lr_peak`.
    pub warmup_frac: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub data: DataConfig,
    /// Straight-through one-hot codes over Gumbel-perturbed logits. When
    /// false, targets mix codewords by the noise-free softmax; at toy scale
    /// hard codes tie often enough to cap accuracy near 0.2.
    pub hard_quantizer: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            steps: 500,
            batch: 8,
            frames_min: 48,
            frames_max: 48,
            chunk_min: 2,
            chunk_max: 32,
            mask_prob: 0.065,
            mask_span: 3,
            lr_peak: 1e-3,
            warmup_frac: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            data: DataConfig::default(),
            hard_quantizer: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.data.validate()?;
        if self.batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::invalid("frame range must satisfy 1 <= min <= max"));
        }
        if self.chunk_min == 0 || self.chunk_min > self.chunk_max {
            return Err(Error::invalid("chunk range must satisfy 1 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_span == 0 {
            return Err(Error::invalid("mask probability in [0, 1] and span >= 1"));
        }
        if !(self.lr_peak >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::invalid("learning rate >= 0 and warmup fraction in [0, 1]"));
        }
        Ok(())
    }

    /// Linear warmup to `lr_peak`, then linear decay to zero at `steps`.
    /// `step` is 1-based.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let total = self.steps.max(1) as f64;
        let warm = libm::round(self.warmup_frac * total).max(1.0);
        let s = step as f64;
        if s <= warm {
            self.lr_peak * s / warm
        } else {
            self.lr_peak * ((total - s) / (total - warm).max(1.0)).max(0.0)
        }
    }
}

/// One `(C, L)` draw: `C ~ U{min..=max}`, `L ~ U{0..=C}`.
pub fn sample_dynamic_config<R: Rng + ?Sized>(
    rng: &mut R,
    chunk_min: usize,
    chunk_max: usize,
) -> (usize, usize) {
    let c = rng.random_range(chunk_min..=chunk_max);
    let l = rng.random_range(0..=c);
    (c, l)
}

/// Every step starts a masked span of length `span` with probability `prob`;
/// overlapping spans merge and spans are clipped at `frames`.
pub fn sample_masking_plan<R: Rng + ?Sized>(
    frames: usize,
    prob: f64,
    span: usize,
    rng: &mut R,
) -> MaskingPlan {
    let mut hit = alloc::vec![false; frames];
    for s in 0..frames {
        if rng.random::<f64>() < prob {
            hit[s..(s + span).min(frames)].iter_mut().for_each(|h| *h = true);
        }
    }
    let masked = (1..=frames).filter(|&t| hit[t - 1]).collect();
    MaskingPlan::new(frames, masked).expect("indices in range")
}

/// Shape of the synthetic signal family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    /// Sinusoids per utterance; each contributes a sine and a cosine
    /// latent channel.
    pub tones: usize,
    /// Periods in frames are drawn uniformly from this range.
    pub period_min: f64,
    pub period_max: f64,
    /// Scale of the latent-to-frame projection.
    pub gain: f64,
    /// Standard deviation of additive frame noise; 0 gives exactly periodic
    /// latents.
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tones: 2,
            period_min: 24.0,
            period_max: 64.0,
            gain: 0.5,
            noise: 0.05,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tones == 0 {
            return Err(Error::invalid("at least one tone"));
        }
        if !(self.period_min > 0.0 && self.period_min < self.period_max) {
            return Err(Error::invalid("period range must satisfy 0 < min < max"));
        }
        if !(self.gain > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::invalid("gain > 0 and noise >= 0"));
        }
        Ok(())
    }
}

/// Sums of sinusoids projected to `width` dimensions, plus Gaussian noise.
/// The projection is fixed per source; periods, phases and amplitudes are
/// drawn per utterance.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    config: DataConfig,
    projection: Mat<f64>,
}

impl SyntheticSource {
    pub fn new(width: usize, config: DataConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = config.gain / libm::sqrt(config.tones as f64);
        let projection = Mat::from_fn(2 * config.tones, width, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Ok(Self { config, projection })
    }

    pub fn config(&self) -> &DataConfig {
        &self.config
    }

    pub fn utterance<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Mat<f64> {
        let cfg = &self.config;
        let tones: Vec<(f64, f64, f64)> = (0..cfg.tones)
            .map(|_| {
                let period = rng.random_range(cfg.period_min..cfg.period_max);
                let phase = rng.random_range(0.0..TAU);
                let amp = rng.random_range(0.5..1.5);
                (TAU / period, phase, amp)
            })
            .collect();
        let latent = Mat::from_fn(frames, 2 * cfg.tones, |t, j| {
            let (w, ph, a) = tones[j / 2];
            let angle = w * t as f64 + ph;
            a * if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) }
        });
        let mut x = latent.matmul(&self.projection);
        if cfg.noise > 0.0 {
            for v in x.as_mut_slice() {
                let z: f64 = StandardNormal.sample(rng);
                *v += cfg.noise * z;
            }
        }
        x
    }
}

/// `batch` utterances with lengths uniform in `frames`.
pub fn synth_batch<R: Rng + ?Sized>(
    source: &SyntheticSource,
    rng: &mut R,
    batch: usize,
    frames: (usize, usize),
) -> Vec<Mat<f64>> {
    (0..batch)
        .map(|_| {
            let t = rng.random_range(frames.0..=frames.1);
            source.utterance(t, rng)
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    first: Vec<Mat<f64>>,
    second: Vec<Mat<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(params: &Params<f64>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Mat<f64>> = params
            .mats()
            .iter()
            .map(|m| Mat::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn update(&mut self, params: &mut Params<f64>, grads: &[Option<Mat<f64>>], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.steps as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.steps as f64);
        for (i, p) in params.mats_mut().iter_mut().enumerate() {
            let g = grads[i].as_ref();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for k in 0..p.as_slice().len() {
                let gk = g.map_or(0.0, |g| g.as_slice()[k]);
                let mk = &mut m.as_mut_slice()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let vk = &mut v.as_mut_slice()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let step = lr * (*mk / c1) / (libm::sqrt(*vk / c2) + self.eps);
                p.as_mut_slice()[k] -= step;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub chunk: usize,
    pub lookahead: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
    pub accuracy_offline: f64,
    pub accuracy_online: f64,
    pub skipped: usize,
}

// RNG stream ids; each source of randomness gets its own stream so that runs
// differing only in R consume identical random numbers.
const DATA_STREAM: u64 = 10;
const CHUNK_STREAM: u64 = 11;
const MASK_STREAM: u64 = 12;
const DISTRACTOR_STREAM: u64 = 13;
const GUMBEL_STREAM: u64 = 14;
const SOURCE_SEED_OFFSET: u64 = 0x5eed;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct Trainer {
    config: TrainConfig,
    params: Params<f64>,
    adam: Adam,
    source: SyntheticSource,
    data_rng: ChaCha8Rng,
    chunk_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    distractor_rng: ChaCha8Rng,
    gumbel_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(config.model, config.seed)?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: TrainConfig, params: Params<f64>) -> Result<Self> {
        config.validate()?;
        if params.config() != &config.model {
            return Err(Error::invalid("parameter store was built for a different model"));
        }
        let seed = config.seed;
        Ok(Self {
            adam: Adam::new(&params, config.adam_beta1, config.adam_beta2, config.adam_eps),
            source: SyntheticSource::new(
                config.model.width,
                config.data,
                seed.wrapping_add(SOURCE_SEED_OFFSET),
            )?,
            params,
            data_rng: stream_rng(seed, DATA_STREAM),
            chunk_rng: stream_rng(seed, CHUNK_STREAM),
            mask_rng: stream_rng(seed, MASK_STREAM),
            distractor_rng: stream_rng(seed, DISTRACTOR_STREAM),
            gumbel_rng: stream_rng(seed, GUMBEL_STREAM),
            config,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<f64> {
        &self.params
    }

    pub fn into_params(self) -> Params<f64> {
        self.params
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws the next mini-batch: one `(C, L)`, frames, masks, distractors
    /// and Gumbel noise.
    pub fn next_batch(&mut self) -> BatchPlan<f64> {
        let cfg = &self.config;
        let (chunk, lookahead) =
            sample_dynamic_config(&mut self.chunk_rng, cfg.chunk_min, cfg.chunk_max);
        let frames = synth_batch(
            &self.source,
            &mut self.data_rng,
            cfg.batch,
            (cfg.frames_min, cfg.frames_max),
        );
        let utterances = frames
            .into_iter()
            .map(|x| {
                let masking =
                    sample_masking_plan(x.rows(), cfg.mask_prob, cfg.mask_span, &mut self.mask_rng);
                let noise = cfg.hard_quantizer.then_some(&mut self.gumbel_rng);
                sample_utterance(x, masking, cfg, &mut self.distractor_rng, noise)
            })
            .collect();
        BatchPlan {
            chunk,
            lookahead,
            utterances,
            hard_quantizer: cfg.hard_quantizer,
        }
    }

    /// One forward, backward and Adam update on `plan`.
    pub fn train_step(&mut self, plan: &BatchPlan<f64>) -> Result<StepReport> {
        self.step += 1;
        let lr = self.config.learning_rate(self.step);
        let eval = evaluate(&self.params, plan, &self.config.weights, Some(LossTerm::Total))
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(alloc::format!(
                    "{what} at step {} (C={}, L={})",
                    self.step,
                    plan.chunk,
                    plan.lookahead
                )),
                other => other,
            })?;
        let grads = eval.grads.expect("gradient requested");
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(alloc::format!(
                "gradient at step {} (C={}, L={})",
                self.step,
                plan.chunk,
                plan.lookahead
            )));
        }
        self.adam.update(&mut self.params, &grads, lr);
        if !self.params.is_finite() {
            return Err(Error::NonFinite(String::from("parameters after update")));
        }
        Ok(StepReport {
            step: self.step,
            chunk: plan.chunk,
            lookahead: plan.lookahead,
            learning_rate: lr,
            loss: eval.breakdown,
            accuracy_offline: eval.accuracy_offline,
            accuracy_online: eval.accuracy_online,
            skipped: eval.skipped,
        })
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let plan = self.next_batch();
        self.train_step(&plan)
    }
}

fn sample_utterance(
    frames: Mat<f64>,
    masking: MaskingPlan,
    cfg: &TrainConfig,
    distractor_rng: &mut ChaCha8Rng,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> UtterancePlan<f64> {
    UtterancePlan::sample(
        frames,
        masking,
        cfg.weights.distractors,
        cfg.model.codebook_size(),
        distractor_rng,
        noise_rng,
    )
}

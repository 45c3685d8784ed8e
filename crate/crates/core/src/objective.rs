//! The full dual-mode pre-training objective for a batch, built on the tape.

use alloc::vec::Vec;

use rand::Rng;

use crate::config::StreamConfig;
use crate::encoder::{encode_dual_on_tape, BoundParams, DualNodes, MaskingPlan};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_accuracy, contrastive_on_tape, future_prediction_on_tape, future_target_rows,
    sample_distractors, total_loss, LossBreakdown, LossWeights,
};
use crate::mat::{Mat, Real};
use crate::params::Params;
use crate::quantizer::{gumbel_noise, quantize_on_tape};
use crate::tape::{Tape, Var};

/// Every random choice behind one utterance's loss, fixed up front so the
/// objective is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct UtterancePlan<T> {
    pub frames: Mat<T>,
    pub masking: MaskingPlan,
    /// For masked step `j` (row `j` of the targets), the target rows used as
    /// distractors. Empty when fewer than two steps are masked.
    pub distractors: Vec<Vec<usize>>,
    /// Gumbel noise for the masked steps, `|T_M| × G·V`; `None` disables it.
    pub noise: Option<Mat<T>>,
}

impl<T: Real> UtterancePlan<T> {
    /// Draws distractors and Gumbel noise for a given masking plan.
    pub fn sample<R: Rng + ?Sized>(
        frames: Mat<T>,
        masking: MaskingPlan,
        distractors: usize,
        codebook_size: usize,
        distractor_rng: &mut R,
        noise_rng: Option<&mut R>,
    ) -> Self {
        let masked = masking.masked();
        let distractors = if masked.len() >= 2 {
            masked
                .iter()
                .map(|&t| {
                    sample_distractors(masked, t, distractors, distractor_rng)
                        .expect("two or more masked steps")
                        .into_iter()
                        .map(|s| masked.binary_search(&s).expect("distractor is masked"))
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        let noise = noise_rng.map(|r| gumbel_noise(masked.len(), codebook_size, r));
        Self {
            frames,
            masking,
            distractors,
            noise,
        }
    }

    pub fn contrastive_defined(&self) -> bool {
        self.masking.len() >= 2
    }
}

/// A mini-batch sharing one `(C, L)` draw.
#[derive(Clone, Debug)]
pub struct BatchPlan<T> {
    pub chunk: usize,
    pub lookahead: usize,
    pub utterances: Vec<UtterancePlan<T>>,
    /// Straight-through hard selection in the quantizer.
    pub hard_quantizer: bool,
}

/// Values of every stop-gradient quantity, per utterance: the online-path
/// targets and the future-prediction targets of each chunk. Feeding them back
/// as constants turns the objective into a function whose ordinary derivative
/// is the stop-gradient derivative, which finite differences can check.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen<T> {
    pub online_targets: Vec<Option<Mat<T>>>,
    pub futures: Vec<Vec<Mat<T>>>,
}

pub struct UtteranceNodes {
    pub dual: DualNodes,
    /// Encoder outputs at the masked steps, offline and online.
    pub offline_masked: Option<Var>,
    pub online_masked: Option<Var>,
    pub targets: Option<Var>,
}

/// Scalar loss nodes (batch means) plus the per-utterance intermediates.
pub struct ObjectiveNodes {
    pub offline: Var,
    pub online: Var,
    pub diversity: Var,
    pub future: Var,
    pub dual: Var,
    pub total: Var,
    pub utterances: Vec<UtteranceNodes>,
    /// Utterances whose contrastive terms were skipped (`|T_M| < 2`).
    pub skipped: usize,
}

fn add_opt<T: Real>(tape: &mut Tape<T>, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => tape.add(a, v),
        None => v,
    })
}

fn mean_or_zero<T: Real>(tape: &mut Tape<T>, sum: Option<Var>, n: usize) -> Var {
    match sum {
        Some(s) => tape.scale(s, T::of(1.0 / n as f64)),
        None => tape.leaf(Mat::zeros(1, 1)),
    }
}

pub fn build_objective<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    plan: &BatchPlan<T>,
    weights: &LossWeights,
    frozen: Option<&Frozen<T>>,
) -> Result<ObjectiveNodes> {
    weights.validate()?;
    if plan.utterances.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(f) = frozen {
        if f.online_targets.len() != plan.utterances.len() || f.futures.len() != plan.utterances.len() {
            return Err(Error::invalid("frozen values do not match the batch"));
        }
    }
    let cfg = params.config;
    let batch = plan.utterances.len();
    let (mut off_sum, mut on_sum, mut fp_sum) = (None, None, None);
    let mut probs = Vec::new();
    let mut nodes = Vec::with_capacity(batch);
    let mut skipped = 0;

    for (u, utt) in plan.utterances.iter().enumerate() {
        let stream = StreamConfig::new(
            utt.frames.rows(),
            plan.chunk,
            plan.lookahead,
            cfg.registers,
            cfg.width,
        )?;
        let frames = tape.leaf(utt.frames.clone());
        let dual = encode_dual_on_tape(tape, frames, &utt.masking, &stream, params)?;

        let futures: Vec<Var> = (1..=dual.layout.num_chunks())
            .map(|i| match frozen {
                Some(f) => tape.leaf(f.futures[u][i - 1].clone()),
                None => {
                    let rows: Vec<usize> = future_target_rows(&stream, i).collect();
                    let f = tape.select_rows(dual.offline, &rows);
                    tape.detach(f)
                }
            })
            .collect();
        if let Some(fp) = future_prediction_on_tape(tape, &dual.registers, &futures) {
            fp_sum = add_opt(tape, fp_sum, fp);
        }

        let rows = utt.masking.rows();
        let mut un = UtteranceNodes {
            dual,
            offline_masked: None,
            online_masked: None,
            targets: None,
        };
        if !rows.is_empty() {
            let feats = tape.select_rows(frames, &rows);
            let q = quantize_on_tape(tape, feats, params, utt.noise.as_ref(), plan.hard_quantizer);
            probs.push(q.probs);
            un.targets = Some(q.targets);
            if utt.contrastive_defined() {
                let y_off = tape.select_rows(un.dual.offline, &rows);
                let y_on = tape.select_rows(un.dual.online, &rows);
                let l_off =
                    contrastive_on_tape(tape, y_off, q.targets, &utt.distractors, weights.kappa, false);
                let q_on = match frozen.and_then(|f| f.online_targets[u].as_ref()) {
                    Some(m) => tape.leaf(m.clone()),
                    None => q.targets,
                };
                let l_on =
                    contrastive_on_tape(tape, y_on, q_on, &utt.distractors, weights.kappa, true);
                off_sum = add_opt(tape, off_sum, l_off);
                on_sum = add_opt(tape, on_sum, l_on);
                un.offline_masked = Some(y_off);
                un.online_masked = Some(y_on);
            } else {
                skipped += 1;
            }
        } else {
            skipped += 1;
        }
        nodes.push(un);
    }
    if skipped > 0 {
        log::warn!("{skipped} of {batch} utterances had fewer than two masked steps; contrastive terms skipped");
    }

    let offline = mean_or_zero(tape, off_sum, batch);
    let online = mean_or_zero(tape, on_sum, batch);
    let future = mean_or_zero(tape, fp_sum, batch);
    let diversity = if probs.is_empty() {
        tape.leaf(Mat::zeros(1, 1))
    } else {
        let all = tape.vstack(&probs);
        let mean = tape.mean_rows(all);
        tape.diversity(mean, cfg.groups)
    };
    let both = tape.add(offline, online);
    let half = tape.scale(both, T::of(0.5));
    let div = tape.scale(diversity, T::of(weights.alpha));
    let dual = tape.add(half, div);
    let fp = tape.scale(future, T::of(weights.beta));
    let total = tape.add(dual, fp);
    Ok(ObjectiveNodes {
        offline,
        online,
        diversity,
        future,
        dual,
        total,
        utterances: nodes,
        skipped,
    })
}

/// Which scalar to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Total,
    Dual,
    Offline,
    Online,
    Diversity,
    Future,
}

#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub breakdown: LossBreakdown,
    /// Gradient per parameter array; `None` where no gradient path exists.
    pub grads: Option<Vec<Option<Mat<T>>>>,
    pub accuracy_offline: f64,
    pub accuracy_online: f64,
    pub skipped: usize,
}

/// Evaluates the objective and, when `grad_of` is given, its gradient with
/// respect to every parameter array.
pub fn evaluate<T: Real>(
    params: &Params<T>,
    plan: &BatchPlan<T>,
    weights: &LossWeights,
    grad_of: Option<LossTerm>,
) -> Result<Evaluation<T>> {
    evaluate_frozen(params, plan, weights, grad_of, None)
}

/// The stop-gradient quantities of `plan` at `params`.
pub fn freeze<T: Real>(params: &Params<T>, plan: &BatchPlan<T>, weights: &LossWeights) -> Result<Frozen<T>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let obj = build_objective(&mut tape, &bound, plan, weights, None)?;
    let mut online_targets = Vec::with_capacity(obj.utterances.len());
    let mut futures = Vec::with_capacity(obj.utterances.len());
    for (un, utt) in obj.utterances.iter().zip(&plan.utterances) {
        online_targets.push(un.targets.map(|q| tape.value(q).clone()));
        let stream = StreamConfig::new(
            utt.frames.rows(),
            plan.chunk,
            plan.lookahead,
            params.config().registers,
            params.config().width,
        )?;
        let offline = tape.value(un.dual.offline);
        futures.push(
            (1..=un.dual.layout.num_chunks())
                .map(|i| {
                    let rows: Vec<usize> = future_target_rows(&stream, i).collect();
                    offline.select_rows(&rows)
                })
                .collect(),
        );
    }
    Ok(Frozen {
        online_targets,
        futures,
    })
}

/// [`evaluate`] with the stop-gradient quantities optionally replaced by
/// constants from [`freeze`].
pub fn evaluate_frozen<T: Real>(
    params: &Params<T>,
    plan: &BatchPlan<T>,
    weights: &LossWeights,
    grad_of: Option<LossTerm>,
    frozen: Option<&Frozen<T>>,
) -> Result<Evaluation<T>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let obj = build_objective(&mut tape, &bound, plan, weights, frozen)?;
    let breakdown = total_loss(
        tape.scalar(obj.offline).to_f64(),
        tape.scalar(obj.online).to_f64(),
        tape.scalar(obj.diversity).to_f64(),
        tape.scalar(obj.future).to_f64(),
        weights,
    )?;

    let (mut acc_off, mut acc_on, mut counted) = (0.0, 0.0, 0usize);
    for (un, utt) in obj.utterances.iter().zip(&plan.utterances) {
        if let (Some(yo), Some(yn), Some(q)) = (un.offline_masked, un.online_masked, un.targets) {
            let q = tape.value(q);
            acc_off += contrastive_accuracy(tape.value(yo), q, &utt.distractors)?;
            acc_on += contrastive_accuracy(tape.value(yn), q, &utt.distractors)?;
            counted += 1;
        }
    }
    let denom = counted.max(1) as f64;

    let grads = grad_of.map(|term| {
        let root = match term {
            LossTerm::Total => obj.total,
            LossTerm::Dual => obj.dual,
            LossTerm::Offline => obj.offline,
            LossTerm::Online => obj.online,
            LossTerm::Diversity => obj.diversity,
            LossTerm::Future => obj.future,
        };
        tape.backward(root);
        bound.vars.iter().map(|&v| tape.grad(v).cloned()).collect()
    });
    Ok(Evaluation {
        breakdown,
        grads,
        accuracy_offline: acc_off / denom,
        accuracy_online: acc_on / denom,
        skipped: obj.skipped,
    })
}

//! Contrastive, diversity and future-prediction terms and their combination.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::config::StreamConfig;
use crate::error::{Error, Result};
use crate::mat::{dot, Mat, Real};
use crate::tape::{CeItem, Tape, Var};

/// Norm offset used by every cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Diversity weight `α`.
    pub alpha: f64,
    /// Future-prediction weight `β`.
    pub beta: f64,
    /// Contrastive temperature `κ`.
    pub kappa: f64,
    /// Distractors per masked step `K`.
    pub distractors: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            kappa: 0.1,
            distractors: 10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.distractors == 0 {
            return Err(Error::invalid("need at least one distractor"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub offline: f64,
    pub online: f64,
    pub diversity: f64,
    pub future: f64,
    pub dual: f64,
    pub total: f64,
}

/// `L_dual = ½(L_off + L_on) + α·L_d`, `L_total = L_dual + β·L_fp`.
pub fn total_loss(
    offline: f64,
    online: f64,
    diversity: f64,
    future: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("L_off", offline),
        ("L_on", online),
        ("L_d", diversity),
        ("L_fp", future),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(String::from(name)));
        }
    }
    let dual = 0.5 * (offline + online) + weights.alpha * diversity;
    Ok(LossBreakdown {
        offline,
        online,
        diversity,
        future,
        dual,
        total: dual + weights.beta * future,
    })
}

/// Draws up to `k` distinct masked steps other than `target`, uniformly
/// without replacement. When fewer than `k` are available all are returned.
pub fn sample_distractors<R: Rng + ?Sized>(
    masked: &[usize],
    target: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if masked.len() < 2 {
        return Err(Error::invalid("contrastive loss needs at least two masked steps"));
    }
    let pool: Vec<usize> = masked.iter().copied().filter(|&t| t != target).collect();
    if pool.len() <= k {
        return Ok(pool);
    }
    Ok(sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
}

#[inline]
fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let eps = T::of(COSINE_EPS);
    let na = dot(a, a).sqrt() + eps;
    let nb = dot(b, b).sqrt() + eps;
    dot(a, b) / (na * nb)
}

/// Row `j` of `outputs` is scored against row `j` of `targets` (positive) and
/// the target rows listed in `distractors[j]`.
fn check_pairs<T: Real>(outputs: &Mat<T>, targets: &Mat<T>, distractors: &[Vec<usize>]) -> Result<()> {
    if outputs.rows() != targets.rows() || outputs.rows() != distractors.len() {
        return Err(Error::shape(
            alloc::format!("{} outputs, targets and distractor sets", outputs.rows()),
            alloc::format!(
                "{} targets, {} distractor sets",
                targets.rows(),
                distractors.len()
            ),
        ));
    }
    if distractors.iter().flatten().any(|&r| r >= targets.rows()) {
        return Err(Error::invalid("distractor index out of range"));
    }
    Ok(())
}

/// `-Σ_j log softmax_κ(cos(y_j, ·))[q_j]` over `{q_j} ∪ distractors[j]`.
pub fn contrastive_loss<T: Real>(
    outputs: &Mat<T>,
    targets: &Mat<T>,
    distractors: &[Vec<usize>],
    kappa: f64,
) -> Result<T> {
    check_pairs(outputs, targets, distractors)?;
    let inv = T::of(1.0 / kappa);
    let mut total = T::zero();
    for (j, ds) in distractors.iter().enumerate() {
        let y = outputs.row(j);
        let pos = cosine(y, targets.row(j)) * inv;
        let logits: Vec<T> = core::iter::once(pos)
            .chain(ds.iter().map(|&r| cosine(y, targets.row(r)) * inv))
            .collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
        total += lse - pos;
    }
    Ok(total)
}

/// Tape form of [`contrastive_loss`]. With `sever_targets` the targets enter
/// through a detached copy, so no gradient reaches whatever produced them.
pub fn contrastive_on_tape<T: Real>(
    tape: &mut Tape<T>,
    outputs: Var,
    targets: Var,
    distractors: &[Vec<usize>],
    kappa: f64,
    sever_targets: bool,
) -> Var {
    let targets = if sever_targets {
        tape.detach(targets)
    } else {
        targets
    };
    let eps = T::of(COSINE_EPS);
    let yu = tape.row_unit(outputs, eps);
    let qu = tape.row_unit(targets, eps);
    let sim = tape.matmul_t(yu, qu);
    let logits = tape.scale(sim, T::of(1.0 / kappa));
    let items = distractors
        .iter()
        .enumerate()
        .map(|(j, ds)| CeItem {
            row: j,
            target: j,
            candidates: core::iter::once(j).chain(ds.iter().copied()).collect(),
        })
        .collect();
    tape.cross_entropy(logits, items)
}

/// Fraction of rows whose own target strictly beats every distractor in
/// cosine similarity; ties count as misses.
pub fn contrastive_accuracy<T: Real>(
    outputs: &Mat<T>,
    targets: &Mat<T>,
    distractors: &[Vec<usize>],
) -> Result<f64> {
    check_pairs(outputs, targets, distractors)?;
    if distractors.is_empty() {
        return Ok(0.0);
    }
    let hits = distractors
        .iter()
        .enumerate()
        .filter(|(j, ds)| {
            let y = outputs.row(*j);
            let pos = cosine(y, targets.row(*j));
            ds.iter().all(|&r| pos > cosine(y, targets.row(r)))
        })
        .count();
    Ok(hits as f64 / distractors.len() as f64)
}

/// 0-based offline rows of `Û_i`: times `iC+L+1 ..= iC+L+R`, clipped to `T`.
pub fn future_target_rows(config: &StreamConfig, chunk: usize) -> core::ops::Range<usize> {
    let start = chunk * config.chunk + config.lookahead;
    let end = (start + config.registers).min(config.frames);
    start.min(end)..end
}

/// `Û_i` taken from the offline output.
pub fn future_targets<T: Real>(offline: &Mat<T>, config: &StreamConfig, chunk: usize) -> Result<Mat<T>> {
    if offline.rows() != config.frames {
        return Err(Error::shape(
            alloc::format!("{} offline rows", config.frames),
            alloc::format!("{}", offline.rows()),
        ));
    }
    let rows: Vec<usize> = future_target_rows(config, chunk).collect();
    Ok(offline.select_rows(&rows))
}

/// `Σ_i MSE(U_i, Û_i)`, pairing leading rows; chunks with empty `Û_i` add 0.
pub fn future_prediction_loss<T: Real>(registers: &[Mat<T>], futures: &[Mat<T>]) -> Result<T> {
    if registers.len() != futures.len() {
        return Err(Error::shape(
            alloc::format!("{} register blocks", registers.len()),
            alloc::format!("{} future blocks", futures.len()),
        ));
    }
    let mut total = T::zero();
    for (u, f) in registers.iter().zip(futures) {
        if f.rows() == 0 {
            continue;
        }
        if f.rows() > u.rows() || f.cols() != u.cols() {
            return Err(Error::shape(
                alloc::format!("at most {} future rows of width {}", u.rows(), u.cols()),
                alloc::format!("{}x{}", f.rows(), f.cols()),
            ));
        }
        let n = T::of((f.rows() * f.cols()) as f64);
        let sq: T = (0..f.rows())
            .flat_map(|r| u.row(r).iter().zip(f.row(r)).map(|(&a, &b)| (a - b) * (a - b)))
            .sum();
        total += sq / n;
    }
    Ok(total)
}

/// Tape form of the future-prediction loss. `futures` are used as given; the
/// caller decides whether they are detached.
pub fn future_prediction_on_tape<T: Real>(
    tape: &mut Tape<T>,
    registers: &[Var],
    futures: &[Var],
) -> Option<Var> {
    let mut total: Option<Var> = None;
    for (&u, &f) in registers.iter().zip(futures) {
        let (k, d) = tape.value(f).shape();
        if k == 0 {
            continue;
        }
        let lead: Vec<usize> = (0..k).collect();
        let u = tape.select_rows(u, &lead);
        let diff = tape.sub(u, f);
        let sq = tape.mul(diff, diff);
        let s = tape.sum(sq);
        let mse = tape.scale(s, T::of(1.0 / (k * d) as f64));
        total = Some(match total {
            Some(acc) => tape.add(acc, mse),
            None => mse,
        });
    }
    total
}

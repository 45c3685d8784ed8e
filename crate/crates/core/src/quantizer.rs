//! Gumbel-softmax product quantizer producing contrastive targets, and the
//! codebook diversity penalty.

use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::BoundParams;
use crate::error::{Error, Result};
use crate::mat::{Mat, Real};
use crate::params::Params;
use crate::tape::{diversity_value, Tape, Var};

/// Standard Gumbel samples `-ln(-ln u)`.
pub fn gumbel_noise<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| {
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let e = (-libm::log(u)).max(f64::MIN_POSITIVE);
        T::of(-libm::log(e))
    })
}

/// Tape nodes of one quantizer pass.
pub struct QuantNodes {
    /// Targets `q_t`, one row per input row, width `d`.
    pub targets: Var,
    /// Noise-free per-group softmax of the logits, for the diversity loss.
    pub probs: Var,
}

/// Quantizes `features` on the tape. With `hard`, the forward value is the
/// one-hot argmax per group and the backward pass uses the soft relaxation.
pub fn quantize_on_tape<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    params: &BoundParams,
    noise: Option<&Mat<T>>,
    hard: bool,
) -> QuantNodes {
    let cfg = params.config;
    let ix = cfg.quantizer();
    let (g, v) = (cfg.groups, cfg.entries);
    let logits = tape.matmul(features, params.var(ix.logits_weight));
    let logits = tape.add_row(logits, params.var(ix.logits_bias));
    let probs = tape.group_softmax(logits, g);

    let perturbed = match noise {
        Some(n) => {
            let nv = tape.leaf(n.clone());
            tape.add(logits, nv)
        }
        None => logits,
    };
    let scaled = tape.scale(perturbed, T::of(1.0 / cfg.gumbel_tau));
    let soft = tape.group_softmax(scaled, g);
    let selection = if hard {
        let s = tape.value(soft);
        let one_hot = Mat::from_fn(s.rows(), s.cols(), |r, c| {
            let grp = c / v;
            if argmax(&s.row(r)[grp * v..(grp + 1) * v]) == c - grp * v {
                T::one()
            } else {
                T::zero()
            }
        });
        tape.straight_through(one_hot, soft)
    } else {
        soft
    };

    let codebook = params.var(ix.codebook);
    let mut codes = Vec::with_capacity(g);
    for grp in 0..g {
        let sel = tape.columns(selection, grp * v, v);
        let rows: Vec<usize> = (grp * v..(grp + 1) * v).collect();
        let book = tape.select_rows(codebook, &rows);
        codes.push(tape.matmul(sel, book));
    }
    let code = tape.hstack(&codes);
    let q = tape.matmul(code, params.var(ix.proj_weight));
    let targets = tape.add_row(q, params.var(ix.proj_bias));
    QuantNodes { targets, probs }
}

fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Plain-value quantizer output.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<T> {
    pub targets: Mat<T>,
    /// Noise-free per-group selection probabilities, `rows × G·V`.
    pub probs: Mat<T>,
    /// Chosen entry per row and group.
    pub codes: Vec<Vec<usize>>,
}

/// Quantizes feature rows. Without an RNG no Gumbel noise is added, so hard
/// selection is the per-group argmax of the logits.
pub fn quantize<T: Real, R: Rng + ?Sized>(
    features: &Mat<T>,
    params: &Params<T>,
    rng: Option<&mut R>,
    hard: bool,
) -> Result<Quantized<T>> {
    let cfg = params.config();
    if features.cols() != cfg.width {
        return Err(Error::shape(
            alloc::format!("width {}", cfg.width),
            alloc::format!("width {}", features.cols()),
        ));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite(alloc::string::String::from("quantizer features")));
    }
    let noise = rng.map(|r| gumbel_noise(features.rows(), cfg.codebook_size(), r));
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let x = tape.leaf(features.clone());
    let nodes = quantize_on_tape(&mut tape, x, &bound, noise.as_ref(), hard);
    let probs = tape.value(nodes.probs).clone();
    let v = cfg.entries;
    let ix = cfg.quantizer();
    let mut sel = features.matmul(params.get(ix.logits_weight));
    sel.add_row_broadcast(params.get(ix.logits_bias));
    if let Some(n) = &noise {
        sel.add_assign(n);
    }
    let codes = (0..sel.rows())
        .map(|r| {
            (0..cfg.groups)
                .map(|g| argmax(&sel.row(r)[g * v..(g + 1) * v]))
                .collect()
        })
        .collect();
    Ok(Quantized {
        targets: tape.value(nodes.targets).clone(),
        probs,
        codes,
    })
}

/// `(G·V − Σ_g exp H(p̄_g)) / (G·V)` over the row-averaged group distributions.
pub fn diversity_loss<T: Real>(probs: &Mat<T>, groups: usize) -> Result<T> {
    if groups == 0 || probs.cols() % groups != 0 || probs.rows() == 0 {
        return Err(Error::invalid("probabilities must be rows x (G*V) with G | cols"));
    }
    let v = probs.cols() / groups;
    let tol = T::of(1e-6);
    for r in 0..probs.rows() {
        for g in 0..groups {
            let block = &probs.row(r)[g * v..(g + 1) * v];
            let s: T = block.iter().copied().sum();
            if block.iter().any(|&p| !(p >= T::zero())) || (s - T::one()).abs() > tol {
                return Err(Error::invalid(alloc::format!(
                    "row {r} group {g} is not a probability distribution"
                )));
            }
        }
    }
    let n = T::of(probs.rows() as f64);
    let mean: Vec<T> = (0..probs.cols())
        .map(|c| (0..probs.rows()).map(|r| probs.get(r, c)).sum::<T>() / n)
        .collect();
    Ok(diversity_value(&mean, groups))
}

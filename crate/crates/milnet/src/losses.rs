//! Bag-level losses for training the frame detector from clip labels, plus
//! plain binary cross-entropy for the tagger.
//!
//! A recording is treated as a *bag* of frame *instances*: the clip label
//! `y ∈ {0,1}` attaches to the bag, while the detector emits one prediction
//! per frame. Each loss here maps a masked prediction vector and a bag label
//! to a scalar on the tape, so gradients flow through the standard backward
//! pass.
//!
//! The available bag losses:
//!
//! - [`loss_false_strong`] — copy the bag label to every frame and average
//!   the per-frame cross-entropies.
//! - [`loss_max_squared`] — ½·(maxⱼ oⱼ − y)²; only the winning frame
//!   receives gradient.
//! - [`loss_noisy_or`] — cross-entropy of the noisy-or bag probability
//!   1 − Πⱼ(1 − oⱼ) against the bag label.
//! - [`loss_mmm`] — the mean of three cross-entropies: max against `y`,
//!   mean against `y/2`, and min against `0`. Every frame stays in the
//!   gradient through the mean term, and positive bags are pushed to span
//!   the full prediction range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// Predictions are clipped into `[EPS, 1-EPS]` before any logarithm.
pub const EPS: f64 = 1e-7;

/// Fraction of the bag label used as the target of the mean term in
/// [`loss_mmm`]. The default of one half encodes the assumption that events
/// cover roughly half of a positive recording.
pub const DEFAULT_MEAN_TARGET_FRACTION: f64 = 0.5;

/// Which bag loss trains the frame detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WhenLoss {
    /// Max + mean + min compound loss.
    #[default]
    Mmm,
    /// Squared divergence of the bag maximum.
    Max,
    /// Cross-entropy of the noisy-or pooled probability.
    #[serde(rename = "noisyor")]
    NoisyOr,
    /// Bag label copied to every frame.
    FalseStrong,
}

impl WhenLoss {
    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "mmm" => Ok(WhenLoss::Mmm),
            "max" => Ok(WhenLoss::Max),
            "noisyor" => Ok(WhenLoss::NoisyOr),
            "false_strong" => Ok(WhenLoss::FalseStrong),
            other => Err(Error::Train(format!(
                "unknown loss token `{other}` (expected mmm, max, noisyor or false_strong)"
            ))),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            WhenLoss::Mmm => "mmm",
            WhenLoss::Max => "max",
            WhenLoss::NoisyOr => "noisyor",
            WhenLoss::FalseStrong => "false_strong",
        }
    }
}

fn check_target(y: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::Train(format!(
            "cross-entropy target {y} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Binary cross-entropy of a scalar prediction against a constant target in
/// `[0, 1]`: `−(y·ln x + (1−y)·ln(1−x))` with the prediction clipped into
/// `[EPS, 1−EPS]`.
pub fn bce<E: Element>(tape: &mut Tape<E>, x: Var, y: f64) -> Result<Var> {
    check_target(y)?;
    let xc = tape.clamp(x, EPS, 1.0 - EPS);
    let ln_x = tape.ln(xc);
    let one_minus = tape.affine(xc, -1.0, 1.0);
    let ln_1mx = tape.ln(one_minus);
    // −y·ln x − (1−y)·ln(1−x)
    let a = tape.affine(ln_x, -y, 0.0);
    let b = tape.affine(ln_1mx, y - 1.0, 0.0);
    Ok(tape.add(a, b)?)
}

/// Elementwise binary cross-entropy against a constant tensor of targets,
/// reduced to the mean. Used for the tagger's multi-label output.
pub fn bce_mean_vs_targets<E: Element>(tape: &mut Tape<E>, x: Var, targets: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    if tape.value(targets).numel() != n {
        return Err(Error::Train(format!(
            "prediction/target length mismatch: {} vs {}",
            n,
            tape.value(targets).numel()
        )));
    }
    let xc = tape.clamp(x, EPS, 1.0 - EPS);
    let ln_x = tape.ln(xc);
    let one_minus_x = tape.affine(xc, -1.0, 1.0);
    let ln_1mx = tape.ln(one_minus_x);
    let one_minus_y = tape.affine(targets, -1.0, 1.0);
    let pos = tape.mul(ln_x, targets)?;
    let neg = tape.mul(ln_1mx, one_minus_y)?;
    let sum = tape.add(pos, neg)?;
    let total = tape.sum_all(sum);
    Ok(tape.affine(total, -1.0 / n as f64, 0.0))
}

/// Mean over instances of the cross-entropy against the bag label copied to
/// every instance.
pub fn loss_false_strong<E: Element>(tape: &mut Tape<E>, bag: Var, y: f64) -> Result<Var> {
    check_target(y)?;
    let xc = tape.clamp(bag, EPS, 1.0 - EPS);
    let ln_x = tape.ln(xc);
    let one_minus = tape.affine(xc, -1.0, 1.0);
    let ln_1mx = tape.ln(one_minus);
    let a = tape.affine(ln_x, -y, 0.0);
    let b = tape.affine(ln_1mx, y - 1.0, 0.0);
    let per_instance = tape.add(a, b)?;
    let m = tape.value(bag).numel();
    let total = tape.sum_all(per_instance);
    Ok(tape.affine(total, 1.0 / m as f64, 0.0))
}

/// Squared bag divergence `½·(maxⱼ oⱼ − y)²`. Gradient reaches exactly one
/// instance: the first maximal one.
pub fn loss_max_squared<E: Element>(tape: &mut Tape<E>, bag: Var, y: f64) -> Result<Var> {
    check_target(y)?;
    let flat = flatten(tape, bag)?;
    let m = tape.reduce_max(flat, 0)?;
    let d = tape.affine(m, 1.0, -y);
    let sq = tape.mul(d, d)?;
    Ok(tape.affine(sq, 0.5, 0.0))
}

/// Noisy-or pooled bag probability `1 − Πⱼ(1 − oⱼ)`, computed in the log
/// domain for a differentiable product.
pub fn noisy_or<E: Element>(tape: &mut Tape<E>, bag: Var) -> Result<Var> {
    let flat = flatten(tape, bag)?;
    let one_minus = tape.affine(flat, -1.0, 1.0);
    let clipped = tape.clamp(one_minus, EPS, 1.0);
    let logs = tape.ln(clipped);
    let log_prod = tape.sum_all(logs);
    let prod = tape.exp(log_prod);
    Ok(tape.affine(prod, -1.0, 1.0))
}

/// Cross-entropy of the noisy-or bag probability against the bag label.
pub fn loss_noisy_or<E: Element>(tape: &mut Tape<E>, bag: Var, y: f64) -> Result<Var> {
    let p = noisy_or(tape, bag)?;
    bce(tape, p, y)
}

/// The compound bag loss
/// `(bce(max, y) + bce(mean, f·y) + bce(min, 0)) / 3`, with `f` the mean
/// target fraction (one half by default). For a negative bag all three
/// targets collapse to zero; for a positive bag the three terms pull the
/// predictions apart to span the full range.
pub fn loss_mmm<E: Element>(
    tape: &mut Tape<E>,
    bag: Var,
    y: f64,
    mean_target_fraction: f64,
) -> Result<Var> {
    check_target(y)?;
    let flat = flatten(tape, bag)?;
    let mx = tape.reduce_max(flat, 0)?;
    let mean = tape.reduce_mean(flat, 0)?;
    let mn = tape.reduce_min(flat, 0)?;
    let t_max = bce(tape, mx, y)?;
    let t_mean = bce(tape, mean, mean_target_fraction * y)?;
    let t_min = bce(tape, mn, 0.0)?;
    let s = tape.add(t_max, t_mean)?;
    let s = tape.add(s, t_min)?;
    Ok(tape.affine(s, 1.0 / 3.0, 0.0))
}

/// Dispatch on the configured bag loss.
pub fn when_bag_loss<E: Element>(
    tape: &mut Tape<E>,
    kind: WhenLoss,
    bag: Var,
    y: f64,
    mean_target_fraction: f64,
) -> Result<Var> {
    match kind {
        WhenLoss::Mmm => loss_mmm(tape, bag, y, mean_target_fraction),
        WhenLoss::Max => loss_max_squared(tape, bag, y),
        WhenLoss::NoisyOr => loss_noisy_or(tape, bag, y),
        WhenLoss::FalseStrong => loss_false_strong(tape, bag, y),
    }
}

fn flatten<E: Element>(tape: &mut Tape<E>, v: Var) -> Result<Var> {
    let n = tape.value(v).numel();
    if tape.value(v).shape().len() == 1 {
        return Ok(v);
    }
    Ok(tape.reshape(v, vec![n])?)
}

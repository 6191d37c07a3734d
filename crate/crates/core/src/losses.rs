//! Probability normalisers and loss functions, on the tape.
//!
//! Probability-based losses take a 1×n row of probabilities and clamp
//! logarithms at [`LOG_FLOOR`].

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var, LOG_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    Softmax,
    SigSoftmax,
}

impl Normalizer {
    pub fn apply(self, tape: &mut Tape, logits: Var) -> Var {
        match self {
            Normalizer::Softmax => tape.softmax(logits, None),
            Normalizer::SigSoftmax => sigsoftmax(tape, logits),
        }
    }

    pub fn values(self, logits: &[f64]) -> Vec<f64> {
        let adj: Vec<f64> = match self {
            Normalizer::Softmax => logits.to_vec(),
            Normalizer::SigSoftmax => logits.iter().map(|&x| x + log_sigmoid(x)).collect(),
        };
        let m = adj.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = adj.iter().map(|&x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row-wise `exp(xᵢ)σ(xᵢ) / Σⱼ exp(xⱼ)σ(xⱼ)`.
pub fn sigsoftmax(tape: &mut Tape, logits: Var) -> Var {
    let ls = tape.log_sigmoid(logits);
    let adj = tape.add(logits, ls);
    tape.softmax(adj, None)
}

/// Row-wise log-softmax, stabilised by the (detached) row maximum.
pub fn log_softmax(tape: &mut Tape, logits: Var) -> Var {
    let x = tape.value(logits);
    let max = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| -x.row(i).fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    let shifted = tape.add_const(logits, &max);
    let e = tape.exp(shifted);
    let s = tape.row_sum(e);
    let lse = tape.log(s);
    let neg = tape.neg(lse);
    tape.add_col(shifted, neg)
}

fn one_hot_matrix(rows: usize, cols: usize, targets: &[usize], weight: f64) -> Arc<Array2<f64>> {
    let mut m = Array2::zeros((rows, cols));
    for (r, &t) in targets.iter().enumerate() {
        m[[r, t]] = weight;
    }
    Arc::new(m)
}

/// Mean cross-entropy of softmax(logits) rows against integer targets.
pub fn ce_from_logits(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let (m, n) = tape.shape(logits);
    let lp = log_softmax(tape, logits);
    let picked = tape.mul_const(lp, one_hot_matrix(m, n, targets, -1.0 / m as f64));
    tape.sum(picked)
}

fn weighted_log_sum(tape: &mut Tape, probs: Var, coef: Vec<f64>) -> Var {
    let n = coef.len();
    let lp = tape.log(probs);
    let c = Arc::new(Array2::from_shape_vec((1, n), coef).unwrap());
    let w = tape.mul_const(lp, c);
    let s = tape.sum(w);
    tape.neg(s)
}

/// `−log p_y`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, y: usize) -> Var {
    let n = tape.shape(probs).1;
    weighted_log_sum(tape, probs, (0..n).map(|i| f64::from(u8::from(i == y))).collect())
}

/// `−Σ wᵢ[(1−α)yᵢ + α/n] log pᵢ`.
pub fn ce_label_smoothing(tape: &mut Tape, probs: Var, y: usize, weights: &[f64], alpha: f64) -> Var {
    let n = tape.shape(probs).1;
    let coef = (0..n)
        .map(|i| weights[i] * ((1.0 - alpha) * f64::from(u8::from(i == y)) + alpha / n as f64))
        .collect();
    weighted_log_sum(tape, probs, coef)
}

/// `−Σ_{i≠y} log(1 − pᵢ)·|i − y|^α`; the true class never contributes, even at α = 0.
pub fn cdw_ce(tape: &mut Tape, probs: Var, y: usize, alpha: f64) -> Var {
    let n = tape.shape(probs).1;
    let q = tape.one_minus(probs);
    let coef = (0..n).map(|i| if i == y { 0.0 } else { (i.abs_diff(y) as f64).powf(alpha) }).collect();
    weighted_log_sum(tape, q, coef)
}

/// `−(1 − p_y)^γ log p_y`.
pub fn focal(tape: &mut Tape, probs: Var, y: usize, gamma: f64) -> Var {
    let py = tape.slice_cols(probs, y, y + 1);
    let q = tape.one_minus(py);
    let w = tape.powf(q, gamma);
    let lp = tape.log(py);
    let t = tape.mul(w, lp);
    tape.neg(t)
}

/// Class-balanced cross-entropy for positive/unlabeled data. Column 1 is the
/// positive class; `c` is added to the unlabeled class logit of unlabeled rows
/// so confident positive predictions on unlabeled samples are penalised less.
pub fn asymmetric_ce(tape: &mut Tape, logits: Var, positive: &[bool], c: f64, norm: Normalizer) -> Result<Var> {
    let n = positive.len();
    let p = positive.iter().filter(|&&b| b).count();
    if p == 0 || p == n {
        return Err(Error::invalid(format!("asymmetric loss needs positives and unlabeled samples, got {p} of {n}")));
    }
    if tape.shape(logits) != (n, 2) {
        return Err(Error::invalid("asymmetric loss expects n×2 logits"));
    }
    let shift = Array2::from_shape_fn((n, 2), |(i, j)| if !positive[i] && j == 0 { c } else { 0.0 });
    let shifted = tape.add_const(logits, &shift);
    let probs = norm.apply(tape, shifted);
    let lp = tape.log(probs);
    let coef = Array2::from_shape_fn((n, 2), |(i, j)| match (positive[i], j) {
        (true, 1) => -1.0 / p as f64,
        (false, 0) => -1.0 / (n - p) as f64,
        _ => 0.0,
    });
    let w = tape.mul_const(lp, Arc::new(coef));
    Ok(tape.sum(w))
}

/// One row's share of [`asymmetric_ce`] before class weighting: the negative
/// log-probability of the observed label on a 1×2 logit row.
pub fn pu_term(tape: &mut Tape, logits: Var, positive: bool, c: f64, norm: Normalizer) -> Var {
    let shifted = if positive { logits } else { tape.add_const(logits, &Array2::from_shape_vec((1, 2), vec![c, 0.0]).expect("1x2")) };
    let probs = norm.apply(tape, shifted);
    let col = usize::from(positive);
    let p = tape.slice_cols(probs, col, col + 1);
    let lp = tape.log(p);
    tape.neg(lp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub sop_class_weights: [f64; 3],
    pub label_smoothing: f64,
    pub cdw_alpha: f64,
    pub focal_gamma: f64,
    pub asymmetric_c: f64,
    /// Weights of (cdw, focal, label smoothing) in the personality loss.
    pub mix: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sop_class_weights: [1.1, 10.0, 10.0],
            label_smoothing: 0.1,
            cdw_alpha: 1.5,
            focal_gamma: 5.0,
            asymmetric_c: 0.0,
            mix: [0.3, 1.0, 0.1],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("label_smoothing", self.label_smoothing),
            ("cdw_alpha", self.cdw_alpha),
            ("focal_gamma", self.focal_gamma),
            ("asymmetric_c", self.asymmetric_c),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name}"), format!("must be finite and non-negative, got {v}")));
            }
        }
        if self.label_smoothing > 1.0 {
            return Err(Error::config("loss.label_smoothing", "must be at most 1"));
        }
        if self.sop_class_weights.iter().chain(&self.mix).any(|&w| !(w >= 0.0)) {
            return Err(Error::config("loss.mix", "weights must be non-negative"));
        }
        Ok(())
    }
}

/// Personality loss for one item: `m₀·cdw + m₁·focal + m₂·smoothed CE`.
pub fn item_loss(tape: &mut Tape, probs: Var, y: usize, cfg: &LossConfig) -> Var {
    let n = tape.shape(probs).1;
    let a = cdw_ce(tape, probs, y, cfg.cdw_alpha);
    let b = focal(tape, probs, y, cfg.focal_gamma);
    let c = ce_label_smoothing(tape, probs, y, &vec![1.0; n], cfg.label_smoothing);
    let a = tape.scale(a, cfg.mix[0]);
    let b = tape.scale(b, cfg.mix[1]);
    let c = tape.scale(c, cfg.mix[2]);
    let s = tape.add(a, b);
    tape.add(s, c)
}

/// [`item_loss`] for every row of `probs` (items × levels).
pub fn personality_item_losses(tape: &mut Tape, probs: Var, targets: &[usize], cfg: &LossConfig) -> Vec<Var> {
    let (items, levels) = tape.shape(probs);
    let flat = tape.reshape(probs, (1, items * levels));
    targets
        .iter()
        .take(items)
        .enumerate()
        .map(|(i, &y)| {
            let row = tape.slice_cols(flat, i * levels, (i + 1) * levels);
            item_loss(tape, row, y, cfg)
        })
        .collect()
}

/// Mean of the item losses.
pub fn mean_of(tape: &mut Tape, losses: &[Var]) -> Var {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l);
    }
    tape.scale(total, 1.0 / losses.len() as f64)
}

/// Mean of [`item_loss`] over the rows of `probs` (items × levels).
pub fn combined_personality_loss(tape: &mut Tape, probs: Var, targets: &[usize], cfg: &LossConfig) -> Var {
    let items = personality_item_losses(tape, probs, targets, cfg);
    mean_of(tape, &items)
}

/// Loss of a one-hot prediction under the smoothed term: `(α/n)(n−1)·(−ln floor)`.
pub fn smoothing_floor(n: usize, alpha: f64) -> f64 {
    alpha / n as f64 * (n as f64 - 1.0) * -LOG_FLOOR.ln()
}

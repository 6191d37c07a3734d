//! Explanations of mortality predictions: noise-averaged gradient×input
//! saliency, pooled attention weights, concept-activation sensitivity and the
//! Mann-Whitney rank test behind its significance.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::losses::Normalizer;
use crate::model::{Model, MORTALITY_NORMALIZER};
use crate::params::gaussian;
use crate::rng::{self, Rng};
use crate::tokenizer::EncodedSequence;

/// SmoothGrad saliency per token: Gaussian noise of scale `sigma` is added to
/// the input embeddings, the gradient of the predicted class probability is
/// multiplied by the clean embedding, and its row norm is averaged over
/// `n_samples` draws. Padding scores 0.
pub fn saliency(model: &Model, seq: &EncodedSequence, n_samples: usize, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::invalid("saliency needs at least one sample"));
    }
    let bank = model.eval_bank();
    let mut tape = Tape::new();
    let x = model.embed(&mut tape, seq)?;
    let clean = tape.value(x).clone();
    let predicted = {
        let h = model.encode(&mut tape, x, &seq.padding_mask, &bank)?;
        let out = model.mortality.forward(&mut tape, &model.store, h, &seq.padding_mask)?;
        let logits: Vec<f64> = tape.value(out.logits).iter().copied().collect();
        crate::pretrain::argmax(MORTALITY_NORMALIZER.values(&logits).into_iter())
    };
    let mut r = rng::child(seed, "saliency");
    let mut scores = vec![0.0; seq.len()];
    for _ in 0..n_samples {
        let noisy = if sigma > 0.0 { &clean + &(gaussian(&mut r, clean.dim(), 1.0) * sigma) } else { clean.clone() };
        let mut tape = Tape::new();
        let input = tape.input(noisy);
        let h = model.encode(&mut tape, input, &seq.padding_mask, &bank)?;
        let out = model.mortality.forward(&mut tape, &model.store, h, &seq.padding_mask)?;
        let probs = MORTALITY_NORMALIZER.apply(&mut tape, out.logits);
        let p = tape.slice_cols(probs, predicted, predicted + 1);
        let grads = tape.backward(p);
        if let Some(g) = grads.of(input) {
            for (i, s) in scores.iter_mut().enumerate() {
                if !seq.padding_mask[i] {
                    let gi = g.row(i);
                    *s += gi.iter().zip(clean.row(i)).map(|(a, b)| (a * b) * (a * b)).sum::<f64>().sqrt();
                }
            }
        }
    }
    scores.iter_mut().for_each(|s| *s /= n_samples as f64);
    Ok(scores)
}

/// Pooled-decoder attention weight of every token (zero on padding).
pub fn attention_scores(model: &Model, seq: &EncodedSequence) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = model.mortality_forward(&mut tape, seq, &model.eval_bank())?;
    Ok(tape.value(out.weights).iter().copied().collect())
}

/// Rank of `scores[i]` among the real tokens, as the share of real tokens
/// scoring strictly higher (0 is the top).
pub fn rank_fraction(scores: &[f64], padding: &[bool], i: usize) -> f64 {
    let real: Vec<f64> = scores.iter().zip(padding).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    real.iter().filter(|&&s| s > scores[i]).count() as f64 / real.len() as f64
}

pub fn write_token_scores_csv(path: &std::path::Path, tokens: &[String], scores: &[f64]) -> Result<()> {
    let mut text = String::from("token,score\n");
    for (t, s) in tokens.iter().zip(scores) {
        text.push_str(&format!("{t},{s}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Statistic of the first sample: pairs where it is larger, ties half.
    pub u: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Largest combined size for which the exact null distribution is used.
const EXACT_LIMIT: usize = 20;

/// Mann-Whitney U test. Without ties and for at most 20 values in total the
/// p-value is exact; otherwise the tie-corrected normal approximation with
/// continuity correction is used. All-tied samples give p = 1.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::invalid("Mann-Whitney test needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("Mann-Whitney test needs finite values"));
    }
    let mut u = 0.0;
    for &x in a {
        for &y in b {
            u += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
        }
    }
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = crate::space::ranks(&all);
    let has_ties = {
        let mut s = all.clone();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[0] == w[1])
    };
    let p_value = if !has_ties && n1 + n2 <= EXACT_LIMIT {
        exact_p(n1, n2, u)
    } else {
        let n = (n1 + n2) as f64;
        let mut tie_term = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
            let t = j as f64;
            tie_term += t * t * t - t;
            i += j;
        }
        let (f1, f2) = (n1 as f64, n2 as f64);
        let var = f1 * f2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let dev = ((u - f1 * f2 / 2.0).abs() - 0.5).max(0.0);
            (2.0 * normal_sf(dev / var.sqrt())).min(1.0)
        }
    };
    Ok(MannWhitney { u, p_value })
}

/// Exact two-sided p-value from the counts of rank-sum configurations.
fn exact_p(n1: usize, n2: usize, u: f64) -> f64 {
    // counts[k][j]: arrangements of k values from the first sample among
    // the first positions giving U = j, built by the standard recurrence.
    let max_u = n1 * n2;
    let mut table = vec![vec![vec![0f64; max_u + 1]; n2 + 1]; n1 + 1];
    for (j, row) in table[0].iter_mut().enumerate() {
        let _ = j;
        row[0] = 1.0;
    }
    for i in 1..=n1 {
        table[i][0][0] = 1.0;
        for j in 1..=n2 {
            for k in 0..=max_u {
                // the largest value belongs to the first sample (adds j) or the second
                let from_a = if k >= j { table[i - 1][j][k - j] } else { 0.0 };
                let from_b = table[i][j - 1][k];
                table[i][j][k] = from_a + from_b;
            }
        }
    }
    let counts = &table[n1][n2];
    let total: f64 = counts.iter().sum();
    let u = u.round() as usize;
    let lower: f64 = counts[..=u].iter().sum::<f64>() / total;
    let upper: f64 = counts[u..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Complementary error function from the Chebyshev fit known as `erfcc`,
/// relative error below 1.2e-7.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07 + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcavConfig {
    /// Test persons whose output gradients are collected.
    pub n_test: usize,
    /// Concept and non-concept examples per classifier.
    pub n_concept: usize,
    pub n_nonconcept: usize,
    pub n_bootstrap: usize,
    pub cv_folds: usize,
    pub l2_grid: Vec<f64>,
    pub sgd_epochs: usize,
    pub sgd_lr: f64,
}

impl Default for TcavConfig {
    fn default() -> Self {
        Self {
            n_test: 1000,
            n_concept: 300,
            n_nonconcept: 500,
            n_bootstrap: 1000,
            cv_folds: 5,
            l2_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            sgd_epochs: 30,
            sgd_lr: 0.1,
        }
    }
}

impl TcavConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_test == 0 || self.n_concept == 0 || self.n_nonconcept == 0 || self.n_bootstrap == 0 {
            return Err(Error::config("tcav.n_test", "sample sizes must be positive"));
        }
        if self.cv_folds < 2 || self.l2_grid.is_empty() {
            return Err(Error::config("tcav.cv_folds", "needs at least two folds and one penalty"));
        }
        if !(self.sgd_lr > 0.0) || self.sgd_epochs == 0 {
            return Err(Error::config("tcav.sgd_lr", "step size and epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcavResult {
    /// Mean directional derivative over test gradients and concept directions.
    pub sensitivity: f64,
    /// Per-direction sensitivities of the concept.
    pub concept_scores: Vec<f64>,
    /// Per-direction sensitivities of random concepts.
    pub random_scores: Vec<f64>,
    pub l2: f64,
    pub p_value: f64,
}

/// Person summaries (rows) from the pooled mortality head.
pub fn person_summaries(model: &Model, seqs: &[&EncodedSequence]) -> Result<Array2<f64>> {
    let bank = model.eval_bank();
    let rows = seqs.iter().map(|s| model.person_summary(s, &bank)).collect::<Result<Vec<_>>>()?;
    let d = rows.first().map_or(0, Vec::len);
    Ok(Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("equal summary widths"))
}

/// Gradient of the logit margin (positive minus unlabeled) with respect to
/// each person summary.
pub fn summary_gradients(model: &Model, seqs: &[&EncodedSequence]) -> Result<Array2<f64>> {
    let summaries = person_summaries(model, seqs)?;
    let mut out = Array2::zeros(summaries.dim());
    for (i, s) in summaries.axis_iter(Axis(0)).enumerate() {
        let mut tape = Tape::new();
        let x = tape.input(s.to_owned().insert_axis(Axis(0)));
        let logits = model.mortality.classify(&mut tape, &model.store, x);
        let l1 = tape.slice_cols(logits, 1, 2);
        let l0 = tape.slice_cols(logits, 0, 1);
        let margin = tape.sub(l1, l0);
        let g = tape.backward(margin);
        if let Some(g) = g.of(x) {
            out.row_mut(i).assign(&g.row(0));
        }
    }
    Ok(out)
}

/// L2-regularised logistic regression by mini-batch gradient descent;
/// returns `(weights, bias)`.
pub fn fit_logistic(x: &Array2<f64>, y: &[bool], l2: f64, epochs: usize, lr: f64, rng: &mut Rng) -> (Array1<f64>, f64) {
    let (n, d) = x.dim();
    let mut w = Array1::zeros(d);
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(32) {
            let mut gw = Array1::zeros(d);
            let mut gb = 0.0;
            for &i in chunk {
                let row = x.row(i);
                let p = crate::synthgen::sigmoid(row.dot(&w) + b);
                let err = p - f64::from(u8::from(y[i]));
                gw.scaled_add(err, &row);
                gb += err;
            }
            let m = chunk.len() as f64;
            w = &w - &((&gw / m + &w * l2) * lr);
            b -= lr * gb / m;
        }
    }
    (w, b)
}

fn accuracy(x: &Array2<f64>, y: &[bool], w: &Array1<f64>, b: f64) -> f64 {
    let hits = x.axis_iter(Axis(0)).zip(y).filter(|(r, &t)| (r.dot(w) + b > 0.0) == t).count();
    hits as f64 / y.len() as f64
}

/// Penalty with the best mean held-out accuracy over `folds` folds.
pub fn select_l2(x: &Array2<f64>, y: &[bool], cfg: &TcavConfig, seed: u64) -> f64 {
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::child(seed, "folds"));
    let mut best = (f64::NEG_INFINITY, cfg.l2_grid[0]);
    for (g, &l2) in cfg.l2_grid.iter().enumerate() {
        let mut acc = 0.0;
        for f in 0..cfg.cv_folds {
            let test: Vec<usize> = order.iter().copied().skip(f).step_by(cfg.cv_folds).collect();
            let train: Vec<usize> = order.iter().copied().enumerate().filter(|(k, _)| k % cfg.cv_folds != f).map(|(_, i)| i).collect();
            let ytr: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let yte: Vec<bool> = test.iter().map(|&i| y[i]).collect();
            let mut r = rng::child_indexed(seed, "cv", (g * cfg.cv_folds + f) as u64);
            let (w, b) = fit_logistic(&x.select(Axis(0), &train), &ytr, l2, cfg.sgd_epochs, cfg.sgd_lr, &mut r);
            acc += accuracy(&x.select(Axis(0), &test), &yte, &w, b);
        }
        if acc > best.0 {
            best = (acc, l2);
        }
    }
    best.1
}

/// Unit normal of a classifier separating rows `pos` from rows `neg` of `x`.
fn concept_direction(x: &Array2<f64>, pos: &[usize], neg: &[usize], l2: f64, cfg: &TcavConfig, r: &mut Rng) -> Array1<f64> {
    let idx: Vec<usize> = pos.iter().chain(neg).copied().collect();
    let y: Vec<bool> = (0..idx.len()).map(|k| k < pos.len()).collect();
    let (w, _) = fit_logistic(&x.select(Axis(0), &idx), &y, l2, cfg.sgd_epochs, cfg.sgd_lr, r);
    let n = w.dot(&w).sqrt();
    if n > 0.0 {
        w / n
    } else {
        w
    }
}

/// Mean directional derivative of the gradients along `direction`.
pub fn directional_sensitivity(gradients: &Array2<f64>, direction: &Array1<f64>) -> f64 {
    gradients.dot(direction).mean().unwrap_or(0.0)
}

fn draw(pool: &[usize], k: usize, r: &mut Rng) -> Vec<usize> {
    (0..k).map(|_| pool[r.gen_range(0..pool.len())]).collect()
}

/// Concept sensitivity with a significance test against random concepts.
///
/// Each concept replicate fits a classifier on `n_concept` persons drawn from
/// those matching `is_concept` against `n_nonconcept` drawn from the rest of
/// `pool`; each random replicate draws both groups from the whole pool. The
/// p-value compares the two sets of per-direction sensitivities with a
/// Mann-Whitney test.
pub fn tcav(
    model: &Model,
    is_concept: impl Fn(&EncodedSequence) -> bool,
    pool: &[EncodedSequence],
    test: &[EncodedSequence],
    cfg: &TcavConfig,
    seed: u64,
) -> Result<TcavResult> {
    cfg.validate()?;
    let concept: Vec<usize> = (0..pool.len()).filter(|&i| is_concept(&pool[i])).collect();
    let rest: Vec<usize> = (0..pool.len()).filter(|&i| !is_concept(&pool[i])).collect();
    if concept.is_empty() {
        return Err(Error::invalid("no pool sequence matches the concept"));
    }
    if rest.is_empty() {
        return Err(Error::invalid("every pool sequence matches the concept"));
    }
    let summaries = person_summaries(model, &pool.iter().collect::<Vec<_>>())?;
    let test_refs: Vec<&EncodedSequence> = test.iter().take(cfg.n_test).collect();
    let gradients = summary_gradients(model, &test_refs)?;
    let all: Vec<usize> = (0..pool.len()).collect();

    let mut r = rng::child(seed, "cv-sample");
    let pos = draw(&concept, cfg.n_concept, &mut r);
    let neg = draw(&rest, cfg.n_nonconcept, &mut r);
    let idx: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    let y: Vec<bool> = (0..idx.len()).map(|k| k < pos.len()).collect();
    let l2 = select_l2(&summaries.select(Axis(0), &idx), &y, cfg, seed);

    let mut concept_scores = Vec::with_capacity(cfg.n_bootstrap);
    let mut random_scores = Vec::with_capacity(cfg.n_bootstrap);
    for b in 0..cfg.n_bootstrap as u64 {
        let mut r = rng::child_indexed(seed, "concept", b);
        let (p, n) = (draw(&concept, cfg.n_concept, &mut r), draw(&rest, cfg.n_nonconcept, &mut r));
        let dir = concept_direction(&summaries, &p, &n, l2, cfg, &mut r);
        concept_scores.push(directional_sensitivity(&gradients, &dir));
        let mut r = rng::child_indexed(seed, "random", b);
        let (p, n) = (draw(&all, cfg.n_concept, &mut r), draw(&all, cfg.n_nonconcept, &mut r));
        let dir = concept_direction(&summaries, &p, &n, l2, cfg, &mut r);
        random_scores.push(directional_sensitivity(&gradients, &dir));
    }
    let sensitivity = concept_scores.iter().sum::<f64>() / concept_scores.len() as f64;
    let p_value = mann_whitney_u(&concept_scores, &random_scores)?.p_value;
    Ok(TcavResult { sensitivity, concept_scores, random_scores, l2, p_value })
}

/// Probability of the positive class from a logit row.
pub fn positive_probability(logits: &[f64]) -> f64 {
    Normalizer::SigSoftmax.values(logits)[1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_have_unit_p() {
        let r = mann_whitney_u(&[1.0, 1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.u, 3.0);
    }

    #[test]
    fn separated_samples_are_significant() {
        let a: Vec<f64> = (0..20).map(f64::from).collect();
        let b: Vec<f64> = (100..120).map(f64::from).collect();
        assert!(mann_whitney_u(&a, &b).unwrap().p_value < 1e-6);
    }

    #[test]
    fn normal_tail_values() {
        assert!((normal_sf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_sf(1.959_963_985) - 0.025).abs() < 1e-7);
    }

    #[test]
    fn direction_sign_flips_sensitivity() {
        let g = ndarray::array![[1.0, 2.0], [0.5, -1.0]];
        let d = ndarray::array![0.6, 0.8];
        assert_eq!(directional_sensitivity(&g, &d), -directional_sensitivity(&g, &-&d));
    }
}

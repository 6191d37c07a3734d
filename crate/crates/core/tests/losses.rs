//! Loss functions and probability heads against direct scalar evaluation.

mod common;

use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng as _;

use lifeseq::graph::{Tape, LOG_FLOOR};
use lifeseq::losses::{
    asymmetric_ce, ce_from_logits, ce_label_smoothing, cdw_ce, combined_personality_loss, cross_entropy, focal, item_loss,
    pu_term, sigsoftmax, smoothing_floor, LossConfig, Normalizer,
};
use lifeseq::model::Model;
use lifeseq::rng;

fn ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

fn sigsoftmax_direct(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|&v| v.exp() / (1.0 + (-v).exp())).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn softmax_direct(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|&v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn random_probs(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::rng(seed);
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

/// Evaluates a probability-row loss on a fresh tape.
fn eval(p: &[f64], f: impl Fn(&mut Tape, lifeseq::graph::Var) -> lifeseq::graph::Var) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(row(p));
    let out = f(&mut t, v);
    t.scalar(out)
}

#[test]
fn cross_entropy_cases() {
    assert_eq!(eval(&[0.0, 1.0, 0.0], |t, v| cross_entropy(t, v, 1)), 0.0);
    let u = eval(&[0.25; 4], |t, v| cross_entropy(t, v, 3));
    assert!((u - 4f64.ln()).abs() < 1e-12);
    let p = random_probs(1, 5);
    assert!((eval(&p, |t, v| cross_entropy(t, v, 2)) + p[2].ln()).abs() < 1e-12);
}

#[test]
fn label_smoothing_cases() {
    let p = random_probs(2, 3);
    let ce = eval(&p, |t, v| cross_entropy(t, v, 1));
    assert!((eval(&p, |t, v| ce_label_smoothing(t, v, 1, &[1.0; 3], 0.0)) - ce).abs() < 1e-12);
    let uniform: f64 = -p.iter().map(|x| x.ln()).sum::<f64>() / 3.0;
    assert!((eval(&p, |t, v| ce_label_smoothing(t, v, 1, &[1.0; 3], 1.0)) - uniform).abs() < 1e-12);
    let w = [1.1, 10.0, 10.0];
    let expect: f64 = -(0..3).map(|i| w[i] * (0.9 * f64::from(u8::from(i == 0)) + 0.1 / 3.0) * p[i].ln()).sum::<f64>();
    assert!((eval(&p, |t, v| ce_label_smoothing(t, v, 0, &w, 0.1)) - expect).abs() < 1e-12);
}

#[test]
fn cdw_cases() {
    assert_eq!(eval(&[0.0, 0.0, 1.0, 0.0, 0.0], |t, v| cdw_ce(t, v, 2, 1.5)), 0.0);
    let p = random_probs(3, 5);
    let plain: f64 = -(0..5).filter(|&i| i != 2).map(|i| (1.0 - p[i]).ln()).sum::<f64>();
    assert!((eval(&p, |t, v| cdw_ce(t, v, 2, 0.0)) - plain).abs() < 1e-12);
    let expect: f64 = -(0..5).map(|i| (1.0 - p[i]).ln() * (i.abs_diff(2) as f64).powf(1.5)).sum::<f64>();
    assert!((eval(&p, |t, v| cdw_ce(t, v, 2, 1.5)) - expect).abs() < 1e-12);
}

#[test]
fn focal_cases() {
    let p = random_probs(4, 5);
    let ce = eval(&p, |t, v| cross_entropy(t, v, 3));
    assert!((eval(&p, |t, v| focal(t, v, 3, 0.0)) - ce).abs() < 1e-12);
    assert_eq!(eval(&[0.0, 1.0], |t, v| focal(t, v, 1, 5.0)), 0.0);
    let expect = -(1.0 - p[3]).powi(5) * p[3].ln();
    assert!((eval(&p, |t, v| focal(t, v, 3, 5.0)) - expect).abs() < 1e-12);
}

fn asymmetric_direct(logits: &Array2<f64>, positive: &[bool], c: f64) -> f64 {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let u = positive.len() as f64 - p;
    let mut total = 0.0;
    for (i, &pos) in positive.iter().enumerate() {
        if pos {
            total -= sigsoftmax_direct(&[logits[[i, 0]], logits[[i, 1]]])[1].ln() / p;
        } else {
            total -= sigsoftmax_direct(&[logits[[i, 0]] + c, logits[[i, 1]]])[0].ln() / u;
        }
    }
    total
}

#[test]
fn asymmetric_ce_matches_direct_formula() {
    let logits = lifeseq::params::gaussian(&mut rng::rng(5), (4, 2), 1.0);
    let positive = [false, true, false, false];
    let mut t = Tape::new();
    let v = t.constant(logits.clone());
    let out = asymmetric_ce(&mut t, v, &positive, 0.5, Normalizer::SigSoftmax).unwrap();
    assert!((t.scalar(out) - asymmetric_direct(&logits, &positive, 0.5)).abs() < 1e-12);

    // c = 0 with softmax is class-balanced CE with unlabeled as negatives
    let out = asymmetric_ce(&mut t, v, &positive, 0.0, Normalizer::Softmax).unwrap();
    let mut expect = 0.0;
    for (i, &pos) in positive.iter().enumerate() {
        let q = softmax_direct(&[logits[[i, 0]], logits[[i, 1]]]);
        expect -= if pos { q[1].ln() } else { q[0].ln() / 3.0 };
    }
    assert!((t.scalar(out) - expect).abs() < 1e-12);
}

#[test]
fn asymmetric_ce_needs_both_classes() {
    let mut t = Tape::new();
    let v = t.constant(Array2::zeros((3, 2)));
    assert!(asymmetric_ce(&mut t, v, &[true; 3], 0.0, Normalizer::SigSoftmax).is_err());
    assert!(asymmetric_ce(&mut t, v, &[false; 3], 0.0, Normalizer::SigSoftmax).is_err());
}

#[test]
fn batch_loss_is_class_weighted_mean_of_row_terms() {
    let logits = lifeseq::params::gaussian(&mut rng::rng(6), (5, 2), 1.0);
    let positive = [true, false, true, false, false];
    let mut t = Tape::new();
    let v = t.constant(logits.clone());
    let batch = asymmetric_ce(&mut t, v, &positive, 0.25, Normalizer::SigSoftmax).unwrap();
    let batch = t.scalar(batch);
    let mut sum = 0.0;
    for (i, &pos) in positive.iter().enumerate() {
        let r = t.constant(logits.row(i).to_owned().insert_axis(ndarray::Axis(0)));
        let term = pu_term(&mut t, r, pos, 0.25, Normalizer::SigSoftmax);
        sum += t.scalar(term) / if pos { 2.0 } else { 3.0 };
    }
    assert!((batch - sum).abs() < 1e-12);
}

#[test]
fn masked_token_ce_is_mean_negative_log_softmax() {
    let logits = lifeseq::params::gaussian(&mut rng::rng(7), (3, 6), 2.0);
    let targets = [0usize, 5, 2];
    let mut t = Tape::new();
    let v = t.constant(logits.clone());
    let out = ce_from_logits(&mut t, v, &targets);
    let expect: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &y)| -softmax_direct(&logits.row(i).to_vec())[y].ln())
        .sum::<f64>()
        / 3.0;
    assert!((t.scalar(out) - expect).abs() < 1e-12);
}

#[test]
fn sigsoftmax_cases() {
    let x = [0.3, -1.2, 2.0, 0.0, 0.7];
    let mut t = Tape::new();
    let v = t.constant(row(&x));
    let p = sigsoftmax(&mut t, v);
    let expect = sigsoftmax_direct(&x);
    for (a, b) in t.value(p).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(Normalizer::SigSoftmax.values(&[1.5; 5]), vec![0.2; 5]);
    let mut big = [0.0; 5];
    big[3] = 50.0;
    assert!(Normalizer::SigSoftmax.values(&big)[3] > 1.0 - 1e-15);
}

#[test]
fn combined_loss_cases() {
    let cfg = LossConfig::default();
    // perfect one-hot predictions leave only the smoothing floor
    let mut probs = Array2::zeros((4, 5));
    let targets = [0usize, 4, 2, 1];
    for (i, &y) in targets.iter().enumerate() {
        probs[[i, y]] = 1.0;
    }
    let mut t = Tape::new();
    let v = t.constant(probs);
    let l = combined_personality_loss(&mut t, v, &targets, &cfg);
    let floor = 0.1 / 5.0 * 4.0 * -LOG_FLOOR.ln();
    assert!((t.scalar(l) - 0.1 * floor).abs() < 1e-9);
    assert!((smoothing_floor(5, 0.1) - floor).abs() < 1e-12);

    let p = random_probs(8, 5);
    let focal_only = LossConfig { mix: [0.0, 1.0, 0.0], ..cfg.clone() };
    let a = eval(&p, |t, v| item_loss(t, v, 2, &focal_only));
    assert!((a - eval(&p, |t, v| focal(t, v, 2, 5.0))).abs() < 1e-12);

    // mean over items of the independently computed weighted components
    let rows: Vec<Vec<f64>> = (0..4).map(|i| random_probs(20 + i, 5)).collect();
    let flat: Vec<f64> = rows.concat();
    let mut t = Tape::new();
    let v = t.constant(Array2::from_shape_vec((4, 5), flat).unwrap());
    let l = combined_personality_loss(&mut t, v, &targets, &cfg);
    let mut expect = 0.0;
    for (p, &y) in rows.iter().zip(&targets) {
        let cdw: f64 = -(0..5).map(|i| ln(1.0 - p[i]) * (i.abs_diff(y) as f64).powf(1.5)).sum::<f64>();
        let foc = -(1.0 - p[y]).powi(5) * p[y].ln();
        let smooth: f64 = -(0..5).map(|i| (0.9 * f64::from(u8::from(i == y)) + 0.02) * p[i].ln()).sum::<f64>();
        expect += (0.3 * cdw + foc + 0.1 * smooth) / 4.0;
    }
    assert!((t.scalar(l) - expect).abs() < 1e-12);
}

#[test]
fn personality_probabilities_sum_to_one() {
    let model = common::toy_model(11);
    let probs = model.personality_probabilities(&common::toy_sequence(), &model.eval_bank()).unwrap();
    for r in probs {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let m = model.mortality_probability(&common::toy_sequence(), &model.eval_bank()).unwrap();
    assert!((0.0..=1.0).contains(&m));
}

#[test]
fn mlm_logits_follow_the_tied_embedding_row() {
    let mut model: Model = common::toy_model(12);
    let seq = common::toy_sequence();
    let logits = |m: &Model| {
        let bank = m.eval_bank();
        let mut t = Tape::new();
        let x = m.contextual(&mut t, &seq, &bank).unwrap();
        let r = lifeseq::heads::row(&mut t, x, 6);
        let out = m.mlm.forward(&mut t, &m.store, r, &m.embedder);
        t.value(out).clone()
    };
    let before = logits(&model);
    let id = model.embedder.concept;
    let mut e = model.store.get(id).clone();
    e.row_mut(9).mapv_inplace(|v| -2.0 * v + 0.5);
    model.store.set(id, e);
    let after = logits(&model);
    assert!((before[[0, 9]] - after[[0, 9]]).abs() > 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unlabeled_penalty_falls_as_c_grows(a in -5.0f64..5.0, b in -5.0f64..5.0, c in 0.0f64..2.0, dc in 0.01f64..2.0) {
        let lo = {
            let mut t = Tape::new();
            let v = t.constant(array![[a, b]]);
            let x = pu_term(&mut t, v, false, c, Normalizer::SigSoftmax);
            t.scalar(x)
        };
        let hi = {
            let mut t = Tape::new();
            let v = t.constant(array![[a, b]]);
            let x = pu_term(&mut t, v, false, c + dc, Normalizer::SigSoftmax);
            t.scalar(x)
        };
        prop_assert!(hi < lo);
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..10_000, y in 0usize..5) {
        let p = random_probs(seed, 5);
        let cfg = LossConfig::default();
        prop_assert!(eval(&p, |t, v| cross_entropy(t, v, y)) >= 0.0);
        prop_assert!(eval(&p, |t, v| cdw_ce(t, v, y, 1.5)) >= 0.0);
        prop_assert!(eval(&p, |t, v| focal(t, v, y, 5.0)) >= 0.0);
        prop_assert!(eval(&p, |t, v| item_loss(t, v, y, &cfg)) >= 0.0);
    }

    #[test]
    fn sigsoftmax_rows_sum_to_one(xs in proptest::collection::vec(-30.0f64..30.0, 2..8)) {
        let mut t = Tape::new();
        let v = t.constant(row(&xs));
        let p = sigsoftmax(&mut t, v);
        prop_assert!((t.value(p).sum() - 1.0).abs() < 1e-9);
    }
}

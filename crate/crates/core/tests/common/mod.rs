//! Fixtures and check routines shared by the integration and acceptance
//! tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng as _;

use lifeseq::encoder::{
    attention_mask, local_softmax_attention, orthogonal_features, performer_attention, softmax_attention, EncoderConfig,
};
use lifeseq::graph::check::{max_rel_err, numeric_grad};
use lifeseq::graph::{Tape, Var};
use lifeseq::losses::{
    asymmetric_ce, ce_from_logits, ce_label_smoothing, cdw_ce, combined_personality_loss, cross_entropy, focal, pu_term,
    sigsoftmax, LossConfig, Normalizer,
};
use lifeseq::model::{Model, ModelConfig};
use lifeseq::params::{gaussian, ParamId};
use lifeseq::pretrain::{example_losses, MaskTarget, PretrainExample, SopLabel};
use lifeseq::rng;
use lifeseq::tokenizer::{EncodedSequence, CLS, MASK, NO_TIME, PAD, SEP};

pub const TOY_VOCAB: usize = 12;

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { d: 4, n_layers: 2, n_heads: 2, n_local_heads: 1, local_window: 4, n_random_features: 4, pff_hidden: 6 },
        mlm_scale: 3.0,
    }
}

/// `[CLS]`, four background tokens, `[SEP]`, two events, then padding.
pub fn toy_sequence() -> EncodedSequence {
    let token_ids = vec![CLS, 5, 6, 7, 8, SEP, 9, 10, SEP, 11, SEP, PAD, PAD];
    let t = |p: i32| p;
    let abs_position = vec![NO_TIME, NO_TIME, NO_TIME, NO_TIME, NO_TIME, NO_TIME, t(400), t(400), t(400), t(900), t(900), NO_TIME, NO_TIME];
    let age = vec![NO_TIME, NO_TIME, NO_TIME, NO_TIME, NO_TIME, NO_TIME, 31, 31, 31, 33, 33, NO_TIME, NO_TIME];
    let segment = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 0, 0];
    let padding_mask = token_ids.iter().map(|&t| t == PAD).collect();
    EncodedSequence { person_id: 0, token_ids, abs_position, age, segment, padding_mask }
}

/// A toy model with every gate and mixing scalar moved off zero so that all
/// parameters influence the output.
pub fn toy_model(seed: u64) -> Model {
    let mut model = Model::new(&toy_config(), TOY_VOCAB, seed).unwrap();
    let mut r = rng::child(seed, "perturb");
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        if name.ends_with(".gate") || name.starts_with("embedding.mix") {
            let v: f64 = r.gen_range(0.3..0.8);
            model.store.get_mut(id).fill(v);
        } else if name.ends_with(".bias") {
            let shape = model.store.get(id).dim();
            *model.store.get_mut(id) = gaussian(&mut r, shape, 0.1);
        }
    }
    model
}

/// Gradient-check class of a parameter.
pub fn param_class(name: &str) -> &'static str {
    if name == "embedding.concept" {
        "concept embeddings"
    } else if name.starts_with("embedding.age") || name.starts_with("embedding.position") {
        "time2vec"
    } else if name == "embedding.segment" {
        "segment embeddings"
    } else if name.starts_with("embedding.mix") {
        "mix scalars"
    } else if name.ends_with(".gate") {
        "ReZero gates"
    } else if name.ends_with(".norm") {
        "ScaleNorm gains"
    } else if name.contains(".attn.") {
        "attention projections"
    } else if name.contains(".pff.") {
        "position-wise feed-forward"
    } else if name.starts_with("head.mlm") {
        "MLM decoder"
    } else if name.starts_with("head.sop") {
        "SOP decoder"
    } else if name.starts_with("head.pooled") {
        "pooled mortality decoder"
    } else if name.starts_with("head.ordinal") {
        "ordinal decoder"
    } else {
        "other"
    }
}

/// Sum of every training objective on the toy sequence.
fn total_loss(model: &Model, tape: &mut Tape) -> Var {
    let seq = toy_sequence();
    let bank = model.eval_bank();
    let mut input = seq.clone();
    input.token_ids[6] = MASK;
    let ex = PretrainExample {
        input,
        targets: vec![MaskTarget { position: 6, original: 9 }, MaskTarget { position: 9, original: 11 }],
        sop: SopLabel::Reversed,
    };
    let cfg = LossConfig::default();
    let pre = example_losses(model, tape, &ex, &cfg, &bank).unwrap();
    let mut loss = tape.add(pre.mlm.unwrap(), pre.sop);
    let pooled = model.mortality_forward(tape, &seq, &bank).unwrap();
    let pu = pu_term(tape, pooled.logits, false, 0.3, Normalizer::SigSoftmax);
    loss = tape.add(loss, pu);
    let logits = model.personality_forward(tape, &seq, &bank).unwrap();
    let probs = sigsoftmax(tape, logits);
    let pers = combined_personality_loss(tape, probs, &[0, 2, 4, 1], &cfg);
    tape.add(loss, pers)
}

fn input_check(x: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = t.input(x.clone());
    let out = build(&mut t, v);
    let g = t.backward(out).of(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
    let num = numeric_grad(&x, 1e-5, |xp| {
        let mut t = Tape::new();
        let v = t.input(xp.clone());
        let out = build(&mut t, v);
        t.scalar(out)
    });
    max_rel_err(&g, &num)
}

fn probability_row(seed: u64, n: usize) -> Array2<f64> {
    let mut r = rng::rng(seed);
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Array2::from_shape_vec((1, n), raw.into_iter().map(|x| x / s).collect()).unwrap()
}

/// Worst relative error between analytic and central-difference gradients,
/// per parameter class and per loss.
pub fn gradient_suite() -> BTreeMap<String, f64> {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut model = toy_model(3);
    let mut tape = Tape::new();
    let loss = total_loss(&model, &mut tape);
    let grads = tape.backward(loss);
    let analytic: BTreeMap<ParamId, Array2<f64>> = grads.params().map(|(id, g)| (id, g.clone())).collect();
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let x = model.store.get(id).clone();
        let g = analytic.get(&id).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let num = numeric_grad(&x, 1e-5, |xp| {
            *model.store.get_mut(id) = xp.clone();
            let mut t = Tape::new();
            let l = total_loss(&model, &mut t);
            t.scalar(l)
        });
        *model.store.get_mut(id) = x;
        let e = max_rel_err(&g, &num);
        let slot = worst.entry(param_class(&name).to_string()).or_insert(0.0);
        *slot = slot.max(e);
    }

    let mut losses = BTreeMap::new();
    let p5 = probability_row(1, 5);
    let p3 = probability_row(2, 3);
    losses.insert("cross-entropy", input_check(p5.clone(), |t, v| cross_entropy(t, v, 2)));
    losses.insert("label-smoothed CE", input_check(p3, |t, v| ce_label_smoothing(t, v, 1, &[1.1, 10.0, 10.0], 0.1)));
    losses.insert("class-distance weighted CE", input_check(p5.clone(), |t, v| cdw_ce(t, v, 2, 1.5)));
    losses.insert("focal", input_check(p5, |t, v| focal(t, v, 3, 5.0)));
    let logits = gaussian(&mut rng::rng(4), (4, 2), 1.0);
    losses.insert(
        "asymmetric PU CE",
        input_check(logits.clone(), |t, v| asymmetric_ce(t, v, &[true, false, false, true], 0.5, Normalizer::SigSoftmax).unwrap()),
    );
    losses.insert(
        "sigsoftmax",
        input_check(gaussian(&mut rng::rng(5), (2, 5), 1.0), |t, v| {
            let p = sigsoftmax(t, v);
            let w = Arc::new(gaussian(&mut rng::rng(6), (2, 5), 1.0));
            let s = t.mul_const(p, w);
            t.sum(s)
        }),
    );
    losses.insert("masked-token CE", input_check(gaussian(&mut rng::rng(7), (3, 6), 1.0), |t, v| ce_from_logits(t, v, &[0, 5, 2])));
    for (k, v) in losses {
        worst.insert(format!("loss: {k}"), v);
    }
    worst
}

/// Largest absolute difference between local attention with a window of at
/// least 2L and full softmax attention.
pub fn local_vs_full_max_diff(l: usize, dh: usize, seed: u64) -> f64 {
    let mut r = rng::rng(seed);
    let (q, k, v) = (gaussian(&mut r, (l, dh), 1.0), gaussian(&mut r, (l, dh), 1.0), gaussian(&mut r, (l, dh), 1.0));
    let padding = vec![false; l];
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v));
    let local = local_softmax_attention(&mut t, qv, kv, vv, 2 * l, &padding);
    let full = softmax_attention(&mut t, qv, kv, vv, &attention_mask(&padding, None));
    (t.value(local) - t.value(full)).iter().fold(0.0, |a, &b| a.max(b.abs()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median relative row error of Performer attention against exact attention
/// for each feature count, over `redraws` feature draws.
pub fn performer_errors(l: usize, dh: usize, features: &[usize], redraws: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    let q = gaussian(&mut r, (l, dh), 0.5);
    let k = gaussian(&mut r, (l, dh), 0.5);
    let v = gaussian(&mut r, (l, dh), 1.0);
    let padding = vec![false; l];
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v));
    let exact_var = softmax_attention(&mut t, qv, kv, vv, &attention_mask(&padding, None));
    let exact = t.value(exact_var).clone();
    features
        .iter()
        .map(|&m| {
            let mut errs = Vec::new();
            for d in 0..redraws {
                let omega = orthogonal_features(&mut rng::child_indexed(seed, "draw", (m * 1000 + d) as u64), m, dh);
                let approx_var = performer_attention(&mut t, qv, kv, vv, &omega, &padding).unwrap();
                let approx = t.value(approx_var);
                for (a, e) in approx.outer_iter().zip(exact.outer_iter()) {
                    let diff = &a - &e;
                    errs.push(diff.dot(&diff).sqrt() / e.dot(&e).sqrt().max(1e-12));
                }
            }
            median(errs)
        })
        .collect()
}

/// Lift area through pairwise ranking: each positive is credited with the
/// samples it outranks, ties and itself counting one half.
pub fn pairwise_aul(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len() as f64;
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let mut credit = 0.0;
    for (i, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
        for (j, _) in scores.iter().enumerate() {
            if i == j {
                credit += 0.5;
            } else if scores[i] > scores[j] {
                credit += 1.0;
            } else if scores[i] == scores[j] {
                credit += 0.5;
            }
        }
    }
    credit / (n * n_pos)
}

/// Two-sided p-value by enumerating every assignment of the pooled values
/// to the first sample.
pub fn enumerated_p(a: &[f64], b: &[f64]) -> f64 {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = all.len();
    let u_of = |mask: u32| {
        let mut u = 0.0;
        for i in (0..n).filter(|i| mask >> i & 1 == 1) {
            for j in (0..n).filter(|j| mask >> j & 1 == 0) {
                u += if all[i] > all[j] { 1.0 } else { 0.0 };
            }
        }
        u
    };
    let observed = u_of((1u32 << a.len()) - 1);
    let (mut total, mut low, mut high) = (0u32, 0u32, 0u32);
    for mask in 0..1u32 << n {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let u = u_of(mask);
        total += 1;
        low += u32::from(u <= observed);
        high += u32::from(u >= observed);
    }
    (2.0 * f64::from(low.min(high)) / f64::from(total)).min(1.0)
}

/// Step-up rule written out: scan ranks from the largest down, and reject
/// everything up to the first rank whose p-value clears its threshold.
pub fn bh_oracle(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
    let mut cutoff = None;
    for rank in (1..=m).rev() {
        if p[order[rank - 1]] <= q * rank as f64 / m as f64 {
            cutoff = Some(p[order[rank - 1]]);
            break;
        }
    }
    p.iter().map(|&v| cutoff.is_some_and(|c| v <= c)).collect()
}

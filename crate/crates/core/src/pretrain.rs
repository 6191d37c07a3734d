//! Self-supervised training: masked-token prediction plus sequence-order
//! prediction on augmented documents.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::heads::row;
use crate::losses::{ce_from_logits, ce_label_smoothing, LossConfig};
use crate::model::Model;
use crate::optim::{OneCycle, Optimizer, OptimizerKind};
use crate::params::{GradBuffer, ParamStore};
use crate::rng::{self, Rng};
use crate::tokenizer::{is_special, Document, EncodedSequence, MASK, N_SPECIAL, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub sequence_downsampling: f64,
    pub temporal_noise: f64,
    pub background_masking: f64,
    pub token_downsampling: f64,
    /// Largest fraction of events removed by sequence downsampling.
    pub max_event_drop: f64,
    /// Largest fraction of event tokens removed by token downsampling.
    pub max_token_drop: f64,
    /// Temporal noise is uniform on `[-max_shift_days, max_shift_days]`.
    pub max_shift_days: i32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sequence_downsampling: 0.1,
            temporal_noise: 0.1,
            background_masking: 0.1,
            token_downsampling: 0.1,
            max_event_drop: 0.5,
            max_token_drop: 0.5,
            max_shift_days: 5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { sequence_downsampling: 0.0, temporal_noise: 0.0, background_masking: 0.0, token_downsampling: 0.0, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_fraction: f64,
    /// Shares of chosen tokens replaced by `[MASK]`, a random token, or kept.
    pub mask_split: [f64; 3],
    pub sop_corruption_rate: f64,
    pub augment: AugmentConfig,
    pub epochs: usize,
    pub epoch_size: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Weights of the MLM and SOP losses in the selection perplexity.
    pub perplexity_mix: [f64; 2],
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.3,
            mask_split: [0.8, 0.1, 0.1],
            sop_corruption_rate: 0.1,
            augment: AugmentConfig::default(),
            epochs: 10,
            epoch_size: 5000,
            batch_size: 32,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            perplexity_mix: [0.7, 0.3],
        }
    }
}

fn unit(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be in [0, 1], got {v}")))
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        unit("pretrain.mask_fraction", self.mask_fraction)?;
        unit("pretrain.sop_corruption_rate", self.sop_corruption_rate)?;
        for (name, v) in [
            ("sequence_downsampling", self.augment.sequence_downsampling),
            ("temporal_noise", self.augment.temporal_noise),
            ("background_masking", self.augment.background_masking),
            ("token_downsampling", self.augment.token_downsampling),
            ("max_event_drop", self.augment.max_event_drop),
            ("max_token_drop", self.augment.max_token_drop),
        ] {
            unit(&format!("pretrain.augment.{name}"), v)?;
        }
        if self.mask_split.iter().any(|&s| s < 0.0) || (self.mask_split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("pretrain.mask_split", "must be non-negative and sum to 1"));
        }
        if self.augment.max_shift_days < 0 {
            return Err(Error::config("pretrain.augment.max_shift_days", "must be non-negative"));
        }
        for (name, v) in [("epochs", self.epochs), ("epoch_size", self.epoch_size), ("batch_size", self.batch_size)] {
            if v == 0 {
                return Err(Error::config(format!("pretrain.{name}"), "must be positive"));
            }
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("pretrain.peak_lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskTarget {
    pub position: usize,
    pub original: u32,
}

/// Chooses each non-special token with probability `fraction`; chosen tokens
/// become `[MASK]`, a random non-special token, or stay, per `split`.
pub fn mask_sequence(
    seq: &EncodedSequence,
    vocab_size: usize,
    fraction: f64,
    split: [f64; 3],
    rng: &mut Rng,
) -> (EncodedSequence, Vec<MaskTarget>) {
    let mut out = seq.clone();
    let mut targets = Vec::new();
    for i in 0..seq.len() {
        let t = seq.token_ids[i];
        if seq.padding_mask[i] || is_special(t) || !rng.gen_bool(fraction) {
            continue;
        }
        targets.push(MaskTarget { position: i, original: t });
        let u: f64 = rng.gen();
        if u < split[0] {
            out.token_ids[i] = MASK;
        } else if u < split[0] + split[1] && vocab_size > N_SPECIAL {
            out.token_ids[i] = rng.gen_range(N_SPECIAL as u32..vocab_size as u32);
        }
    }
    (out, targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SopLabel {
    Original = 0,
    Reversed = 1,
    Shuffled = 2,
}

/// With probability `rate` exchanges event token lists between slots, either
/// mirror-wise (reversed) or by a random permutation (shuffled). Stamps stay
/// with their slots; the background never moves.
pub fn corrupt_order(seq: &EncodedSequence, rate: f64, rng: &mut Rng) -> (EncodedSequence, SopLabel) {
    let mut doc = seq.to_document();
    let n = doc.events.len();
    if n < 2 || !rng.gen_bool(rate) {
        return (seq.clone(), SopLabel::Original);
    }
    let mut lists: Vec<Vec<u32>> = doc.events.iter().map(|e| e.tokens.clone()).collect();
    let label = if rng.gen_bool(0.5) {
        lists.reverse();
        SopLabel::Reversed
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            order.swap(0, 1);
        }
        lists = order.iter().map(|&o| lists[o].clone()).collect();
        SopLabel::Shuffled
    };
    for (e, l) in doc.events.iter_mut().zip(lists) {
        e.tokens = l;
    }
    (relayout(&doc, seq), label)
}

fn relayout(doc: &Document, like: &EncodedSequence) -> EncodedSequence {
    doc.layout(like.len()).expect("a shortened document always fits its original length")
}

/// Applies sequence downsampling, temporal noise, background masking and
/// token downsampling, in that order, each with its own probability.
pub fn augment(seq: &EncodedSequence, cfg: &AugmentConfig, rng: &mut Rng) -> EncodedSequence {
    let mut doc = seq.to_document();
    let mut changed = false;
    if rng.gen_bool(cfg.sequence_downsampling) && !doc.events.is_empty() {
        let frac = rng.gen_range(0.0..=cfg.max_event_drop);
        let n_drop = (frac * doc.events.len() as f64).floor() as usize;
        let mut idx: Vec<usize> = (0..doc.events.len()).collect();
        idx.shuffle(rng);
        let mut drop = vec![false; doc.events.len()];
        for &i in &idx[..n_drop] {
            drop[i] = true;
        }
        let mut k = 0;
        doc.events.retain(|_| {
            k += 1;
            !drop[k - 1]
        });
        changed = true;
    }
    if rng.gen_bool(cfg.temporal_noise) {
        for e in &mut doc.events {
            let shift = rng.gen_range(-cfg.max_shift_days..=cfg.max_shift_days);
            e.stamp.abs_position = (e.stamp.abs_position + shift).max(0);
        }
        changed = true;
    }
    if rng.gen_bool(cfg.background_masking) {
        doc.background.iter_mut().for_each(|t| *t = UNK);
        changed = true;
    }
    if rng.gen_bool(cfg.token_downsampling) {
        let total: usize = doc.events.iter().map(|e| e.tokens.len()).sum();
        let frac = rng.gen_range(0.0..=cfg.max_token_drop);
        let n_drop = (frac * total as f64).floor() as usize;
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(rng);
        let mut drop = vec![false; total];
        for &i in &idx[..n_drop] {
            drop[i] = true;
        }
        let mut k = 0;
        for e in &mut doc.events {
            e.tokens.retain(|_| {
                k += 1;
                !drop[k - 1]
            });
        }
        doc.events.retain(|e| !e.tokens.is_empty());
        changed = true;
    }
    if changed {
        relayout(&doc, seq)
    } else {
        seq.clone()
    }
}

/// One training or validation example after corruption.
#[derive(Clone, Debug)]
pub struct PretrainExample {
    pub input: EncodedSequence,
    pub targets: Vec<MaskTarget>,
    pub sop: SopLabel,
}

pub fn make_example(seq: &EncodedSequence, vocab_size: usize, cfg: &PretrainConfig, augmenting: bool, rng: &mut Rng) -> PretrainExample {
    let base = if augmenting { augment(seq, &cfg.augment, rng) } else { seq.clone() };
    let (ordered, sop) = corrupt_order(&base, cfg.sop_corruption_rate, rng);
    let (input, targets) = mask_sequence(&ordered, vocab_size, cfg.mask_fraction, cfg.mask_split, rng);
    PretrainExample { input, targets, sop }
}

pub struct PretrainLosses {
    /// `None` when the example has no masked positions.
    pub mlm: Option<Var>,
    pub sop: Var,
    pub mlm_logits: Option<Var>,
}

/// Builds both losses for one example on `tape`.
pub fn example_losses(
    model: &Model,
    tape: &mut Tape,
    ex: &PretrainExample,
    loss_cfg: &LossConfig,
    bank: &crate::encoder::FeatureBank,
) -> Result<PretrainLosses> {
    let h = model.contextual(tape, &ex.input, bank)?;
    let (mlm, mlm_logits) = if ex.targets.is_empty() {
        (None, None)
    } else {
        let rows = tape.gather(h, Arc::new(ex.targets.iter().map(|t| t.position).collect()));
        let logits = model.mlm.forward(tape, &model.store, rows, &model.embedder);
        let y: Vec<usize> = ex.targets.iter().map(|t| t.original as usize).collect();
        (Some(ce_from_logits(tape, logits, &y)), Some(logits))
    };
    let cls = row(tape, h, 0);
    let logits = model.sop.forward(tape, &model.store, cls);
    let probs = tape.softmax(logits, None);
    let sop = ce_label_smoothing(tape, probs, ex.sop as usize, &loss_cfg.sop_class_weights, loss_cfg.label_smoothing);
    Ok(PretrainLosses { mlm, sop, mlm_logits })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mlm_loss: f64,
    pub sop_loss: f64,
    pub perplexity: f64,
    pub lr: f64,
    pub val_mlm_loss: f64,
    pub val_sop_loss: f64,
    pub val_perplexity: f64,
    pub val_mlm_accuracy: f64,
}

pub fn perplexity(mlm: f64, sop: f64, mix: [f64; 2]) -> f64 {
    (mix[0] * mlm + mix[1] * sop).exp()
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub history: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Evaluation {
    pub mlm_loss: f64,
    pub sop_loss: f64,
    pub mlm_accuracy: f64,
}

/// Deterministic corruptions of a validation set.
pub fn validation_examples(val: &[EncodedSequence], vocab_size: usize, cfg: &PretrainConfig, seed: u64) -> Vec<PretrainExample> {
    val.iter()
        .enumerate()
        .map(|(i, s)| make_example(s, vocab_size, cfg, false, &mut rng::child_indexed(seed, "validation", i as u64)))
        .collect()
}

/// Mean losses and masked-token accuracy with evaluation-time features.
pub fn evaluate(model: &Model, examples: &[PretrainExample], loss_cfg: &LossConfig) -> Result<Evaluation> {
    let bank = model.eval_bank();
    let (mut mlm, mut sop, mut correct, mut total) = (0.0, 0.0, 0usize, 0usize);
    let mut n_mlm = 0usize;
    for ex in examples {
        let mut tape = Tape::new();
        let l = example_losses(model, &mut tape, ex, loss_cfg, &bank)?;
        sop += tape.scalar(l.sop);
        if let (Some(m), Some(logits)) = (l.mlm, l.mlm_logits) {
            mlm += tape.scalar(m);
            n_mlm += 1;
            for (r, t) in tape.value(logits).outer_iter().zip(&ex.targets) {
                let arg = argmax(r.iter().copied());
                correct += usize::from(arg == t.original as usize);
                total += 1;
            }
        }
    }
    Ok(Evaluation {
        mlm_loss: mlm / n_mlm.max(1) as f64,
        sop_loss: sop / examples.len().max(1) as f64,
        mlm_accuracy: correct as f64 / total.max(1) as f64,
    })
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Accuracy of always predicting the most frequent training token.
pub fn unigram_baseline_accuracy(train: &[EncodedSequence], examples: &[PretrainExample]) -> f64 {
    let mut counts: HashMap<u32, u64> = HashMap::new();
    for s in train {
        for (&t, &p) in s.token_ids.iter().zip(&s.padding_mask) {
            if !p && !is_special(t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let Some(top) = counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(t, _)| t) else {
        return 0.0;
    };
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        for t in &ex.targets {
            hit += usize::from(t.original == top);
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Trains `model` in place and leaves it at the epoch with the lowest
/// validation perplexity.
pub fn pretrain(
    model: &mut Model,
    train: &[EncodedSequence],
    val: &[EncodedSequence],
    cfg: &PretrainConfig,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("pretraining needs non-empty train and validation sets"));
    }
    let steps_per_epoch = cfg.epoch_size.div_ceil(cfg.batch_size);
    let schedule = OneCycle::new(cfg.peak_lr, steps_per_epoch * cfg.epochs);
    let mut opt = Optimizer::new(OptimizerKind::AdamW, &model.store).with_max_grad_norm(Some(cfg.max_grad_norm));
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.get(id).len() > 1 {
            opt.settings_mut(id).weight_decay = cfg.weight_decay;
        }
    }
    let val_examples = validation_examples(val, model.vocab_size, cfg, rng::derive(seed, "validation"));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut r = rng::child_indexed(seed, "epoch", epoch as u64);
        let (mut mlm_sum, mut sop_sum, mut n_mlm, mut n) = (0.0, 0.0, 0usize, 0usize);
        let mut lr = 0.0;
        let mut remaining = cfg.epoch_size;
        while remaining > 0 {
            let b = remaining.min(cfg.batch_size);
            remaining -= b;
            let bank = model.train_bank(step as u64);
            let mut grads = GradBuffer::zeros_like(&model.store);
            for _ in 0..b {
                let seq = &train[r.gen_range(0..train.len())];
                let ex = make_example(seq, model.vocab_size, cfg, true, &mut r);
                let mut tape = Tape::new();
                let l = example_losses(model, &mut tape, &ex, loss_cfg, &bank)?;
                let total = match l.mlm {
                    Some(m) => {
                        mlm_sum += tape.scalar(m);
                        n_mlm += 1;
                        tape.add(m, l.sop)
                    }
                    None => l.sop,
                };
                sop_sum += tape.scalar(l.sop);
                n += 1;
                let v = tape.scalar(total);
                if !v.is_finite() {
                    return Err(Error::Diverged { step, what: "pretraining loss".into() });
                }
                grads.accumulate(&tape.backward(total), 1.0 / b as f64);
            }
            if !grads.is_finite() {
                return Err(Error::Diverged { step, what: "gradient".into() });
            }
            lr = schedule.lr(step);
            opt.step(&mut model.store, &grads, lr);
            step += 1;
        }
        let ev = evaluate(model, &val_examples, loss_cfg)?;
        let (mlm_loss, sop_loss) = (mlm_sum / n_mlm.max(1) as f64, sop_sum / n.max(1) as f64);
        let row = PretrainEpoch {
            epoch: epoch + 1,
            mlm_loss,
            sop_loss,
            perplexity: perplexity(mlm_loss, sop_loss, cfg.perplexity_mix),
            lr,
            val_mlm_loss: ev.mlm_loss,
            val_sop_loss: ev.sop_loss,
            val_perplexity: perplexity(ev.mlm_loss, ev.sop_loss, cfg.perplexity_mix),
            val_mlm_accuracy: ev.mlm_accuracy,
        };
        if !row.val_perplexity.is_finite() {
            return Err(Error::Diverged { step, what: "validation perplexity".into() });
        }
        if best.as_ref().map_or(true, |(p, _, _)| row.val_perplexity < *p) {
            best = Some((row.val_perplexity, epoch + 1, model.store.clone()));
        }
        history.push(row);
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(PretrainOutcome { history, best_epoch, steps: step })
}

pub fn write_history_csv(path: &Path, history: &[PretrainEpoch]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,mlm_loss,sop_loss,perplexity,lr,val_mlm_loss,val_sop_loss,val_perplexity,val_mlm_accuracy\n");
    for h in history {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            h.epoch, h.mlm_loss, h.sop_loss, h.perplexity, h.lr, h.val_mlm_loss, h.val_sop_loss, h.val_perplexity, h.val_mlm_accuracy
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{EventSentence, TemporalStamp, CLS, PAD, SEP};

    fn doc_seq(n_events: usize, max_len: usize) -> EncodedSequence {
        let doc = Document {
            person_id: 1,
            background: vec![5, 6, 7, 8],
            events: (0..n_events)
                .map(|k| EventSentence {
                    tokens: vec![10 + k as u32 * 3, 11 + k as u32 * 3, 12 + k as u32 * 3],
                    stamp: TemporalStamp { abs_position: 100 + k as i32 * 7, age: 40, segment: ((k + 1) % 3) as u8 },
                })
                .collect(),
        };
        doc.layout(max_len).unwrap()
    }

    #[test]
    fn specials_are_never_masked() {
        let s = EncodedSequence {
            person_id: 0,
            token_ids: vec![CLS, SEP, SEP, PAD],
            abs_position: vec![-1; 4],
            age: vec![-1; 4],
            segment: vec![0; 4],
            padding_mask: vec![false, false, false, true],
        };
        let (out, t) = mask_sequence(&s, 50, 1.0, [0.8, 0.1, 0.1], &mut rng::rng(0));
        assert!(t.is_empty());
        assert_eq!(out, s);
    }

    #[test]
    fn masking_is_deterministic_and_random_replacements_are_not_special() {
        let s = doc_seq(10, 64);
        let a = mask_sequence(&s, 60, 0.5, [0.0, 1.0, 0.0], &mut rng::rng(4));
        let b = mask_sequence(&s, 60, 0.5, [0.0, 1.0, 0.0], &mut rng::rng(4));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.1.iter().all(|t| !is_special(a.0.token_ids[t.position])));
    }

    #[test]
    fn two_event_reversal_swaps_tokens_keeps_stamps() {
        let s = doc_seq(2, 32);
        let mut r = rng::rng(0);
        let (out, label) = loop {
            let (o, l) = corrupt_order(&s, 1.0, &mut r);
            if l == SopLabel::Reversed {
                break (o, l);
            }
        };
        assert_eq!(label, SopLabel::Reversed);
        let (a, b) = (s.to_document(), out.to_document());
        assert_eq!(a.background, b.background);
        assert_eq!(a.events[0].tokens, b.events[1].tokens);
        assert_eq!(a.events[0].stamp, b.events[0].stamp);
        assert_eq!(s.abs_position, out.abs_position);
    }

    #[test]
    fn augmentation_with_zero_rates_is_identity() {
        let s = doc_seq(6, 64);
        assert_eq!(augment(&s, &AugmentConfig::none(), &mut rng::rng(1)), s);
    }

    #[test]
    fn temporal_noise_is_bounded_and_keeps_tokens() {
        let s = doc_seq(6, 64);
        let cfg = AugmentConfig { temporal_noise: 1.0, ..AugmentConfig::none() };
        for seed in 0..20 {
            let out = augment(&s, &cfg, &mut rng::rng(seed));
            assert_eq!(out.token_ids, s.token_ids);
            for (a, b) in out.abs_position.iter().zip(&s.abs_position) {
                assert!((a - b).abs() <= 5);
            }
        }
    }

    #[test]
    fn background_masking_replaces_exactly_background() {
        let s = doc_seq(3, 32);
        let cfg = AugmentConfig { background_masking: 1.0, ..AugmentConfig::none() };
        let out = augment(&s, &cfg, &mut rng::rng(1));
        assert_eq!(&out.token_ids[1..5], &[UNK; 4]);
        assert_eq!(&out.token_ids[5..], &s.token_ids[5..]);
    }

    #[test]
    fn downsampling_keeps_layout_invariants() {
        let s = doc_seq(8, 64);
        let cfg = AugmentConfig { sequence_downsampling: 1.0, token_downsampling: 1.0, ..AugmentConfig::none() };
        for seed in 0..30 {
            let out = augment(&s, &cfg, &mut rng::rng(seed));
            assert_eq!(out.token_ids[0], CLS);
            assert_eq!(out.len(), s.len());
            let n = out.n_real();
            assert_eq!(out.token_ids[n - 1], SEP);
            assert!(out.token_ids[n..].iter().all(|&t| t == PAD));
            assert!(out.n_events() >= 4);
        }
    }
}

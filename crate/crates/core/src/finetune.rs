//! Task training on top of a pretrained model: positive/unlabeled mortality
//! classification and ordinal personality prediction.
//!
//! The task head learns at the base rate and every encoder layer below it at
//! a further `layer_decay` factor. Concept embeddings stay frozen apart from
//! the `[CLS]`, `[SEP]` and `[UNK]` rows.

use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::heads::row;
use crate::losses::{mean_of, personality_item_losses, pu_term, LossConfig, Normalizer};
use crate::metrics::{aul, cqk};
use crate::model::{Model, MORTALITY_NORMALIZER};
use crate::optim::{exponential_lr, Optimizer, OptimizerKind};
use crate::params::{GradBuffer, ParamStore};
use crate::rng;
use crate::synthgen::{N_ITEMS, N_LEVELS};
use crate::tokenizer::{EncodedSequence, CLS, SEP, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mortality,
    Personality,
}

impl Task {
    /// Prefix of the parameters of this task's head.
    pub fn head_prefix(self) -> &'static str {
        match self {
            Task::Mortality => "head.pooled.",
            Task::Personality => "head.ordinal.",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResamplingConfig {
    pub enabled: bool,
    /// Weight of the newest difficulty in the running average.
    pub ewa_alpha: f64,
    /// Raw difficulties are capped at this value.
    pub clip: f64,
    /// Difficulty of every sample before it is first seen.
    pub initial: f64,
}

impl Default for ResamplingConfig {
    fn default() -> Self {
        Self { enabled: true, ewa_alpha: 0.5, clip: 100.0, initial: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub decoder_lr: f64,
    /// Learning-rate factor per encoder layer below the head.
    pub layer_decay: f64,
    /// Per-epoch exponential decay of the base rate.
    pub lr_gamma: f64,
    pub decoder_weight_decay: f64,
    pub encoder_weight_decay: f64,
    pub max_grad_norm: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Samples drawn per epoch; 0 means the training-set size.
    pub epoch_size: usize,
    /// Draw equal numbers of positive and unlabeled samples per batch.
    pub balance_classes: bool,
    pub resampling: ResamplingConfig,
    /// Asymmetry constants tried for the mortality loss, keeping the best
    /// validation AUL; empty uses the loss configuration's constant.
    pub asymmetry_grid: Vec<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            decoder_lr: 0.01,
            layer_decay: 0.95,
            lr_gamma: 0.8,
            decoder_weight_decay: 0.01,
            encoder_weight_decay: 0.001,
            max_grad_norm: 1.0,
            max_epochs: 10,
            patience: 2,
            batch_size: 32,
            epoch_size: 0,
            balance_classes: true,
            resampling: ResamplingConfig::default(),
            asymmetry_grid: vec![0.0, 0.25, 0.5, 1.0],
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("decoder_lr", self.decoder_lr),
            ("layer_decay", self.layer_decay),
            ("lr_gamma", self.lr_gamma),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("finetune.{name}"), format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [("decoder_weight_decay", self.decoder_weight_decay), ("encoder_weight_decay", self.encoder_weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("finetune.{name}"), "must be non-negative"));
            }
        }
        if self.patience == 0 {
            return Err(Error::config("finetune.patience", "must be at least 1"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("finetune.batch_size", "epochs and batch size must be positive"));
        }
        if self.asymmetry_grid.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("finetune.asymmetry_grid", "values must be finite"));
        }
        let r = &self.resampling;
        if !(r.ewa_alpha > 0.0 && r.ewa_alpha <= 1.0) {
            return Err(Error::config("finetune.resampling.ewa_alpha", "must lie in (0, 1]"));
        }
        if !(r.clip > 0.0 && r.initial > 0.0 && r.clip.is_finite() && r.initial.is_finite()) {
            return Err(Error::config("finetune.resampling.clip", "clip and initial difficulty must be positive"));
        }
        Ok(())
    }
}

/// Distance of a parameter from the task head: 0 for the head, `n - l` for
/// encoder layer `l`, `n + 1` for the embeddings. `None` for unrelated heads.
pub fn layer_depth(name: &str, task: Task, n_layers: usize) -> Option<usize> {
    if name.starts_with(task.head_prefix()) {
        return Some(0);
    }
    if name.starts_with("embedding.") {
        return Some(n_layers + 1);
    }
    let layer = name.strip_prefix("encoder.")?.split('.').next()?.parse::<usize>().ok()?;
    Some(n_layers - layer)
}

/// Concept rows that stay trainable during finetuning.
pub const TRAINABLE_CONCEPTS: [u32; 3] = [CLS, SEP, UNK];

/// Optimizer with the layer-wise rates, weight decay and embedding freeze.
pub fn finetune_optimizer(model: &Model, task: Task, cfg: &FinetuneConfig) -> Optimizer {
    let mut opt = Optimizer::new(OptimizerKind::RAdam, &model.store).with_max_grad_norm(Some(cfg.max_grad_norm));
    let n_layers = model.cfg.encoder.n_layers;
    for (id, name, value) in model.store.iter() {
        let s = opt.settings_mut(id);
        match layer_depth(name, task, n_layers) {
            None => s.lr_scale = 0.0,
            Some(k) => {
                s.lr_scale = cfg.layer_decay.powi(k as i32);
                if value.len() > 1 {
                    s.weight_decay = if k == 0 { cfg.decoder_weight_decay } else { cfg.encoder_weight_decay };
                }
            }
        }
        if id == model.embedder.concept {
            s.trainable_rows = Some((0..value.nrows()).map(|r| TRAINABLE_CONCEPTS.contains(&(r as u32))).collect());
        }
    }
    opt
}

/// Sample indices for one epoch of mortality batches. With balancing, each
/// batch holds `⌈b/2⌉` positives and the rest unlabeled samples, both drawn
/// with replacement. Depends only on `(seed, epoch)`, so every model trained
/// on the cohort sees identical batches.
pub fn mortality_batches(positive: &[bool], epoch_size: usize, batch_size: usize, balance: bool, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let pos: Vec<usize> = (0..positive.len()).filter(|&i| positive[i]).collect();
    let unl: Vec<usize> = (0..positive.len()).filter(|&i| !positive[i]).collect();
    let mut r = rng::child_indexed(seed, "batches", epoch as u64);
    let n = if epoch_size == 0 { positive.len() } else { epoch_size };
    let mut out = Vec::with_capacity(n.div_ceil(batch_size));
    let mut remaining = n;
    while remaining > 0 {
        let b = remaining.min(batch_size);
        remaining -= b;
        let batch = if balance && !pos.is_empty() && !unl.is_empty() {
            let n_pos = b.div_ceil(2);
            (0..b).map(|k| if k < n_pos { pos[r.gen_range(0..pos.len())] } else { unl[r.gen_range(0..unl.len())] }).collect()
        } else {
            (0..b).map(|_| r.gen_range(0..positive.len())).collect()
        };
        out.push(batch);
    }
    out
}

/// Per-sample weights that make a batch's summed PU terms equal the
/// class-balanced asymmetric loss.
pub fn pu_weights(batch: &[usize], positive: &[bool]) -> Vec<f64> {
    let p = batch.iter().filter(|&&i| positive[i]).count();
    let u = batch.len() - p;
    batch.iter().map(|&i| if positive[i] { 1.0 / p as f64 } else { 1.0 / u as f64 }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation AUL (mortality) or mean CQK (personality).
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Keeps the best parameters seen and decides when to stop.
pub(crate) struct EarlyStop {
    pub(crate) patience: usize,
    pub(crate) best: Option<(f64, usize, ParamStore)>,
}

impl EarlyStop {
    /// Records an epoch; returns true when training should stop.
    pub(crate) fn observe(&mut self, metric: f64, epoch: usize, store: &ParamStore) -> bool {
        if self.best.as_ref().map_or(true, |(m, _, _)| metric > *m) {
            self.best = Some((metric, epoch, store.clone()));
        }
        let best_epoch = self.best.as_ref().map_or(epoch, |b| b.1);
        epoch - best_epoch >= self.patience
    }
}

pub fn mortality_scores(model: &Model, seqs: &[EncodedSequence]) -> Result<Vec<f64>> {
    let bank = model.eval_bank();
    seqs.iter().map(|s| model.mortality_probability(s, &bank)).collect()
}

/// Trains the mortality head with the asymmetric loss and early stopping on
/// validation AUL; the model is left at its best epoch.
pub fn finetune_mortality(
    model: &mut Model,
    train: (&[EncodedSequence], &[bool]),
    val: (&[EncodedSequence], &[bool]),
    cfg: &FinetuneConfig,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let (seqs, positive) = train;
    if seqs.len() != positive.len() || val.0.len() != val.1.len() {
        return Err(Error::invalid("labels and sequences differ in length"));
    }
    if !positive.iter().any(|&p| p) {
        return Err(Error::invalid("mortality cohort has no positive samples"));
    }
    if !val.1.iter().any(|&p| p) {
        return Err(Error::invalid("validation cohort has no positive samples"));
    }
    let mut opt = finetune_optimizer(model, Task::Mortality, cfg);
    let mut stop = EarlyStop { patience: cfg.patience, best: None };
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let lr = exponential_lr(cfg.decoder_lr, cfg.lr_gamma, epoch);
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for batch in mortality_batches(positive, cfg.epoch_size, cfg.batch_size, cfg.balance_classes, seed, epoch) {
            let bank = model.train_bank(step as u64);
            let weights = pu_weights(&batch, positive);
            let mut grads = GradBuffer::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for (&i, &w) in batch.iter().zip(&weights) {
                let mut tape = Tape::new();
                let out = model.mortality_forward(&mut tape, &seqs[i], &bank)?;
                let l = pu_term(&mut tape, out.logits, positive[i], loss_cfg.asymmetric_c, MORTALITY_NORMALIZER);
                let v = tape.scalar(l);
                if !v.is_finite() {
                    return Err(Error::Diverged { step, what: "mortality loss".into() });
                }
                batch_loss += w * v;
                grads.accumulate(&tape.backward(l), w);
            }
            opt.step(&mut model.store, &grads, lr);
            loss_sum += batch_loss;
            n_batches += 1;
            step += 1;
        }
        let val_aul = aul(&mortality_scores(model, val.0)?, val.1)?;
        history.push(FinetuneEpoch { epoch: epoch + 1, train_loss: loss_sum / n_batches as f64, val_metric: val_aul, lr });
        if stop.observe(val_aul, epoch + 1, &model.store) {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    let (_, best_epoch, store) = stop.best.expect("at least one epoch");
    model.store = store;
    Ok(FinetuneOutcome { history, best_epoch, stopped_early, steps: step })
}

/// Finetunes a copy of `model` for every asymmetry constant and keeps the one
/// with the highest validation AUL.
pub fn select_asymmetric_c(
    model: &Model,
    train: (&[EncodedSequence], &[bool]),
    val: (&[EncodedSequence], &[bool]),
    cfg: &FinetuneConfig,
    loss_cfg: &LossConfig,
    grid: &[f64],
    seed: u64,
) -> Result<(f64, Model, FinetuneOutcome)> {
    let mut best: Option<(f64, f64, Model, FinetuneOutcome)> = None;
    for &c in grid {
        let mut m = model.clone();
        let lc = LossConfig { asymmetric_c: c, ..loss_cfg.clone() };
        let out = finetune_mortality(&mut m, train, val, cfg, &lc, seed)?;
        let score = out.history[out.best_epoch - 1].val_metric;
        if best.as_ref().map_or(true, |b| score > b.0) {
            best = Some((score, c, m, out));
        }
    }
    let (_, c, m, out) = best.ok_or_else(|| Error::invalid("empty asymmetry grid"))?;
    Ok((c, m, out))
}

/// Running per-sample difficulty driving personality resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyState {
    pub difficulty: Vec<f64>,
    pub ewa_alpha: f64,
    pub clip: f64,
}

impl DifficultyState {
    pub fn new(n: usize, cfg: &ResamplingConfig) -> Self {
        Self { difficulty: vec![cfg.initial; n], ewa_alpha: cfg.ewa_alpha, clip: cfg.clip }
    }

    /// Sampling weights; the identity of the running difficulty, which stays
    /// strictly positive because raw difficulties are non-negative.
    pub fn weights(&self) -> &[f64] {
        &self.difficulty
    }
}

/// Folds one round of per-item raw difficulties for samples `indices` into
/// the running averages: take the hardest item, cap it at `clip`, divide by
/// the interquartile range across the round (1 when that range is 0), then
/// average with the previous value.
pub fn update_difficulty(state: &mut DifficultyState, indices: &[usize], raw: &[[f64; N_ITEMS]]) {
    if indices.is_empty() {
        return;
    }
    let capped: Vec<f64> = raw.iter().map(|r| r.iter().fold(0.0f64, |a, &b| a.max(b)).min(state.clip)).collect();
    let iqr = crate::metrics::quantile(&capped, 0.75) - crate::metrics::quantile(&capped, 0.25);
    let den = if iqr > 0.0 { iqr } else { 1.0 };
    for (&i, &d) in indices.iter().zip(&capped) {
        state.difficulty[i] = state.ewa_alpha * d / den + (1.0 - state.ewa_alpha) * state.difficulty[i];
    }
}

/// Sample indices for one personality epoch, drawn in proportion to `weights`.
pub fn weighted_epoch(weights: &[f64], n: usize, seed: u64, epoch: usize) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(format!("sampling weights: {e}")))?;
    let mut r = rng::child_indexed(seed, "resample", epoch as u64);
    Ok((0..n).map(|_| dist.sample(&mut r)).collect())
}

/// Most likely level per item.
pub fn decode_levels(probs: &[[f64; N_LEVELS]; N_ITEMS]) -> [u8; N_ITEMS] {
    let mut out = [0u8; N_ITEMS];
    for (o, p) in out.iter_mut().zip(probs) {
        *o = crate::pretrain::argmax(p.iter().copied()) as u8;
    }
    out
}

pub fn personality_predictions(model: &Model, seqs: &[EncodedSequence]) -> Result<Vec<[u8; N_ITEMS]>> {
    let bank = model.eval_bank();
    seqs.iter().map(|s| Ok(decode_levels(&model.personality_probabilities(s, &bank)?))).collect()
}

/// Mean over items of the quadratic-weighted kappa.
pub fn mean_cqk(truth: &[[u8; N_ITEMS]], predicted: &[[u8; N_ITEMS]]) -> f64 {
    (0..N_ITEMS)
        .map(|item| {
            let t: Vec<u8> = truth.iter().map(|r| r[item]).collect();
            let p: Vec<u8> = predicted.iter().map(|r| r[item]).collect();
            cqk(&t, &p, N_LEVELS)
        })
        .sum::<f64>()
        / N_ITEMS as f64
}

/// Trains the ordinal head with the combined loss, difficulty-weighted
/// sampling and early stopping on validation CQK.
pub fn finetune_personality(
    model: &mut Model,
    train: (&[EncodedSequence], &[[u8; N_ITEMS]]),
    val: (&[EncodedSequence], &[[u8; N_ITEMS]]),
    cfg: &FinetuneConfig,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let (seqs, targets) = train;
    if seqs.len() != targets.len() || val.0.len() != val.1.len() || seqs.is_empty() || val.0.is_empty() {
        return Err(Error::invalid("personality cohort needs equally sized, non-empty sequences and targets"));
    }
    for item in 0..N_ITEMS {
        let first = targets[0][item];
        if targets.iter().all(|t| t[item] == first) {
            return Err(Error::invalid(format!("item {item} has a single observed level in training data")));
        }
    }
    if targets.iter().flatten().any(|&l| l as usize >= N_LEVELS) {
        return Err(Error::invalid("response level out of range"));
    }
    let mut opt = finetune_optimizer(model, Task::Personality, cfg);
    let mut state = DifficultyState::new(seqs.len(), &cfg.resampling);
    let uniform = vec![1.0; seqs.len()];
    let mut stop = EarlyStop { patience: cfg.patience, best: None };
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut stopped_early = false;
    let n = if cfg.epoch_size == 0 { seqs.len() } else { cfg.epoch_size };
    for epoch in 0..cfg.max_epochs {
        let lr = exponential_lr(cfg.decoder_lr, cfg.lr_gamma, epoch);
        let weights = if cfg.resampling.enabled { state.weights() } else { &uniform };
        let order = weighted_epoch(weights, n, seed, epoch)?;
        let mut seen: Vec<Option<[f64; N_ITEMS]>> = vec![None; seqs.len()];
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bank = model.train_bank(step as u64);
            let mut grads = GradBuffer::zeros_like(&model.store);
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let h = model.contextual(&mut tape, &seqs[i], &bank)?;
                let cls = row(&mut tape, h, 0);
                let logits = model.personality.forward(&mut tape, &model.store, cls);
                let probs = Normalizer::SigSoftmax.apply(&mut tape, logits);
                let y: Vec<usize> = targets[i].iter().map(|&l| l as usize).collect();
                let items = personality_item_losses(&mut tape, probs, &y, loss_cfg);
                let mut raw = [0.0; N_ITEMS];
                for (r, &v) in raw.iter_mut().zip(&items) {
                    *r = tape.scalar(v);
                }
                let l = mean_of(&mut tape, &items);
                let v = tape.scalar(l);
                if !v.is_finite() {
                    return Err(Error::Diverged { step, what: "personality loss".into() });
                }
                seen[i] = Some(raw);
                loss_sum += v;
                grads.accumulate(&tape.backward(l), w);
            }
            opt.step(&mut model.store, &grads, lr);
            step += 1;
        }
        let (idx, raw): (Vec<usize>, Vec<[f64; N_ITEMS]>) = seen.iter().enumerate().filter_map(|(i, r)| r.map(|r| (i, r))).unzip();
        update_difficulty(&mut state, &idx, &raw);
        let val_cqk = mean_cqk(val.1, &personality_predictions(model, val.0)?);
        history.push(FinetuneEpoch { epoch: epoch + 1, train_loss: loss_sum / n as f64, val_metric: val_cqk, lr });
        if stop.observe(val_cqk, epoch + 1, &model.store) {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    let (_, best_epoch, store) = stop.best.expect("at least one epoch");
    model.store = store;
    Ok(FinetuneOutcome { history, best_epoch, stopped_early, steps: step })
}

pub fn write_finetune_csv(path: &Path, history: &[FinetuneEpoch]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_metric,lr\n");
    for h in history {
        text.push_str(&format!("{},{},{},{}\n", h.epoch, h.train_loss, h.val_metric, h.lr));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

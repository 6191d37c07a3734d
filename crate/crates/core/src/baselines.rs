//! Comparison models for the mortality task: a life table on age and sex,
//! ridge logistic regression on recent token counts, and a feed-forward
//! network on the same counts. All share the positive/unlabeled objective and
//! the batch order of the transformer.

use std::sync::Arc;

use chrono::NaiveDate;
use ndarray::{Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::Linear;
use crate::error::{Error, Result};
use crate::finetune::{mortality_batches, pu_weights, EarlyStop, FinetuneEpoch};
use crate::graph::{Tape, Var};
use crate::metrics::aul;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{GradBuffer, ParamStore};
use crate::rng;
use crate::synthgen::{PersonRecord, Sex};
use crate::tokenizer::{is_special, EncodedSequence, NO_TIME};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    LifeTable,
    LogReg,
    Ffnn,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::LifeTable => "life_table",
            BaselineKind::LogReg => "logreg",
            BaselineKind::Ffnn => "ffnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Samples per epoch; 0 means the training-set size.
    pub epoch_size: usize,
    pub balance_classes: bool,
    /// Step size of the gradient-descent models.
    pub sgd_lr: f64,
    /// Ridge penalty of logistic regression.
    pub ridge: f64,
    pub ffnn_lr: f64,
    pub ffnn_weight_decay: f64,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            patience: 5,
            batch_size: 32,
            epoch_size: 0,
            balance_classes: true,
            sgd_lr: 0.05,
            ridge: 1e-3,
            ffnn_lr: 5e-4,
            ffnn_weight_decay: 1e-4,
            hidden: vec![16],
            dropout: 0.2,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config("baselines.epochs", "epochs, batch size and patience must be positive"));
        }
        for (name, v) in [("sgd_lr", self.sgd_lr), ("ffnn_lr", self.ffnn_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("baselines.{name}"), "must be positive"));
            }
        }
        if !(self.ridge >= 0.0 && self.ffnn_weight_decay >= 0.0) {
            return Err(Error::config("baselines.ridge", "penalties must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("baselines.dropout", "must lie in [0, 1)"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("baselines.hidden", "layer sizes must be positive"));
        }
        Ok(())
    }
}

/// Standardised age at `at` and a male indicator.
pub fn life_table_features(records: &[PersonRecord], at: NaiveDate) -> Array2<f64> {
    Array2::from_shape_fn((records.len(), 2), |(i, j)| match j {
        0 => (records[i].age_at(at) as f64 - 50.0) / 15.0,
        _ => f64::from(u8::from(records[i].sex == Sex::Male)),
    })
}

/// Day number (origin is day 1) where the final observed year begins.
pub fn final_year_start(origin: NaiveDate, end: NaiveDate) -> i32 {
    (end - origin).num_days() as i32 + 1 - 365
}

/// `ln(1 + count)` of every non-special token in the background sentence or
/// in events on or after day `since`.
pub fn recent_counts(seqs: &[EncodedSequence], vocab_size: usize, since: i32) -> Array2<f64> {
    let mut out = Array2::zeros((seqs.len(), vocab_size));
    for (i, s) in seqs.iter().enumerate() {
        for (k, &t) in s.token_ids.iter().enumerate() {
            let pos = s.abs_position[k];
            if !s.padding_mask[k] && !is_special(t) && (pos == NO_TIME || pos >= since) {
                out[[i, t as usize]] += 1.0;
            }
        }
    }
    out.mapv_inplace(f64::ln_1p);
    out
}

/// Swish MLP ending in a single logit; no hidden layers gives a linear model.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub store: ParamStore,
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl BaselineModel {
    pub fn new(kind: BaselineKind, n_features: usize, hidden: &[usize], dropout: f64, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut r = rng::child(seed, kind.name());
        let mut sizes = vec![n_features];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(&mut store, &format!("{}.{k}", kind.name()), w[0], w[1], &mut r))
            .collect();
        Self { kind, store, layers, dropout }
    }

    pub fn n_parameters(&self) -> usize {
        self.store.count()
    }

    /// Logits (rows × 1); dropout masks are applied when `masks` is given.
    fn forward(&self, tape: &mut Tape, x: Var, mut masks: Option<&mut rng::Rng>) -> Var {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &self.store, h);
            if k + 1 < self.layers.len() {
                h = tape.swish(h);
                if let Some(r) = masks.as_deref_mut() {
                    if self.dropout > 0.0 {
                        let keep = 1.0 - self.dropout;
                        let (n, m) = tape.shape(h);
                        let mask = Array2::from_shape_fn((n, m), |_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
                        h = tape.mul_const(h, Arc::new(mask));
                    }
                }
            }
        }
        h
    }

    /// Probability of the positive class for every row of `x`.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let z = self.forward(&mut tape, input, None);
        tape.value(z).iter().map(|&v| crate::synthgen::sigmoid(v)).collect()
    }
}

/// Weighted positive/unlabeled loss on single-logit rows: a positive row
/// pays `−ln σ(z)`, an unlabeled one `−ln σ(c − z)`.
pub fn pu_logit_loss(tape: &mut Tape, z: Var, positive: &[bool], weights: &[f64], c: f64) -> Var {
    let n = positive.len();
    let sign = Array2::from_shape_fn((n, 1), |(i, _)| if positive[i] { 1.0 } else { -1.0 });
    let offset = Array2::from_shape_fn((n, 1), |(i, _)| if positive[i] { 0.0 } else { c });
    let w = Array2::from_shape_fn((n, 1), |(i, _)| -weights[i]);
    let signed = tape.mul_const(z, Arc::new(sign));
    let shifted = tape.add_const(signed, &offset);
    let ls = tape.log_sigmoid(shifted);
    let weighted = tape.mul_const(ls, Arc::new(w));
    tape.sum(weighted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
}

/// Trains a baseline on feature rows with the batch order shared with the
/// transformer (same `seed`), keeping the epoch with the best validation AUL.
pub fn train_baseline(
    kind: BaselineKind,
    train: (&Array2<f64>, &[bool]),
    val: (&Array2<f64>, &[bool]),
    cfg: &BaselineConfig,
    c: f64,
    seed: u64,
) -> Result<(BaselineModel, BaselineOutcome)> {
    cfg.validate()?;
    let (x, positive) = train;
    if x.nrows() != positive.len() || val.0.nrows() != val.1.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    if !positive.iter().any(|&p| p) || !val.1.iter().any(|&p| p) {
        return Err(Error::invalid("mortality cohort has no positive samples"));
    }
    let hidden: &[usize] = if kind == BaselineKind::Ffnn { &cfg.hidden } else { &[] };
    let mut model = BaselineModel::new(kind, x.ncols(), hidden, cfg.dropout, seed);
    let (opt_kind, lr, decay) = match kind {
        BaselineKind::LifeTable => (OptimizerKind::Sgd, cfg.sgd_lr, 0.0),
        BaselineKind::LogReg => (OptimizerKind::Sgd, cfg.sgd_lr, cfg.ridge),
        BaselineKind::Ffnn => (OptimizerKind::AdamW, cfg.ffnn_lr, cfg.ffnn_weight_decay),
    };
    let mut opt = Optimizer::new(opt_kind, &model.store).with_max_grad_norm(None);
    for (id, name, _) in model.store.iter() {
        if name.ends_with(".weight") {
            opt.settings_mut(id).weight_decay = decay;
        }
    }
    let mut stop = EarlyStop { patience: cfg.patience, best: None };
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        for batch in mortality_batches(positive, cfg.epoch_size, cfg.batch_size, cfg.balance_classes, seed, epoch) {
            let weights = pu_weights(&batch, positive);
            let labels: Vec<bool> = batch.iter().map(|&i| positive[i]).collect();
            let mut tape = Tape::new();
            let input = tape.constant(x.select(Axis(0), &batch));
            let mut drop = rng::child_indexed(seed, "dropout", step);
            let z = model.forward(&mut tape, input, Some(&mut drop));
            let loss = pu_logit_loss(&mut tape, z, &labels, &weights, c);
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Diverged { step: step as usize, what: format!("{} loss", kind.name()) });
            }
            let mut grads = GradBuffer::zeros_like(&model.store);
            grads.accumulate(&tape.backward(loss), 1.0);
            opt.step(&mut model.store, &grads, lr);
            loss_sum += v;
            n_batches += 1;
            step += 1;
        }
        let val_aul = aul(&model.predict(val.0), val.1)?;
        history.push(FinetuneEpoch { epoch: epoch + 1, train_loss: loss_sum / n_batches as f64, val_metric: val_aul, lr });
        if stop.observe(val_aul, epoch + 1, &model.store) {
            break;
        }
    }
    let (_, best_epoch, store) = stop.best.expect("at least one epoch");
    model.store = store;
    Ok((model, BaselineOutcome { history, best_epoch }))
}

pub fn train_life_table(
    train: (&Array2<f64>, &[bool]),
    val: (&Array2<f64>, &[bool]),
    cfg: &BaselineConfig,
    c: f64,
    seed: u64,
) -> Result<(BaselineModel, BaselineOutcome)> {
    if train.0.ncols() != 2 {
        return Err(Error::invalid("life table takes exactly two covariates"));
    }
    train_baseline(BaselineKind::LifeTable, train, val, cfg, c, seed)
}

pub fn train_logreg(
    train: (&Array2<f64>, &[bool]),
    val: (&Array2<f64>, &[bool]),
    cfg: &BaselineConfig,
    c: f64,
    seed: u64,
) -> Result<(BaselineModel, BaselineOutcome)> {
    train_baseline(BaselineKind::LogReg, train, val, cfg, c, seed)
}

pub fn train_ffnn(
    train: (&Array2<f64>, &[bool]),
    val: (&Array2<f64>, &[bool]),
    cfg: &BaselineConfig,
    c: f64,
    seed: u64,
) -> Result<(BaselineModel, BaselineOutcome)> {
    train_baseline(BaselineKind::Ffnn, train, val, cfg, c, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{pu_term, Normalizer};

    #[test]
    fn life_table_has_three_parameters() {
        assert_eq!(BaselineModel::new(BaselineKind::LifeTable, 2, &[], 0.0, 1).n_parameters(), 3);
    }

    #[test]
    fn logit_loss_matches_two_class_term() {
        let z = [0.4, -1.3, 2.2];
        let positive = [true, false, false];
        let w = [1.0, 0.5, 0.5];
        let mut t = Tape::new();
        let zv = t.constant(Array2::from_shape_vec((3, 1), z.to_vec()).unwrap());
        let l = pu_logit_loss(&mut t, zv, &positive, &w, 0.6);
        let mut expected = 0.0;
        for i in 0..3 {
            let row = t.constant(Array2::from_shape_vec((1, 2), vec![0.0, z[i]]).unwrap());
            let term = pu_term(&mut t, row, positive[i], 0.6, Normalizer::Softmax);
            expected += w[i] * t.scalar(term);
        }
        assert!((t.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_counts_predict_the_bias() {
        let m = BaselineModel::new(BaselineKind::LogReg, 4, &[], 0.0, 2);
        let b = m.store.get(m.layers[0].b)[[0, 0]];
        for p in m.predict(&Array2::zeros((3, 4))) {
            assert_eq!(p, crate::synthgen::sigmoid(b));
        }
    }
}

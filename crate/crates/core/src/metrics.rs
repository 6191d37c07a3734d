//! Evaluation metrics for positive/unlabeled and ordinal predictions.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quantile(data: &[f64], q: f64) -> f64 {
    let mut s = data.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, q)
}

/// Matthews correlation from (possibly fractional) confusion counts; 0 when
/// a marginal is empty.
pub fn mcc_from_counts(tp: f64, fp: f64, fn_: f64, tn: f64) -> f64 {
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if !(den > 0.0) {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den
}

pub fn mcc(labels: &[bool], predicted: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&y, &p) in labels.iter().zip(predicted) {
        match (y, p) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    mcc_from_counts(tp, fp, fn_, tn)
}

/// Fraction of the unlabeled set that is secretly positive, given the
/// observed positive share and the rate at which positives go unobserved.
pub fn hidden_positive_fraction(observed_positive_share: f64, censoring_rate: f64) -> f64 {
    if observed_positive_share >= 1.0 || censoring_rate <= 0.0 {
        return 0.0;
    }
    let prevalence = observed_positive_share / (1.0 - censoring_rate);
    (censoring_rate * prevalence / (1.0 - observed_positive_share)).clamp(0.0, 1.0)
}

/// Population confusion rates recovered from positive/unlabeled data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectedRates {
    /// True-positive rate, measured on labeled positives.
    pub tpr: f64,
    /// False-positive rate among true negatives.
    pub fpr: f64,
    /// Share of true positives in the whole population.
    pub prevalence: f64,
}

impl CorrectedRates {
    pub fn counts(&self) -> (f64, f64, f64, f64) {
        let p = self.prevalence;
        (p * self.tpr, (1.0 - p) * self.fpr, p * (1.0 - self.tpr), (1.0 - p) * (1.0 - self.fpr))
    }
}

/// Corrects observed rates for `alpha`, the fraction of unlabeled samples
/// that are positive. `None` when either label set is empty.
pub fn corrected_rates(scores: &[f64], positive: &[bool], threshold: f64, alpha: f64) -> Option<CorrectedRates> {
    let (mut n_pos, mut hit_pos, mut n_unl, mut hit_unl) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(positive) {
        let pred = s >= threshold;
        if y {
            n_pos += 1;
            hit_pos += usize::from(pred);
        } else {
            n_unl += 1;
            hit_unl += usize::from(pred);
        }
    }
    if n_pos == 0 || n_unl == 0 {
        return None;
    }
    let tpr = hit_pos as f64 / n_pos as f64;
    let unl_rate = hit_unl as f64 / n_unl as f64;
    let fpr = if alpha < 1.0 { ((unl_rate - alpha * tpr) / (1.0 - alpha)).clamp(0.0, 1.0) } else { 0.0 };
    let n = (n_pos + n_unl) as f64;
    let prevalence = (n_pos as f64 + alpha * n_unl as f64) / n;
    Some(CorrectedRates { tpr, fpr, prevalence })
}

/// Corrected Matthews correlation at `threshold`; 0 for degenerate inputs.
pub fn cmcc(scores: &[f64], positive: &[bool], threshold: f64, alpha: f64) -> f64 {
    match corrected_rates(scores, positive, threshold, alpha) {
        Some(r) => {
            let (tp, fp, fn_, tn) = r.counts();
            mcc_from_counts(tp, fp, fn_, tn)
        }
        None => 0.0,
    }
}

/// Corrected balanced accuracy and F1 at `threshold`.
pub fn corrected_accuracy_f1(scores: &[f64], positive: &[bool], threshold: f64, alpha: f64) -> (f64, f64) {
    match corrected_rates(scores, positive, threshold, alpha) {
        Some(r) => {
            let (tp, fp, fn_, _) = r.counts();
            let bacc = (r.tpr + 1.0 - r.fpr) / 2.0;
            let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
            (bacc, f1)
        }
        None => (0.0, 0.0),
    }
}

/// Area under the lift curve (share of positives captured against share of
/// samples selected, by descending score; tied scores form one segment).
pub fn aul(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n = scores.len();
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::invalid("lift curve needs at least one positive"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut area, mut x, mut y) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut hits = 0usize;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            hits += usize::from(positive[idx[j]]);
            j += 1;
        }
        let nx = x + (j - i) as f64 / n as f64;
        let ny = y + hits as f64 / n_pos as f64;
        area += (nx - x) * (y + ny) / 2.0;
        x = nx;
        y = ny;
        i = j;
    }
    Ok(area)
}

/// Cohen's kappa with quadratic weights over levels `0..n_levels`.
pub fn cqk(truth: &[u8], predicted: &[u8], n_levels: usize) -> f64 {
    let n = truth.len() as f64;
    if truth.is_empty() || n_levels < 2 {
        return 0.0;
    }
    let mut obs = vec![vec![0.0; n_levels]; n_levels];
    let mut row = vec![0.0; n_levels];
    let mut col = vec![0.0; n_levels];
    for (&t, &p) in truth.iter().zip(predicted) {
        obs[t as usize][p as usize] += 1.0;
        row[t as usize] += 1.0;
        col[p as usize] += 1.0;
    }
    let w = |i: usize, j: usize| ((i as f64 - j as f64) / (n_levels as f64 - 1.0)).powi(2);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n_levels {
        for j in 0..n_levels {
            num += w(i, j) * obs[i][j];
            den += w(i, j) * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        return if num == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - num / den
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub median: f64,
}

/// Indices of one stratified resample (sampling with replacement inside
/// each stratum, preserving stratum sizes).
pub fn stratified_resample(strata: &[usize], seed: u64, index: u64) -> Vec<usize> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in strata.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut r = rng::child_indexed(seed, "resample", index);
    let mut out = Vec::with_capacity(strata.len());
    for members in groups.values() {
        for _ in 0..members.len() {
            out.push(members[r.gen_range(0..members.len())]);
        }
    }
    out
}

/// Metric values on `n_resamples` stratified resamples. Resample `b` depends
/// only on `(seed, b)`, so longer runs extend shorter ones.
pub fn bootstrap_values(strata: &[usize], n_resamples: usize, seed: u64, metric: impl Fn(&[usize]) -> f64) -> Vec<f64> {
    (0..n_resamples as u64).map(|b| metric(&stratified_resample(strata, seed, b))).collect()
}

/// Percentile interval at `level` around the metric on the full sample.
pub fn bootstrap_ci(
    strata: &[usize],
    n_resamples: usize,
    level: f64,
    seed: u64,
    metric: impl Fn(&[usize]) -> f64,
) -> Interval {
    let all: Vec<usize> = (0..strata.len()).collect();
    let point = metric(&all);
    if n_resamples == 0 {
        return Interval { point, low: point, high: point, median: point };
    }
    let mut v = bootstrap_values(strata, n_resamples, seed, metric);
    v.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Interval {
        point,
        low: quantile_sorted(&v, tail),
        high: quantile_sorted(&v, 1.0 - tail),
        median: quantile_sorted(&v, 0.5),
    }
}

/// Binary predictions with subgroup keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scores: Vec<f64>,
    pub positive: Vec<bool>,
    /// Key name → per-sample group value (e.g. "sex" → ["male", ...]).
    pub keys: BTreeMap<String, Vec<String>>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(Error::invalid("empty prediction set"));
        }
        if self.positive.len() != self.scores.len() || self.keys.values().any(|v| v.len() != self.scores.len()) {
            return Err(Error::invalid("prediction set columns differ in length"));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("non-finite score"));
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> PredictionSet {
        PredictionSet {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            positive: idx.iter().map(|&i| self.positive[i]).collect(),
            keys: self.keys.iter().map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i].clone()).collect())).collect(),
        }
    }

    pub fn strata(&self) -> Vec<usize> {
        self.positive.iter().map(|&p| usize::from(p)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryMetric {
    Cmcc,
    Aul,
    BalancedAccuracy,
    F1,
}

impl BinaryMetric {
    pub const ALL: [BinaryMetric; 4] = [BinaryMetric::Cmcc, BinaryMetric::Aul, BinaryMetric::BalancedAccuracy, BinaryMetric::F1];

    pub fn name(self) -> &'static str {
        match self {
            BinaryMetric::Cmcc => "c_mcc",
            BinaryMetric::Aul => "aul",
            BinaryMetric::BalancedAccuracy => "corrected_balanced_accuracy",
            BinaryMetric::F1 => "corrected_f1",
        }
    }

    /// Value on a subset; AUL without positives is reported as NaN.
    pub fn eval(self, scores: &[f64], positive: &[bool], settings: &MetricSettings) -> f64 {
        match self {
            BinaryMetric::Cmcc => cmcc(scores, positive, settings.threshold, settings.alpha),
            BinaryMetric::Aul => aul(scores, positive).unwrap_or(f64::NAN),
            BinaryMetric::BalancedAccuracy => corrected_accuracy_f1(scores, positive, settings.threshold, settings.alpha).0,
            BinaryMetric::F1 => corrected_accuracy_f1(scores, positive, settings.threshold, settings.alpha).1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub threshold: f64,
    /// Fraction of unlabeled samples assumed positive.
    pub alpha: f64,
    pub n_resamples: usize,
    pub level: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { threshold: 0.5, alpha: 0.0, n_resamples: 1000, level: 0.95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMetric {
    /// `key=value` pairs joined by `&`.
    pub group: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub subgroups: Vec<SubgroupMetric>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model: String,
    pub task: String,
    pub metrics: Vec<MetricReport>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,task,metric,group,point,ci_low,ci_high,n\n");
        for m in &self.metrics {
            out.push_str(&format!("{},{},{},all,{},{},{},{}\n", self.model, self.task, m.metric, m.point, m.ci_low, m.ci_high, m.n));
            for s in &m.subgroups {
                out.push_str(&format!("{},{},{},{},{},{},{},{}\n", self.model, self.task, m.metric, s.group, s.point, s.ci_low, s.ci_high, s.n));
            }
        }
        out
    }
}

/// Groups of sample indices for every key value and every pairwise
/// intersection of two keys, keyed by a `k=v[&k2=v2]` label.
pub fn subgroups(keys: &BTreeMap<String, Vec<String>>) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let names: Vec<&String> = keys.keys().collect();
    for (a, name) in names.iter().enumerate() {
        for (i, v) in keys[*name].iter().enumerate() {
            out.entry(format!("{name}={v}")).or_default().push(i);
            for other in &names[a + 1..] {
                out.entry(format!("{name}={v}&{other}={}", keys[*other][i])).or_default().push(i);
            }
        }
    }
    out
}

/// Point value and bootstrap interval of `metric` on every subgroup.
pub fn subgroup_report(preds: &PredictionSet, metric: BinaryMetric, settings: &MetricSettings, seed: u64) -> Vec<SubgroupMetric> {
    subgroups(&preds.keys)
        .into_iter()
        .map(|(group, idx)| {
            let sub = preds.subset(&idx);
            let ci = metric_interval(&sub, metric, settings, rng::derive(seed, &group));
            SubgroupMetric { group, point: ci.point, ci_low: ci.low, ci_high: ci.high, n: idx.len() }
        })
        .collect()
}

pub fn metric_interval(preds: &PredictionSet, metric: BinaryMetric, settings: &MetricSettings, seed: u64) -> Interval {
    bootstrap_ci(&preds.strata(), settings.n_resamples, settings.level, seed, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| preds.scores[i]).collect();
        let p: Vec<bool> = idx.iter().map(|&i| preds.positive[i]).collect();
        metric.eval(&s, &p, settings)
    })
}

/// Full binary-task report with intervals and subgroup breakdowns.
pub fn binary_report(model: &str, preds: &PredictionSet, settings: &MetricSettings, seed: u64) -> Result<EvalReport> {
    preds.validate()?;
    let metrics = BinaryMetric::ALL
        .iter()
        .map(|&m| {
            let s = rng::derive(seed, m.name());
            let ci = metric_interval(preds, m, settings, s);
            MetricReport {
                metric: m.name().to_string(),
                point: ci.point,
                ci_low: ci.low,
                ci_high: ci.high,
                n: preds.len(),
                subgroups: subgroup_report(preds, m, settings, s),
            }
        })
        .collect();
    Ok(EvalReport { schema_version: REPORT_SCHEMA_VERSION, model: model.to_string(), task: "mortality".into(), metrics })
}

/// Ordinal report: CQK per item and averaged, with stratified intervals.
pub fn ordinal_report(model: &str, truth: &[[u8; 4]], predicted: &[[u8; 4]], settings: &MetricSettings, seed: u64) -> Result<EvalReport> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(Error::invalid("ordinal report needs equally sized non-empty inputs"));
    }
    let n_levels = crate::synthgen::N_LEVELS;
    let item_cqk = |idx: &[usize], item: usize| {
        let t: Vec<u8> = idx.iter().map(|&i| truth[i][item]).collect();
        let p: Vec<u8> = idx.iter().map(|&i| predicted[i][item]).collect();
        cqk(&t, &p, n_levels)
    };
    let mut metrics = Vec::new();
    for item in 0..4 {
        let strata: Vec<usize> = truth.iter().map(|t| t[item] as usize).collect();
        let ci = bootstrap_ci(&strata, settings.n_resamples, settings.level, rng::derive_indexed(seed, "item", item as u64), |idx| {
            item_cqk(idx, item)
        });
        metrics.push(MetricReport {
            metric: format!("cqk_item{item}"),
            point: ci.point,
            ci_low: ci.low,
            ci_high: ci.high,
            n: truth.len(),
            subgroups: Vec::new(),
        });
    }
    let strata = vec![0; truth.len()];
    let ci = bootstrap_ci(&strata, settings.n_resamples, settings.level, rng::derive(seed, "mean"), |idx| {
        (0..4).map(|i| item_cqk(idx, i)).sum::<f64>() / 4.0
    });
    metrics.push(MetricReport { metric: "cqk_mean".into(), point: ci.point, ci_low: ci.low, ci_high: ci.high, n: truth.len(), subgroups: Vec::new() });
    Ok(EvalReport { schema_version: REPORT_SCHEMA_VERSION, model: model.to_string(), task: "personality".into(), metrics })
}

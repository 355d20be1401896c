//! Evaluation metrics.
//!
//! Conventions:
//!
//! * AUROC is the trapezoidal area under the ROC curve with tied scores
//!   forming one diagonal segment, which equals the rank statistic
//!   `(concordant + ½·tied) / (P·N)`. Both are computed from integer pair
//!   counts so the result is a single division.
//! * AUPRC is step-wise: thresholds are the distinct scores, high to low,
//!   and `AUPRC = Σ_k (R_k − R_{k−1}) · max_{j≥k} P_j` with `R_0 = 0`. The
//!   precision used for each recall step is the best precision at that
//!   recall or higher. No linear interpolation.
//! * `min(Se, P+)` is the maximum over those thresholds of
//!   `min(recall, precision)`.
//! * Weighted AUC weights each label's AUROC by its positive count.

use std::fmt::Write as _;

use crate::encoder::TaskKind;
use crate::error::{Error, Result};
use crate::kv::{exact, KvMap};

/// `(tp, fp)` after each distinct threshold, scores sorted high to low.
fn sweep(scores: &[f64], labels: &[bool]) -> Result<Vec<(u64, u64)>> {
    if scores.len() != labels.len() {
        return Err(Error::dim("metric", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric {
            metric: "score",
            reason: "NaN score".into(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (i, &k) in idx.iter().enumerate() {
        if labels[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == idx.len() || scores[idx[i + 1]] != scores[k] {
            points.push((tp, fp));
        }
    }
    Ok(points)
}

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let p = labels.iter().filter(|&&y| y).count() as u64;
    (p, labels.len() as u64 - p)
}

pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let points = sweep(scores, labels)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric {
            metric: "auroc",
            reason: format!("needs both classes, got {p} positive and {n} negative"),
        });
    }
    // Twice the area in units of one (positive, negative) pair.
    let mut twice = 0u128;
    let (mut tp0, mut fp0) = (0u64, 0u64);
    for &(tp, fp) in &points {
        twice += u128::from(fp - fp0) * u128::from(tp + tp0);
        (tp0, fp0) = (tp, fp);
    }
    Ok(twice as f64 / (2 * u128::from(p) * u128::from(n)) as f64)
}

fn require_positive(metric: &'static str, labels: &[bool]) -> Result<u64> {
    let (p, _) = class_counts(labels);
    if p == 0 {
        return Err(Error::UndefinedMetric {
            metric,
            reason: "no positive labels".into(),
        });
    }
    Ok(p)
}

pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let points = sweep(scores, labels)?;
    let p = require_positive("auprc", labels)? as f64;
    let precision: Vec<f64> = points.iter().map(|&(tp, fp)| tp as f64 / (tp + fp) as f64).collect();
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut area = 0.0;
    let mut tp0 = 0u64;
    for (k, &(tp, _)) in points.iter().enumerate() {
        area += (tp - tp0) as f64 / p * envelope[k];
        tp0 = tp;
    }
    Ok(area)
}

pub fn min_se_pplus(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let points = sweep(scores, labels)?;
    let p = require_positive("min_se_pplus", labels)? as f64;
    Ok(points
        .iter()
        .map(|&(tp, fp)| (tp as f64 / p).min(tp as f64 / (tp + fp) as f64))
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultilabelAuc {
    pub micro: f64,
    pub macro_: f64,
    pub weighted: f64,
    /// Labels left out of macro and weighted averages for lacking a class.
    pub skipped: usize,
}

/// `scores` and `labels` are row-major `n × k`.
pub fn multilabel_auc(scores: &[f64], labels: &[bool], k: usize) -> Result<MultilabelAuc> {
    if k == 0 || scores.len() != labels.len() || !scores.len().is_multiple_of(k) {
        return Err(Error::dim("multilabel_auc", &[scores.len()], &[labels.len(), k]));
    }
    let micro = auroc(scores, labels)?;
    let n = scores.len() / k;
    let (mut sum, mut wsum, mut wtotal, mut used, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for j in 0..k {
        let s: Vec<f64> = (0..n).map(|i| scores[i * k + j]).collect();
        let y: Vec<bool> = (0..n).map(|i| labels[i * k + j]).collect();
        match auroc(&s, &y) {
            Ok(a) => {
                let w = class_counts(&y).0 as f64;
                sum += a;
                wsum += w * a;
                wtotal += w;
                used += 1;
            }
            Err(Error::UndefinedMetric { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric {
            metric: "macro_auroc",
            reason: "no label has both classes".into(),
        });
    }
    Ok(MultilabelAuc {
        micro,
        macro_: sum / used as f64,
        weighted: wsum / wtotal,
        skipped,
    })
}

/// Cohen's kappa with linear weights `|i − j| / (C − 1)`.
pub fn weighted_kappa(truth: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::dim("weighted_kappa", &[truth.len()], &[pred.len()]));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "kappa",
            reason: "no samples".into(),
        });
    }
    if classes < 2 {
        return Err(Error::Config("kappa needs at least two classes".into()));
    }
    if let Some(&b) = truth.iter().chain(pred).find(|&&b| b >= classes) {
        return Err(Error::Label(format!("bin {b} out of range for {classes} classes")));
    }
    let c = classes;
    let mut observed = vec![0.0; c * c];
    let (mut rows, mut cols) = (vec![0.0; c], vec![0.0; c]);
    for (&t, &p) in truth.iter().zip(pred) {
        observed[t * c + p] += 1.0;
        rows[t] += 1.0;
        cols[p] += 1.0;
    }
    let n = truth.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            let w = i.abs_diff(j) as f64 / (c - 1) as f64;
            num += w * observed[i * c + j];
            den += w * rows[i] * cols[j] / n;
        }
    }
    // Zero expected disagreement means both raters used one bin, and agree.
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionErrors {
    pub mse: f64,
    /// Percent; over entries with nonzero truth.
    pub mape: f64,
    /// Entries left out of MAPE for a zero true value.
    pub zero_truth: usize,
}

pub fn mse_mape(truth: &[f64], pred: &[f64]) -> Result<RegressionErrors> {
    if truth.len() != pred.len() {
        return Err(Error::dim("mse_mape", &[truth.len()], &[pred.len()]));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "mse",
            reason: "no samples".into(),
        });
    }
    let mse = truth.iter().zip(pred).map(|(l, p)| (l - p) * (l - p)).sum::<f64>() / truth.len() as f64;
    let (mut ape, mut used) = (0.0, 0usize);
    for (l, p) in truth.iter().zip(pred) {
        if *l != 0.0 {
            ape += ((l - p) / l).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric {
            metric: "mape",
            reason: "all true values are zero".into(),
        });
    }
    Ok(RegressionErrors {
        mse,
        mape: 100.0 * ape / used as f64,
        zero_truth: truth.len() - used,
    })
}

/// Model outputs gathered over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    /// Positive-class scores, pooled over valid steps for per-step tasks.
    Binary { scores: Vec<f64>, labels: Vec<bool> },
    /// Row-major `n × k`.
    Multilabel { k: usize, scores: Vec<f64>, labels: Vec<bool> },
    /// Row-major `n × classes` probabilities. `values` holds the continuous
    /// truth and `bucket_values` one representative value per class when
    /// regression errors should be reported too.
    Multiclass {
        classes: usize,
        probs: Vec<f64>,
        labels: Vec<usize>,
        values: Option<Vec<f64>>,
        bucket_values: Option<Vec<f64>>,
    },
    Regression { pred: Vec<f64>, truth: Vec<f64> },
}

/// Named metric values for one task, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: TaskKind,
    /// Evaluated units: samples, or valid steps for per-step tasks.
    pub count: usize,
    pub values: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    /// The metric early stopping watches, and whether higher is better.
    pub fn headline_name(task: TaskKind) -> (&'static str, bool) {
        match task {
            TaskKind::Binary | TaskKind::StepBinary => ("auroc", true),
            TaskKind::Multilabel(_) => ("macro_auroc", true),
            TaskKind::Multiclass(_) => ("kappa", true),
            TaskKind::StepRegression => ("mse", false),
        }
    }

    pub fn headline(&self) -> Option<f64> {
        self.get(Self::headline_name(self.task).0)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("task", self.task);
        kv.set("count", self.count);
        for (k, v) in &self.values {
            kv.set(k.clone(), exact(*v));
        }
        kv
    }

    pub fn csv_header(&self) -> String {
        let mut s = String::from("task,count");
        for (k, _) in &self.values {
            let _ = write!(s, ",{k}");
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.task, self.count);
        for (_, v) in &self.values {
            let _ = write!(s, ",{}", exact(*v));
        }
        s
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Computes every metric defined for `preds`. A metric that is undefined
/// on this data (say, one class only) is recorded as NaN.
pub fn report(task: TaskKind, preds: &Predictions) -> Result<MetricsReport> {
    let mut values = Vec::new();
    let mut put = |name: &str, v: Result<f64>| -> Result<()> {
        match v {
            Ok(v) => values.push((name.to_string(), v)),
            Err(Error::UndefinedMetric { .. }) => values.push((name.to_string(), f64::NAN)),
            Err(e) => return Err(e),
        }
        Ok(())
    };
    let count = match preds {
        Predictions::Binary { scores, labels } => {
            put("auroc", auroc(scores, labels))?;
            put("auprc", auprc(scores, labels))?;
            put("min_se_pplus", min_se_pplus(scores, labels))?;
            put("positive_rate", Ok(class_counts(labels).0 as f64 / labels.len().max(1) as f64))?;
            scores.len()
        }
        Predictions::Multilabel { k, scores, labels } => {
            match multilabel_auc(scores, labels, *k) {
                Ok(m) => {
                    put("micro_auroc", Ok(m.micro))?;
                    put("macro_auroc", Ok(m.macro_))?;
                    put("weighted_auroc", Ok(m.weighted))?;
                    put("skipped_labels", Ok(m.skipped as f64))?;
                }
                Err(Error::UndefinedMetric { .. }) => {
                    for name in ["micro_auroc", "macro_auroc", "weighted_auroc"] {
                        put(name, Ok(f64::NAN))?;
                    }
                    put("skipped_labels", Ok(*k as f64))?;
                }
                Err(e) => return Err(e),
            }
            scores.len() / (*k).max(1)
        }
        Predictions::Multiclass {
            classes,
            probs,
            labels,
            values: truth,
            bucket_values,
        } => {
            if probs.len() != labels.len() * classes {
                return Err(Error::dim("report", &[probs.len()], &[labels.len(), *classes]));
            }
            let pred: Vec<usize> = probs.chunks(*classes).map(argmax).collect();
            put("kappa", weighted_kappa(labels, &pred, *classes))?;
            let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
            put("accuracy", Ok(hits as f64 / labels.len().max(1) as f64))?;
            if let (Some(truth), Some(buckets)) = (truth, bucket_values) {
                let est: Vec<f64> = pred.iter().map(|&c| buckets[c]).collect();
                match mse_mape(truth, &est) {
                    Ok(e) => {
                        put("mse", Ok(e.mse))?;
                        put("mape", Ok(e.mape))?;
                    }
                    Err(Error::UndefinedMetric { .. }) => {
                        put("mse", Ok(f64::NAN))?;
                        put("mape", Ok(f64::NAN))?;
                    }
                    Err(e) => return Err(e),
                }
            }
            labels.len()
        }
        Predictions::Regression { pred, truth } => {
            match mse_mape(truth, pred) {
                Ok(e) => {
                    put("mse", Ok(e.mse))?;
                    put("mape", Ok(e.mape))?;
                }
                Err(Error::UndefinedMetric { metric: "mape", .. }) => {
                    let mse = truth.iter().zip(pred).map(|(l, p)| (l - p) * (l - p)).sum::<f64>()
                        / truth.len() as f64;
                    put("mse", Ok(mse))?;
                    put("mape", Ok(f64::NAN))?;
                }
                Err(e) => return Err(e),
            }
            pred.len()
        }
    };
    Ok(MetricsReport { task, count, values })
}

/// Mean true value per class. Empty classes take the overall mean.
pub fn bucket_means(labels: &[usize], values: &[f64], classes: usize) -> Vec<f64> {
    let mut sum = vec![0.0; classes];
    let mut n = vec![0usize; classes];
    for (&c, &v) in labels.iter().zip(values) {
        sum[c] += v;
        n[c] += 1;
    }
    let overall = values.iter().sum::<f64>() / values.len().max(1) as f64;
    (0..classes)
        .map(|c| if n[c] > 0 { sum[c] / n[c] as f64 } else { overall })
        .collect()
}

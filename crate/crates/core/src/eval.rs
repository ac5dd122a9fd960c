//! Classification metrics, threshold calibration, bootstrap intervals and
//! the random and majority baselines.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Consecutive undefined resamples tolerated before giving up.
pub const MAX_REDRAWS: usize = 1000;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties 1/2.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Confusion {
    assert_eq!(preds.len(), labels.len(), "predictions and labels differ in length");
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p == 1, y == 1) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

impl Confusion {
    /// Zero when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / den.sqrt()
        }
    }

    /// Zero when there are no predicted or no true positives.
    pub fn f1(&self) -> f64 {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if tp == 0.0 {
            return 0.0;
        }
        let p = tp / (tp + fp);
        let r = tp / (tp + fn_);
        2.0 * p * r / (p + r)
    }
}

pub fn mcc(preds: &[u8], labels: &[u8]) -> f64 {
    confusion(preds, labels).mcc()
}

pub fn f1(preds: &[u8], labels: &[u8]) -> f64 {
    confusion(preds, labels).f1()
}

/// `score >= threshold` predicts the positive class.
pub fn predict(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMetric {
    Mcc,
    F1,
}

impl ThresholdMetric {
    pub fn eval(self, preds: &[u8], labels: &[u8]) -> f64 {
        match self {
            ThresholdMetric::Mcc => mcc(preds, labels),
            ThresholdMetric::F1 => f1(preds, labels),
        }
    }
}

/// Candidates: 0, 1 and midpoints of adjacent distinct scores.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c: Vec<f64> = s.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    c.push(0.0);
    c.push(1.0);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Smallest candidate threshold maximizing `metric`, with the value reached.
pub fn calibrate_threshold(scores: &[f64], labels: &[u8], metric: ThresholdMetric) -> Result<(f64, f64)> {
    check_lengths(scores.len(), labels.len())?;
    if scores.is_empty() {
        return Err(Error::Data("cannot calibrate on an empty set".into()));
    }
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for t in threshold_candidates(scores) {
        let v = metric.eval(&predict(scores, t), labels);
        if v > best.1 {
            best = (t, v);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSpec {
    pub n_repeats: usize,
    pub sample_size: usize,
    pub low_pct: f64,
    pub high_pct: f64,
    pub seed: u64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        BootstrapSpec {
            n_repeats: 100,
            sample_size: 300,
            low_pct: 2.5,
            high_pct: 97.5,
            seed: 0,
        }
    }
}

impl BootstrapSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_repeats == 0 || self.sample_size == 0 {
            return Err(Error::Config("bootstrap repeats and sample size must be positive".into()));
        }
        if !(0.0 <= self.low_pct && self.low_pct <= self.high_pct && self.high_pct <= 100.0) {
            return Err(Error::Config("bootstrap percentiles must satisfy 0 <= low <= high <= 100".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    /// Resamples drawn again because the metric was undefined on them.
    pub redraws: usize,
}

/// Linearly interpolated percentile of sorted data.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval. Repeat `r` draws from its own stream
/// `(seed, r)`, so the parallel schedule does not affect the result.
pub fn bootstrap_ci<F>(scores: &[f64], labels: &[u8], metric: F, spec: &BootstrapSpec) -> Result<Interval>
where
    F: Fn(&[f64], &[u8]) -> Result<f64> + Sync,
{
    spec.validate()?;
    check_lengths(scores.len(), labels.len())?;
    if scores.len() < 2 {
        return Err(Error::Data("bootstrap needs at least 2 observations".into()));
    }
    let root = RngStream::new(spec.seed, "bootstrap");
    let runs: Vec<(f64, usize)> = (0..spec.n_repeats)
        .into_par_iter()
        .map(|r| -> Result<(f64, usize)> {
            let mut rng = root.derive_n(&[r as u64]).rng();
            let mut s = vec![0.0; spec.sample_size];
            let mut y = vec![0u8; spec.sample_size];
            for redraws in 0..=MAX_REDRAWS {
                for k in 0..spec.sample_size {
                    let i = rng.random_range(0..scores.len());
                    s[k] = scores[i];
                    y[k] = labels[i];
                }
                match metric(&s, &y) {
                    Ok(v) => return Ok((v, redraws)),
                    Err(Error::UndefinedMetric(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Degenerate(format!(
                "bootstrap repeat {r}: metric undefined on {} consecutive resamples",
                MAX_REDRAWS + 1
            )))
        })
        .collect::<Result<_>>()?;
    let redraws = runs.iter().map(|r| r.1).sum();
    let mut values: Vec<f64> = runs.into_iter().map(|r| r.0).collect();
    values.sort_by(f64::total_cmp);
    Ok(Interval {
        low: percentile(&values, spec.low_pct),
        high: percentile(&values, spec.high_pct),
        redraws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCi {
    pub point: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mcc_threshold: f64,
    pub f1_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub roc_auc: MetricCi,
    pub mcc: MetricCi,
    pub f1: MetricCi,
    pub thresholds: Thresholds,
    pub n: usize,
    pub seed: u64,
    pub redraws: usize,
}

/// Metrics of `scores` on the evaluation set at fixed thresholds, with
/// bootstrap intervals.
pub fn report(
    name: &str,
    scores: &[f64],
    labels: &[u8],
    thresholds: Thresholds,
    spec: &BootstrapSpec,
) -> Result<EvalReport> {
    check_lengths(scores.len(), labels.len())?;
    let auc = bootstrap_ci(scores, labels, roc_auc, spec)?;
    let at = |t: f64, m: ThresholdMetric| move |s: &[f64], y: &[u8]| Ok(m.eval(&predict(s, t), y));
    let m = bootstrap_ci(scores, labels, at(thresholds.mcc_threshold, ThresholdMetric::Mcc), spec)?;
    let f = bootstrap_ci(scores, labels, at(thresholds.f1_threshold, ThresholdMetric::F1), spec)?;
    let auc_point = match roc_auc(scores, labels) {
        Ok(v) => v,
        Err(Error::UndefinedMetric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        name: name.to_string(),
        roc_auc: MetricCi {
            point: auc_point,
            low: auc.low,
            high: auc.high,
        },
        mcc: MetricCi {
            point: mcc(&predict(scores, thresholds.mcc_threshold), labels),
            low: m.low,
            high: m.high,
        },
        f1: MetricCi {
            point: f1(&predict(scores, thresholds.f1_threshold), labels),
            low: f.low,
            high: f.high,
        },
        thresholds,
        n: scores.len(),
        seed: spec.seed,
        redraws: auc.redraws + m.redraws + f.redraws,
    })
}

/// Calibrates both thresholds on validation scores, then reports on test.
pub fn evaluate_model(
    name: &str,
    val: (&[f64], &[u8]),
    test: (&[f64], &[u8]),
    spec: &BootstrapSpec,
) -> Result<EvalReport> {
    let (mcc_threshold, _) = calibrate_threshold(val.0, val.1, ThresholdMetric::Mcc)?;
    let (f1_threshold, _) = calibrate_threshold(val.0, val.1, ThresholdMetric::F1)?;
    report(
        name,
        test.0,
        test.1,
        Thresholds {
            mcc_threshold,
            f1_threshold,
        },
        spec,
    )
}

/// Offset keeping the majority score off the 0.5 threshold.
const TIE_BREAK: f64 = 1e-9;

/// Random (uniform scores) and majority (training majority class) baselines,
/// both thresholded at 0.5.
pub fn baseline_metrics(
    labels_train: &[u8],
    labels_eval: &[u8],
    spec: &BootstrapSpec,
) -> Result<(EvalReport, EvalReport)> {
    let mut rng = RngStream::new(spec.seed, "random-baseline").rng();
    let random: Vec<f64> = labels_eval.iter().map(|_| rng.random::<f64>()).collect();
    let t = Thresholds {
        mcc_threshold: 0.5,
        f1_threshold: 0.5,
    };
    let r = report("Random baseline", &random, labels_eval, t, spec)?;
    let s = majority_score(labels_train);
    let m = report("Majority baseline", &vec![s; labels_eval.len()], labels_eval, t, spec)?;
    Ok((r, m))
}

/// Constant score of the majority baseline; training ties go to the positive class.
pub fn majority_score(labels_train: &[u8]) -> f64 {
    let pos = labels_train.iter().filter(|&&y| y == 1).count();
    if 2 * pos >= labels_train.len() {
        0.5 + TIE_BREAK
    } else {
        0.5 - TIE_BREAK
    }
}

fn pct_interval(m: &MetricCi) -> String {
    format!("[{:5.1}%, {:5.1}%]", 100.0 * m.low, 100.0 * m.high)
}

/// Plain-text table with ROC-AUC, MCC and F1 interval columns.
pub fn render_table(reports: &[EvalReport]) -> String {
    let w = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<w$}  {:<16}  {:<16}  {:<16}\n", "Model", "ROC-AUC", "MCC", "F1");
    for r in reports {
        out.push_str(&format!(
            "{:<w$}  {:<16}  {:<16}  {:<16}\n",
            r.name,
            pct_interval(&r.roc_auc),
            pct_interval(&r.mcc),
            pct_interval(&r.f1)
        ));
    }
    out
}

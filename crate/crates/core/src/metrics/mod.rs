//! Evaluation metrics for 26 discrete and 3 continuous emotion dimensions.
//!
//! Per-class classification metrics binarize the ground truth at 0.5. A
//! class whose metric is undefined on the evaluated split (no positives, or
//! no negatives for ROC-AUC) is left out of the mean and counted in the
//! report.

mod kde;

pub use kde::{entropy_kde, joint_masses, kde_masses, mean_std, mutual_information_kde, silverman_factor};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{DISCRETE_EMOTIONS, N_CONTINUOUS, N_DISCRETE, N_TARGETS};

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, &[a], &[b]));
    }
    Ok(())
}

/// Coefficient of determination `1 − SS_res/SS_tot`.
pub fn r2_score(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    same_len("r2_score", y.len(), y_hat.len())?;
    if y.len() < 2 {
        return Err(Error::Input("R² needs at least 2 values".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R² of a constant ground truth".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Indices ordered by descending score, lower index first on ties.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mean of precision-at-k over the ranks of the positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    same_len("average_precision", scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision without positives".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    same_len("roc_auc", scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        start = end;
    }
    let p = n_pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// `2PR/(P+R)`, zero when `P + R = 0`.
pub fn f1_score(pred: &[bool], labels: &[bool]) -> Result<f64> {
    same_len("f1_score", pred.len(), labels.len())?;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fne == 0 { 0.0 } else { tp as f64 / (tp + fne) as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Units of mAP and mRA passed to [`ers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// R² as a fraction, mAP and mRA in percent points.
    Mixed,
    /// All three as fractions.
    Uniform,
}

impl Convention {
    /// ERS from fractional inputs, converted to this convention's units.
    pub fn ers_from_fractions(self, r2: f64, map: f64, mra: f64) -> Result<f64> {
        match self {
            Convention::Mixed => ers(r2, 100.0 * map, 100.0 * mra),
            Convention::Uniform => ers(r2, map, mra),
        }
    }
}

/// Emotion recognition score in percent:
/// `(Δ − min G)/(max G − min G)·100` with `Δ = r2 + (map + mra)/2` and
/// `G = {r2, map, mra}`, all in the caller's units.
pub fn ers(r2: f64, map: f64, mra: f64) -> Result<f64> {
    if ![r2, map, mra].iter().all(|v| v.is_finite()) {
        return Err(Error::Input("ERS inputs must be finite".into()));
    }
    let lo = r2.min(map).min(mra);
    let hi = r2.max(map).max(mra);
    if hi == lo {
        return Err(Error::UndefinedMetric("ERS with equal components".into()));
    }
    let delta = r2 + (map + mra) / 2.0;
    Ok((delta - lo) / (hi - lo) * 100.0)
}

/// How predictions are binarized for F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub label_threshold: f64,
    pub prediction_threshold: f64,
    /// Predict only the highest-scoring class per sample.
    pub argmax_predictions: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            label_threshold: 0.5,
            prediction_threshold: 0.5,
            argmax_predictions: false,
        }
    }
}

/// Per-dimension values (`None` when undefined) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub values: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub undefined: usize,
}

impl Breakdown {
    fn from_values(values: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let undefined = values.len() - defined.len();
        if undefined > 0 {
            log::warn!("{undefined} undefined per-dimension metric(s) excluded from the mean");
        }
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Self {
            values,
            mean,
            undefined,
        }
    }
}

/// The full evaluation of one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub r2: Breakdown,
    pub ap: Breakdown,
    pub ra: Breakdown,
    pub f1: Breakdown,
    pub ers_mixed: Option<f64>,
    pub ers_uniform: Option<f64>,
    /// Mean over samples of the entropy of each 29-dim prediction.
    pub entropy_bits: f64,
    /// Mean over samples of the MI between each target and prediction.
    pub mi_bits: f64,
    pub mse: f64,
}

fn undefined_ok(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates 29-dim predictions against 29-dim targets.
pub fn evaluate(
    predictions: &[[f64; N_TARGETS]],
    targets: &[[f64; N_TARGETS]],
    options: &EvalOptions,
) -> Result<MetricsReport> {
    same_len("evaluate", predictions.len(), targets.len())?;
    let n = predictions.len();
    if n == 0 {
        return Err(Error::Input("cannot evaluate an empty prediction set".into()));
    }
    let column = |rows: &[[f64; N_TARGETS]], d: usize| rows.iter().map(|r| r[d]).collect::<Vec<_>>();

    let mut r2 = Vec::with_capacity(N_CONTINUOUS);
    for d in N_DISCRETE..N_TARGETS {
        let value = if n < 2 {
            None
        } else {
            undefined_ok(r2_score(&column(targets, d), &column(predictions, d)))?
        };
        r2.push(value);
    }

    let argmax: Vec<usize> = predictions
        .iter()
        .map(|p| crate::loss::argmax(&p[..N_DISCRETE]))
        .collect();
    let (mut ap, mut ra, mut f1) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..N_DISCRETE {
        let scores = column(predictions, c);
        let labels: Vec<bool> = targets.iter().map(|t| t[c] >= options.label_threshold).collect();
        let pred: Vec<bool> = if options.argmax_predictions {
            argmax.iter().map(|&a| a == c).collect()
        } else {
            scores.iter().map(|&s| s >= options.prediction_threshold).collect()
        };
        ap.push(undefined_ok(average_precision(&scores, &labels))?);
        ra.push(undefined_ok(roc_auc(&scores, &labels))?);
        f1.push(if labels.iter().any(|&l| l) {
            Some(f1_score(&pred, &labels)?)
        } else {
            None
        });
    }

    let mut entropy = 0.0;
    let mut mi = 0.0;
    let mut mse = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        entropy += entropy_kde(p)?;
        mi += mutual_information_kde(t, p)?;
        mse += crate::loss::mse_loss(t, p)?;
    }

    let r2 = Breakdown::from_values(r2);
    let ap = Breakdown::from_values(ap);
    let ra = Breakdown::from_values(ra);
    let f1 = Breakdown::from_values(f1);
    let composite = |convention: Convention| -> Result<Option<f64>> {
        match (r2.mean, ap.mean, ra.mean) {
            (Some(r), Some(a), Some(c)) => undefined_ok(convention.ers_from_fractions(r, a, c)),
            _ => Ok(None),
        }
    };
    Ok(MetricsReport {
        n,
        ers_mixed: composite(Convention::Mixed)?,
        ers_uniform: composite(Convention::Uniform)?,
        r2,
        ap,
        ra,
        f1,
        entropy_bits: entropy / n as f64,
        mi_bits: mi / n as f64,
        mse: mse / n as f64,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "n,mr2,map,mra,mf1,ers_mixed,ers_uniform,entropy_bits,mi_bits,mse";

    /// One CSV row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.n,
            cell(self.r2.mean),
            cell(self.ap.mean),
            cell(self.ra.mean),
            cell(self.f1.mean),
            cell(self.ers_mixed),
            cell(self.ers_uniform),
            self.entropy_bits,
            self.mi_bits,
            self.mse
        )
    }

    /// Per-class `class,ap,ra,f1` table.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,ap,ra,f1\n");
        for (c, name) in DISCRETE_EMOTIONS.iter().enumerate() {
            let _ = writeln!(
                out,
                "{name},{},{},{}",
                cell(self.ap.values[c]),
                cell(self.ra.values[c]),
                cell(self.f1.values[c])
            );
        }
        out
    }
}

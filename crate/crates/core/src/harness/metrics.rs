//! Classification and regression metrics.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::finetune::{Prediction, Task};

use super::data::Target;

/// Classification fields are set for classification tasks, regression
/// fields for regression tasks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean recall over the classes present in the targets.
    pub uar: Option<f64>,
    /// Overall accuracy.
    pub war: Option<f64>,
    pub wf1: Option<f64>,
    pub mf1: Option<f64>,
    /// One-vs-rest mean over classes with both positives and negatives.
    pub auc: Option<f64>,
    /// Mean over output dimensions.
    pub pcc: Option<f64>,
    pub ccc: Option<f64>,
    /// Classes with no target sample, left out of UAR, MF1 and AUC.
    pub excluded_classes: Vec<usize>,
}

impl MetricReport {
    /// `name=value` pairs of the metrics that are set.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        [
            ("uar", self.uar),
            ("war", self.war),
            ("wf1", self.wf1),
            ("mf1", self.mf1),
            ("auc", self.auc),
            ("pcc", self.pcc),
            ("ccc", self.ccc),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .collect()
    }
}

pub fn compute_metrics(predictions: &[Prediction], targets: &[Target], task: Task) -> Result<MetricReport> {
    if predictions.is_empty() {
        bail!(Argument, "metrics need at least one prediction");
    }
    if predictions.len() != targets.len() {
        bail!(Argument, "{} predictions for {} targets", predictions.len(), targets.len());
    }
    let width = task.outputs();
    if let Some(p) = predictions.iter().find(|p| p.scores.len() != width) {
        bail!(Argument, "prediction has {} scores, task has {width} outputs", p.scores.len());
    }
    match task {
        Task::Classify(k) => {
            let labels = targets
                .iter()
                .map(|t| match t {
                    Target::Class(c) if *c < k => Ok(*c),
                    other => Err(crate::Error::Argument(format!("{other:?} is not a class index below {k}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(classification(predictions, &labels, k))
        }
        Task::Regress(d) => {
            let values = targets
                .iter()
                .map(|t| match t {
                    Target::Values(v) if v.len() == d => Ok(v.as_slice()),
                    other => Err(crate::Error::Argument(format!("{other:?} is not a {d}-value target"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(regression(predictions, &values, d))
        }
    }
}

fn classification(predictions: &[Prediction], labels: &[usize], k: usize) -> MetricReport {
    let n = labels.len() as f64;
    let predicted: Vec<usize> = predictions.iter().map(Prediction::argmax).collect();
    let mut support = vec![0usize; k];
    let mut hits = vec![0usize; k];
    let mut chosen = vec![0usize; k];
    for (&y, &p) in labels.iter().zip(&predicted) {
        support[y] += 1;
        chosen[p] += 1;
        if y == p {
            hits[y] += 1;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| support[c] > 0).collect();
    let excluded: Vec<usize> = (0..k).filter(|&c| support[c] == 0).collect();
    if !excluded.is_empty() {
        log::warn!("classes {excluded:?} have no target samples and are left out of UAR, MF1 and AUC");
    }
    let f1 = |c: usize| {
        let recall = hits[c] as f64 / support[c] as f64;
        let precision = if chosen[c] == 0 { 0.0 } else { hits[c] as f64 / chosen[c] as f64 };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    };
    let m = present.len() as f64;
    let uar = present.iter().map(|&c| hits[c] as f64 / support[c] as f64).sum::<f64>() / m;
    let mf1 = present.iter().map(|&c| f1(c)).sum::<f64>() / m;
    let wf1 = present.iter().map(|&c| support[c] as f64 * f1(c)).sum::<f64>() / n;
    let war = hits.iter().sum::<usize>() as f64 / n;

    let aucs: Vec<f64> = present
        .iter()
        .filter(|&&c| support[c] < labels.len())
        .map(|&c| {
            let scores: Vec<f64> = predictions.iter().map(|p| p.scores[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auc(&scores, &positive)
        })
        .collect();
    let auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);

    MetricReport {
        uar: Some(uar),
        war: Some(war),
        wf1: Some(wf1),
        mf1: Some(mf1),
        auc,
        excluded_classes: excluded,
        ..Default::default()
    }
}

/// Mann-Whitney estimate with mid-ranks for ties. Needs both classes.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = positive.len() as f64 - pos;
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (mean, x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

/// Pearson correlation; 0 (with a warning) when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let ((mx, vx), (my, vy)) = (moments(x), moments(y));
    if vx == 0.0 || vy == 0.0 {
        log::warn!("correlation of a constant series is undefined; reporting 0");
        return 0.0;
    }
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    (cov / (vx * vy).sqrt()).clamp(-1.0, 1.0)
}

/// Concordance correlation `2 cov / (var_x + var_y + (mean_x - mean_y)^2)`;
/// two identical constant series count as perfect agreement.
pub fn concordance(x: &[f64], y: &[f64]) -> f64 {
    let ((mx, vx), (my, vy)) = (moments(x), moments(y));
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    let denom = vx + vy + (mx - my).powi(2);
    if denom == 0.0 {
        return 1.0;
    }
    (2.0 * cov / denom).clamp(-1.0, 1.0)
}

fn regression(predictions: &[Prediction], values: &[&[f64]], d: usize) -> MetricReport {
    let column = |j: usize| -> (Vec<f64>, Vec<f64>) {
        (predictions.iter().map(|p| p.scores[j]).collect(), values.iter().map(|v| v[j]).collect())
    };
    let (mut pcc, mut ccc) = (0.0, 0.0);
    for j in 0..d {
        let (p, t) = column(j);
        pcc += pearson(&p, &t);
        ccc += concordance(&p, &t);
    }
    MetricReport { pcc: Some(pcc / d as f64), ccc: Some(ccc / d as f64), ..Default::default() }
}

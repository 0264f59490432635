//! Evaluation: Jaccard index for segmentation, per-class ROC AUC for
//! classification, and dataset-level reports rendered as a small table and
//! as a machine-readable key-value document. Internal values keep full
//! precision; percent rounding (half-up, 2 decimals) happens only when
//! rendering.

use std::collections::HashMap;

use serde_json::json;

use crate::cls::{ClassLabel, ClassScores};
use crate::error::{Error, Result};
use crate::seg::BinaryMask;

/// Intersection over union of two equally sized masks; both empty counts
/// as perfect agreement (1.0).
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "jaccard: mask {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
        if x && y {
            intersection += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(intersection as f64 / union as f64)
    }
}

/// ROC AUC as the Mann-Whitney statistic with midrank tie handling:
/// `(#(pos > neg) + 0.5 * #(pos == neg)) / (P * N)`, computed from a sort
/// in O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("auc: score {i} is {}", scores[i])));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {positives} positives / {negatives} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));

    // Sum midranks of the positives over tie groups (ranks are 1-based).
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum += midrank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Arithmetic mean of two AUC values that must share a unit: both
/// fractions in [0, 1] or both percentages.
pub fn average_auc(melanoma: f64, sk: f64) -> Result<f64> {
    let is_fraction = |v: f64| (0.0..=1.0).contains(&v);
    let in_percent = |v: f64| (0.0..=100.0).contains(&v);
    if !(in_percent(melanoma) && in_percent(sk)) {
        return Err(Error::Config(format!(
            "AUC values out of range: ({melanoma}, {sk})"
        )));
    }
    if is_fraction(melanoma) != is_fraction(sk) {
        return Err(Error::Config(format!(
            "mixed AUC units: ({melanoma}, {sk}) — use both fractions or both percentages"
        )));
    }
    Ok((melanoma + sk) / 2.0)
}

/// Half-up rounding to two decimals, applied only at rendering.
pub fn round2_half_up(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn percent2(fraction: f64) -> f64 {
    round2_half_up(fraction * 100.0)
}

/// Per-image Jaccard values and their mean.
#[derive(Debug, Clone)]
pub struct SegResult {
    /// (image id, jaccard fraction), sorted by id.
    pub per_image: Vec<(String, f64)>,
    mean: f64,
}

impl SegResult {
    /// Mean Jaccard as a fraction, full precision.
    pub fn mean_jaccard(&self) -> f64 {
        self.mean
    }

    /// Mean Jaccard in report form: percent, 2 decimals, half-up.
    pub fn mean_jaccard_percent(&self) -> f64 {
        percent2(self.mean)
    }

    pub fn render_table(&self, label: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28}{:>10}\n", "%", "Jaccard"));
        out.push_str(&format!(
            "{:<28}{:>10.2}\n",
            label,
            self.mean_jaccard_percent()
        ));
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "mean_jaccard": self.mean_jaccard_percent(),
            "images": self.per_image.len(),
            "per_image": self.per_image.iter()
                .map(|(id, j)| (id.clone(), percent2(*j)))
                .collect::<HashMap<String, f64>>(),
        })
    }
}

/// Melanoma/SK AUC pair; the average is exact (computed from the full-
/// precision values, not the rounded ones).
#[derive(Debug, Clone, Copy)]
pub struct ClsResult {
    melanoma_auc: f64,
    sk_auc: f64,
}

impl ClsResult {
    pub fn new(melanoma_auc: f64, sk_auc: f64) -> Self {
        ClsResult {
            melanoma_auc,
            sk_auc,
        }
    }

    pub fn melanoma_auc(&self) -> f64 {
        self.melanoma_auc
    }

    pub fn sk_auc(&self) -> f64 {
        self.sk_auc
    }

    pub fn average_auc(&self) -> f64 {
        (self.melanoma_auc + self.sk_auc) / 2.0
    }

    pub fn melanoma_auc_percent(&self) -> f64 {
        percent2(self.melanoma_auc)
    }

    pub fn sk_auc_percent(&self) -> f64 {
        percent2(self.sk_auc)
    }

    pub fn average_auc_percent(&self) -> f64 {
        percent2(self.average_auc())
    }

    pub fn render_table(&self, label: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28}{:>14}{:>10}{:>13}\n",
            "%", "Melanoma AUC", "SK AUC", "Average AUC"
        ));
        out.push_str(&format!(
            "{:<28}{:>14.2}{:>10.2}{:>13.2}\n",
            label,
            self.melanoma_auc_percent(),
            self.sk_auc_percent(),
            self.average_auc_percent()
        ));
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "melanoma_auc": self.melanoma_auc_percent(),
            "sk_auc": self.sk_auc_percent(),
            "average_auc": self.average_auc_percent(),
        })
    }
}

fn check_matching_ids<T, U>(
    predictions: &[(String, T)],
    truths: &[(String, U)],
) -> Result<()> {
    let pred_ids: std::collections::BTreeSet<&str> =
        predictions.iter().map(|(id, _)| id.as_str()).collect();
    let truth_ids: std::collections::BTreeSet<&str> =
        truths.iter().map(|(id, _)| id.as_str()).collect();
    if pred_ids.len() != predictions.len() {
        return Err(Error::Config("duplicate prediction ids".into()));
    }
    if truth_ids.len() != truths.len() {
        return Err(Error::Config("duplicate ground-truth ids".into()));
    }
    if pred_ids != truth_ids {
        let missing: Vec<&&str> = truth_ids.difference(&pred_ids).collect();
        let extra: Vec<&&str> = pred_ids.difference(&truth_ids).collect();
        return Err(Error::Config(format!(
            "prediction/ground-truth id sets differ (missing {missing:?}, extra {extra:?})"
        )));
    }
    Ok(())
}

/// Per-image Jaccard against ground truth, by image id.
pub fn evaluate_seg(
    predictions: &[(String, BinaryMask)],
    truths: &[(String, BinaryMask)],
) -> Result<SegResult> {
    check_matching_ids(predictions, truths)?;
    if predictions.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let truth_by_id: HashMap<&str, &BinaryMask> =
        truths.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let mut per_image: Vec<(String, f64)> = predictions
        .iter()
        .map(|(id, mask)| Ok((id.clone(), jaccard(mask, truth_by_id[id.as_str()])?)))
        .collect::<Result<_>>()?;
    per_image.sort_by(|a, b| a.0.cmp(&b.0));
    let mean = per_image.iter().map(|(_, j)| j).sum::<f64>() / per_image.len() as f64;
    Ok(SegResult { per_image, mean })
}

/// Melanoma AUC from the melanoma scores against (label == melanoma), SK
/// AUC likewise.
pub fn evaluate_cls(
    predictions: &[(String, ClassScores)],
    truths: &[(String, ClassLabel)],
) -> Result<ClsResult> {
    check_matching_ids(predictions, truths)?;
    let truth_by_id: HashMap<&str, ClassLabel> =
        truths.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let mut mel_scores = Vec::with_capacity(predictions.len());
    let mut mel_labels = Vec::with_capacity(predictions.len());
    let mut sk_scores = Vec::with_capacity(predictions.len());
    let mut sk_labels = Vec::with_capacity(predictions.len());
    for (id, scores) in predictions {
        let truth = truth_by_id[id.as_str()];
        mel_scores.push(scores.p_melanoma);
        mel_labels.push(truth == ClassLabel::Melanoma);
        sk_scores.push(scores.p_sk);
        sk_labels.push(truth == ClassLabel::SeborrheicKeratosis);
    }
    Ok(ClsResult::new(
        auc(&mel_scores, &mel_labels)?,
        auc(&sk_scores, &sk_labels)?,
    ))
}

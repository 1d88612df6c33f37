//! Task metrics: Dice overlap, accuracy, and rank-statistic AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dice over foreground pixels, thresholding probabilities at 0.5. Two empty
/// masks count as perfect agreement.
pub fn dice(probabilities: &[f64], truth: &[f64]) -> Result<f64> {
    if probabilities.len() != truth.len() {
        return Err(Error::Input("dice inputs differ in length".into()));
    }
    if truth.is_empty() {
        return Err(Error::Data("dice over an empty set".into()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (p, g) in probabilities.iter().zip(truth) {
        let (p, g) = (*p >= 0.5, *g >= 0.5);
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Input("accuracy inputs differ in length".into()));
    }
    if truth.is_empty() {
        return Err(Error::Data("accuracy over an empty set".into()));
    }
    Ok(predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Binary AUC via the Mann-Whitney rank statistic. `None` when only one
/// class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Input("auc inputs differ in length".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos * neg) as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub loss: f64,
    /// Mean training loss per epoch.
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

impl MetricsRecord {
    /// The headline number of the task: dice for segmentation, accuracy otherwise.
    pub fn primary(&self) -> f64 {
        self.dice.or(self.accuracy).unwrap_or(f64::NAN)
    }
}

//! AC-Corr transferability scores and ranking-quality metrics.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, SyntheticTaskSpec, TaskData};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::nn::Network;
use crate::norm::CalibrationMatrix;
use crate::train::{assemble, train, TrainConfig};
use crate::variants::NormKind;

/// Sum of all entries of a sparsified calibration matrix.
pub fn ac_corr(c: &CalibrationMatrix) -> Result<f64> {
    if !c.is_sparsified() {
        return Err(Error::Input("ac_corr needs a sparsified calibration matrix".into()));
    }
    Ok(c.values().sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferScore {
    pub checkpoint_id: String,
    pub ac_corr: f64,
    pub probe_layer: String,
    /// Channel count of the probe layer; the score lies in (0, channels].
    pub channels: usize,
    pub epochs_adapted: usize,
}

/// Calibration matrix of `layer` (sparsified) in a live network.
pub fn network_calibration(net: &Network, layer: &str) -> Result<CalibrationMatrix> {
    let (_, norm) = net
        .norm_layers()
        .find(|(name, _)| *name == layer)
        .ok_or_else(|| Error::Probe(format!("no norm layer named `{layer}`")))?;
    norm.effective_calibration()?
        .ok_or_else(|| Error::Probe(format!("`{layer}` has no calibration matrix ({})", norm.kind)))
}

/// Fine-tunes `ckpt` with AC-Norm for exactly one epoch on the training split
/// and scores the calibration at `probe_layer` (default: the deepest encoder
/// norm layer). The checkpoint itself is never modified.
pub fn estimate_transferability(
    checkpoint_id: &str,
    ckpt: &Checkpoint,
    task: &SyntheticTaskSpec,
    train_split: &Dataset,
    cfg: &TrainConfig,
    probe_layer: Option<&str>,
) -> Result<TransferScore> {
    if train_split.is_empty() {
        return Err(Error::Data("empty target training split".into()));
    }
    let cfg = TrainConfig {
        epochs: 1,
        norm_kind: NormKind::AcNorm,
        ..cfg.clone()
    };
    let source = ModelGraph::from_checkpoint(ckpt)?;
    let mut model = assemble(Some(ckpt), task, &source.arch, &cfg)?;
    let layer = match probe_layer {
        Some(l) => l.to_string(),
        None => model
            .deepest_encoder_norm()
            .ok_or_else(|| Error::Probe("model has no encoder norm layer".into()))?,
    };
    train(&mut model, train_split, &cfg, &mut |_, _| Ok(()))?;
    let c = network_calibration(&model.to_network()?, &layer)?;
    Ok(TransferScore {
        checkpoint_id: checkpoint_id.to_string(),
        ac_corr: ac_corr(&c)?,
        channels: c.channels(),
        probe_layer: layer,
        epochs_adapted: 1,
    })
}

/// Scores every `*.ckpt` file in `dir` (in parallel), ordered by file name.
/// The checkpoint id is the file stem.
pub fn estimate_dir(
    dir: &Path,
    task: &SyntheticTaskSpec,
    data: &TaskData,
    cfg: &TrainConfig,
    probe_layer: Option<&str>,
) -> Result<Vec<TransferScore>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no .ckpt files in {}", dir.display())));
    }
    paths
        .par_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            estimate_transferability(&id, &Checkpoint::load(p)?, task, &data.train, cfg, probe_layer)
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let den = (sxx * syy).sqrt();
    (den > 0.0).then(|| (sxy / den).clamp(-1.0, 1.0))
}

fn sign(a: f64, b: f64) -> f64 {
    match a.partial_cmp(&b) {
        Some(Ordering::Greater) => 1.0,
        Some(Ordering::Less) => -1.0,
        _ => 0.0,
    }
}

/// Weighted pair sums: (sum w * sign_x * sign_y, sum over pairs untied in x, untied in y).
fn pair_sums(x: &[f64], y: &[f64], weight: impl Fn(usize, usize) -> f64) -> Option<f64> {
    let (mut num, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let w = weight(i, j);
            let (sx, sy) = (sign(x[i], x[j]), sign(y[i], y[j]));
            num += w * sx * sy;
            dx += w * sx.abs();
            dy += w * sy.abs();
        }
    }
    let den = (dx * dy).sqrt();
    (den > 0.0).then(|| (num / den).clamp(-1.0, 1.0))
}

/// Kendall tau with the tie-adjusted (tau-b) denominator; equals
/// (concordant - discordant) / (n(n-1)/2) when there are no ties.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    pair_sums(x, y, |_, _| 1.0)
}

/// Weighted tau with additive hyperbolic weights: pair (i, j) weighs
/// `1/(1+r_i) + 1/(1+r_j)`, where `r` is the 0-based rank by `truth`
/// descending (ties broken by `score` descending).
pub fn weighted_tau(truth: &[f64], score: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| truth[b].total_cmp(&truth[a]).then(score[b].total_cmp(&score[a])));
    let mut rank = vec![0usize; truth.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let w = |i: usize| 1.0 / (1.0 + rank[i] as f64);
    pair_sums(truth, score, |i, j| w(i) + w(j))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub checkpoint_id: String,
    pub score: f64,
    pub ground_truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    /// `None` (JSON null) when either list is constant.
    pub pearson: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub weighted_tau: Option<f64>,
    /// True when ground-truth values tie, in which case tau uses the
    /// tie-adjusted denominator.
    pub ground_truth_ties: bool,
    pub models: Vec<RankedModel>,
}

pub fn rank_models(scores: &[f64], ground_truth: &[f64]) -> Result<RankingReport> {
    rank_named(
        &(0..scores.len()).map(|i| i.to_string()).collect::<Vec<_>>(),
        scores,
        ground_truth,
    )
}

pub fn rank_named(ids: &[String], scores: &[f64], ground_truth: &[f64]) -> Result<RankingReport> {
    if scores.len() != ground_truth.len() || ids.len() != scores.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} scores, {} ground-truth values",
            scores.len(),
            ground_truth.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Input("ranking needs at least two models".into()));
    }
    if scores.iter().chain(ground_truth).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite score or ground-truth value".into()));
    }
    let mut sorted = ground_truth.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(RankingReport {
        pearson: pearson(scores, ground_truth),
        kendall_tau: kendall_tau(scores, ground_truth),
        weighted_tau: weighted_tau(ground_truth, scores),
        ground_truth_ties: sorted.windows(2).any(|w| w[0] == w[1]),
        models: ids
            .iter()
            .zip(scores.iter().zip(ground_truth))
            .map(|(id, (s, g))| RankedModel {
                checkpoint_id: id.clone(),
                score: *s,
                ground_truth: *g,
            })
            .collect(),
    })
}

/// `scores.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub scores: Vec<TransferScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub checkpoint_id: String,
    /// Post-fine-tuning test metric (dice or accuracy).
    pub metric: f64,
}

/// `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub results: Vec<GroundTruth>,
}

/// Joins scores and ground truth by checkpoint id (in score order).
pub fn rank_files(scores: &ScoresFile, truth: &ResultsFile) -> Result<RankingReport> {
    let mut ids = Vec::new();
    let mut s = Vec::new();
    let mut g = Vec::new();
    for score in &scores.scores {
        let t = truth
            .results
            .iter()
            .find(|r| r.checkpoint_id == score.checkpoint_id)
            .ok_or_else(|| Error::Input(format!("no ground truth for `{}`", score.checkpoint_id)))?;
        ids.push(score.checkpoint_id.clone());
        s.push(score.ac_corr);
        g.push(t.metric);
    }
    if truth.results.len() != ids.len() {
        return Err(Error::Input("ground truth lists checkpoints that have no score".into()));
    }
    rank_named(&ids, &s, &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};

    #[test]
    fn ac_corr_examples() {
        let d = CalibrationMatrix::from_values(arr2(&[[0.73106, 0.0], [0.0, 0.73106]]), true).unwrap();
        assert_abs_diff_eq!(ac_corr(&d).unwrap(), 1.46212, epsilon = 1e-12);
        let ties = CalibrationMatrix::from_values(Array2::from_elem((3, 3), 1.0 / 3.0), true).unwrap();
        assert_abs_diff_eq!(ac_corr(&ties).unwrap(), 3.0, epsilon = 1e-12);
        let one = CalibrationMatrix::from_values(arr2(&[[1.0]]), true).unwrap();
        assert_eq!(ac_corr(&one).unwrap(), 1.0);
        let dense = CalibrationMatrix::from_values(arr2(&[[1.0]]), false).unwrap();
        assert!(ac_corr(&dense).is_err());
    }

    #[test]
    fn tau_contracts() {
        let g = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(kendall_tau(&g, &g), Some(1.0));
        assert_eq!(kendall_tau(&g, &[1.0, 2.0, 3.0, 4.0]), Some(-1.0));
        assert_eq!(kendall_tau(&g, &[3.0, 4.0, 2.0, 1.0]), Some(2.0 / 3.0));
        assert!(rank_models(&[1.0], &[1.0, 2.0]).is_err());
    }

    // Reference values from scipy.stats (weightedtau with rank=None, i.e.
    // ranked by the first argument descending; kendalltau tau-b; pearsonr).
    #[test]
    fn matches_reference_implementation() {
        let cases: [(&[f64], &[f64], f64, f64, f64); 5] = [
            (&[0.9, 0.7, 0.5, 0.3], &[3.0, 4.0, 2.0, 1.0], 0.52, 0.6666666666666669, 0.7999999999999999),
            (&[0.9, 0.7, 0.5, 0.3], &[4.0, 3.0, 1.0, 2.0], 0.8133333333333331, 0.6666666666666669, 0.7999999999999999),
            (
                &[0.81, 0.62, 0.77, 0.40, 0.55],
                &[2.5, 1.0, 3.1, 0.2, 1.7],
                0.5437956204379563,
                0.6,
                0.8972074487917141,
            ),
            (
                &[0.3, 0.1, 0.4, 0.15, 0.9, 0.26],
                &[0.5, 0.8, 0.1, 0.2, 0.7, 0.6],
                0.02312925170068012,
                -0.2,
                0.16421222800384147,
            ),
            (&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0], 0.9309493362512626, 0.912870929175277, f64::NAN),
        ];
        for (truth, score, wt, kt, pr) in cases {
            assert_abs_diff_eq!(weighted_tau(truth, score).unwrap(), wt, epsilon = 1e-12);
            assert_abs_diff_eq!(kendall_tau(truth, score).unwrap(), kt, epsilon = 1e-12);
            if pr.is_finite() {
                assert_abs_diff_eq!(pearson(truth, score).unwrap(), pr, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(kendall_tau(&[1.0, 1.0, 2.0, 3.0], &[2.0, 1.0, 2.0, 3.0]).unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn report_flags_ties_and_joins_files() {
        let scores = ScoresFile {
            scores: ["a", "b", "c"]
                .iter()
                .zip([3.0, 2.0, 1.0])
                .map(|(id, s)| TransferScore {
                    checkpoint_id: id.to_string(),
                    ac_corr: s,
                    probe_layer: "x".into(),
                    channels: 4,
                    epochs_adapted: 1,
                })
                .collect(),
        };
        let truth = ResultsFile {
            results: ["c", "a", "b"]
                .iter()
                .zip([0.1, 0.9, 0.9])
                .map(|(id, m)| GroundTruth {
                    checkpoint_id: id.to_string(),
                    metric: m,
                })
                .collect(),
        };
        let report = rank_files(&scores, &truth).unwrap();
        assert!(report.ground_truth_ties);
        assert_eq!(report.models[2].ground_truth, 0.1);
        assert!(report.kendall_tau.unwrap() > 0.0);
    }
}

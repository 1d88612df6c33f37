//! Experiment orchestration: pretrain, optional checkpoint manipulation,
//! fine-tune per arm, then tables, plots and a run manifest. A second mode
//! scores a zoo of pretrained models by AC-Corr and ranks them against their
//! fine-tuned performance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DType};
use crate::data::{generate_task, SyntheticTaskSpec, TaskData};
use crate::error::{Error, Result};
use crate::model::{build_model, ArchSpec, ModelGraph};
use crate::plots::{write_heatmap_png, write_line_panels_svg, write_scatter_svg, Panel, Series};
use crate::probe::{layer_deltas, mean_deltas, LayerComponent, LayerDelta};
use crate::surgery::{mask_channels, shuffle_channels};
use crate::train::{assemble, evaluate, head_for, pretrain, train, TrainConfig};
use crate::transfer::{estimate_transferability, network_calibration, rank_named, RankingReport};
use crate::variants::NormKind;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointOp {
    Original,
    Shuffled,
    Masked,
}

impl CheckpointOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointOp::Original => "original",
            CheckpointOp::Shuffled => "shuffled",
            CheckpointOp::Masked => "masked",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooMember {
    pub id: String,
    /// Pretraining task; absent means a randomly initialized model.
    #[serde(default)]
    pub source: Option<SyntheticTaskSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub members: Vec<ZooMember>,
    #[serde(default)]
    pub probe_layer: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    /// Base seed; run `i` uses `seed + i`. Overridden by `ACNORM_SEED`.
    pub seed: u64,
    pub n_seeds: usize,
    pub arch: ArchSpec,
    pub source: SyntheticTaskSpec,
    pub target: SyntheticTaskSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub arms: Vec<NormKind>,
    pub checkpoint_ops: Vec<CheckpointOp>,
    pub mask_ratio: f64,
    /// Epochs at which calibration heatmaps are written (0 = before training).
    pub probe_epochs: Vec<usize>,
    pub zoo: Option<ZooConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let source = SyntheticTaskSpec::default();
        let mut target = source.clone();
        target.seed = 1000;
        target.knobs.intensity_shift = 0.5;
        Self {
            version: CONFIG_VERSION,
            name: "experiment".into(),
            seed: 0,
            n_seeds: 1,
            arch: ArchSpec::default(),
            source,
            target,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            arms: vec![NormKind::VanillaBn, NormKind::AcNorm],
            checkpoint_ops: vec![CheckpointOp::Original],
            mask_ratio: 0.5,
            probe_epochs: vec![],
            zoo: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` entry of a run manifest (JSON).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest = serde_json::from_str(&text)?;
            manifest.config.validate()?;
            Ok(manifest.config)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("mask_ratio must lie in [0, 1]".into()));
        }
        self.arch.validate()?;
        self.source.validate()?;
        self.target.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        match &self.zoo {
            Some(z) if z.members.len() < 2 => Err(Error::Config("a zoo needs at least two members".into())),
            Some(_) => Ok(()),
            None if self.arms.is_empty() || self.checkpoint_ops.is_empty() => {
                Err(Error::Config("arms and checkpoint_ops must be non-empty".into()))
            }
            None => Ok(()),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Replaces the base seed with `ACNORM_SEED` when that is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Some(seed) = env_seed()? {
            self.seed = seed;
        }
        Ok(())
    }
}

/// Config of the single-step commands (pretrain, finetune, estimate): one
/// task, one architecture, one training setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub version: u32,
    pub arch: ArchSpec,
    pub task: SyntheticTaskSpec,
    pub train: TrainConfig,
    /// Norm layer scored by `estimate`; the deepest encoder norm when absent.
    pub probe_layer: Option<String>,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            arch: ArchSpec::default(),
            task: SyntheticTaskSpec::default(),
            train: TrainConfig::default(),
            probe_layer: None,
        }
    }
}

impl JobConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.arch.validate()?;
        self.task.validate()?;
        self.train.validate()
    }

    /// Replaces the training seed with `ACNORM_SEED` when that is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Some(seed) = env_seed()? {
            self.train.seed = seed;
        }
        Ok(())
    }
}

/// The value of `ACNORM_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("ACNORM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("ACNORM_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn seeded(task: &SyntheticTaskSpec, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        seed: task.seed.wrapping_add(seed),
        ..task.clone()
    }
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub checkpoint_op: CheckpointOp,
    pub arm: NormKind,
    pub dice: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub test_loss: Option<f64>,
    pub train_loss: Option<f64>,
    pub affine_delta: Option<f64>,
    pub stats_delta: Option<f64>,
    pub kernel_delta: Option<f64>,
    pub error: Option<String>,
}

impl RunRecord {
    fn failed(seed: u64, op: CheckpointOp, arm: NormKind, e: &Error) -> Self {
        Self {
            seed,
            checkpoint_op: op,
            arm,
            dice: None,
            accuracy: None,
            auc: None,
            test_loss: None,
            train_loss: None,
            affine_delta: None,
            stats_delta: None,
            kernel_delta: None,
            error: Some(e.to_string()),
        }
    }

    pub fn primary(&self) -> Option<f64> {
        self.dice.or(self.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooRecord {
    pub seed: u64,
    pub member: String,
    pub ac_corr: f64,
    pub probe_layer: String,
    pub ground_truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooReport {
    pub records: Vec<ZooRecord>,
    pub rankings: Vec<(u64, RankingReport)>,
    pub median_kendall_tau: Option<f64>,
    pub median_weighted_tau: Option<f64>,
    pub median_pearson: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub layer_deltas: Vec<(u64, CheckpointOp, NormKind, Vec<LayerDelta>)>,
    pub zoo: Option<ZooReport>,
    pub manifest: RunManifest,
}

impl ExperimentReport {
    pub fn failures(&self) -> &[String] {
        &self.manifest.failures
    }

    /// Primary metric (dice or accuracy) of every successful run of (op, arm).
    pub fn metric(&self, op: CheckpointOp, arm: NormKind) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.checkpoint_op == op && r.arm == arm)
            .filter_map(RunRecord::primary)
            .collect()
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn sanitize(name: &str) -> String {
    name.replace(['.', '/'], "_")
}

type DeltaRun = (u64, CheckpointOp, NormKind, Vec<LayerDelta>);
type ArmsOutput = (Vec<RunRecord>, Vec<DeltaRun>, Vec<String>, Vec<String>);
type ZooSeed = (Vec<ZooRecord>, RankingReport);

struct ArmOutcome {
    record: RunRecord,
    deltas: Vec<LayerDelta>,
    heatmaps: Vec<(String, usize, ndarray::Array2<f64>)>,
}

fn run_arm(
    cfg: &ExperimentConfig,
    seed: u64,
    ckpt: &Checkpoint,
    data: &TaskData,
    op: CheckpointOp,
    arm: NormKind,
) -> Result<ArmOutcome> {
    let tcfg = TrainConfig {
        norm_kind: arm,
        ..with_seed(&cfg.finetune, seed)
    };
    let target = seeded(&cfg.target, seed);
    let mut model = assemble(Some(ckpt), &target, &cfg.arch, &tcfg)?;
    let calibrated: Vec<String> = if arm.is_calibrated() { model.norm_layer_names() } else { vec![] };
    let mut heatmaps = Vec::new();
    let mut snapshot = |epoch: usize, net: &crate::nn::Network| -> Result<()> {
        if cfg.probe_epochs.contains(&epoch) {
            for layer in &calibrated {
                heatmaps.push((layer.clone(), epoch, network_calibration(net, layer)?.into_values()));
            }
        }
        Ok(())
    };
    if cfg.probe_epochs.contains(&0) {
        snapshot(0, &model.to_network()?)?;
    }
    let curve = train(&mut model, &data.train, &tcfg, &mut snapshot)?;
    let metrics = evaluate(&model, &data.test)?;
    let source_graph = ModelGraph::from_checkpoint(ckpt)?;
    let deltas = if source_graph.arch == model.arch {
        layer_deltas(ckpt, &model.to_checkpoint(DType::F64))?
    } else {
        Vec::new()
    };
    let (a, s, k) = mean_deltas(&deltas);
    let has = !deltas.is_empty();
    Ok(ArmOutcome {
        record: RunRecord {
            seed,
            checkpoint_op: op,
            arm,
            dice: metrics.dice,
            accuracy: metrics.accuracy,
            auc: metrics.auc,
            test_loss: Some(metrics.loss),
            train_loss: curve.last().copied(),
            affine_delta: has.then_some(a),
            stats_delta: has.then_some(s),
            kernel_delta: has.then_some(k),
            error: None,
        },
        deltas,
        heatmaps,
    })
}

struct SeedOutcome {
    seed: u64,
    arms: Vec<std::result::Result<ArmOutcome, (CheckpointOp, NormKind, Error)>>,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<SeedOutcome> {
    let pre = pretrain(&seeded(&cfg.source, seed), &cfg.arch, &with_seed(&cfg.pretrain, seed))?;
    let original = pre.checkpoint();
    original.save(out.join("checkpoints").join(format!("seed{seed}_pretrained.ckpt")))?;
    let data = generate_task(&seeded(&cfg.target, seed))?;
    let mut arms = Vec::new();
    for &op in &cfg.checkpoint_ops {
        let ckpt = match op {
            CheckpointOp::Original => original.clone(),
            CheckpointOp::Shuffled => shuffle_channels(&original, seed)?,
            CheckpointOp::Masked => mask_channels(&original, cfg.mask_ratio, seed)?,
        };
        for &arm in &cfg.arms {
            info!("seed {seed}: {} / {arm}", op.as_str());
            arms.push(run_arm(cfg, seed, &ckpt, &data, op, arm).map_err(|e| (op, arm, e)));
        }
    }
    Ok(SeedOutcome { seed, arms })
}

fn write_results_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(e.to_string()))?;
    let header = [
        "seed",
        "checkpoint_op",
        "arm",
        "dice",
        "accuracy",
        "auc",
        "test_loss",
        "train_loss",
        "affine_delta",
        "stats_delta",
        "kernel_delta",
        "error",
    ];
    w.write_record(header).map_err(|e| Error::Input(e.to_string()))?;
    for r in records {
        w.write_record([
            r.seed.to_string(),
            r.checkpoint_op.as_str().to_string(),
            r.arm.to_string(),
            fmt(r.dice),
            fmt(r.accuracy),
            fmt(r.auc),
            fmt(r.test_loss),
            fmt(r.train_loss),
            fmt(r.affine_delta),
            fmt(r.stats_delta),
            fmt(r.kernel_delta),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_summary_csv(path: &Path, cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(e.to_string()))?;
    w.write_record(["checkpoint_op", "arm", "runs", "median_primary", "mean_primary"])
        .map_err(|e| Error::Input(e.to_string()))?;
    for &op in &cfg.checkpoint_ops {
        for &arm in &cfg.arms {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.checkpoint_op == op && r.arm == arm)
                .filter_map(RunRecord::primary)
                .collect();
            let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            w.write_record([
                op.as_str().to_string(),
                arm.to_string(),
                v.len().to_string(),
                fmt(median(&v)),
                fmt(mean),
            ])
            .map_err(|e| Error::Input(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_deltas(
    out: &Path,
    cfg: &ExperimentConfig,
    all: &[DeltaRun],
) -> Result<Vec<String>> {
    let path = out.join("layer_deltas.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Input(e.to_string()))?;
    w.write_record(["seed", "checkpoint_op", "arm", "layer", "component", "affine_delta", "stats_delta", "kernel_delta"])
        .map_err(|e| Error::Input(e.to_string()))?;
    for (seed, op, arm, deltas) in all {
        for d in deltas {
            let component = match d.component {
                LayerComponent::Norm => "norm",
                LayerComponent::Conv => "conv",
            };
            w.write_record([
                seed.to_string(),
                op.as_str().to_string(),
                arm.to_string(),
                d.layer.clone(),
                component.to_string(),
                fmt(d.affine_delta),
                fmt(d.stats_delta),
                fmt(d.kernel_delta),
            ])
            .map_err(|e| Error::Input(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    // per-layer means over seeds, first checkpoint op only
    let op = cfg.checkpoint_ops[0];
    let column = |arm: NormKind, f: fn(&LayerDelta) -> Option<f64>| -> Vec<(f64, f64)> {
        let mut per_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (_, o, a, deltas) in all {
            if *o != op || *a != arm {
                continue;
            }
            for (i, v) in deltas.iter().filter_map(f).enumerate() {
                per_layer.entry(i).or_default().push(v);
            }
        }
        per_layer
            .into_iter()
            .map(|(i, v)| (i as f64, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    };
    let panel = |title: &'static str, f: fn(&LayerDelta) -> Option<f64>, x: &'static str| Panel {
        title,
        x_label: x,
        y_label: "mean |change|",
        series: cfg
            .arms
            .iter()
            .map(|&arm| Series {
                label: arm.to_string(),
                points: column(arm, f),
            })
            .collect(),
    };
    let svg = out.join("deltas.svg");
    write_line_panels_svg(
        &svg,
        &[
            panel("affine signature update per norm layer", |d| d.affine_delta, "norm layer index"),
            panel("statistics signature update per norm layer", |d| d.stats_delta, "norm layer index"),
            panel("kernel update per conv layer", |d| d.kernel_delta, "conv layer index"),
        ],
    )?;
    Ok(vec!["layer_deltas.csv".into(), "deltas.svg".into()])
}

fn run_arms(cfg: &ExperimentConfig, out: &Path) -> Result<ArmsOutput> {
    let seeds = cfg.seeds();
    let outcomes: Vec<(u64, Result<SeedOutcome>)> = seeds.par_iter().map(|&s| (s, run_seed(cfg, s, out))).collect();
    let mut records = Vec::new();
    let mut deltas = Vec::new();
    let mut failures = Vec::new();
    let mut artifacts = vec!["results.csv".to_string(), "summary.csv".to_string()];
    for (seed, outcome) in outcomes {
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                warn!("seed {seed} failed before fine-tuning: {e}");
                failures.push(format!("seed {seed}: {e}"));
                for &op in &cfg.checkpoint_ops {
                    for &arm in &cfg.arms {
                        records.push(RunRecord::failed(seed, op, arm, &e));
                    }
                }
                continue;
            }
        };
        artifacts.push(format!("checkpoints/seed{seed}_pretrained.ckpt"));
        for arm in outcome.arms {
            match arm {
                Ok(a) => {
                    for (layer, epoch, values) in &a.heatmaps {
                        let rel = format!(
                            "heatmaps/seed{}_{}_{}_{}_epoch{epoch}.png",
                            outcome.seed,
                            a.record.checkpoint_op.as_str(),
                            a.record.arm,
                            sanitize(layer)
                        );
                        write_heatmap_png(&out.join(&rel), values, 8)?;
                        artifacts.push(rel);
                    }
                    deltas.push((outcome.seed, a.record.checkpoint_op, a.record.arm, a.deltas));
                    records.push(a.record);
                }
                Err((op, kind, e)) => {
                    warn!("seed {seed} {} / {kind} failed: {e}", op.as_str());
                    failures.push(format!("seed {seed} {} {kind}: {e}", op.as_str()));
                    records.push(RunRecord::failed(seed, op, kind, &e));
                }
            }
        }
    }
    write_results_csv(&out.join("results.csv"), &records)?;
    write_summary_csv(&out.join("summary.csv"), cfg, &records)?;
    artifacts.extend(write_deltas(out, cfg, &deltas)?);
    Ok((records, deltas, artifacts, failures))
}

fn zoo_member_checkpoint(cfg: &ExperimentConfig, member: &ZooMember, seed: u64) -> Result<Checkpoint> {
    match &member.source {
        Some(task) => Ok(pretrain(&seeded(task, seed), &cfg.arch, &with_seed(&cfg.pretrain, seed))?.checkpoint()),
        None => {
            let arch = ArchSpec {
                head: head_for(&cfg.target, cfg.pretrain.head_hidden),
                ..cfg.arch.clone()
            };
            let mut model = build_model(&arch, seed)?;
            model.norm_config = cfg.pretrain.norm_config();
            Ok(model.to_checkpoint(DType::F64))
        }
    }
}

fn run_zoo_seed(cfg: &ExperimentConfig, zoo: &ZooConfig, seed: u64, out: &Path) -> Result<ZooSeed> {
    let target = seeded(&cfg.target, seed);
    let data = generate_task(&target)?;
    let ft = with_seed(&cfg.finetune, seed);
    let mut records = Vec::new();
    for member in &zoo.members {
        let ckpt = zoo_member_checkpoint(cfg, member, seed)?;
        ckpt.save(out.join("checkpoints").join(format!("seed{seed}_{}.ckpt", member.id)))?;
        let score = estimate_transferability(&member.id, &ckpt, &target, &data.train, &ft, zoo.probe_layer.as_deref())?;
        let arch = ModelGraph::from_checkpoint(&ckpt)?.arch;
        let mut model = assemble(Some(&ckpt), &target, &arch, &ft)?;
        train(&mut model, &data.train, &ft, &mut |_, _| Ok(()))?;
        let truth = evaluate(&model, &data.test)?.primary();
        info!("seed {seed}: {} ac_corr {:.4} truth {truth:.4}", member.id, score.ac_corr);
        records.push(ZooRecord {
            seed,
            member: member.id.clone(),
            ac_corr: score.ac_corr,
            probe_layer: score.probe_layer,
            ground_truth: truth,
        });
    }
    let ids: Vec<String> = records.iter().map(|r| r.member.clone()).collect();
    let scores: Vec<f64> = records.iter().map(|r| r.ac_corr).collect();
    let truth: Vec<f64> = records.iter().map(|r| r.ground_truth).collect();
    Ok((records, rank_named(&ids, &scores, &truth)?))
}

fn run_zoo(cfg: &ExperimentConfig, zoo: &ZooConfig, out: &Path) -> Result<(ZooReport, Vec<String>, Vec<String>)> {
    let outcomes: Vec<(u64, Result<ZooSeed>)> =
        cfg.seeds().par_iter().map(|&s| (s, run_zoo_seed(cfg, zoo, s, out))).collect();
    let mut records = Vec::new();
    let mut rankings = Vec::new();
    let mut failures = Vec::new();
    for (seed, o) in outcomes {
        match o {
            Ok((r, rank)) => {
                records.extend(r);
                rankings.push((seed, rank));
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let med = |f: fn(&RankingReport) -> Option<f64>| median(&rankings.iter().filter_map(|(_, r)| f(r)).collect::<Vec<_>>());
    let report = ZooReport {
        median_kendall_tau: med(|r| r.kendall_tau),
        median_weighted_tau: med(|r| r.weighted_tau),
        median_pearson: med(|r| r.pearson),
        records,
        rankings,
    };

    let path = out.join("zoo_scores.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Input(e.to_string()))?;
    w.write_record(["seed", "member", "ac_corr", "probe_layer", "ground_truth"])
        .map_err(|e| Error::Input(e.to_string()))?;
    for r in &report.records {
        w.write_record([
            r.seed.to_string(),
            r.member.clone(),
            format!("{:.6}", r.ac_corr),
            r.probe_layer.clone(),
            format!("{:.6}", r.ground_truth),
        ])
        .map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let json = out.join("zoo_report.json");
    fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
    let series: Vec<Series> = zoo
        .members
        .iter()
        .map(|m| Series {
            label: m.id.clone(),
            points: report
                .records
                .iter()
                .filter(|r| r.member == m.id)
                .map(|r| (r.ac_corr, r.ground_truth))
                .collect(),
        })
        .collect();
    write_scatter_svg(&out.join("scatter.svg"), "AC-Corr vs fine-tuned performance", "AC-Corr", "test metric", &series)?;
    Ok((report, vec!["zoo_scores.csv".into(), "zoo_report.json".into(), "scatter.svg".into()], failures))
}

/// Runs the configured experiment, writing every artifact under `out`.
/// Per-arm failures are recorded, not raised; see [`ExperimentReport::failures`].
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (records, deltas, zoo, mut artifacts, failures) = match &cfg.zoo {
        Some(z) => {
            let (report, artifacts, failures) = run_zoo(cfg, z, out)?;
            (Vec::new(), Vec::new(), Some(report), artifacts, failures)
        }
        None => {
            let (r, d, a, f) = run_arms(cfg, out)?;
            (r, d, None, a, f)
        }
    };
    artifacts.push("run_manifest.json".into());
    let manifest = RunManifest {
        format_version: CONFIG_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        seeds: cfg.seeds(),
        artifacts,
        failures,
    };
    let path = out.join("run_manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(ExperimentReport {
        out_dir: out.to_path_buf(),
        records,
        layer_deltas: deltas,
        zoo,
        manifest,
    })
}

//! Pretraining, fine-tuning and evaluation loops.

use std::collections::HashMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DType};
use crate::data::{generate_task, Dataset, Split, SyntheticTaskSpec, Targets, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc, dice, MetricsRecord};
use crate::model::{build_model, ArchSpec, FreezePolicy, HeadSpec, ModelGraph};
use crate::nn::{bce_with_logits, cross_entropy, sigmoid, softmax_rows, Feature, Network};
use crate::norm::{AcNormConfig, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM, DEFAULT_TEMPERATURE};
use crate::surgery::swap_norm_layers;
use crate::variants::NormKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Heavy-ball momentum for SGD.
    pub sgd_momentum: f64,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub norm_kind: NormKind,
    pub temperature: f64,
    pub eps: f64,
    /// Moving-statistics momentum of the norm layers.
    pub momentum: f64,
    pub detach_calibration: bool,
    /// Class-balanced resampling of the training split (classification only).
    pub balanced_sampler: bool,
    /// Hidden width of a fresh classification head.
    pub head_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Sgd,
            sgd_momentum: 0.9,
            seed: 0,
            freeze_policy: FreezePolicy::FullFt,
            norm_kind: NormKind::VanillaBn,
            temperature: DEFAULT_TEMPERATURE,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            detach_calibration: false,
            balanced_sampler: false,
            head_hidden: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config("sgd_momentum must lie in [0, 1)".into()));
        }
        self.norm_config().validate()
    }

    pub fn norm_config(&self) -> AcNormConfig {
        AcNormConfig {
            temperature: self.temperature,
            eps: self.eps,
            detach_calibration: self.detach_calibration,
            momentum: self.momentum,
        }
    }
}

enum Optimizer {
    Sgd { momentum: f64, velocity: HashMap<String, Vec<f64>> },
    Adam { step: i32, m: HashMap<String, Vec<f64>>, v: HashMap<String, Vec<f64>> },
}

impl Optimizer {
    fn new(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                momentum: cfg.sgd_momentum,
                velocity: HashMap::new(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                step: 0,
                m: HashMap::new(),
                v: HashMap::new(),
            },
        }
    }

    fn step(&mut self, net: &mut Network, trainable: &std::collections::BTreeSet<String>, lr: f64) {
        if let Optimizer::Adam { step, .. } = self {
            *step += 1;
        }
        for slot in net.param_slots() {
            if !trainable.contains(&slot.name) {
                continue;
            }
            match self {
                Optimizer::Sgd { momentum, velocity } => {
                    let vel = velocity.entry(slot.name).or_insert_with(|| vec![0.0; slot.grad.len()]);
                    for ((p, g), v) in slot.value.iter_mut().zip(slot.grad).zip(vel.iter_mut()) {
                        *v = *momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                Optimizer::Adam { step, m, v } => {
                    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                    let mm = m.entry(slot.name.clone()).or_insert_with(|| vec![0.0; slot.grad.len()]);
                    let vv = v.entry(slot.name).or_insert_with(|| vec![0.0; slot.grad.len()]);
                    let (c1, c2) = (1.0 - b1.powi(*step), 1.0 - b2.powi(*step));
                    for (i, (p, g)) in slot.value.iter_mut().zip(slot.grad).enumerate() {
                        mm[i] = b1 * mm[i] + (1.0 - b1) * g;
                        vv[i] = b2 * vv[i] + (1.0 - b2) * g * g;
                        *p -= lr * (mm[i] / c1) / ((vv[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn epoch_order(data: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.len();
    match (cfg.balanced_sampler, data.labels()) {
        (true, Some(labels)) => {
            let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
            let by_class: Vec<Vec<usize>> = (0..classes)
                .map(|c| (0..n).filter(|&i| labels[i] == c).collect())
                .filter(|v: &Vec<usize>| !v.is_empty())
                .collect();
            (0..n)
                .map(|_| {
                    let pool = &by_class[rng.random_range(0..by_class.len())];
                    pool[rng.random_range(0..pool.len())]
                })
                .collect()
        }
        _ => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx
        }
    }
}

fn loss_and_grad(logits: &Feature, targets: &Targets) -> Result<(f64, Feature)> {
    match targets {
        Targets::Masks(m) => Ok(bce_with_logits(logits, m)),
        Targets::Labels(l) => cross_entropy(logits, l),
    }
}

/// Trains `graph` in place on a training split; returns the mean loss per
/// epoch. `on_epoch(epoch, network)` runs after every epoch (1-based).
pub fn train(
    graph: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &Network) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    data.require(&[Split::Train])?;
    if data.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut net = graph.to_network()?;
    net.set_mode(Mode::Training);
    let mut opt = Optimizer::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5452_4149_4e00);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data, cfg, &mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let (x, targets) = data.select(batch);
            let logits = net.forward(&x, true)?;
            let (loss, grad) = loss_and_grad(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            net.backward(grad)?;
            opt.step(&mut net, &graph.trainable, cfg.learning_rate);
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let mean = total / count.max(1) as f64;
        debug!("epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
        on_epoch(epoch, &net)?;
    }
    graph.absorb_network(&net);
    graph.validate()?;
    Ok(curve)
}

/// Forward pass in inference mode, in chunks to bound memory.
pub fn predict(net: &mut Network, images: &Feature) -> Result<Feature> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for chunk in (0..n).collect::<Vec<_>>().chunks(32) {
        parts.push(net.predict(&crate::nn::take_samples(images, chunk))?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Numeric(e.to_string()))
}

/// Metrics on a validation or test split. Never updates any state.
pub fn evaluate(graph: &ModelGraph, data: &Dataset) -> Result<MetricsRecord> {
    data.require(&[Split::Val, Split::Test])?;
    if data.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let mut net = graph.to_network()?;
    let logits = predict(&mut net, &data.images)?;
    let (loss, _) = loss_and_grad(&logits, &data.targets)?;
    let mut rec = MetricsRecord {
        loss,
        ..Default::default()
    };
    match &data.targets {
        Targets::Masks(m) => {
            let probs: Vec<f64> = logits.iter().map(|z| sigmoid(*z)).collect();
            let truth: Vec<f64> = m.iter().copied().collect();
            rec.dice = Some(dice(&probs, &truth)?);
            rec.auc = auc(&probs, &truth.iter().map(|g| *g >= 0.5).collect::<Vec<_>>())?;
        }
        Targets::Labels(labels) => {
            let (n, _, _, c) = logits.dim();
            let flat = logits.to_shape((n, c)).map_err(|e| Error::Numeric(e.to_string()))?;
            let p = softmax_rows(flat.view());
            let predicted: Vec<usize> = p
                .rows()
                .into_iter()
                .map(|r| (0..c).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(0))
                .collect();
            rec.accuracy = Some(accuracy(&predicted, labels)?);
            if c == 2 {
                rec.auc = auc(&p.column(1).to_vec(), &labels.iter().map(|l| *l == 1).collect::<Vec<_>>())?;
            }
        }
    }
    Ok(rec)
}

/// The head matching a task: a 1x1 conv for segmentation, or pooling plus two
/// dense layers for classification.
pub fn head_for(task: &SyntheticTaskSpec, hidden: usize) -> HeadSpec {
    match task.task {
        TaskKind::Segmentation => HeadSpec::Segmentation,
        TaskKind::Classification => HeadSpec::Classification {
            classes: task.classes,
            hidden,
        },
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub metrics: MetricsRecord,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(DType::F64)
    }
}

/// Trains a freshly initialized model (vanilla BN) on `task`; metrics are on
/// the validation split.
pub fn pretrain(task: &SyntheticTaskSpec, arch: &ArchSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let arch = ArchSpec {
        head: head_for(task, cfg.head_hidden),
        ..arch.clone()
    };
    let data = generate_task(task)?;
    let mut model = build_model(&arch, cfg.seed)?;
    model.norm_config = cfg.norm_config();
    let curve = train(&mut model, &data.train, cfg, &mut |_, _| Ok(()))?;
    let mut metrics = evaluate(&model, &data.val)?;
    info!("pretrain done: val loss {:.4}", metrics.loss);
    metrics.loss_curve = curve;
    Ok(TrainOutcome { model, metrics })
}

/// Assembles the fine-tuning model: target architecture with a fresh head,
/// norm layers swapped to `cfg.norm_kind` with weights from `source` (or the
/// model's own initialization when `source` is `None`), freeze policy applied.
pub fn assemble(source: Option<&Checkpoint>, task: &SyntheticTaskSpec, arch: &ArchSpec, cfg: &TrainConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let arch = ArchSpec {
        head: head_for(task, cfg.head_hidden),
        ..arch.clone()
    };
    let mut model = build_model(&arch, cfg.seed)?;
    model.norm_config = cfg.norm_config();
    let own;
    let source = match source {
        Some(s) => s,
        None => {
            own = model.to_checkpoint(DType::F64);
            &own
        }
    };
    let mut model = swap_norm_layers(&model, source, cfg.norm_kind)?;
    model.reset_head(cfg.seed);
    model.apply_freeze_policy(&cfg.freeze_policy);
    Ok(model)
}

/// Fine-tunes from `source` on `task` and reports test metrics.
pub fn finetune_on(
    source: Option<&Checkpoint>,
    data: &crate::data::TaskData,
    task: &SyntheticTaskSpec,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut model = assemble(source, task, arch, cfg)?;
    let curve = train(&mut model, &data.train, cfg, on_epoch)?;
    let mut metrics = evaluate(&model, &data.test)?;
    metrics.loss_curve = curve;
    Ok(TrainOutcome { model, metrics })
}

/// As [`finetune_on`], generating the task data from `task` and taking the
/// architecture from the checkpoint manifest.
pub fn finetune(source: &Checkpoint, task: &SyntheticTaskSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let arch = ModelGraph::from_checkpoint(source)?.arch;
    let data = generate_task(task)?;
    finetune_on(Some(source), &data, task, &arch, cfg, &mut |_, _| Ok(()))
}

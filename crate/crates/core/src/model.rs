//! Model description: a small configurable encoder/decoder (or encoder plus
//! classifier) as an ordered list of layers with named parameter tensors.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fnv1a64, Checkpoint, DType, StoredTensor, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, Network, Node, NormNode, Op};
use crate::norm::{AcNormConfig, AcNormLayer, AffineParams, NormStats, Role};
use crate::variants::{NormKind, NormLayer};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum HeadSpec {
    Segmentation,
    Classification { classes: usize, hidden: usize },
}

/// The head is replaced by one matching the task whenever a model is
/// trained, so configs may leave it out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub convs_per_block: usize,
    pub head: HeadSpec,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![8, 16, 32],
            kernel: 3,
            convs_per_block: 1,
            head: HeadSpec::Segmentation,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Spec("in_channels must be >= 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Spec(format!("widths must be non-empty and positive: {:?}", self.widths)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Spec(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.convs_per_block == 0 {
            return Err(Error::Spec("convs_per_block must be >= 1".into()));
        }
        if let HeadSpec::Classification { classes, hidden } = self.head {
            if classes < 2 || hidden == 0 {
                return Err(Error::Spec("classification head needs >= 2 classes and hidden >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("serializable").as_bytes())
    }

    /// Spatial downsampling factor of the encoder.
    pub fn downsample(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Norm {
        kind: NormKind,
        channels: usize,
    },
    Activation {
        activation: Activation,
    },
    MaxPool,
    Upsample,
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerDesc {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }

    pub fn is_head(&self) -> bool {
        self.name.starts_with("head.")
    }
}

/// Which parameters receive gradient updates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    FullFt,
    NormOnly,
    /// Freeze every parameter whose name matches one of the `*` patterns.
    Custom(Vec<String>),
}

/// `*` matches any (possibly empty) run of characters.
pub fn wildcard_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// Buffers and frozen source copies never train.
pub fn is_buffer(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    leaf.starts_with("running_") || leaf.starts_with("source_")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub arch: ArchSpec,
    pub layers: Vec<LayerDesc>,
    pub parameters: BTreeMap<String, ArrayD<f64>>,
    pub trainable: BTreeSet<String>,
    /// Index into `layers` of the last encoder layer.
    pub encoder_boundary: usize,
    pub norm_config: AcNormConfig,
    pub seed: u64,
}

fn layer_list(arch: &ArchSpec) -> (Vec<LayerDesc>, usize) {
    let mut layers = Vec::new();
    let mut channels = arch.in_channels;
    let last = arch.widths.len() - 1;
    for (b, &w) in arch.widths.iter().enumerate() {
        for c in 0..arch.convs_per_block {
            layers.push(LayerDesc::new(
                format!("encoder.block{b}.conv{c}"),
                LayerKind::Conv {
                    in_channels: channels,
                    out_channels: w,
                    kernel: arch.kernel,
                    stride: 1,
                },
            ));
            layers.push(LayerDesc::new(
                format!("encoder.block{b}.norm{c}"),
                LayerKind::Norm {
                    kind: NormKind::VanillaBn,
                    channels: w,
                },
            ));
            layers.push(LayerDesc::new(
                format!("encoder.block{b}.act{c}"),
                LayerKind::Activation {
                    activation: Activation::Relu,
                },
            ));
            channels = w;
        }
        if b < last {
            layers.push(LayerDesc::new(format!("encoder.block{b}.pool"), LayerKind::MaxPool));
        }
    }
    let boundary = layers.len() - 1;
    match arch.head {
        HeadSpec::Segmentation => {
            for b in (0..last).rev() {
                let w = arch.widths[b];
                layers.push(LayerDesc::new(format!("decoder.block{b}.up"), LayerKind::Upsample));
                layers.push(LayerDesc::new(
                    format!("decoder.block{b}.conv"),
                    LayerKind::Conv {
                        in_channels: channels,
                        out_channels: w,
                        kernel: arch.kernel,
                        stride: 1,
                    },
                ));
                layers.push(LayerDesc::new(
                    format!("decoder.block{b}.norm"),
                    LayerKind::Norm {
                        kind: NormKind::VanillaBn,
                        channels: w,
                    },
                ));
                layers.push(LayerDesc::new(
                    format!("decoder.block{b}.act"),
                    LayerKind::Activation {
                        activation: Activation::Relu,
                    },
                ));
                channels = w;
            }
            layers.push(LayerDesc::new(
                "head.conv",
                LayerKind::Conv {
                    in_channels: channels,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                },
            ));
        }
        HeadSpec::Classification { classes, hidden } => {
            layers.push(LayerDesc::new("head.pool", LayerKind::GlobalAvgPool));
            layers.push(LayerDesc::new(
                "head.dense0",
                LayerKind::Dense {
                    in_features: channels,
                    out_features: hidden,
                },
            ));
            layers.push(LayerDesc::new(
                "head.act0",
                LayerKind::Activation {
                    activation: Activation::Relu,
                },
            ));
            layers.push(LayerDesc::new(
                "head.dense1",
                LayerKind::Dense {
                    in_features: hidden,
                    out_features: classes,
                },
            ));
        }
    }
    (layers, boundary)
}

/// Kaiming-normal draws with `std = sqrt(2 / fan_in)`.
pub(crate) fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..count).map(|_| normal.sample(rng)).collect()
}

/// Fresh values for every tensor of `layer`, in the builder's init scheme.
pub(crate) fn init_layer(layer: &LayerDesc, rng: &mut ChaCha8Rng) -> Vec<(String, ArrayD<f64>)> {
    let n = &layer.name;
    match layer.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let fan_in = kernel * kernel * in_channels;
            let w = kaiming(rng, fan_in, out_channels * fan_in);
            vec![
                (
                    format!("{n}.weight"),
                    ArrayD::from_shape_vec(IxDyn(&[out_channels, kernel, kernel, in_channels]), w).expect("shape"),
                ),
                (format!("{n}.bias"), ArrayD::zeros(IxDyn(&[out_channels]))),
            ]
        }
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            let w = kaiming(rng, in_features, out_features * in_features);
            vec![
                (
                    format!("{n}.weight"),
                    ArrayD::from_shape_vec(IxDyn(&[out_features, in_features]), w).expect("shape"),
                ),
                (format!("{n}.bias"), ArrayD::zeros(IxDyn(&[out_features]))),
            ]
        }
        LayerKind::Norm { channels, .. } => vec![
            (format!("{n}.gamma"), ArrayD::ones(IxDyn(&[channels]))),
            (format!("{n}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            (format!("{n}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            (format!("{n}.running_var"), ArrayD::ones(IxDyn(&[channels]))),
        ],
        _ => Vec::new(),
    }
}

/// Builds a freshly initialized model. Deterministic in `(arch, seed)`.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<ModelGraph> {
    arch.validate()?;
    let (layers, encoder_boundary) = layer_list(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parameters = BTreeMap::new();
    for layer in &layers {
        parameters.extend(init_layer(layer, &mut rng));
    }
    let mut graph = ModelGraph {
        arch: arch.clone(),
        layers,
        parameters,
        trainable: BTreeSet::new(),
        encoder_boundary,
        norm_config: AcNormConfig::default(),
        seed,
    };
    graph.validate()?;
    graph.apply_freeze_policy(&FreezePolicy::FullFt);
    Ok(graph)
}

fn vec1(a: &ArrayD<f64>) -> Array1<f64> {
    a.clone().into_dimensionality::<Ix1>().expect("1-d tensor")
}

impl ModelGraph {
    /// Checks channel consistency along the layer list and parameter shapes.
    pub fn validate(&self) -> Result<()> {
        let mut channels = self.arch.in_channels;
        let mut flat = false;
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    if *in_channels != channels || flat {
                        return Err(Error::Spec(format!(
                            "{} expects {in_channels} input channels but receives {channels}",
                            layer.name
                        )));
                    }
                    channels = *out_channels;
                }
                LayerKind::Norm { channels: k, .. } => {
                    if *k != channels {
                        return Err(Error::Spec(format!(
                            "{} normalizes {k} channels but the preceding layer emits {channels}",
                            layer.name
                        )));
                    }
                }
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    if *in_features != channels {
                        return Err(Error::Spec(format!(
                            "{} expects {in_features} features but receives {channels}",
                            layer.name
                        )));
                    }
                    channels = *out_features;
                }
                LayerKind::GlobalAvgPool => flat = true,
                _ => {}
            }
            for (name, value) in self.parameters.range(format!("{}.", layer.name)..) {
                if !name.starts_with(&format!("{}.", layer.name)) {
                    break;
                }
                if value.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite values in {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDesc> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn norm_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Norm { .. }))
            .map(|l| l.name.clone())
            .collect()
    }

    /// Deepest norm layer at or before the encoder boundary.
    pub fn deepest_encoder_norm(&self) -> Option<String> {
        self.layers[..=self.encoder_boundary]
            .iter()
            .rev()
            .find(|l| matches!(l.kind, LayerKind::Norm { .. }))
            .map(|l| l.name.clone())
    }

    pub fn param(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.parameters
            .get(name)
            .ok_or_else(|| Error::Spec(format!("missing parameter `{name}`")))
    }

    /// Sets trainable flags; returns the patterns that matched nothing.
    pub fn apply_freeze_policy(&mut self, policy: &FreezePolicy) -> Vec<String> {
        let norm_prefixes: Vec<String> = self.norm_layer_names().into_iter().map(|n| n + ".").collect();
        let candidates = self.parameters.keys().filter(|n| !is_buffer(n));
        let mut unmatched = Vec::new();
        self.trainable = match policy {
            FreezePolicy::FullFt => candidates.cloned().collect(),
            FreezePolicy::NormOnly => candidates
                .filter(|n| n.starts_with("head.") || norm_prefixes.iter().any(|p| n.starts_with(p.as_str())))
                .cloned()
                .collect(),
            FreezePolicy::Custom(patterns) => {
                for p in patterns {
                    if !self.parameters.keys().any(|n| wildcard_match(p, n)) {
                        warn!("freeze pattern `{p}` matches no parameter");
                        unmatched.push(p.clone());
                    }
                }
                candidates
                    .filter(|n| !patterns.iter().any(|p| wildcard_match(p, n)))
                    .cloned()
                    .collect()
            }
        };
        unmatched
    }

    /// Re-initializes every `head.*` tensor from a seed-derived stream.
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144_u64);
        for layer in self.layers.iter().filter(|l| l.is_head()) {
            for (name, value) in init_layer(layer, &mut rng) {
                self.parameters.insert(name, value);
            }
        }
    }

    fn build_norm(&self, name: &str, kind: NormKind, channels: usize) -> Result<NormLayer> {
        let p = |leaf: &str| self.param(&format!("{name}.{leaf}")).map(vec1);
        let opt = |leaf: &str| self.parameters.get(&format!("{name}.{leaf}")).map(vec1);
        let cfg = self.norm_config;
        let source = AffineParams::source(
            opt("source_gamma").map_or_else(|| p("gamma"), Ok)?,
            opt("source_beta").map_or_else(|| p("beta"), Ok)?,
        )?;
        let target = AffineParams::new(p("gamma")?, p("beta")?, Role::Target)?;
        let stats = NormStats::with_moving(p("running_mean")?, p("running_var")?, cfg.momentum, cfg.eps)?;
        if stats.channels() != channels {
            return Err(Error::Spec(format!("{name}: stored statistics do not have {channels} channels")));
        }
        let state = AcNormLayer::from_parts(source, target, stats, cfg)?;
        let source_stats = match (opt("source_running_mean"), opt("source_running_var")) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        };
        let calibration = self
            .parameters
            .get(&format!("{name}.calibration"))
            .map(|c| c.clone().into_dimensionality::<Ix2>().expect("2-d calibration"));
        NormLayer::from_parts(kind, state, source_stats, calibration)
    }

    /// Instantiates the runtime network from the current parameters.
    pub fn to_network(&self) -> Result<Network> {
        let mut nodes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let name = &layer.name;
            let op = match &layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let w = self.param(&format!("{name}.weight"))?;
                    let w2: Array2<f64> = w
                        .to_shape((*out_channels, kernel * kernel * in_channels))
                        .map_err(|e| Error::Spec(format!("{name}.weight: {e}")))?
                        .into_owned();
                    Op::Conv(Conv2d::new(w2, vec1(self.param(&format!("{name}.bias"))?), *in_channels, *kernel, *stride)?)
                }
                LayerKind::Dense { .. } => {
                    let w = self.param(&format!("{name}.weight"))?.clone().into_dimensionality::<Ix2>().map_err(|e| Error::Spec(e.to_string()))?;
                    Op::Dense(Dense::new(w, vec1(self.param(&format!("{name}.bias"))?))?)
                }
                LayerKind::Norm { kind, channels } => Op::Norm(Box::new(NormNode::new(self.build_norm(name, *kind, *channels)?))),
                LayerKind::Activation { activation } => match activation {
                    Activation::Relu => Op::Relu(None),
                    Activation::Identity => Op::Identity,
                },
                LayerKind::MaxPool => Op::MaxPool(None),
                LayerKind::Upsample => Op::Upsample,
                LayerKind::GlobalAvgPool => Op::GlobalAvgPool(None),
            };
            nodes.push(Node { name: name.clone(), op });
        }
        Ok(Network { nodes })
    }

    /// Copies trained values (weights, target affines, moving statistics,
    /// free calibration matrices) back into the parameter map.
    pub fn absorb_network(&mut self, net: &Network) {
        for node in &net.nodes {
            let name = &node.name;
            let mut put = |leaf: &str, data: Vec<f64>| {
                let key = format!("{name}.{leaf}");
                if let Some(slot) = self.parameters.get_mut(&key) {
                    let shape = slot.shape().to_vec();
                    *slot = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape preserved");
                }
            };
            match &node.op {
                Op::Conv(c) => {
                    put("weight", c.weight.iter().copied().collect());
                    put("bias", c.bias.to_vec());
                }
                Op::Dense(d) => {
                    put("weight", d.weight.iter().copied().collect());
                    put("bias", d.bias.to_vec());
                }
                Op::Norm(n) => {
                    let l = &n.layer;
                    put("gamma", l.state.target.gamma().to_vec());
                    put("beta", l.state.target.beta().to_vec());
                    put("running_mean", l.state.stats.moving_mean.to_vec());
                    put("running_var", l.state.stats.moving_var.to_vec());
                    if let Some(c) = &l.calibration {
                        put("calibration", c.iter().copied().collect());
                    }
                }
                _ => {}
            }
        }
    }

    /// The norm kind shared by all norm layers (they are swapped together).
    pub fn norm_kind(&self) -> NormKind {
        self.layers
            .iter()
            .find_map(|l| match l.kind {
                LayerKind::Norm { kind, .. } => Some(kind),
                _ => None,
            })
            .unwrap_or_default()
    }

    pub fn to_checkpoint(&self, dtype: DType) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let m = &mut ckpt.manifest;
        m.insert("format_version".into(), FORMAT_VERSION.to_string());
        m.insert("arch".into(), serde_json::to_string(&self.arch).expect("serializable"));
        m.insert("arch_hash".into(), format!("{:016x}", self.arch.hash()));
        m.insert("seed".into(), self.seed.to_string());
        m.insert("norm_kind".into(), self.norm_kind().to_string());
        m.insert("temperature".into(), format!("{:?}", self.norm_config.temperature));
        m.insert("eps".into(), format!("{:?}", self.norm_config.eps));
        m.insert("momentum".into(), format!("{:?}", self.norm_config.momentum));
        m.insert("detach_calibration".into(), self.norm_config.detach_calibration.to_string());
        for (name, value) in &self.parameters {
            ckpt.tensors.insert(
                name.clone(),
                StoredTensor {
                    dtype,
                    array: value.clone(),
                },
            );
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch: ArchSpec = serde_json::from_str(ckpt.manifest_value("arch")?)?;
        let expected = format!("{:016x}", arch.hash());
        if ckpt.manifest_value("arch_hash")? != expected {
            return Err(Error::Checkpoint("architecture hash does not match manifest".into()));
        }
        let parse = |key: &str| -> Result<f64> {
            ckpt.manifest_value(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{key}` value")))
        };
        let kind: NormKind = ckpt.manifest_value("norm_kind")?.parse()?;
        let seed = ckpt
            .manifest_value("seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad seed".into()))?;
        let (mut layers, encoder_boundary) = layer_list(&arch);
        for l in &mut layers {
            if let LayerKind::Norm { kind: k, .. } = &mut l.kind {
                *k = kind;
            }
        }
        let mut graph = ModelGraph {
            arch,
            layers,
            parameters: ckpt.tensors.iter().map(|(k, v)| (k.clone(), v.array.clone())).collect(),
            trainable: BTreeSet::new(),
            encoder_boundary,
            norm_config: AcNormConfig {
                temperature: parse("temperature")?,
                eps: parse("eps")?,
                momentum: parse("momentum")?,
                detach_calibration: ckpt.manifest_value("detach_calibration")? == "true",
            },
            seed,
        };
        graph.validate()?;
        graph.apply_freeze_policy(&FreezePolicy::FullFt);
        Ok(graph)
    }
}

//! Model surgery: norm-layer swaps that wire frozen source affines from a
//! pretrained checkpoint, plus channel shuffle and mask manipulations.

use ndarray::{Array1, ArrayD, Axis, Ix1, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{kaiming, LayerKind, ModelGraph};
use crate::norm::{AcNormLayer, AffineParams};
use crate::variants::NormKind;

const SOURCE_LEAVES: [&str; 4] = ["source_gamma", "source_beta", "source_running_mean", "source_running_var"];

/// Replaces every norm layer of `model` by `kind`, loading all non-head
/// parameters from `source`. Source affines (and source moving statistics
/// for `sc_norm`) are stored as frozen copies; target affines start equal to
/// them. Trainable flags are reset to full fine-tuning.
pub fn swap_norm_layers(model: &ModelGraph, source: &Checkpoint, kind: NormKind) -> Result<ModelGraph> {
    let mut out = model.clone();
    let mut offending = Vec::new();
    for (name, value) in out.parameters.iter_mut() {
        if name.starts_with("head.") || SOURCE_LEAVES.iter().chain(["calibration"].iter()).any(|l| name.ends_with(&format!(".{l}"))) {
            continue;
        }
        match source.tensor(name) {
            Some(t) if t.shape() == value.shape() => *value = t.clone(),
            _ => offending.push(name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l).to_string()),
        }
    }
    if !offending.is_empty() {
        offending.dedup();
        return Err(Error::Surgery {
            message: format!("checkpoint does not match the model in {} layer(s)", offending.len()),
            layers: offending,
        });
    }

    let norms = out.norm_layer_names();
    for layer in &mut out.layers {
        if let LayerKind::Norm { kind: k, .. } = &mut layer.kind {
            *k = kind;
        }
    }
    for name in &norms {
        let key = |leaf: &str| format!("{name}.{leaf}");
        for leaf in SOURCE_LEAVES.iter().chain(["calibration"].iter()) {
            out.parameters.remove(&key(leaf));
        }
        if kind.is_calibrated() {
            for leaf in ["gamma", "beta"] {
                let v = out.param(&key(leaf))?.clone();
                out.parameters.insert(key(&format!("source_{leaf}")), v);
            }
        }
        if kind == NormKind::ScNorm {
            for leaf in ["running_mean", "running_var"] {
                let v = out.param(&key(leaf))?.clone();
                out.parameters.insert(key(&format!("source_{leaf}")), v);
            }
        }
        if kind == NormKind::AcTrainableC {
            let vec = |leaf: &str| -> Result<Array1<f64>> {
                Ok(out.param(&key(leaf))?.clone().into_dimensionality::<Ix1>().expect("1-d"))
            };
            let layer = AcNormLayer::new(AffineParams::source(vec("gamma")?, vec("beta")?)?, out.norm_config)?;
            out.parameters.insert(key("calibration"), layer.calibration()?.into_values().into_dyn());
        }
    }
    out.validate()?;
    out.apply_freeze_policy(&crate::model::FreezePolicy::FullFt);
    Ok(out)
}

/// Per conv layer: the norm directly after it and the next layer that
/// consumes its channels (a conv or a dense layer).
struct ChannelGroup {
    conv: String,
    channels: usize,
    fan_in: usize,
    norm: Option<String>,
    consumer: Option<String>,
}

fn channel_groups(graph: &ModelGraph) -> Vec<ChannelGroup> {
    let mut groups = Vec::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        let LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } = layer.kind
        else {
            continue;
        };
        let mut norm = None;
        let mut consumer = None;
        for next in &graph.layers[i + 1..] {
            match next.kind {
                LayerKind::Norm { .. } if norm.is_none() => norm = Some(next.name.clone()),
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                    consumer = Some(next.name.clone());
                    break;
                }
                _ => {}
            }
        }
        groups.push(ChannelGroup {
            conv: layer.name.clone(),
            channels: out_channels,
            fan_in: kernel * kernel * in_channels,
            norm,
            consumer,
        });
    }
    groups
}

fn permute_axis(a: &ArrayD<f64>, axis: usize, perm: &[usize]) -> ArrayD<f64> {
    a.select(Axis(axis), perm)
}

fn permute_tensor(ckpt: &mut Checkpoint, name: &str, axis: usize, perm: &[usize]) {
    if let Some(t) = ckpt.tensors.get_mut(name) {
        t.array = permute_axis(&t.array, axis, perm);
    }
}

fn norm_tensor_names(ckpt: &Checkpoint, norm: &str) -> Vec<String> {
    let prefix = format!("{norm}.");
    ckpt.tensors
        .keys()
        .filter(|k| k.strip_prefix(&prefix).is_some_and(|leaf| !leaf.contains('.')))
        .cloned()
        .collect()
}

fn permute_group(ckpt: &mut Checkpoint, g: &ChannelGroup, perm: &[usize], fix_consumer: bool) {
    permute_tensor(ckpt, &format!("{}.weight", g.conv), 0, perm);
    permute_tensor(ckpt, &format!("{}.bias", g.conv), 0, perm);
    if let Some(norm) = &g.norm {
        for name in norm_tensor_names(ckpt, norm) {
            let ndim = ckpt.tensors[&name].array.ndim();
            for axis in 0..ndim {
                permute_tensor(ckpt, &name, axis, perm);
            }
        }
    }
    if fix_consumer {
        if let Some(next) = &g.consumer {
            let name = format!("{next}.weight");
            let last = ckpt.tensors.get(&name).map_or(0, |t| t.array.ndim() - 1);
            permute_tensor(ckpt, &name, last, perm);
        }
    }
}

fn random_perm(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    p.shuffle(rng);
    p
}

/// Shuffles the output channels of every conv (and its norm parameters) by
/// an independent random permutation per layer. The next layer's input axis
/// is left untouched, so channel alignment across layers breaks.
pub fn shuffle_channels(ckpt: &Checkpoint, seed: u64) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_channels_with(ckpt, |_, k| random_perm(&mut rng, k))
}

/// As [`shuffle_channels`], with permutations supplied by `perm(conv_name, K)`.
pub fn shuffle_channels_with(ckpt: &Checkpoint, mut perm: impl FnMut(&str, usize) -> Vec<usize>) -> Result<Checkpoint> {
    apply_permutations(ckpt, &mut perm, false)
}

/// Permutes output channels, norm parameters and the consumer's input axis
/// together. The network function is unchanged; this is the reference that
/// [`shuffle_channels`] is measured against.
pub fn permute_consistent(ckpt: &Checkpoint, seed: u64) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_permutations(ckpt, &mut |_, k| random_perm(&mut rng, k), true)
}

fn apply_permutations(
    ckpt: &Checkpoint,
    perm: &mut dyn FnMut(&str, usize) -> Vec<usize>,
    fix_consumer: bool,
) -> Result<Checkpoint> {
    let graph = ModelGraph::from_checkpoint(ckpt)?;
    let mut out = ckpt.clone();
    for g in channel_groups(&graph) {
        let p = perm(&g.conv, g.channels);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        if sorted != (0..g.channels).collect::<Vec<_>>() {
            return Err(Error::Surgery {
                message: "supplied permutation is not a permutation of 0..K".into(),
                layers: vec![g.conv.clone()],
            });
        }
        permute_group(&mut out, &g, &p, fix_consumer);
    }
    Ok(out)
}

/// Re-initializes `floor(ratio * K)` randomly chosen output channels per conv
/// layer (weight slices, bias, and matching norm parameters) with values
/// from the builder's init scheme.
pub fn mask_channels(ckpt: &Checkpoint, ratio: f64, seed: u64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Input(format!("mask ratio must lie in [0, 1], got {ratio}")));
    }
    let graph = ModelGraph::from_checkpoint(ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ckpt.clone();
    for g in channel_groups(&graph) {
        let count = (ratio * g.channels as f64).floor() as usize;
        let chosen: Vec<usize> = random_perm(&mut rng, g.channels).into_iter().take(count).collect();
        for &c in &chosen {
            let fresh = kaiming(&mut rng, g.fan_in, g.fan_in);
            if let Some(t) = out.tensors.get_mut(&format!("{}.weight", g.conv)) {
                let mut slice = t.array.index_axis_mut(Axis(0), c);
                for (dst, src) in slice.iter_mut().zip(fresh) {
                    *dst = src;
                }
            }
            if let Some(t) = out.tensors.get_mut(&format!("{}.bias", g.conv)) {
                t.array[IxDyn(&[c])] = 0.0;
            }
            if let Some(norm) = &g.norm {
                for name in norm_tensor_names(&out, norm) {
                    let leaf = name.rsplit('.').next().unwrap_or_default();
                    let init = if leaf.ends_with("gamma") || leaf.ends_with("running_var") { 1.0 } else { 0.0 };
                    let t = out.tensors.get_mut(&name).expect("listed tensor");
                    if t.array.ndim() == 1 {
                        t.array[IxDyn(&[c])] = init;
                    }
                }
            }
        }
    }
    Ok(out)
}

//! Per-layer update magnitudes between two checkpoints, and an empirical
//! check that the affine parameters of one norm layer fix the batch
//! statistics seen by the next one.

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelGraph};
use crate::nn::{Conv2d, Op};
use crate::norm::AffineParams;

/// Epsilon of the signatures compared by [`layer_deltas`].
pub const PROBE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerComponent {
    Norm,
    Conv,
}

/// Norm layers carry `affine_delta` and `stats_delta`; conv layers carry
/// `kernel_delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: String,
    pub component: LayerComponent,
    pub affine_delta: Option<f64>,
    pub stats_delta: Option<f64>,
    pub kernel_delta: Option<f64>,
}

fn ratio(num: &ArrayD<f64>, den: &ArrayD<f64>) -> ArrayD<f64> {
    ndarray::Zip::from(num).and(den).map_collect(|n, d| n / (d * d + PROBE_EPS).sqrt())
}

fn mean_abs_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.zip(b) {
        sum += (x - y).abs();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Update magnitudes per norm layer (affine signature `beta/sqrt(gamma^2+eps)`
/// and statistics signature `mu/sqrt(var+eps)`) and per conv layer (mean
/// absolute change of weights and bias).
pub fn layer_deltas(before: &Checkpoint, after: &Checkpoint) -> Result<Vec<LayerDelta>> {
    let a = ModelGraph::from_checkpoint(before).map_err(|e| Error::Probe(e.to_string()))?;
    let b = ModelGraph::from_checkpoint(after).map_err(|e| Error::Probe(e.to_string()))?;
    if a.arch != b.arch {
        return Err(Error::Probe("checkpoints have different architectures".into()));
    }
    let t = |g: &ModelGraph, name: String| -> Result<ArrayD<f64>> {
        g.parameters
            .get(&name)
            .cloned()
            .ok_or_else(|| Error::Probe(format!("missing tensor `{name}`")))
    };
    let mut out = Vec::new();
    for layer in &a.layers {
        let n = &layer.name;
        match layer.kind {
            LayerKind::Norm { .. } => {
                let sig = |g: &ModelGraph, num: &str, den: &str| -> Result<ArrayD<f64>> {
                    Ok(ratio(&t(g, format!("{n}.{num}"))?, &t(g, format!("{n}.{den}"))?))
                };
                let stat = |g: &ModelGraph| -> Result<ArrayD<f64>> {
                    let mu = t(g, format!("{n}.running_mean"))?;
                    let var = t(g, format!("{n}.running_var"))?;
                    Ok(ndarray::Zip::from(&mu).and(&var).map_collect(|m, v| m / (v + PROBE_EPS).sqrt()))
                };
                let (za, zb) = (sig(&a, "beta", "gamma")?, sig(&b, "beta", "gamma")?);
                let (sa, sb) = (stat(&a)?, stat(&b)?);
                out.push(LayerDelta {
                    layer: n.clone(),
                    component: LayerComponent::Norm,
                    affine_delta: Some(mean_abs_diff(za.iter(), zb.iter())),
                    stats_delta: Some(mean_abs_diff(sa.iter(), sb.iter())),
                    kernel_delta: None,
                });
            }
            LayerKind::Conv { .. } => {
                let (wa, wb) = (t(&a, format!("{n}.weight"))?, t(&b, format!("{n}.weight"))?);
                let (ba, bb) = (t(&a, format!("{n}.bias"))?, t(&b, format!("{n}.bias"))?);
                out.push(LayerDelta {
                    layer: n.clone(),
                    component: LayerComponent::Conv,
                    affine_delta: None,
                    stats_delta: None,
                    kernel_delta: Some(mean_abs_diff(wa.iter().chain(ba.iter()), wb.iter().chain(bb.iter()))),
                });
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Mean over the layers of each delta column, skipping absent entries.
pub fn mean_deltas(deltas: &[LayerDelta]) -> (f64, f64, f64) {
    let mean = |f: fn(&LayerDelta) -> Option<f64>| {
        let v: Vec<f64> = deltas.iter().filter_map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (mean(|d| d.affine_delta), mean(|d| d.stats_delta), mean(|d| d.kernel_delta))
}

pub fn deltas_csv(deltas: &[LayerDelta]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    let mut s = String::from("layer,component,affine_delta,stats_delta,kernel_delta\n");
    for d in deltas {
        let component = match d.component {
            LayerComponent::Norm => "norm",
            LayerComponent::Conv => "conv",
        };
        s.push_str(&format!(
            "{},{component},{},{},{}\n",
            d.layer,
            cell(d.affine_delta),
            cell(d.stats_delta),
            cell(d.kernel_delta)
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatPropagation {
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub predicted_mean: f64,
    pub predicted_var: f64,
}

impl StatPropagation {
    /// Larger of the relative errors of mean and variance.
    pub fn relative_error(&self) -> f64 {
        let rel = |e: f64, p: f64| (e - p).abs() / p.abs();
        rel(self.empirical_mean, self.predicted_mean).max(rel(self.empirical_var, self.predicted_var))
    }
}

/// Feeds `n_samples` standard-normal channel vectors through the previous
/// layer's affine transform, an identity activation, and a bias-free 1x1 conv
/// with weights `alpha`; compares the output moments with
/// `mu = sum(alpha*beta)` and `var = sum(alpha^2 * gamma^2)`.
pub fn verify_stat_propagation(prev: &AffineParams, alpha: &[f64], n_samples: usize, seed: u64) -> Result<StatPropagation> {
    let k = prev.channels();
    if alpha.len() != k {
        return Err(Error::Probe(format!("{} conv weights for {k} channels", alpha.len())));
    }
    if n_samples < 2 {
        return Err(Error::Probe("need at least two samples".into()));
    }
    let mut conv = Conv2d::new(
        Array2::from_shape_vec((1, k), alpha.to_vec()).map_err(|e| Error::Probe(e.to_string()))?,
        Array1::zeros(1),
        k,
        1,
        1,
    )?;
    let mut activation = Op::Identity;
    let (gamma, beta) = (prev.gamma(), prev.beta());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut done = 0;
    // shifted accumulation keeps the variance well conditioned
    let shift: f64 = alpha.iter().zip(beta).map(|(a, b)| a * b).sum();
    while done < n_samples {
        let n = (n_samples - done).min(1 << 16);
        let x = Array4::from_shape_fn((n, 1, 1, k), |(_, _, _, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            gamma[j] * z + beta[j]
        });
        let h = activation.forward(x, false)?;
        let y = conv.forward(&h, false)?;
        for v in y.iter() {
            let d = v - shift;
            sum += d;
            sum_sq += d * d;
        }
        done += n;
    }
    let n = n_samples as f64;
    let mean_shifted = sum / n;
    Ok(StatPropagation {
        empirical_mean: shift + mean_shifted,
        empirical_var: (sum_sq / n - mean_shifted * mean_shifted) * n / (n - 1.0),
        predicted_mean: shift,
        predicted_var: alpha.iter().zip(gamma).map(|(a, g)| a * a * g * g).sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatPropagationConfig {
    pub draws: usize,
    pub channels: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub gamma_range: (f64, f64),
}

impl Default for StatPropagationConfig {
    fn default() -> Self {
        Self {
            draws: 20,
            channels: 4,
            n_samples: 1_000_000,
            seed: 0,
            alpha_range: (0.5, 1.5),
            beta_range: (0.5, 2.0),
            gamma_range: (0.5, 1.5),
        }
    }
}

impl StatPropagationConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text)?;
        if cfg.draws == 0 || cfg.channels == 0 || cfg.n_samples < 2 {
            return Err(Error::Config("draws, channels must be >= 1 and n_samples >= 2".into()));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatPropagationDraw {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub result: StatPropagation,
    pub relative_error: f64,
}

/// Runs [`verify_stat_propagation`] over random draws of `(alpha, beta, gamma)`.
pub fn stat_propagation_sweep(cfg: &StatPropagationConfig) -> Result<Vec<StatPropagationDraw>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = |(lo, hi): (f64, f64), rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..cfg.channels).map(|_| rng.random_range(lo..hi)).collect()
    };
    let mut out = Vec::with_capacity(cfg.draws);
    for i in 0..cfg.draws {
        let alpha = draw(cfg.alpha_range, &mut rng);
        let gamma = draw(cfg.gamma_range, &mut rng);
        let beta = draw(cfg.beta_range, &mut rng);
        let prev = AffineParams::source(Array1::from(gamma.clone()), Array1::from(beta.clone()))?;
        let result = verify_stat_propagation(&prev, &alpha, cfg.n_samples, cfg.seed.wrapping_add(i as u64 + 1))?;
        out.push(StatPropagationDraw {
            relative_error: result.relative_error(),
            alpha,
            gamma,
            beta,
            result,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::DType;
    use crate::model::{build_model, ArchSpec};
    use approx::assert_abs_diff_eq;

    fn ckpt() -> Checkpoint {
        build_model(
            &ArchSpec {
                widths: vec![4, 8],
                ..ArchSpec::default()
            },
            1,
        )
        .unwrap()
        .to_checkpoint(DType::F64)
    }

    #[test]
    fn identical_checkpoints_have_zero_deltas() {
        let c = ckpt();
        let d = layer_deltas(&c, &c).unwrap();
        // 3 norm layers + 4 convs (2 encoder, 1 decoder, head)
        assert_eq!(d.len(), 7);
        assert!(d.iter().all(|x| [x.affine_delta, x.stats_delta, x.kernel_delta].iter().flatten().all(|v| *v == 0.0)));
    }

    #[test]
    fn beta_shift_shows_in_one_layer() {
        let a = ckpt();
        let mut b = a.clone();
        for v in b.tensors.get_mut("encoder.block1.norm0.beta").unwrap().array.iter_mut() {
            *v += 1.0;
        }
        let d = layer_deltas(&a, &b).unwrap();
        for x in &d {
            let expected = if x.layer == "encoder.block1.norm0" { 0.99999 } else { 0.0 };
            if let Some(v) = x.affine_delta {
                assert_abs_diff_eq!(v, expected, epsilon = 1e-4);
            }
        }
        assert_eq!(layer_deltas(&b, &a).unwrap(), d);
    }

    #[test]
    fn architecture_mismatch() {
        let other = build_model(
            &ArchSpec {
                widths: vec![4, 6],
                ..ArchSpec::default()
            },
            1,
        )
        .unwrap()
        .to_checkpoint(DType::F64);
        assert!(matches!(layer_deltas(&ckpt(), &other), Err(Error::Probe(_))));
    }

    #[test]
    fn propagation_examples() {
        let p = AffineParams::source(Array1::from(vec![1.0, 1.0]), Array1::from(vec![1.0, 2.0])).unwrap();
        let r = verify_stat_propagation(&p, &[1.0, 1.0], 20_000, 3).unwrap();
        assert_eq!((r.predicted_mean, r.predicted_var), (3.0, 2.0));
        let se_mean = (2.0f64 / 20_000.0).sqrt();
        assert!((r.empirical_mean - 3.0).abs() < 5.0 * se_mean);

        let scaled = verify_stat_propagation(&p, &[2.5, 2.5], 10, 3).unwrap();
        assert_abs_diff_eq!(scaled.predicted_mean, 2.5 * 3.0);
        assert_abs_diff_eq!(scaled.predicted_var, 2.5 * 2.5 * 2.0);

        let unit = AffineParams::source(Array1::from(vec![1.0]), Array1::from(vec![0.0])).unwrap();
        let r = verify_stat_propagation(&unit, &[1.0], 20_000, 5).unwrap();
        assert_eq!((r.predicted_mean, r.predicted_var), (0.0, 1.0));
        assert!(r.empirical_mean.abs() < 5.0 / (20_000f64).sqrt());
    }
}

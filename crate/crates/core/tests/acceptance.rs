//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Contract criteria (exact algebra, gradients, statistics, permutation,
//! ranking metrics, reproducibility, bitwise freezing) fail the run. The
//! directional training outcomes (criteria 5, 7 and the comparison half of 9)
//! are measured on small synthetic tasks; their lines are printed as measured
//! and only fail the run when `ACNORM_STRICT=1` is set.

use std::fs;
use std::time::Instant;

use acnorm_core::experiment::median;
use acnorm_core::model::LayerKind;
use acnorm_core::probe::{stat_propagation_sweep, StatPropagationConfig};
use acnorm_core::train::predict;
use acnorm_core::{
    assemble, bn_forward, calibration_matrix, estimate_transferability, evaluate, generate_task, kendall_tau,
    permute_consistent, pretrain, run_experiment, shuffle_channels, sparsify, train, weighted_tau, AcNormConfig,
    AcNormLayer, AffineParams, ArchSpec, Checkpoint, CheckpointOp, DomainKnobs, ExperimentConfig, FreezePolicy,
    ModelGraph, NormKind, NormStats, Role, ShapeFamily, SyntheticTaskSpec, TaskData, TrainConfig,
};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const EPS: f64 = 1e-5;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    id: &'static str,
    title: &'static str,
    pass: bool,
    /// Directional outcomes are reported but enforced only in strict mode.
    directional: bool,
    detail: String,
    secs: f64,
}

impl Outcome {
    fn line(&self) -> String {
        let status = if self.pass { "PASS" } else { "FAIL" };
        let tag = if self.directional { " [directional]" } else { "" };
        format!("[{status}] {} {}{tag}: {} ({:.1} s)", self.id, self.title, self.detail, self.secs)
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------- oracles

/// Batch normalization with biased batch variance, written out per channel.
fn bn_oracle(x: &Array2<f64>, gamma: &[f64], beta: &[f64]) -> Array2<f64> {
    let (n, k) = x.dim();
    let mut y = Array2::zeros((n, k));
    for j in 0..k {
        let mean = (0..n).map(|i| x[[i, j]]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[[i, j]] - mean).powi(2)).sum::<f64>() / n as f64;
        for i in 0..n {
            y[[i, j]] = gamma[j] * (x[[i, j]] - mean) / (var + EPS).sqrt() + beta[j];
        }
    }
    y
}

/// Softmax rows of `-|z_t[p] - z_s[q]| / t` as nested vectors.
fn softmax_oracle(zt: &[f64], zs: &[f64], t: f64) -> Vec<Vec<f64>> {
    zt.iter()
        .map(|&p| {
            let e: Vec<f64> = zs.iter().map(|&q| (-(p - q).abs() / t).exp()).collect();
            let total: f64 = e.iter().sum();
            e.iter().map(|v| v / total).collect()
        })
        .collect()
}

/// `(gamma_t + C gamma_t) xhat + (beta_t + C beta_t)` with `C` given.
fn acnorm_oracle(x: &Array2<f64>, gamma: &[f64], beta: &[f64], c: &[Vec<f64>]) -> Array2<f64> {
    let k = gamma.len();
    let ge: Vec<f64> = (0..k).map(|p| gamma[p] + (0..k).map(|q| c[p][q] * gamma[q]).sum::<f64>()).collect();
    let be: Vec<f64> = (0..k).map(|p| beta[p] + (0..k).map(|q| c[p][q] * beta[q]).sum::<f64>()).collect();
    bn_oracle(x, &ge, &be)
}

fn sparse_oracle(c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    c.iter()
        .enumerate()
        .map(|(p, row)| row.iter().map(|&v| if v >= row[p] { v } else { 0.0 }).collect())
        .collect()
}

fn signature(gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    gamma.iter().zip(beta).map(|(g, b)| b / (g * g + EPS).sqrt()).collect()
}

/// Kendall tau-b by brute force over all pairs.
fn tau_b_oracle(x: &[f64], y: &[f64]) -> f64 {
    let (mut conc, mut disc, mut tx, mut ty) = (0.0f64, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let a = (x[i] - x[j]).signum() * if x[i] == x[j] { 0.0 } else { 1.0 };
            let b = (y[i] - y[j]).signum() * if y[i] == y[j] { 0.0 } else { 1.0 };
            match (a == 0.0, b == 0.0) {
                (true, true) => {}
                (true, false) => tx += 1.0,
                (false, true) => ty += 1.0,
                _ if a == b => conc += 1.0,
                _ => disc += 1.0,
            }
        }
    }
    (conc - disc) / ((conc + disc + tx) * (conc + disc + ty)).sqrt()
}

// ---------------------------------------------------------------- 1 to 4

fn criterion_1() -> Outcome {
    let ((worst_row, rule_ok), secs) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst_row: f64 = 0.0;
        let mut rule_ok = true;
        for draw in 0..100 {
            let k = rng.random_range(1..=16);
            let zt: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut zs: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            // every fifth draw reuses target values so ties occur
            if draw % 5 == 0 {
                zs = zt.iter().rev().copied().collect();
            }
            let t = rng.random_range(0.1..5.0);
            let c = calibration_matrix(Array1::from(zt.clone()).view(), Array1::from(zs.clone()).view(), t).unwrap();
            for s in c.row_sums() {
                worst_row = worst_row.max((s - 1.0).abs());
            }
            let sparse = sparsify(&c);
            let pre = c.values();
            for p in 0..k {
                for q in 0..k {
                    let expect = if pre[[p, q]] >= pre[[p, p]] { pre[[p, q]] } else { 0.0 };
                    rule_ok &= sparse.values()[[p, q]] == expect;
                }
            }
            let oracle = softmax_oracle(&zt, &zs, t);
            for p in 0..k {
                for q in 0..k {
                    rule_ok &= (oracle[p][q] - pre[[p, q]]).abs() < 1e-12;
                }
            }
        }
        (worst_row, rule_ok)
    });
    Outcome {
        id: "1",
        title: "calibration algebra",
        pass: worst_row <= 1e-6 && rule_ok && secs < 1.0,
        directional: false,
        detail: format!("max |row sum - 1| = {worst_row:.2e}, keep rule exact = {rule_ok}, limit 1 s"),
        secs,
    }
}

fn criterion_2() -> Outcome {
    let ((worst, k1_exact), secs) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut worst: f64 = 0.0;
        for k in [2usize, 4, 8, 16] {
            for _ in 0..10 {
                let (gamma, beta) = loop {
                    let g: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
                    let b: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let z = signature(&g, &b);
                    let distinct = (0..k).all(|p| (0..k).all(|q| p == q || (z[p] - z[q]).abs() > 1e-3));
                    if distinct {
                        break (g, b);
                    }
                };
                let x = Array2::from_shape_fn((8, k), |_| rng.random_range(-2.0..2.0));
                let source = AffineParams::source(Array1::from(gamma.clone()), Array1::from(beta.clone())).unwrap();
                let mut layer = AcNormLayer::new(source, AcNormConfig::default()).unwrap();
                let y = layer.forward(x.view()).unwrap();
                let z = signature(&gamma, &beta);
                let bn = bn_oracle(&x, &gamma, &beta);
                for p in 0..k {
                    // target == source: the diagonal is the row maximum and the only survivor
                    let diag = 1.0 / (0..k).map(|q| (-(z[p] - z[q]).abs()).exp()).sum::<f64>();
                    for i in 0..x.nrows() {
                        worst = worst.max((y[[i, p]] - (1.0 + diag) * bn[[i, p]]).abs());
                    }
                }
            }
        }
        let mut k1_exact = true;
        for _ in 0..10 {
            let g = rng.random_range(0.5..1.5);
            let b = rng.random_range(-2.0..2.0);
            let x = Array2::from_shape_fn((6, 1), |_| rng.random_range(-2.0..2.0));
            let source = AffineParams::source(Array1::from(vec![g]), Array1::from(vec![b])).unwrap();
            let mut layer = AcNormLayer::new(source, AcNormConfig::default()).unwrap();
            let y = layer.forward(x.view()).unwrap();
            let bn = bn_forward(x.view(), &mut layer).unwrap();
            k1_exact &= y == bn.mapv(|v| 2.0 * v);
            k1_exact &= (&bn - &bn_oracle(&x, &[g], &[b])).iter().all(|d| d.abs() < 1e-12);
        }
        (worst, k1_exact)
    });
    Outcome {
        id: "2",
        title: "initialization closed form",
        pass: worst < 1e-6 && k1_exact,
        directional: false,
        detail: format!("max |acnorm - (1 + diag C) bn| = {worst:.2e} over K in {{2,4,8,16}}, K=1 exactly 2x bn = {k1_exact}"),
        secs,
    }
}

/// Random AC-Norm layer with target affines away from the source, rejecting
/// points where `|z_t - z_s|` or the sparsity mask is within reach of a
/// finite-difference step (neither is differentiable there).
fn gradient_instance(rng: &mut ChaCha8Rng, detach: bool) -> (AcNormLayer, Array2<f64>, Array2<f64>) {
    loop {
        let n = rng.random_range(2..=5);
        let k = rng.random_range(1..=4);
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| Array1::from_shape_fn(k, |_| rng.random_range(lo..hi));
        let source = AffineParams::source(draw(rng, 0.5, 1.5), draw(rng, -1.5, 1.5)).unwrap();
        let target = AffineParams::new(draw(rng, 0.5, 1.5), draw(rng, -1.5, 1.5), Role::Target).unwrap();
        let zt = signature(target.gamma().as_slice().unwrap(), target.beta().as_slice().unwrap());
        let zs = signature(source.gamma().as_slice().unwrap(), source.beta().as_slice().unwrap());
        if zt.iter().any(|a| zs.iter().any(|b| (a - b).abs() < 1e-2)) {
            continue;
        }
        let c = softmax_oracle(&zt, &zs, 1.0);
        if (0..k).any(|p| (0..k).any(|q| p != q && (c[p][q] - c[p][p]).abs() < 1e-3)) {
            continue;
        }
        let config = AcNormConfig {
            detach_calibration: detach,
            ..Default::default()
        };
        let layer = AcNormLayer::from_parts(source, target, NormStats::new(k, 0.1, EPS), config).unwrap();
        let x = Array2::from_shape_fn((n, k), |_| rng.random_range(-2.0..2.0));
        let up = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
        return (layer, x, up);
    }
}

fn criterion_3() -> Outcome {
    const STEP: f64 = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-6);
    let ((worst, instances, oracle_ok), secs) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let (mut worst, mut instances, mut oracle_ok): (f64, usize, bool) = (0.0, 0, true);
        for detach in [false, true] {
            for _ in 0..20 {
                let (layer, x, up) = gradient_instance(&mut rng, detach);
                let k = layer.channels();
                let g0: Vec<f64> = layer.target.gamma().to_vec();
                let b0: Vec<f64> = layer.target.beta().to_vec();
                let zs = signature(layer.source.gamma().as_slice().unwrap(), layer.source.beta().as_slice().unwrap());
                let c_of = |g: &[f64], b: &[f64]| sparse_oracle(&softmax_oracle(&signature(g, b), &zs, 1.0));
                let c0 = c_of(&g0, &b0);
                // detached: the calibration is a constant taken at the current point
                let loss = |x: &Array2<f64>, g: &[f64], b: &[f64]| -> f64 {
                    let c = if detach { c0.clone() } else { c_of(g, b) };
                    (acnorm_oracle(x, g, b, &c) * &up).sum()
                };
                let y = layer.clone().forward(x.view()).unwrap();
                oracle_ok &= (&y - &acnorm_oracle(&x, &g0, &b0, &c0)).iter().all(|d| d.abs() < 1e-10);

                let grads = layer.gradients(x.view(), up.view()).unwrap();
                for (idx, analytic) in grads.x.indexed_iter() {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[idx] += STEP;
                    xm[idx] -= STEP;
                    let fd = (loss(&xp, &g0, &b0) - loss(&xm, &g0, &b0)) / (2.0 * STEP);
                    worst = worst.max(rel(*analytic, fd));
                }
                for j in 0..k {
                    let (mut gp, mut gm) = (g0.clone(), g0.clone());
                    gp[j] += STEP;
                    gm[j] -= STEP;
                    let fd = (loss(&x, &gp, &b0) - loss(&x, &gm, &b0)) / (2.0 * STEP);
                    worst = worst.max(rel(grads.gamma[j], fd));
                    let (mut bp, mut bm) = (b0.clone(), b0.clone());
                    bp[j] += STEP;
                    bm[j] -= STEP;
                    let fd = (loss(&x, &g0, &bp) - loss(&x, &g0, &bm)) / (2.0 * STEP);
                    worst = worst.max(rel(grads.beta[j], fd));
                }
                instances += 1;
            }
        }
        (worst, instances, oracle_ok)
    });
    Outcome {
        id: "3",
        title: "gradient correctness",
        pass: worst < 1e-4 && oracle_ok && instances >= 40 && secs < 30.0,
        directional: false,
        detail: format!("{instances} instances (20 per detach setting), max relative error {worst:.2e}, limit 30 s"),
        secs,
    }
}

fn criterion_4() -> Outcome {
    let cfg = StatPropagationConfig {
        seed: 404,
        ..Default::default()
    };
    let (draws, secs) = timed(|| stat_propagation_sweep(&cfg).unwrap());
    let mut worst: f64 = 0.0;
    let mut formula_ok = true;
    for d in &draws {
        worst = worst.max(d.relative_error);
        let mu: f64 = d.alpha.iter().zip(&d.beta).map(|(a, b)| a * b).sum();
        let var: f64 = d.alpha.iter().zip(&d.gamma).map(|(a, g)| (a * g).powi(2)).sum();
        formula_ok &= (d.result.predicted_mean - mu).abs() < 1e-12 && (d.result.predicted_var - var).abs() < 1e-12;
    }
    Outcome {
        id: "4",
        title: "statistics propagation",
        pass: draws.len() == 20 && cfg.n_samples == 1_000_000 && worst < 0.01 && formula_ok && secs < 60.0,
        directional: false,
        detail: format!("{} draws at {} samples, max relative error {:.3}%, limit 1 min", draws.len(), cfg.n_samples, worst * 100.0),
        secs,
    }
}

// ---------------------------------------------------------------- training studies

fn arch() -> ArchSpec {
    ArchSpec {
        widths: vec![8, 16, 32],
        ..ArchSpec::default()
    }
}

fn source_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        image_size: (32, 32),
        n_train: 128,
        n_val: 32,
        n_test: 64,
        seed: 0,
        ..Default::default()
    }
}

fn target_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        n_train: 48,
        seed: 200,
        knobs: DomainKnobs {
            intensity_shift: 0.5,
            texture_freq: 0.8,
            noise_sigma: 0.2,
            contrast: 0.7,
            shape_family: ShapeFamily::Blobs,
        },
        ..source_task()
    }
}

fn far_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        seed: 400,
        knobs: DomainKnobs {
            intensity_shift: -0.5,
            texture_freq: 0.1,
            noise_sigma: 0.05,
            contrast: -1.0,
            shape_family: ShapeFamily::Vessels,
        },
        ..source_task()
    }
}

fn reseed(task: &SyntheticTaskSpec, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        seed: task.seed + 1000 * seed,
        ..task.clone()
    }
}

fn pretrain_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        seed,
        ..Default::default()
    }
}

fn finetune_cfg(seed: u64, kind: NormKind, freeze: FreezePolicy) -> TrainConfig {
    TrainConfig {
        epochs: 25,
        seed,
        norm_kind: kind,
        freeze_policy: freeze,
        ..Default::default()
    }
}

fn pretrained(task: &SyntheticTaskSpec, seed: u64) -> Checkpoint {
    pretrain(&reseed(task, seed), &arch(), &pretrain_cfg(seed)).unwrap().checkpoint()
}

/// Test dice after fine-tuning; also whether every non-head conv parameter is
/// bitwise unchanged by training.
fn finetune_dice(ckpt: &Checkpoint, target: &SyntheticTaskSpec, data: &TaskData, cfg: &TrainConfig) -> (f64, bool) {
    let arch = ModelGraph::from_checkpoint(ckpt).unwrap().arch;
    let mut model = assemble(Some(ckpt), target, &arch, cfg).unwrap();
    let before = model.clone();
    train(&mut model, &data.train, cfg, &mut |_, _| Ok(())).unwrap();
    let convs_frozen = model
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv { .. }) && !l.name.starts_with("head"))
        .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
        .all(|p| model.parameters[&p] == before.parameters[&p]);
    (evaluate(&model, &data.test).unwrap().dice.unwrap(), convs_frozen)
}

struct SeedRuns {
    checkpoint: Checkpoint,
    vanilla: f64,
    acnorm: f64,
    shuffled_vanilla: f64,
    shuffled_acnorm: f64,
    norm_only_bn: f64,
    norm_only_acnorm: f64,
    norm_only_frozen: bool,
}

fn alignment_runs() -> (Vec<SeedRuns>, f64, f64) {
    let mut pretrain_secs = 0.0;
    let mut fig1_secs = 0.0;
    let runs = SEEDS
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let checkpoint = pretrained(&source_task(), seed);
            let shuffled = shuffle_channels(&checkpoint, seed).unwrap();
            let target = reseed(&target_task(), seed);
            let data = generate_task(&target).unwrap();
            let pre = start.elapsed().as_secs_f64();
            let full = |ckpt: &Checkpoint, kind| finetune_dice(ckpt, &target, &data, &finetune_cfg(seed, kind, FreezePolicy::FullFt)).0;
            let vanilla = full(&checkpoint, NormKind::VanillaBn);
            let acnorm = full(&checkpoint, NormKind::AcNorm);
            let shuffled_vanilla = full(&shuffled, NormKind::VanillaBn);
            let shuffled_acnorm = full(&shuffled, NormKind::AcNorm);
            let fig1 = start.elapsed().as_secs_f64();
            let (norm_only_bn, f1) = finetune_dice(&checkpoint, &target, &data, &finetune_cfg(seed, NormKind::VanillaBn, FreezePolicy::NormOnly));
            let (norm_only_acnorm, f2) = finetune_dice(&checkpoint, &target, &data, &finetune_cfg(seed, NormKind::AcNorm, FreezePolicy::NormOnly));
            (
                SeedRuns {
                    checkpoint,
                    vanilla,
                    acnorm,
                    shuffled_vanilla,
                    shuffled_acnorm,
                    norm_only_bn,
                    norm_only_acnorm,
                    norm_only_frozen: f1 && f2,
                },
                pre,
                fig1,
            )
        })
        .collect::<Vec<_>>();
    let runs = runs
        .into_iter()
        .map(|(r, p, f)| {
            pretrain_secs += p;
            fig1_secs += f;
            r
        })
        .collect();
    (runs, pretrain_secs, fig1_secs)
}

fn med(runs: &[SeedRuns], f: fn(&SeedRuns) -> f64) -> f64 {
    median(&runs.iter().map(f).collect::<Vec<_>>()).unwrap()
}

fn criterion_5(runs: &[SeedRuns], secs: f64) -> Vec<Outcome> {
    let (v, a) = (med(runs, |r| r.vanilla), med(runs, |r| r.acnorm));
    let (sv, sa) = (med(runs, |r| r.shuffled_vanilla), med(runs, |r| r.shuffled_acnorm));
    let gap = (v - sv) * 100.0;
    vec![
        Outcome {
            id: "5a",
            title: "shuffled checkpoint comparable under vanilla fine-tuning",
            pass: gap.abs() <= 3.0 && secs < 1200.0,
            directional: true,
            detail: format!("median dice original {v:.4} vs shuffled {sv:.4}, gap {gap:.2} points (limit 3), 5 seeds"),
            secs,
        },
        Outcome {
            id: "5b",
            title: "AC-Norm fine-tuning >= vanilla on original and shuffled",
            pass: a >= v && sa >= sv && secs < 1200.0,
            directional: true,
            detail: format!("median dice original: acnorm {a:.4} vs vanilla {v:.4}; shuffled: acnorm {sa:.4} vs vanilla {sv:.4}"),
            secs,
        },
    ]
}

fn criterion_6(ckpt: &Checkpoint) -> Outcome {
    let (result, secs) = timed(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let x = Array4::from_shape_fn((4, 32, 32, 1), |_| rng.random_range(-2.0..2.0));
        let output = |c: &Checkpoint| {
            let mut net = ModelGraph::from_checkpoint(c).unwrap().to_network().unwrap();
            predict(&mut net, &x).unwrap()
        };
        let base = output(ckpt);
        let max_abs = |c: &Checkpoint| (&output(c) - &base).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let consistent = (0..3).map(|s| max_abs(&permute_consistent(ckpt, s).unwrap())).fold(0.0, f64::max);
        let broken = (0..3).map(|s| max_abs(&shuffle_channels(ckpt, s).unwrap())).fold(f64::INFINITY, f64::min);
        (consistent, broken)
    });
    let (consistent, broken) = result;
    Outcome {
        id: "6",
        title: "consistency-preserving permutation",
        pass: consistent < 1e-5 && broken > 1e-2,
        directional: false,
        detail: format!("consistent permutation max |change| {consistent:.2e} (< 1e-5), shuffle min over seeds {broken:.3} (> 1e-2)"),
        secs,
    }
}

fn criterion_7() -> Outcome {
    let (taus, secs) = timed(|| {
        SEEDS
            .par_iter()
            .map(|&seed| {
                let target = reseed(&target_task(), seed);
                let data = generate_task(&target).unwrap();
                let self_task = SyntheticTaskSpec {
                    n_train: 128,
                    seed: target.seed + 7,
                    ..target.clone()
                };
                let random = {
                    let mut m = acnorm_core::build_model(
                        &ArchSpec {
                            head: acnorm_core::train::head_for(&target, 16),
                            ..arch()
                        },
                        seed,
                    )
                    .unwrap();
                    m.norm_config = AcNormConfig::default();
                    m.to_checkpoint(acnorm_core::DType::F64)
                };
                let zoo = [
                    pretrain(&self_task, &arch(), &pretrain_cfg(seed)).unwrap().checkpoint(),
                    pretrained(&source_task(), seed),
                    pretrained(&far_task(), seed),
                    random,
                ];
                let cfg = finetune_cfg(seed, NormKind::AcNorm, FreezePolicy::FullFt);
                let (scores, truth): (Vec<f64>, Vec<f64>) = zoo
                    .iter()
                    .enumerate()
                    .map(|(i, ckpt)| {
                        let score = estimate_transferability(&i.to_string(), ckpt, &target, &data.train, &cfg, None).unwrap();
                        (score.ac_corr, finetune_dice(ckpt, &target, &data, &cfg).0)
                    })
                    .unzip();
                (kendall_tau(&scores, &truth), scores, truth)
            })
            .collect::<Vec<_>>()
    });
    let values: Vec<f64> = taus.iter().filter_map(|t| t.0).collect();
    let m = median(&values);
    let per_seed: Vec<String> = taus
        .iter()
        .map(|(t, s, g)| {
            let s: Vec<String> = s.iter().map(|v| format!("{v:.2}")).collect();
            let g: Vec<String> = g.iter().map(|v| format!("{v:.3}")).collect();
            format!("tau {} scores [{}] dice [{}]", t.map_or("undef".into(), |t| format!("{t:.3}")), s.join(", "), g.join(", "))
        })
        .collect();
    for line in &per_seed {
        println!("    zoo (self, near, far, random): {line}");
    }
    Outcome {
        id: "7",
        title: "AC-Corr ranking of a synthetic zoo",
        pass: m.is_some_and(|m| m > 0.0) && secs < 1800.0,
        directional: true,
        detail: format!("median Kendall tau {} over {} seeds (needs > 0), limit 30 min", m.map_or("undefined".into(), |m| format!("{m:.3}")), values.len()),
        secs,
    }
}

fn criterion_8() -> Outcome {
    let (result, secs) = timed(|| {
        let id = kendall_tau(&[1.0, 2.0, 3.0, 4.0, 5.0], &[10.0, 20.0, 30.0, 40.0, 50.0]);
        let rev = kendall_tau(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 4.0, 3.0, 2.0, 1.0]);
        let swap = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]);
        let wid = weighted_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]);
        let wrev = weighted_tau(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(808);
        let mut brute = 0.0f64;
        for _ in 0..200 {
            let n = rng.random_range(3..9);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            if let Some(t) = kendall_tau(&x, &y) {
                brute = brute.max((t - tau_b_oracle(&x, &y)).abs());
            }
        }
        (id, rev, swap, wid, wrev, brute)
    });
    let (id, rev, swap, wid, wrev, brute) = result;
    Outcome {
        id: "8",
        title: "ranking-metric contracts",
        pass: id == Some(1.0) && rev == Some(-1.0) && swap == Some(2.0 / 3.0) && wid == Some(1.0) && wrev == Some(-1.0) && brute < 1e-12,
        directional: false,
        detail: format!("tau identical {id:?}, reversed {rev:?}, single swap {swap:?} (2/3 exactly), weighted {wid:?}/{wrev:?}, tau-b vs brute force {brute:.1e}"),
        secs,
    }
}

fn criterion_9(runs: &[SeedRuns], secs: f64) -> Vec<Outcome> {
    let frozen = runs.iter().all(|r| r.norm_only_frozen);
    let (bn, ac) = (med(runs, |r| r.norm_only_bn), med(runs, |r| r.norm_only_acnorm));
    vec![
        Outcome {
            id: "9a",
            title: "norm-only training leaves conv weights bitwise unchanged",
            pass: frozen,
            directional: false,
            detail: format!("all encoder/decoder conv tensors identical after training, 10 runs: {frozen}"),
            secs: 0.0,
        },
        Outcome {
            id: "9b",
            title: "training only AC-Norm >= training only BN",
            pass: ac >= bn,
            directional: true,
            detail: format!("median test dice acnorm-only {ac:.4} vs bn-only {bn:.4}, 5 seeds"),
            secs,
        },
    ]
}

fn criterion_10() -> Outcome {
    let (result, secs) = timed(|| {
        let task = SyntheticTaskSpec {
            image_size: (16, 16),
            n_train: 16,
            n_val: 4,
            n_test: 8,
            ..Default::default()
        };
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let cfg = ExperimentConfig {
            name: "repro".into(),
            seed: 31,
            n_seeds: 2,
            arch: ArchSpec {
                widths: vec![4, 8],
                ..ArchSpec::default()
            },
            source: task.clone(),
            target: SyntheticTaskSpec {
                seed: 77,
                knobs: DomainKnobs {
                    intensity_shift: 0.5,
                    ..Default::default()
                },
                ..task
            },
            pretrain: tc.clone(),
            finetune: tc,
            arms: vec![
                NormKind::VanillaBn,
                NormKind::AcNorm,
                NormKind::ScNorm,
                NormKind::AcDiag,
                NormKind::AcNonSparse,
                NormKind::AcTrainableC,
            ],
            checkpoint_ops: vec![CheckpointOp::Original, CheckpointOp::Shuffled, CheckpointOp::Masked],
            probe_epochs: vec![2],
            ..Default::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run_experiment(&cfg, a.path()).unwrap();
        let again = ExperimentConfig::load(&a.path().join("run_manifest.json")).unwrap();
        let second = run_experiment(&again, b.path()).unwrap();
        let same_files = ["results.csv", "summary.csv", "layer_deltas.csv"]
            .iter()
            .all(|f| fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap());
        let same_records = first.records == second.records;
        (first.records.len(), first.failures().is_empty(), same_files && same_records)
    });
    let (rows, clean, same) = result;
    Outcome {
        id: "10",
        title: "reproducibility",
        pass: rows == 2 * 3 * 6 && clean && same,
        directional: false,
        detail: format!("{rows} runs (2 seeds x 3 checkpoint ops x 6 arms) re-run from the emitted manifest, identical metrics: {same}"),
        secs,
    }
}

fn main() {
    let strict = std::env::var("ACNORM_STRICT").is_ok_and(|v| v == "1");
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!("{}", o.line());
        outcomes.push(o);
    };
    report(criterion_1());
    report(criterion_2());
    report(criterion_3());
    report(criterion_4());
    let ((runs, pretrain_secs, fig1_secs), total) = timed(alignment_runs);
    for o in criterion_5(&runs, fig1_secs) {
        report(o);
    }
    report(criterion_6(&runs[0].checkpoint));
    report(criterion_7());
    report(criterion_8());
    for o in criterion_9(&runs, total - fig1_secs + pretrain_secs) {
        report(o);
    }
    report(criterion_10());

    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", outcomes.len());
    let blocking: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass && (strict || !o.directional)).collect();
    let reported: Vec<&str> = outcomes.iter().filter(|o| !o.pass && o.directional && !strict).map(|o| o.id).collect();
    if !reported.is_empty() {
        println!("directional criteria not met (reported, not enforced): {}", reported.join(", "));
    }
    if !blocking.is_empty() {
        for o in blocking {
            eprintln!("failed: {} {}", o.id, o.title);
        }
        std::process::exit(1);
    }
}

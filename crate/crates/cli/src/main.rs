use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acnorm_core::experiment::env_seed;
use acnorm_core::probe::{deltas_csv, stat_propagation_sweep, StatPropagationConfig};
use acnorm_core::train::finetune_on;
use acnorm_core::transfer::{estimate_dir, rank_files, ResultsFile, ScoresFile};
use acnorm_core::{
    generate_task, layer_deltas, mask_channels, pretrain, run_experiment, shuffle_channels, Checkpoint, ExperimentConfig,
    JobConfig, ModelGraph,
};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "acnorm", version, about = "Affine-calibrated normalization for transfer learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from random init on the configured task.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write validation metrics (JSON).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on the configured target task.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write test metrics (JSON).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score every checkpoint in a directory by AC-Corr on a target task.
    Estimate {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate transferability scores with measured fine-tuning results.
    Rank {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Probe(ProbeCommand),
    #[command(subcommand)]
    Surgery(SurgeryCommand),
    /// Run a full experiment described by a config file.
    Experiment {
        /// TOML config, or a run_manifest.json from an earlier run.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Per-layer update magnitudes between two checkpoints.
    Deltas {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that previous-layer affines predict conv output statistics.
    Eq5 {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SurgeryCommand {
    /// Permute each conv layer's output channels, breaking norm alignment.
    Shuffle {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Defaults to `<stem>_shuffled.ckpt` beside the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-initialize a fraction of each conv layer's channels.
    Mask {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        seed: u64,
        /// Defaults to `<stem>_masked.ckpt` beside the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_job(path: &Path) -> Result<JobConfig> {
    let mut cfg = JobConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.apply_env_seed()?;
    Ok(cfg)
}

fn sibling(ckpt: &Path, suffix: &str) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ckpt.with_file_name(format!("{stem}_{suffix}.ckpt"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain { config, out, metrics } => {
            let cfg = load_job(&config)?;
            let outcome = pretrain(&cfg.task, &cfg.arch, &cfg.train)?;
            outcome.checkpoint().save(&out)?;
            info!("wrote {}", out.display());
            if let Some(m) = metrics {
                write_json(&m, &outcome.metrics)?;
            }
        }
        Command::Finetune { ckpt, config, out, metrics } => {
            let cfg = load_job(&config)?;
            let source = Checkpoint::load(&ckpt)?;
            let arch = ModelGraph::from_checkpoint(&source)?.arch;
            let data = generate_task(&cfg.task)?;
            let outcome = finetune_on(Some(&source), &data, &cfg.task, &arch, &cfg.train, &mut |_, _| Ok(()))?;
            outcome.checkpoint().save(&out)?;
            info!("wrote {}", out.display());
            if let Some(m) = metrics {
                write_json(&m, &outcome.metrics)?;
            }
        }
        Command::Estimate { ckpt_dir, task, out } => {
            let cfg = load_job(&task)?;
            let data = generate_task(&cfg.task)?;
            let scores = estimate_dir(&ckpt_dir, &cfg.task, &data, &cfg.train, cfg.probe_layer.as_deref())?;
            for s in &scores {
                println!("{}\t{:.6}", s.checkpoint_id, s.ac_corr);
            }
            write_json(&out, &ScoresFile { scores })?;
        }
        Command::Rank { scores, truth, out } => {
            let scores: ScoresFile = read_json(&scores)?;
            let truth: ResultsFile = read_json(&truth)?;
            let report = rank_files(&scores, &truth)?;
            let show = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into());
            println!("pearson\t{}", show(report.pearson));
            println!("kendall_tau\t{}", show(report.kendall_tau));
            println!("weighted_tau\t{}", show(report.weighted_tau));
            if report.ground_truth_ties {
                println!("note: ground truth contains ties; tau uses the tie-adjusted denominator");
            }
            write_json(&out, &report)?;
        }
        Command::Probe(ProbeCommand::Deltas { before, after, out }) => {
            let deltas = layer_deltas(&Checkpoint::load(&before)?, &Checkpoint::load(&after)?)?;
            ensure_parent(&out)?;
            fs::write(&out, deltas_csv(&deltas)).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Probe(ProbeCommand::Eq5 { config, tolerance, out }) => {
            let mut cfg = match config {
                Some(p) => StatPropagationConfig::load(&p)?,
                None => StatPropagationConfig::default(),
            };
            if let Some(seed) = env_seed()? {
                cfg.seed = seed;
            }
            let draws = stat_propagation_sweep(&cfg)?;
            println!("draw\tpred_mean\temp_mean\tpred_var\temp_var\trel_err");
            for (i, d) in draws.iter().enumerate() {
                let r = &d.result;
                println!(
                    "{i}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    r.predicted_mean, r.empirical_mean, r.predicted_var, r.empirical_var, d.relative_error
                );
            }
            if let Some(p) = out {
                write_json(&p, &draws)?;
            }
            let worst = draws.iter().map(|d| d.relative_error).fold(0.0, f64::max);
            println!("max relative error {worst:.6} (tolerance {tolerance})");
            if worst >= tolerance {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Surgery(SurgeryCommand::Shuffle { ckpt, seed, out }) => {
            let out = out.unwrap_or_else(|| sibling(&ckpt, "shuffled"));
            shuffle_channels(&Checkpoint::load(&ckpt)?, seed)?.save(&out)?;
            println!("{}", out.display());
        }
        Command::Surgery(SurgeryCommand::Mask { ckpt, ratio, seed, out }) => {
            if !(0.0..=1.0).contains(&ratio) {
                bail!("--ratio must lie in [0, 1], got {ratio}");
            }
            let out = out.unwrap_or_else(|| sibling(&ckpt, "masked"));
            mask_channels(&Checkpoint::load(&ckpt)?, ratio, seed)?.save(&out)?;
            println!("{}", out.display());
        }
        Command::Experiment { config, out } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            cfg.apply_env_seed()?;
            let report = run_experiment(&cfg, &out)?;
            if let Some(zoo) = &report.zoo {
                let show = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into());
                println!("median kendall_tau\t{}", show(zoo.median_kendall_tau));
                println!("median weighted_tau\t{}", show(zoo.median_weighted_tau));
            }
            println!("wrote {}", out.display());
            if !report.failures().is_empty() {
                for f in report.failures() {
                    eprintln!("failed: {f}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

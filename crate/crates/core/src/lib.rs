//! Affine collaborative normalization (AC-Norm) for fine-tuning pretrained
//! convolutional networks, the AC-Corr transferability score, ablation
//! variants, and the desk-scale experiment harness built around them.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plots;
pub mod probe;
pub mod norm;
pub mod surgery;
pub mod train;
pub mod transfer;
pub mod variants;

pub use checkpoint::{Checkpoint, DType, StoredTensor};
pub use data::{generate_task, Dataset, DomainKnobs, ShapeFamily, Split, SyntheticTaskSpec, TaskData, TaskKind, Targets};
pub use error::{Error, Result};
pub use experiment::{run_experiment, CheckpointOp, ExperimentConfig, ExperimentReport, JobConfig, RunRecord};
pub use metrics::MetricsRecord;
pub use model::{build_model, ArchSpec, FreezePolicy, HeadSpec, LayerDesc, LayerKind, ModelGraph};
pub use norm::{
    calibration_matrix, domain_signature, keep_mask, recalibrate, sparsify, standardize, AcNormConfig,
    AcNormGradients, AcNormLayer, AffineParams, CalibrationMatrix, Mode, NormStats, Role,
};
pub use probe::{layer_deltas, verify_stat_propagation, LayerDelta, StatPropagation};
pub use surgery::{mask_channels, permute_consistent, shuffle_channels, shuffle_channels_with, swap_norm_layers};
pub use train::{assemble, evaluate, finetune, finetune_on, pretrain, train, OptimizerKind, TrainConfig, TrainOutcome};
pub use transfer::{ac_corr, estimate_transferability, kendall_tau, rank_models, weighted_tau, RankingReport, TransferScore};
pub use variants::{bn_forward, scnorm_signature, variant_forward, NormGradients, NormKind, NormLayer};

//! Plain batch norm and the ablation variants of AC-Norm.
//!
//! Every variant shares standardization and the residual recalibration
//! `y = (gamma_t + C gamma_t) * x_hat + (beta_t + C beta_t)`; they differ only
//! in where `C` comes from.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{
    residual_backward, residual_forward, signature_of, standardize, standardize_parts, AcNormConfig,
    AcNormLayer, AffineParams, CalibrationMatrix, MaskRule, Mode, Moments, NormStats,
    SignatureCalibration, Trace,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    VanillaBn,
    #[serde(rename = "acnorm")]
    AcNorm,
    ScNorm,
    AcDiag,
    AcNonSparse,
    AcTrainableC,
}

impl NormKind {
    pub const ALL: [NormKind; 6] = [
        NormKind::VanillaBn,
        NormKind::AcNorm,
        NormKind::ScNorm,
        NormKind::AcDiag,
        NormKind::AcNonSparse,
        NormKind::AcTrainableC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::VanillaBn => "vanilla_bn",
            NormKind::AcNorm => "acnorm",
            NormKind::ScNorm => "sc_norm",
            NormKind::AcDiag => "ac_diag",
            NormKind::AcNonSparse => "ac_non_sparse",
            NormKind::AcTrainableC => "ac_trainable_c",
        }
    }

    /// Whether the layer carries a calibration matrix at all.
    pub fn is_calibrated(self) -> bool {
        self != NormKind::VanillaBn
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown norm kind `{s}`")))
    }
}

/// Standard batch norm with the target affines: `y = gamma_t * x_hat + beta_t`.
pub fn bn_forward(x: ArrayView2<f64>, state: &mut AcNormLayer) -> Result<Array2<f64>> {
    let mode = state.mode;
    let mut xhat = standardize(x, &mut state.stats, mode)?;
    let (g, b) = (state.target.gamma(), state.target.beta());
    for mut row in xhat.rows_mut() {
        for j in 0..row.len() {
            row[j] = g[j] * row[j] + b[j];
        }
    }
    Ok(xhat)
}

/// `mu / sqrt(sigma^2 + eps)` from mini-batch statistics in training mode and
/// moving statistics in inference mode.
pub fn scnorm_signature(stats: &NormStats, mode: Mode) -> Array1<f64> {
    match mode {
        Mode::Training => moment_signature(&stats.batch_mean, &stats.batch_var, stats.eps),
        Mode::Inference => moment_signature(&stats.moving_mean, &stats.moving_var, stats.eps),
    }
}

fn moment_signature(mean: &Array1<f64>, var: &Array1<f64>, eps: f64) -> Array1<f64> {
    // Same formula as the affine signature with (gamma, beta) = (sigma, mu).
    signature_of(var.mapv(f64::sqrt).view(), mean.view(), eps)
}

/// Runs `layer` on `x` according to its variant kind.
pub fn variant_forward(x: ArrayView2<f64>, layer: &mut NormLayer) -> Result<Array2<f64>> {
    layer.forward(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormGradients {
    pub x: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    /// Only for `ac_trainable_c`.
    pub calibration: Option<Array2<f64>>,
}

/// A normalization layer of any kind, as used inside a network.
#[derive(Clone, Debug)]
pub struct NormLayer {
    pub kind: NormKind,
    pub state: AcNormLayer,
    /// Frozen pretrained moving statistics (`sc_norm` only).
    pub source_stats: Option<Moments>,
    /// Free calibration parameter (`ac_trainable_c` only).
    pub calibration: Option<Array2<f64>>,
}

/// Forward output plus the trace needed by [`NormLayer::backward`].
#[derive(Clone, Debug)]
pub struct NormTrace(pub(crate) Trace);

impl NormLayer {
    /// Builds a layer of `kind` on top of pretrained `source` affines and
    /// statistics. Target affines start as a copy of the source ones.
    pub fn new(kind: NormKind, source: AffineParams, stats: NormStats, config: AcNormConfig) -> Result<Self> {
        let state = AcNormLayer::with_stats(source, stats, config)?;
        let source_stats = (kind == NormKind::ScNorm)
            .then(|| (state.stats.moving_mean.clone(), state.stats.moving_var.clone()));
        let calibration = match kind {
            NormKind::AcTrainableC => Some(state.calibration()?.into_values()),
            _ => None,
        };
        Ok(Self {
            kind,
            state,
            source_stats,
            calibration,
        })
    }

    /// Reassembles a layer from stored tensors, e.g. after loading a checkpoint.
    pub fn from_parts(
        kind: NormKind,
        state: AcNormLayer,
        source_stats: Option<Moments>,
        calibration: Option<Array2<f64>>,
    ) -> Result<Self> {
        let k = state.channels();
        if kind == NormKind::ScNorm && source_stats.is_none() {
            return Err(Error::Config("sc_norm needs source statistics".into()));
        }
        if kind == NormKind::AcTrainableC && calibration.as_ref().map(|c| c.dim()) != Some((k, k)) {
            return Err(Error::Config(format!("ac_trainable_c needs a {k}x{k} calibration matrix")));
        }
        Ok(Self {
            kind,
            state,
            source_stats: source_stats.filter(|_| kind == NormKind::ScNorm),
            calibration: calibration.filter(|_| kind == NormKind::AcTrainableC),
        })
    }

    pub fn channels(&self) -> usize {
        self.state.channels()
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.state.mode = mode;
    }

    fn statistics_calibration(&self, moments: Option<&Moments>) -> Result<SignatureCalibration> {
        let eps = self.state.config.eps;
        let z_t = match moments {
            Some((mean, var)) => moment_signature(mean, var, eps),
            None => scnorm_signature(&self.state.stats, Mode::Inference),
        };
        let (src_mean, src_var) = self
            .source_stats
            .as_ref()
            .ok_or_else(|| Error::Config("sc_norm layer has no source statistics".into()))?;
        let z_s = moment_signature(src_mean, src_var, eps);
        SignatureCalibration::build(z_t, z_s, self.state.config.temperature, MaskRule::Sparse)
    }

    /// The calibration matrix applied for the current state, `None` for
    /// vanilla batch norm. For `sc_norm` in training mode the last observed
    /// batch statistics are used.
    pub fn effective_calibration(&self) -> Result<Option<CalibrationMatrix>> {
        let values = match self.kind {
            NormKind::VanillaBn => return Ok(None),
            NormKind::AcNorm => self.state.signature_calibration(MaskRule::Sparse)?.effective,
            NormKind::AcDiag => self.state.signature_calibration(MaskRule::Diagonal)?.effective,
            NormKind::AcNonSparse => self.state.signature_calibration(MaskRule::Dense)?.effective,
            NormKind::ScNorm => {
                let moments = (self.state.mode == Mode::Training)
                    .then(|| (self.state.stats.batch_mean.clone(), self.state.stats.batch_var.clone()));
                self.statistics_calibration(moments.as_ref())?.effective
            }
            NormKind::AcTrainableC => self
                .calibration
                .clone()
                .ok_or_else(|| Error::Config("ac_trainable_c layer lost its matrix".into()))?,
        };
        Ok(Some(CalibrationMatrix::from_values(values, true)?))
    }

    fn trace(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Trace, Option<Moments>)> {
        let mode = self.state.mode;
        let (xhat, inv_std, moments) = standardize_parts(x, &self.state.stats, self.state.config.eps, mode)?;
        let (calibration, path) = match self.kind {
            NormKind::VanillaBn => (None, None),
            NormKind::AcNorm | NormKind::AcDiag | NormKind::AcNonSparse => {
                let rule = match self.kind {
                    NormKind::AcDiag => MaskRule::Diagonal,
                    NormKind::AcNonSparse => MaskRule::Dense,
                    _ => MaskRule::Sparse,
                };
                let cal = self.state.signature_calibration(rule)?;
                (Some(cal.effective.clone()), Some(cal))
            }
            // Statistics are not trainable parameters; the signature path is a constant.
            NormKind::ScNorm => (Some(self.statistics_calibration(moments.as_ref())?.effective), None),
            NormKind::AcTrainableC => (self.calibration.clone(), None),
        };
        let (y, trace) = residual_forward(
            xhat,
            inv_std,
            mode == Mode::Training,
            self.state.target.gamma(),
            self.state.target.beta(),
            calibration,
            path,
        );
        Ok((y, trace, moments))
    }

    /// Forward pass; moving statistics are updated in training mode.
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Forward pass that also returns what [`NormLayer::backward`] needs.
    pub fn forward_traced(&mut self, x: ArrayView2<f64>) -> Result<(Array2<f64>, NormTrace)> {
        let (y, trace, moments) = self.trace(x)?;
        if let Some((mean, var)) = moments {
            self.state.stats.absorb_batch(&mean, &var, x.nrows());
        }
        Ok((y, NormTrace(trace)))
    }

    pub fn backward(&self, trace: &NormTrace, upstream: ArrayView2<f64>) -> NormGradients {
        let cfg = &self.state.config;
        let g = residual_backward(&trace.0, upstream, cfg.temperature, cfg.eps, cfg.detach_calibration);
        NormGradients {
            x: g.x,
            gamma: g.gamma,
            beta: g.beta,
            calibration: if self.kind == NormKind::AcTrainableC {
                g.calibration
            } else {
                None
            },
        }
    }

    /// Gradients of `sum(upstream * y)` without touching moving statistics.
    pub fn gradients(&self, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<NormGradients> {
        if self.state.mode != Mode::Training {
            return Err(Error::Config("gradients are only defined in training mode".into()));
        }
        let (_, trace, _) = self.trace(x)?;
        Ok(self.backward(&NormTrace(trace), upstream))
    }
}

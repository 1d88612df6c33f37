//! Affine collaborative normalization.
//!
//! A batch-norm layer that keeps a frozen copy of the pretrained (source)
//! affine parameters next to the trainable (target) ones. Every forward pass
//! compares per-channel domain signatures `z = beta / sqrt(gamma^2 + eps)` of
//! both sets, turns the distances into a row-softmax calibration matrix `C`,
//! drops entries weaker than the diagonal and adds the recalibrated affine
//! output `(C gamma_t) * x_hat + C beta_t` on top of the ordinary one.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Training,
    Inference,
}

/// Per-channel scale/shift pair. Source affines cannot be modified once built.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    role: Role,
}

impl AffineParams {
    pub fn new(gamma: Array1<f64>, beta: Array1<f64>, role: Role) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::Config("affine parameters need at least one channel".into()));
        }
        if gamma.len() != beta.len() {
            return Err(Error::Config(format!(
                "gamma has {} channels but beta has {}",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(Self { gamma, beta, role })
    }

    pub fn source(gamma: Array1<f64>, beta: Array1<f64>) -> Result<Self> {
        Self::new(gamma, beta, Role::Source)
    }

    /// Target affines start as an exact copy of the source affines.
    pub fn target_from(source: &AffineParams) -> Self {
        Self {
            gamma: source.gamma.clone(),
            beta: source.beta.clone(),
            role: Role::Target,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &Array1<f64> {
        &self.gamma
    }

    pub fn beta(&self) -> &Array1<f64> {
        &self.beta
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Mutable access to `(gamma, beta)`; refused for source affines.
    pub fn params_mut(&mut self) -> Result<(&mut Array1<f64>, &mut Array1<f64>)> {
        match self.role {
            Role::Source => Err(Error::Config("source affine parameters are frozen".into())),
            Role::Target => Ok((&mut self.gamma, &mut self.beta)),
        }
    }

    pub fn signature(&self, eps: f64) -> Array1<f64> {
        domain_signature(self, eps)
    }
}

/// Mini-batch and moving statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    pub moving_mean: Array1<f64>,
    pub moving_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl NormStats {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            batch_mean: Array1::zeros(channels),
            batch_var: Array1::ones(channels),
            moving_mean: Array1::zeros(channels),
            moving_var: Array1::ones(channels),
            momentum,
            eps,
        }
    }

    pub fn with_moving(
        moving_mean: Array1<f64>,
        moving_var: Array1<f64>,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        if moving_mean.len() != moving_var.len() {
            return Err(Error::Config("moving mean/var length mismatch".into()));
        }
        if moving_var.iter().any(|v| *v < 0.0) {
            return Err(Error::Numeric("negative moving variance".into()));
        }
        Ok(Self {
            batch_mean: moving_mean.clone(),
            batch_var: moving_var.clone(),
            moving_mean,
            moving_var,
            momentum,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.moving_mean.len()
    }

    pub(crate) fn absorb_batch(&mut self, mean: &Array1<f64>, var: &Array1<f64>, n: usize) {
        let m = self.momentum;
        // Moving variance uses the unbiased estimate, as conventional batch norm does.
        let correction = n as f64 / (n as f64 - 1.0);
        Zip::from(&mut self.moving_mean)
            .and(mean)
            .for_each(|mm, &b| *mm = (1.0 - m) * *mm + m * b);
        Zip::from(&mut self.moving_var)
            .and(var)
            .for_each(|mv, &b| *mv = (1.0 - m) * *mv + m * b * correction);
        self.batch_mean.assign(mean);
        self.batch_var.assign(var);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcNormConfig {
    pub temperature: f64,
    pub eps: f64,
    pub detach_calibration: bool,
    pub momentum: f64,
}

impl Default for AcNormConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            eps: DEFAULT_EPS,
            detach_calibration: false,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl AcNormConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!("momentum must be in (0, 1], got {}", self.momentum)));
        }
        Ok(())
    }
}

/// `K x K` transferability matrix between target rows and source columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationMatrix {
    values: Array2<f64>,
    sparsified: bool,
}

impl CalibrationMatrix {
    pub fn from_values(values: Array2<f64>, sparsified: bool) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::Config("calibration matrix must be square".into()));
        }
        Ok(Self { values, sparsified })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn is_sparsified(&self) -> bool {
        self.sparsified
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(1))
    }

    pub fn diagonal(&self) -> Array1<f64> {
        self.values.diag().to_owned()
    }
}

pub(crate) fn check_finite(x: ArrayView2<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite value in normalization input".into()))
    }
}

/// Biased per-channel mean and variance of an `N x K` batch.
pub(crate) fn batch_moments(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let mut var = Array1::zeros(x.ncols());
    for row in x.rows() {
        Zip::from(&mut var)
            .and(&row)
            .and(&mean)
            .for_each(|v, &xv, &m| *v += (xv - m) * (xv - m));
    }
    var /= n;
    (mean, var)
}

/// Returns `(x_hat, 1 / sqrt(var + eps))`.
pub(crate) fn normalize(
    x: ArrayView2<f64>,
    mean: &Array1<f64>,
    var: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, Array1<f64>) {
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let mut xhat = x.to_owned();
    for mut row in xhat.rows_mut() {
        Zip::from(&mut row)
            .and(mean)
            .and(&inv_std)
            .for_each(|v, &m, &s| *v = (*v - m) * s);
    }
    (xhat, inv_std)
}

pub(crate) fn check_batch(x: ArrayView2<f64>, channels: usize, mode: Mode) -> Result<()> {
    if x.ncols() != channels {
        return Err(Error::InvalidBatch(format!(
            "expected {channels} channels, got {}",
            x.ncols()
        )));
    }
    match mode {
        Mode::Training if x.nrows() < 2 => Err(Error::InvalidBatch(format!(
            "training mode needs at least 2 rows per channel, got {}",
            x.nrows()
        ))),
        Mode::Inference if x.nrows() < 1 => Err(Error::InvalidBatch("empty batch".into())),
        _ => check_finite(x),
    }
}

/// Standardizes `x` (rows = samples, columns = channels). In training mode the
/// mini-batch statistics are used and folded into the moving averages; in
/// inference mode the moving statistics are used and `stats` is untouched.
pub fn standardize(x: ArrayView2<f64>, stats: &mut NormStats, mode: Mode) -> Result<Array2<f64>> {
    check_batch(x, stats.channels(), mode)?;
    let xhat = match mode {
        Mode::Training => {
            let (mean, var) = batch_moments(x);
            let (xhat, _) = normalize(x, &mean, &var, stats.eps);
            stats.absorb_batch(&mean, &var, x.nrows());
            xhat
        }
        Mode::Inference => normalize(x, &stats.moving_mean, &stats.moving_var, stats.eps).0,
    };
    Ok(xhat)
}

pub(crate) type Moments = (Array1<f64>, Array1<f64>);

/// Side-effect free standardization: `(x_hat, 1 / std, batch moments)`. The
/// moments are `None` in inference mode.
pub(crate) fn standardize_parts(
    x: ArrayView2<f64>,
    stats: &NormStats,
    eps: f64,
    mode: Mode,
) -> Result<(Array2<f64>, Array1<f64>, Option<Moments>)> {
    check_batch(x, stats.channels(), mode)?;
    Ok(match mode {
        Mode::Training => {
            let (mean, var) = batch_moments(x);
            let (xhat, inv_std) = normalize(x, &mean, &var, eps);
            (xhat, inv_std, Some((mean, var)))
        }
        Mode::Inference => {
            let (xhat, inv_std) = normalize(x, &stats.moving_mean, &stats.moving_var, eps);
            (xhat, inv_std, None)
        }
    })
}

/// `z[j] = beta[j] / sqrt(gamma[j]^2 + eps)`.
pub fn domain_signature(affines: &AffineParams, eps: f64) -> Array1<f64> {
    signature_of(affines.gamma.view(), affines.beta.view(), eps)
}

pub(crate) fn signature_of(gamma: ArrayView1<f64>, beta: ArrayView1<f64>, eps: f64) -> Array1<f64> {
    Zip::from(&gamma)
        .and(&beta)
        .map_collect(|&g, &b| b / (g * g + eps).sqrt())
}

/// Row-softmax of `-|z_t[p] - z_s[q]| / t`.
pub fn calibration_matrix(
    z_t: ArrayView1<f64>,
    z_s: ArrayView1<f64>,
    temperature: f64,
) -> Result<CalibrationMatrix> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    if z_t.len() != z_s.len() {
        return Err(Error::Config(format!(
            "signature length mismatch: target {} vs source {}",
            z_t.len(),
            z_s.len()
        )));
    }
    let k = z_t.len();
    let mut c = Array2::zeros((k, k));
    for (p, mut row) in c.rows_mut().into_iter().enumerate() {
        let zp = z_t[p];
        let mut max_logit = f64::NEG_INFINITY;
        for q in 0..k {
            let logit = -(zp - z_s[q]).abs() / temperature;
            row[q] = logit;
            max_logit = max_logit.max(logit);
        }
        row.mapv_inplace(|l| (l - max_logit).exp());
        let total = row.sum();
        row /= total;
    }
    Ok(CalibrationMatrix {
        values: c,
        sparsified: false,
    })
}

/// Keep rule: entry `(p, q)` survives iff `C[p][q] >= C[p][p]`.
pub fn keep_mask(values: &Array2<f64>) -> Array2<bool> {
    Array2::from_shape_fn(values.dim(), |(p, q)| values[[p, q]] >= values[[p, p]])
}

/// Zeroes every entry smaller than its row's diagonal. Ties are retained.
pub fn sparsify(c: &CalibrationMatrix) -> CalibrationMatrix {
    let mask = keep_mask(&c.values);
    let values = Zip::from(&c.values)
        .and(&mask)
        .map_collect(|&v, &keep| if keep { v } else { 0.0 });
    CalibrationMatrix {
        values,
        sparsified: true,
    }
}

/// `(C gamma_t, C beta_t)`.
pub fn recalibrate(c: &CalibrationMatrix, target: &AffineParams) -> Result<(Array1<f64>, Array1<f64>)> {
    if !c.sparsified {
        return Err(Error::Config("recalibration expects a sparsified calibration matrix".into()));
    }
    if c.channels() != target.channels() {
        return Err(Error::Config(format!(
            "calibration matrix is {0}x{0} but target has {1} channels",
            c.channels(),
            target.channels()
        )));
    }
    Ok((c.values.dot(&target.gamma), c.values.dot(&target.beta)))
}

/// Which calibration entries participate in recalibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum MaskRule {
    /// Entries at least as large as the diagonal.
    Sparse,
    /// All entries.
    Dense,
    /// Diagonal only.
    Diagonal,
}

impl MaskRule {
    pub(crate) fn mask(self, softmax: &Array2<f64>) -> Array2<bool> {
        match self {
            MaskRule::Sparse => keep_mask(softmax),
            MaskRule::Dense => Array2::from_elem(softmax.dim(), true),
            MaskRule::Diagonal => Array2::from_shape_fn(softmax.dim(), |(p, q)| p == q),
        }
    }
}

/// A calibration matrix derived from signatures, kept with everything the
/// backward pass needs.
#[derive(Clone, Debug)]
pub(crate) struct SignatureCalibration {
    pub z_t: Array1<f64>,
    pub z_s: Array1<f64>,
    pub softmax: Array2<f64>,
    pub mask: Array2<bool>,
    pub effective: Array2<f64>,
}

impl SignatureCalibration {
    pub(crate) fn build(
        z_t: Array1<f64>,
        z_s: Array1<f64>,
        temperature: f64,
        rule: MaskRule,
    ) -> Result<Self> {
        let softmax = calibration_matrix(z_t.view(), z_s.view(), temperature)?.values;
        let mask = rule.mask(&softmax);
        let effective = Zip::from(&softmax)
            .and(&mask)
            .map_collect(|&v, &keep| if keep { v } else { 0.0 });
        Ok(Self {
            z_t,
            z_s,
            softmax,
            mask,
            effective,
        })
    }

    /// Gradient w.r.t. `z_t` given the gradient w.r.t. the effective matrix.
    /// The mask is a constant of the forward pass; `d|u|/du` at 0 is taken as 0.
    pub(crate) fn signature_grad(&self, d_effective: &Array2<f64>, temperature: f64) -> Array1<f64> {
        let k = self.z_t.len();
        let mut dz = Array1::zeros(k);
        for p in 0..k {
            let s = self.softmax.row(p);
            let ds: Vec<f64> = (0..k)
                .map(|q| if self.mask[[p, q]] { d_effective[[p, q]] } else { 0.0 })
                .collect();
            let inner: f64 = (0..k).map(|q| s[q] * ds[q]).sum();
            let mut acc = 0.0;
            for q in 0..k {
                let d_logit = s[q] * (ds[q] - inner);
                let diff = self.z_t[p] - self.z_s[q];
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                acc += d_logit * (-sign / temperature);
            }
            dz[p] = acc;
        }
        dz
    }
}

/// Chain rule through `z = beta / sqrt(gamma^2 + eps)`.
pub(crate) fn signature_to_affine_grad(
    dz: &Array1<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array1<f64>, Array1<f64>) {
    let mut dg = Array1::zeros(dz.len());
    let mut db = Array1::zeros(dz.len());
    for j in 0..dz.len() {
        let denom = gamma[j] * gamma[j] + eps;
        db[j] = dz[j] / denom.sqrt();
        dg[j] = -dz[j] * beta[j] * gamma[j] / (denom * denom.sqrt());
    }
    (dg, db)
}

/// Everything retained from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct Trace {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub training: bool,
    pub gamma_t: Array1<f64>,
    pub beta_t: Array1<f64>,
    pub gamma_eff: Array1<f64>,
    /// The matrix `C` multiplied into the target affines, if any.
    pub calibration: Option<Array2<f64>>,
    /// Present when `C` is a function of the target affines.
    pub affine_path: Option<SignatureCalibration>,
}

#[derive(Clone, Debug)]
pub(crate) struct TraceGrads {
    pub x: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub calibration: Option<Array2<f64>>,
}

/// `y = (gamma_t + C gamma_t) * x_hat + (beta_t + C beta_t)`; without `C` plain
/// batch-norm affine output.
pub(crate) fn residual_forward(
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    training: bool,
    gamma_t: &Array1<f64>,
    beta_t: &Array1<f64>,
    calibration: Option<Array2<f64>>,
    affine_path: Option<SignatureCalibration>,
) -> (Array2<f64>, Trace) {
    let (gamma_eff, beta_eff) = match &calibration {
        Some(c) => (gamma_t + &c.dot(gamma_t), beta_t + &c.dot(beta_t)),
        None => (gamma_t.clone(), beta_t.clone()),
    };
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        Zip::from(&mut row)
            .and(&gamma_eff)
            .and(&beta_eff)
            .for_each(|v, &g, &b| *v = g * *v + b);
    }
    let trace = Trace {
        xhat,
        inv_std,
        training,
        gamma_t: gamma_t.clone(),
        beta_t: beta_t.clone(),
        gamma_eff,
        calibration,
        affine_path,
    };
    (y, trace)
}

pub(crate) fn residual_backward(
    trace: &Trace,
    upstream: ArrayView2<f64>,
    temperature: f64,
    eps: f64,
    detach_calibration: bool,
) -> TraceGrads {
    let n = trace.xhat.nrows() as f64;
    let k = trace.xhat.ncols();

    let d_beta_eff = upstream.sum_axis(Axis(0));
    let d_gamma_eff = (&upstream * &trace.xhat).sum_axis(Axis(0));

    let mut dxhat = upstream.to_owned();
    for mut row in dxhat.rows_mut() {
        row *= &trace.gamma_eff;
    }
    let dx = if trace.training {
        let mean_dxhat = dxhat.sum_axis(Axis(0)) / n;
        let mean_dxhat_xhat = (&dxhat * &trace.xhat).sum_axis(Axis(0)) / n;
        let mut dx = dxhat;
        Zip::from(dx.rows_mut())
            .and(trace.xhat.rows())
            .for_each(|mut drow, xrow| {
                for j in 0..k {
                    drow[j] = trace.inv_std[j]
                        * (drow[j] - mean_dxhat[j] - xrow[j] * mean_dxhat_xhat[j]);
                }
            });
        dx
    } else {
        let mut dx = dxhat;
        for mut row in dx.rows_mut() {
            row *= &trace.inv_std;
        }
        dx
    };

    let (mut d_gamma, mut d_beta, d_calibration) = match &trace.calibration {
        Some(c) => {
            let dg = &d_gamma_eff + &c.t().dot(&d_gamma_eff);
            let db = &d_beta_eff + &c.t().dot(&d_beta_eff);
            let dc = Array2::from_shape_fn((k, k), |(p, q)| {
                d_gamma_eff[p] * trace.gamma_t[q] + d_beta_eff[p] * trace.beta_t[q]
            });
            (dg, db, Some(dc))
        }
        None => (d_gamma_eff, d_beta_eff, None),
    };

    if let (Some(path), Some(dc), false) = (&trace.affine_path, &d_calibration, detach_calibration) {
        let dz = path.signature_grad(dc, temperature);
        let (dg, db) = signature_to_affine_grad(&dz, &trace.gamma_t, &trace.beta_t, eps);
        d_gamma += &dg;
        d_beta += &db;
    }

    TraceGrads {
        x: dx,
        gamma: d_gamma,
        beta: d_beta,
        calibration: d_calibration,
    }
}

/// Gradients of `sum(upstream * y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AcNormGradients {
    pub x: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Complete state of one AC-Norm layer.
#[derive(Clone, Debug)]
pub struct AcNormLayer {
    pub source: AffineParams,
    pub target: AffineParams,
    pub stats: NormStats,
    pub config: AcNormConfig,
    pub mode: Mode,
}

impl AcNormLayer {
    /// Builds a layer whose target affines copy `source`.
    pub fn new(source: AffineParams, config: AcNormConfig) -> Result<Self> {
        let stats = NormStats::new(source.channels(), config.momentum, config.eps);
        Self::with_stats(source, stats, config)
    }

    pub fn with_stats(source: AffineParams, stats: NormStats, config: AcNormConfig) -> Result<Self> {
        let target = AffineParams::target_from(&source);
        Self::from_parts(source, target, stats, config)
    }

    pub fn from_parts(
        source: AffineParams,
        target: AffineParams,
        stats: NormStats,
        config: AcNormConfig,
    ) -> Result<Self> {
        config.validate()?;
        if source.role() != Role::Source || target.role() != Role::Target {
            return Err(Error::Config("affine roles must be (source, target)".into()));
        }
        if source.channels() != target.channels() || source.channels() != stats.channels() {
            return Err(Error::Config(format!(
                "channel mismatch: source {}, target {}, stats {}",
                source.channels(),
                target.channels(),
                stats.channels()
            )));
        }
        Ok(Self {
            source,
            target,
            stats,
            config,
            mode: Mode::Training,
        })
    }

    pub fn channels(&self) -> usize {
        self.source.channels()
    }

    pub(crate) fn signature_calibration(&self, rule: MaskRule) -> Result<SignatureCalibration> {
        SignatureCalibration::build(
            self.target.signature(self.config.eps),
            self.source.signature(self.config.eps),
            self.config.temperature,
            rule,
        )
    }

    /// The sparsified calibration matrix for the current affine values.
    pub fn calibration(&self) -> Result<CalibrationMatrix> {
        let z_t = self.target.signature(self.config.eps);
        let z_s = self.source.signature(self.config.eps);
        Ok(sparsify(&calibration_matrix(z_t.view(), z_s.view(), self.config.temperature)?))
    }

    fn trace(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Trace, Option<Moments>)> {
        let (xhat, inv_std, moments) = standardize_parts(x, &self.stats, self.config.eps, self.mode)?;
        let cal = self.signature_calibration(MaskRule::Sparse)?;
        let (y, trace) = residual_forward(
            xhat,
            inv_std,
            self.mode == Mode::Training,
            self.target.gamma(),
            self.target.beta(),
            Some(cal.effective.clone()),
            Some(cal),
        );
        Ok((y, trace, moments))
    }

    /// Forward pass; updates moving statistics in training mode only.
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (y, _, moments) = self.trace(x)?;
        if let Some((mean, var)) = moments {
            self.stats.absorb_batch(&mean, &var, x.nrows());
        }
        Ok(y)
    }

    /// Gradients of `L = sum(upstream * forward(x))` w.r.t. `x`, `gamma_t` and
    /// `beta_t`. Does not touch the moving statistics.
    pub fn gradients(&self, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<AcNormGradients> {
        if self.mode != Mode::Training {
            return Err(Error::Config("gradients are only defined in training mode".into()));
        }
        if upstream.dim() != x.dim() {
            return Err(Error::InvalidBatch("upstream gradient shape differs from input".into()));
        }
        let (_, trace, _) = self.trace(x)?;
        let g = residual_backward(
            &trace,
            upstream,
            self.config.temperature,
            self.config.eps,
            self.config.detach_calibration,
        );
        Ok(AcNormGradients {
            x: g.x,
            gamma: g.gamma,
            beta: g.beta,
        })
    }
}

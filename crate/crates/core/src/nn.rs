//! Minimal sequential convolutional network with hand-written backprop.
//!
//! Feature maps are NHWC `Array4<f64>`, so a `[N, H, W, C]` map viewed as
//! `(N*H*W, C)` is exactly the `N x K` layout the normalization layers expect.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis, Ix2};

use crate::error::{Error, Result};
use crate::norm::Mode;
use crate::variants::{NormLayer, NormTrace};

pub type Feature = Array4<f64>;

fn out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// 2D convolution with "same"-style padding `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `(out, kernel * kernel * in)`, row layout `(ky, kx, c_in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
    cache: Option<(Array2<f64>, [usize; 4])>,
}

impl Conv2d {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, in_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        let out_channels = weight.nrows();
        if weight.ncols() != kernel * kernel * in_channels || bias.len() != out_channels {
            return Err(Error::Spec(format!(
                "conv weight {:?} / bias {} inconsistent with in={in_channels} k={kernel}",
                weight.dim(),
                bias.len()
            )));
        }
        if stride == 0 {
            return Err(Error::Spec("conv stride must be >= 1".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            grad_weight: Array2::zeros(weight.dim()),
            grad_bias: Array1::zeros(out_channels),
            weight,
            bias,
            cache: None,
        })
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn im2col(&self, x: &Feature) -> Array2<f64> {
        let (n, h, w, c) = x.dim();
        let (k, st, pad) = (self.kernel, self.stride, self.pad());
        if k == 1 && st == 1 {
            return x
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((n * h * w, c))
                .expect("contiguous");
        }
        let (oh, ow) = (out_size(h, k, st, pad), out_size(w, k, st, pad));
        let mut cols = Array2::zeros((n * oh * ow, k * k * c));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        let row_len = k * k * c;
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * st + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * st + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, shape: [usize; 4]) -> Feature {
        let [n, h, w, c] = shape;
        let (k, st, pad) = (self.kernel, self.stride, self.pad());
        if k == 1 && st == 1 {
            return cols.clone().into_shape_with_order((n, h, w, c)).expect("contiguous");
        }
        let (oh, ow) = (out_size(h, k, st, pad), out_size(w, k, st, pad));
        let mut x = Array4::zeros((n, h, w, c));
        let xs = x.as_slice_mut().expect("standard layout");
        let cs = cols.as_slice().expect("standard layout");
        let row_len = k * k * c;
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * st + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * st + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                            let src = row + (ky * k + kx) * c;
                            for ch in 0..c {
                                xs[dst + ch] += cs[src + ch];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&mut self, x: &Feature, keep: bool) -> Result<Feature> {
        let (n, h, w, c) = x.dim();
        if c != self.in_channels {
            return Err(Error::Spec(format!("conv expects {} input channels, got {c}", self.in_channels)));
        }
        let pad = self.pad();
        let (oh, ow) = (out_size(h, self.kernel, self.stride, pad), out_size(w, self.kernel, self.stride, pad));
        let cols = self.im2col(x);
        let mut out = cols.dot(&self.weight.t());
        out += &self.bias;
        if keep {
            self.cache = Some((cols, [n, h, w, c]));
        }
        Ok(out.into_shape_with_order((n, oh, ow, self.out_channels)).expect("contiguous"))
    }

    /// Stores parameter gradients; returns the input gradient when `need_input`.
    pub fn backward(&mut self, grad: &Feature, need_input: bool) -> Result<Option<Feature>> {
        let (cols, shape) = self
            .cache
            .take()
            .ok_or_else(|| Error::Numeric("conv backward without cached forward".into()))?;
        let (n, oh, ow, o) = grad.dim();
        let g2 = grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * oh * ow, o))
            .expect("contiguous");
        self.grad_weight = g2.t().dot(&cols);
        self.grad_bias = g2.sum_axis(Axis(0));
        if !need_input {
            return Ok(None);
        }
        let dcols = g2.dot(&self.weight);
        Ok(Some(self.col2im(&dcols, shape)))
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
    cache: Option<Array2<f64>>,
}

impl Dense {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Spec("dense weight/bias mismatch".into()));
        }
        Ok(Self {
            grad_weight: Array2::zeros(weight.dim()),
            grad_bias: Array1::zeros(bias.len()),
            weight,
            bias,
            cache: None,
        })
    }

    fn forward(&mut self, x: &Feature, keep: bool) -> Result<Feature> {
        let (n, h, w, c) = x.dim();
        if h != 1 || w != 1 || c != self.weight.ncols() {
            return Err(Error::Spec(format!(
                "dense expects [N,1,1,{}], got {:?}",
                self.weight.ncols(),
                x.dim()
            )));
        }
        let x2 = x.to_shape((n, c)).expect("contiguous").into_owned();
        let mut y = x2.dot(&self.weight.t());
        y += &self.bias;
        if keep {
            self.cache = Some(x2);
        }
        Ok(y.into_shape_with_order((n, 1, 1, self.weight.nrows())).expect("contiguous"))
    }

    fn backward(&mut self, grad: &Feature) -> Result<Feature> {
        let x2 = self
            .cache
            .take()
            .ok_or_else(|| Error::Numeric("dense backward without cached forward".into()))?;
        let n = grad.dim().0;
        let g2 = grad.to_shape((n, self.weight.nrows())).expect("contiguous").into_owned();
        self.grad_weight = g2.t().dot(&x2);
        self.grad_bias = g2.sum_axis(Axis(0));
        let dx = g2.dot(&self.weight);
        Ok(dx.into_shape_with_order((n, 1, 1, self.weight.ncols())).expect("contiguous"))
    }
}

/// Norm layer plus the bookkeeping needed inside a network.
#[derive(Clone, Debug)]
pub struct NormNode {
    pub layer: NormLayer,
    pub grad_gamma: Array1<f64>,
    pub grad_beta: Array1<f64>,
    pub grad_calibration: Option<Array2<f64>>,
    trace: Option<(NormTrace, [usize; 4])>,
}

impl NormNode {
    pub fn new(layer: NormLayer) -> Self {
        let k = layer.channels();
        Self {
            grad_calibration: layer.calibration.as_ref().map(|c| Array2::zeros(c.dim())),
            layer,
            grad_gamma: Array1::zeros(k),
            grad_beta: Array1::zeros(k),
            trace: None,
        }
    }

    fn forward(&mut self, x: &Feature, keep: bool) -> Result<Feature> {
        let (n, h, w, c) = x.dim();
        let x2 = x.to_shape((n * h * w, c)).map_err(|e| Error::Spec(e.to_string()))?;
        let y = if keep && self.layer.mode() == Mode::Training {
            let (y, trace) = self.layer.forward_traced(x2.view())?;
            self.trace = Some((trace, [n, h, w, c]));
            y
        } else {
            self.layer.forward(x2.view())?
        };
        Ok(y.into_shape_with_order((n, h, w, c)).expect("contiguous"))
    }

    fn backward(&mut self, grad: &Feature) -> Result<Feature> {
        let (trace, [n, h, w, c]) = self
            .trace
            .take()
            .ok_or_else(|| Error::Numeric("norm backward without traced forward".into()))?;
        let g2 = grad.to_shape((n * h * w, c)).expect("contiguous");
        let g = self.layer.backward(&trace, g2.view());
        self.grad_gamma = g.gamma;
        self.grad_beta = g.beta;
        self.grad_calibration = g.calibration;
        Ok(g.x.into_shape_with_order((n, h, w, c)).expect("contiguous"))
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Conv(Conv2d),
    Norm(Box<NormNode>),
    Relu(Option<Array4<bool>>),
    Identity,
    MaxPool(Option<(Vec<usize>, [usize; 4])>),
    Upsample,
    GlobalAvgPool(Option<[usize; 4]>),
    Dense(Dense),
}

impl Op {
    pub(crate) fn forward(&mut self, x: Feature, keep: bool) -> Result<Feature> {
        match self {
            Op::Conv(c) => c.forward(&x, keep),
            Op::Norm(n) => n.forward(&x, keep),
            Op::Relu(mask) => {
                if keep {
                    *mask = Some(x.mapv(|v| v > 0.0));
                }
                Ok(x.mapv_into(|v| v.max(0.0)))
            }
            Op::Identity => Ok(x),
            Op::MaxPool(cache) => {
                let (n, h, w, c) = x.dim();
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Array4::zeros((n, oh, ow, c));
                let mut arg = Vec::with_capacity(if keep { n * oh * ow * c } else { 0 });
                let xs = x.as_slice().expect("standard layout");
                let os = out.as_slice_mut().expect("standard layout");
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                    if xs[idx] > best {
                                        best = xs[idx];
                                        best_idx = idx;
                                    }
                                }
                                os[((b * oh + oy) * ow + ox) * c + ch] = best;
                                if keep {
                                    arg.push(best_idx);
                                }
                            }
                        }
                    }
                }
                if keep {
                    *cache = Some((arg, [n, h, w, c]));
                }
                Ok(out)
            }
            Op::Upsample => {
                let (n, h, w, c) = x.dim();
                Ok(Array4::from_shape_fn((n, 2 * h, 2 * w, c), |(b, y, xx, ch)| x[[b, y / 2, xx / 2, ch]]))
            }
            Op::GlobalAvgPool(shape) => {
                let (n, h, w, c) = x.dim();
                if keep {
                    *shape = Some([n, h, w, c]);
                }
                let mean = x
                    .to_shape((n, h * w, c))
                    .expect("contiguous")
                    .mean_axis(Axis(1))
                    .expect("non-empty");
                Ok(mean.into_shape_with_order((n, 1, 1, c)).expect("contiguous"))
            }
            Op::Dense(d) => d.forward(&x, keep),
        }
    }

    fn backward(&mut self, grad: Feature, need_input: bool) -> Result<Option<Feature>> {
        let missing = || Error::Numeric("backward without cached forward".into());
        Ok(Some(match self {
            Op::Conv(c) => return c.backward(&grad, need_input),
            Op::Norm(n) => n.backward(&grad)?,
            Op::Relu(mask) => {
                let mask = mask.take().ok_or_else(missing)?;
                let mut g = grad;
                ndarray::Zip::from(&mut g).and(&mask).for_each(|v, &m| {
                    if !m {
                        *v = 0.0
                    }
                });
                g
            }
            Op::Identity => grad,
            Op::MaxPool(cache) => {
                let (arg, [n, h, w, c]) = cache.take().ok_or_else(missing)?;
                let mut dx = Array4::zeros((n, h, w, c));
                let ds = dx.as_slice_mut().expect("standard layout");
                for (g, idx) in grad.iter().zip(arg) {
                    ds[idx] += g;
                }
                dx
            }
            Op::Upsample => {
                let (n, h2, w2, c) = grad.dim();
                let mut dx = Array4::zeros((n, h2 / 2, w2 / 2, c));
                for ((b, y, x, ch), g) in grad.indexed_iter() {
                    dx[[b, y / 2, x / 2, ch]] += g;
                }
                dx
            }
            Op::GlobalAvgPool(shape) => {
                let [n, h, w, c] = shape.take().ok_or_else(missing)?;
                let scale = 1.0 / (h * w) as f64;
                Array4::from_shape_fn((n, h, w, c), |(b, _, _, ch)| grad[[b, 0, 0, ch]] * scale)
            }
            Op::Dense(d) => d.backward(&grad)?,
        }))
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub op: Op,
}

/// Mutable view of one trainable tensor and its gradient.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Runtime network built from a [`crate::model::ModelGraph`].
#[derive(Clone, Debug)]
pub struct Network {
    pub nodes: Vec<Node>,
}

impl Network {
    pub fn set_mode(&mut self, mode: Mode) {
        for node in &mut self.nodes {
            if let Op::Norm(n) = &mut node.op {
                n.layer.set_mode(mode);
            }
        }
    }

    /// Runs all layers. With `keep`, caches what `backward` needs; norm
    /// layers use whatever mode they are in.
    pub fn forward(&mut self, x: &Feature, keep: bool) -> Result<Feature> {
        let mut h = x.clone();
        for node in &mut self.nodes {
            h = node.op.forward(h, keep)?;
        }
        Ok(h)
    }

    /// Backpropagates `grad` (w.r.t. the output) and stores parameter gradients.
    pub fn backward(&mut self, grad: Feature) -> Result<()> {
        let mut g = grad;
        for (i, node) in self.nodes.iter_mut().enumerate().rev() {
            match node.op.backward(g, i > 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }

    /// Every trainable tensor (conv/dense weights and biases, target affines,
    /// free calibration matrices) with its latest gradient.
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        for node in &mut self.nodes {
            let name = &node.name;
            match &mut node.op {
                Op::Conv(c) => {
                    slots.push(ParamSlot {
                        name: format!("{name}.weight"),
                        value: c.weight.as_slice_mut().expect("standard layout"),
                        grad: c.grad_weight.as_slice().expect("standard layout"),
                    });
                    slots.push(ParamSlot {
                        name: format!("{name}.bias"),
                        value: c.bias.as_slice_mut().expect("standard layout"),
                        grad: c.grad_bias.as_slice().expect("standard layout"),
                    });
                }
                Op::Dense(d) => {
                    slots.push(ParamSlot {
                        name: format!("{name}.weight"),
                        value: d.weight.as_slice_mut().expect("standard layout"),
                        grad: d.grad_weight.as_slice().expect("standard layout"),
                    });
                    slots.push(ParamSlot {
                        name: format!("{name}.bias"),
                        value: d.bias.as_slice_mut().expect("standard layout"),
                        grad: d.grad_bias.as_slice().expect("standard layout"),
                    });
                }
                Op::Norm(n) => {
                    let NormNode {
                        layer,
                        grad_gamma,
                        grad_beta,
                        grad_calibration,
                        ..
                    } = n.as_mut();
                    let (gamma, beta) = layer.state.target.params_mut().expect("target affines");
                    slots.push(ParamSlot {
                        name: format!("{name}.gamma"),
                        value: gamma.as_slice_mut().expect("standard layout"),
                        grad: grad_gamma.as_slice().expect("standard layout"),
                    });
                    slots.push(ParamSlot {
                        name: format!("{name}.beta"),
                        value: beta.as_slice_mut().expect("standard layout"),
                        grad: grad_beta.as_slice().expect("standard layout"),
                    });
                    if let (Some(c), Some(gc)) = (layer.calibration.as_mut(), grad_calibration.as_ref()) {
                        slots.push(ParamSlot {
                            name: format!("{name}.calibration"),
                            value: c.as_slice_mut().expect("standard layout"),
                            grad: gc.as_slice().expect("standard layout"),
                        });
                    }
                }
                _ => {}
            }
        }
        slots
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = (&str, &NormLayer)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Norm(norm) => Some((n.name.as_str(), &norm.layer)),
            _ => None,
        })
    }

    /// Forward in inference mode without caching, restoring the previous modes.
    pub fn predict(&mut self, x: &Feature) -> Result<Feature> {
        let modes: Vec<Mode> = self.norm_layers().map(|(_, l)| l.mode()).collect();
        self.set_mode(Mode::Inference);
        let out = self.forward(x, false);
        let mut it = modes.into_iter();
        for node in &mut self.nodes {
            if let Op::Norm(n) = &mut node.op {
                n.layer.set_mode(it.next().expect("same count"));
            }
        }
        out
    }
}

/// Mean binary cross-entropy on logits and its gradient.
pub fn bce_with_logits(logits: &Feature, targets: &Feature) -> (f64, Feature) {
    let count = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array4::zeros(logits.dim());
    ndarray::Zip::from(&mut grad)
        .and(logits)
        .and(targets)
        .for_each(|g, &z, &y| {
            // log(1 + exp(-|z|)) + max(z, 0) - z*y
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            *g = (sigmoid(z) - y) / count;
        });
    (loss / count, grad)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `(N, C)` logits.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Mean softmax cross-entropy for `[N, 1, 1, C]` logits.
pub fn cross_entropy(logits: &Feature, labels: &[usize]) -> Result<(f64, Feature)> {
    let (n, _, _, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::Data("label count differs from batch size".into()));
    }
    let l2 = logits.to_shape((n, c)).expect("contiguous").into_dimensionality::<Ix2>().expect("2d");
    let p = softmax_rows(l2.view());
    let mut loss = 0.0;
    let mut grad = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        loss -= p[[i, y]].max(1e-300).ln();
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64;
    Ok((loss / n as f64, grad.into_shape_with_order((n, 1, 1, c)).expect("contiguous")))
}

/// Splits a batch along the sample axis.
pub fn take_samples(x: &Feature, idx: &[usize]) -> Feature {
    let (_, h, w, c) = x.dim();
    let mut out = Array4::zeros((idx.len(), h, w, c));
    for (dst, &src) in idx.iter().enumerate() {
        out.slice_mut(s![dst, .., .., ..]).assign(&x.slice(s![src, .., .., ..]));
    }
    out
}

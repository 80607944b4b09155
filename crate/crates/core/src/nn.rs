//! Feed-forward networks evaluated directly over a flat parameter vector.
//!
//! A [`ModelSpec`] fixes the architecture and the canonical parameter
//! layout: layers in order, each contributing its weights (row-major)
//! followed by its biases. Dense weights are stored as an
//! `inputs x outputs` matrix, so a layer computes `x · W + b`. Conv weights
//! are stored as `filters x channels x kernel x kernel`.

use std::fmt;
use std::ops::{Deref, DerefMut};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

/// One layer of a network description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Dense {
        units: usize,
        activation: Activation,
    },
    /// Square kernel, stride 1, no padding.
    Conv2d {
        filters: usize,
        kernel: usize,
        activation: Activation,
    },
    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are dropped.
    MaxPool2d { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    /// A flat feature vector of length `dim`.
    pub fn flat(dim: usize) -> Self {
        Self {
            channels: 1,
            height: 1,
            width: dim,
        }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_c: usize,
        out_c: usize,
        k: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    Pool {
        channels: usize,
        size: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
}

impl Op {
    fn weight_len(&self) -> usize {
        match *self {
            Op::Dense { inputs, outputs } => inputs * outputs,
            Op::Conv { in_c, out_c, k, .. } => out_c * in_c * k * k,
            Op::Pool { .. } => 0,
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            Op::Dense { outputs, .. } => outputs,
            Op::Conv { out_c, .. } => out_c,
            Op::Pool { .. } => 0,
        }
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            Op::Dense { inputs, outputs } => (inputs, outputs),
            Op::Conv { in_c, out_c, k, .. } => (in_c * k * k, out_c * k * k),
            Op::Pool { .. } => (0, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LayerPlan {
    op: Op,
    activation: Activation,
    offset: usize,
    in_len: usize,
    out_len: usize,
}

/// A validated network architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    input: InputShape,
    layers: Vec<Layer>,
    plan: Vec<LayerPlan>,
    param_count: usize,
}

impl ModelSpec {
    pub fn new(input: InputShape, layers: Vec<Layer>) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Config("input shape has a zero dimension".into()));
        }
        let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
        let mut spatial = true;
        let mut offset = 0;
        let mut plan = Vec::with_capacity(layers.len());

        for (i, layer) in layers.iter().enumerate() {
            let in_len = c * h * w;
            let (op, activation) = match *layer {
                Layer::Dense { units, activation } => {
                    if units == 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: dense layer with 0 units"
                        )));
                    }
                    spatial = false;
                    (c, h, w) = (units, 1, 1);
                    (
                        Op::Dense {
                            inputs: in_len,
                            outputs: units,
                        },
                        activation,
                    )
                }
                Layer::Conv2d {
                    filters,
                    kernel,
                    activation,
                } => {
                    if !spatial {
                        return Err(Error::Config(format!(
                            "layer {i}: convolution after a dense layer"
                        )));
                    }
                    if filters == 0 || kernel == 0 || kernel > h || kernel > w {
                        return Err(Error::Config(format!(
                            "layer {i}: convolution with {filters} filters of size {kernel} does not fit a {h}x{w} input"
                        )));
                    }
                    let op = Op::Conv {
                        in_c: c,
                        out_c: filters,
                        k: kernel,
                        in_h: h,
                        in_w: w,
                        out_h: h - kernel + 1,
                        out_w: w - kernel + 1,
                    };
                    (c, h, w) = (filters, h - kernel + 1, w - kernel + 1);
                    (op, activation)
                }
                Layer::MaxPool2d { size } => {
                    if !spatial {
                        return Err(Error::Config(format!(
                            "layer {i}: pooling after a dense layer"
                        )));
                    }
                    if size == 0 || size > h || size > w {
                        return Err(Error::Config(format!(
                            "layer {i}: pooling window {size} does not fit a {h}x{w} input"
                        )));
                    }
                    let op = Op::Pool {
                        channels: c,
                        size,
                        in_h: h,
                        in_w: w,
                        out_h: h / size,
                        out_w: w / size,
                    };
                    (h, w) = (h / size, w / size);
                    (op, Activation::Identity)
                }
            };
            plan.push(LayerPlan {
                op,
                activation,
                offset,
                in_len,
                out_len: c * h * w,
            });
            offset += op.param_len();
        }

        match layers.last() {
            Some(Layer::Dense {
                units,
                activation: Activation::Identity,
            }) if *units >= 2 => {}
            Some(Layer::Dense { units, .. }) if *units < 2 => {
                return Err(Error::Config(format!(
                    "need at least 2 output classes, got {units}"
                )))
            }
            _ => {
                return Err(Error::Config(
                    "the output layer must be a dense layer with identity activation".into(),
                ))
            }
        }

        Ok(Self {
            input,
            layers,
            plan,
            param_count: offset,
        })
    }

    /// Multi-layer perceptron with ReLU hidden layers.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let layers = hidden
            .iter()
            .map(|&units| Layer::Dense {
                units,
                activation: Activation::Relu,
            })
            .chain(std::iter::once(Layer::Dense {
                units: classes,
                activation: Activation::Identity,
            }))
            .collect();
        Self::new(InputShape::flat(input_dim), layers)
    }

    /// 784 → 200 → 200 → 10 with ReLU hidden layers.
    pub fn mnist_mlp() -> Self {
        Self::mlp(784, &[200, 200], 10).expect("static architecture is valid")
    }

    /// Two conv/pool stages followed by one hidden dense layer.
    pub fn cnn_small(input: InputShape, classes: usize) -> Result<Self> {
        Self::new(
            input,
            vec![
                Layer::Conv2d {
                    filters: 10,
                    kernel: 5,
                    activation: Activation::Relu,
                },
                Layer::MaxPool2d { size: 2 },
                Layer::Conv2d {
                    filters: 20,
                    kernel: 5,
                    activation: Activation::Relu,
                },
                Layer::MaxPool2d { size: 2 },
                Layer::Dense {
                    units: 50,
                    activation: Activation::Relu,
                },
                Layer::Dense {
                    units: classes,
                    activation: Activation::Identity,
                },
            ],
        )
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn input_dim(&self) -> usize {
        self.input.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.plan.last().map(|p| p.out_len).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// SHA-256 of the canonical textual form; identifies the parameter layout.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_string().as_bytes()).into()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let InputShape {
            channels,
            height,
            width,
        } = self.input;
        if channels == 1 && height == 1 {
            write!(f, "in{width}")?;
        } else {
            write!(f, "in{channels}x{height}x{width}")?;
        }
        for layer in &self.layers {
            match layer {
                Layer::Dense { units, activation } => write!(f, "-dense{units}:{activation}")?,
                Layer::Conv2d {
                    filters,
                    kernel,
                    activation,
                } => write!(f, "-conv{filters}k{kernel}:{activation}")?,
                Layer::MaxPool2d { size } => write!(f, "-pool{size}")?,
            }
        }
        Ok(())
    }
}

/// Number of scalars in a parameter vector for `spec`.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.param_count()
}

macro_rules! flat_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Default)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }
    };
}

flat_vector!(
    /// All model parameters in canonical order.
    ParamVector
);
flat_vector!(
    /// Gradient with the same layout as [`ParamVector`].
    GradVector
);

/// Classical (heavy-ball) momentum: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    velocity: Vec<f64>,
    coefficient: f64,
}

impl MomentumState {
    pub fn new(len: usize, coefficient: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&coefficient) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {coefficient}"
            )));
        }
        Ok(Self {
            velocity: vec![0.0; len],
            coefficient,
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// A minibatch: `B x d` inputs and `B` zero-based class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.nrows() != labels.len() {
            return Err(Error::Input(format!(
                "batch has {} input rows and {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Glorot-uniform weights, zero biases; a pure function of `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::global_stream(seed, Purpose::InitParams);
    let mut params = vec![0.0; spec.param_count()];
    for plan in &spec.plan {
        let (fan_in, fan_out) = plan.op.fans();
        if fan_in + fan_out == 0 {
            continue;
        }
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut params[plan.offset..plan.offset + plan.op.weight_len()] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    ParamVector(params)
}

enum OpCache {
    Dense { input: Array2<f64> },
    Conv { cols: Array2<f64> },
    Pool { argmax: Vec<usize> },
}

struct LayerTrace {
    /// Pre-activation values, kept only for ReLU layers.
    pre: Option<Array2<f64>>,
    cache: OpCache,
}

/// Intermediate values of a forward pass, reusable for [`backward_from`].
pub struct ForwardTrace {
    logits: Array2<f64>,
    layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }
}

fn check_params(spec: &ModelSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Config(format!(
            "parameter vector has {} entries, model {spec} needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

fn weights_and_bias<'a>(plan: &LayerPlan, params: &'a [f64]) -> (&'a [f64], ArrayView1<'a, f64>) {
    let start = plan.offset;
    let mid = start + plan.op.weight_len();
    let end = mid + plan.op.bias_len();
    (&params[start..mid], ArrayView1::from(&params[mid..end]))
}

/// Logits (`B x C`) of `inputs` (`B x d`).
pub fn forward(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    forward_trace(spec, params, inputs).map(|t| t.logits)
}

pub fn forward_trace(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: ArrayView2<f64>,
) -> Result<ForwardTrace> {
    check_params(spec, params)?;
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::Config(format!(
            "inputs have {} features, model {spec} expects {}",
            inputs.ncols(),
            spec.input_dim()
        )));
    }
    if inputs.nrows() == 0 {
        return Err(Error::Input("empty input batch".into()));
    }

    let mut x = inputs.as_standard_layout().into_owned();
    let mut layers = Vec::with_capacity(spec.plan.len());
    for plan in &spec.plan {
        let (weights, bias) = weights_and_bias(plan, params);
        let (mut z, cache) = match plan.op {
            Op::Dense { inputs, outputs } => {
                let w = ArrayView2::from_shape((inputs, outputs), weights).expect("layout");
                let mut z = x.dot(&w);
                z += &bias;
                (z, OpCache::Dense { input: x })
            }
            Op::Conv {
                in_c,
                out_c,
                k,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                let cols = im2col(&x, in_c, in_h, in_w, k, out_h, out_w);
                let w = ArrayView2::from_shape((out_c, in_c * k * k), weights).expect("layout");
                let mut out = cols.dot(&w.t());
                out += &bias;
                let z = channel_major(&out, x.nrows(), out_c, out_h * out_w);
                (z, OpCache::Conv { cols })
            }
            Op::Pool {
                channels,
                size,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                let (z, argmax) = max_pool(&x, channels, size, in_h, in_w, out_h, out_w);
                (z, OpCache::Pool { argmax })
            }
        };
        let pre = match plan.activation {
            Activation::Relu => {
                let pre = z.clone();
                // NaN passes through so divergence reaches the loss
                z.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
                Some(pre)
            }
            Activation::Identity => None,
        };
        layers.push(LayerTrace { pre, cache });
        x = z;
    }
    Ok(ForwardTrace { logits: x, layers })
}

/// Gradient of `⟨logits, grad_logits⟩` with respect to `params`.
pub fn backward(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: ArrayView2<f64>,
    grad_logits: ArrayView2<f64>,
) -> Result<GradVector> {
    let trace = forward_trace(spec, params, inputs)?;
    backward_from(spec, params, &trace, grad_logits)
}

/// Like [`backward`], reusing the intermediates of an earlier forward pass
/// with the same parameters.
pub fn backward_from(
    spec: &ModelSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    grad_logits: ArrayView2<f64>,
) -> Result<GradVector> {
    check_params(spec, params)?;
    if grad_logits.dim() != trace.logits.dim() {
        return Err(Error::Config(format!(
            "logit gradient has shape {:?}, forward output has shape {:?}",
            grad_logits.dim(),
            trace.logits.dim()
        )));
    }

    let mut grad = vec![0.0; spec.param_count()];
    let mut delta = grad_logits.as_standard_layout().into_owned();
    for (i, (plan, layer)) in spec.plan.iter().zip(&trace.layers).enumerate().rev() {
        if let Some(pre) = &layer.pre {
            delta.zip_mut_with(pre, |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        let (weights, _) = weights_and_bias(plan, params);
        let (gw, gb) =
            grad[plan.offset..plan.offset + plan.op.param_len()].split_at_mut(plan.op.weight_len());
        match (&plan.op, &layer.cache) {
            (&Op::Dense { inputs, outputs }, OpCache::Dense { input }) => {
                let mut gw = ArrayViewMut2::from_shape((inputs, outputs), gw).expect("layout");
                general_mat_mul(1.0, &input.t(), &delta, 0.0, &mut gw);
                for (g, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *g = s;
                }
                if i > 0 {
                    let w = ArrayView2::from_shape((inputs, outputs), weights).expect("layout");
                    delta = delta.dot(&w.t());
                }
            }
            (
                &Op::Conv {
                    in_c,
                    out_c,
                    k,
                    in_h,
                    in_w,
                    out_h,
                    out_w,
                },
                OpCache::Conv { cols },
            ) => {
                let batch = delta.nrows();
                let dout = position_major(&delta, batch, out_c, out_h * out_w);
                let mut gw = ArrayViewMut2::from_shape((out_c, in_c * k * k), gw).expect("layout");
                general_mat_mul(1.0, &dout.t(), cols, 0.0, &mut gw);
                for (g, s) in gb.iter_mut().zip(dout.sum_axis(Axis(0))) {
                    *g = s;
                }
                if i > 0 {
                    let w = ArrayView2::from_shape((out_c, in_c * k * k), weights).expect("layout");
                    let dcols = dout.dot(&w);
                    delta = col2im(&dcols, batch, in_c, in_h, in_w, k, out_h, out_w);
                }
            }
            (&Op::Pool { .. }, OpCache::Pool { argmax }) => {
                if i > 0 {
                    delta = unpool(&delta, argmax, plan.in_len);
                }
            }
            _ => unreachable!("trace does not match the layer plan"),
        }
    }
    Ok(GradVector(grad))
}

fn im2col(
    x: &Array2<f64>,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<f64> {
    let batch = x.nrows();
    let width = in_c * k * k;
    let mut cols = Array2::<f64>::zeros((batch * out_h * out_w, width));
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    let sample_len = in_c * in_h * in_w;
    for b in 0..batch {
        let xb = &src[b * sample_len..(b + 1) * sample_len];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = ((b * out_h + oy) * out_w + ox) * width;
                let mut j = row;
                for ic in 0..in_c {
                    for ky in 0..k {
                        let base = ic * in_h * in_w + (oy + ky) * in_w + ox;
                        dst[j..j + k].copy_from_slice(&xb[base..base + k]);
                        j += k;
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<f64> {
    let sample_len = in_c * in_h * in_w;
    let width = in_c * k * k;
    let mut dx = Array2::<f64>::zeros((batch, sample_len));
    let src = dcols.as_slice().expect("standard layout");
    let dst = dx.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        let db = &mut dst[b * sample_len..(b + 1) * sample_len];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut j = ((b * out_h + oy) * out_w + ox) * width;
                for ic in 0..in_c {
                    for ky in 0..k {
                        let base = ic * in_h * in_w + (oy + ky) * in_w + ox;
                        for (d, s) in db[base..base + k].iter_mut().zip(&src[j..j + k]) {
                            *d += s;
                        }
                        j += k;
                    }
                }
            }
        }
    }
    dx
}

/// `(B·P) x C` rows-per-position matrix to `B x (C·P)` channel-major rows.
fn channel_major(
    out: &Array2<f64>,
    batch: usize,
    channels: usize,
    positions: usize,
) -> Array2<f64> {
    let mut z = Array2::<f64>::zeros((batch, channels * positions));
    for b in 0..batch {
        for p in 0..positions {
            let row = out.row(b * positions + p);
            for c in 0..channels {
                z[[b, c * positions + p]] = row[c];
            }
        }
    }
    z
}

/// Inverse of [`channel_major`].
fn position_major(z: &Array2<f64>, batch: usize, channels: usize, positions: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((batch * positions, channels));
    for b in 0..batch {
        let row = z.row(b);
        for c in 0..channels {
            for p in 0..positions {
                out[[b * positions + p, c]] = row[c * positions + p];
            }
        }
    }
    out
}

fn max_pool(
    x: &Array2<f64>,
    channels: usize,
    size: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> (Array2<f64>, Vec<usize>) {
    let batch = x.nrows();
    let out_len = channels * out_h * out_w;
    let mut y = Array2::<f64>::zeros((batch, out_len));
    let mut argmax = vec![0; batch * out_len];
    for b in 0..batch {
        let xb = x.row(b);
        for c in 0..channels {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let o = (c * out_h + oy) * out_w + ox;
                    let mut best = usize::MAX;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = c * in_h * in_w + (oy * size + dy) * in_w + ox * size + dx;
                            if best == usize::MAX || xb[idx] > xb[best] {
                                best = idx;
                            }
                        }
                    }
                    y[[b, o]] = xb[best];
                    argmax[b * out_len + o] = best;
                }
            }
        }
    }
    (y, argmax)
}

fn unpool(delta: &Array2<f64>, argmax: &[usize], in_len: usize) -> Array2<f64> {
    let (batch, out_len) = delta.dim();
    let mut dx = Array2::<f64>::zeros((batch, in_len));
    for b in 0..batch {
        for o in 0..out_len {
            dx[[b, argmax[b * out_len + o]]] += delta[[b, o]];
        }
    }
    dx
}

/// One momentum step in place. Rejects non-finite gradients.
pub fn sgd_step(
    params: &mut ParamVector,
    grad: &GradVector,
    state: &mut MomentumState,
    lr: f64,
) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.velocity.len() {
        return Err(Error::Config(format!(
            "sgd step with {} parameters, {} gradient entries and {} velocity entries",
            params.len(),
            grad.len(),
            state.velocity.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    let mu = state.coefficient;
    for ((w, v), g) in params
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(grad.iter())
    {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Default segment boundary: `ceil(len / 2)`.
pub fn segment_boundary(len: usize) -> usize {
    len.div_ceil(2)
}

/// Splits at [`segment_boundary`].
pub fn split_segments(params: &[f64]) -> (&[f64], &[f64]) {
    params.split_at(segment_boundary(params.len()))
}

pub fn join_segments(first: &[f64], second: &[f64]) -> ParamVector {
    let mut joined = Vec::with_capacity(first.len() + second.len());
    joined.extend_from_slice(first);
    joined.extend_from_slice(second);
    ParamVector(joined)
}

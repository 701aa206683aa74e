//! Layer primitives with hand-written forward and backward passes.
//!
//! Convolutions go through im2col/col2im and a single GEMM per batch item.
//! Transposed ("fractionally strided") convolutions reuse the same pair of
//! transforms with their roles swapped.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LRELU_SLOPE: f32 = 0.2;
pub const INIT_STD: f32 = 0.02;
const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    LeakyRelu {
        slope: f32,
    },
    /// Channel-axis concatenation of all inputs.
    Concat,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Sigmoid,
    SoftmaxChannels,
    /// Per-item reshape (batch axis kept).
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn conv_transpose(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec::ConvTranspose {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn lrelu() -> Self {
        LayerSpec::LeakyRelu {
            slope: DEFAULT_LRELU_SLOPE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::ConvTranspose { .. } => "deconv",
            LayerSpec::BatchNorm { .. } => "bn",
            LayerSpec::LeakyRelu { .. } => "lrelu",
            LayerSpec::Concat => "concat",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::SoftmaxChannels => "softmax",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            }
            | LayerSpec::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if kernel < 1 || stride < 1 {
                    return bad(format!("{}: kernel and stride must be >= 1", self.kind()));
                }
                if in_channels == 0 || out_channels == 0 {
                    return bad(format!("{}: zero channels", self.kind()));
                }
                Ok(())
            }
            LayerSpec::BatchNorm { channels } if channels == 0 => bad("bn: zero channels".into()),
            LayerSpec::LeakyRelu { slope } if !(slope > 0.0 && slope < 1.0) => {
                bad(format!("lrelu slope {slope} outside (0, 1)"))
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => bad("dense: zero features".into()),
            _ => Ok(()),
        }
    }

    /// Output shape of one item given the item shapes of every input.
    pub fn output_shape(&self, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
        let shape_err = |msg: String| Err(Error::Shape(format!("{}: {msg}", self.kind())));
        if inputs.is_empty() {
            return shape_err("no inputs".into());
        }
        if !matches!(self, LayerSpec::Concat) && inputs.len() != 1 {
            return shape_err(format!("expects one input, got {}", inputs.len()));
        }
        let x = &inputs[0];
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if x.len() != 3 || x[0] != in_channels {
                    return shape_err(format!("input {x:?} is not [{in_channels}, h, w]"));
                }
                if x[1] + 2 * padding < kernel || x[2] + 2 * padding < kernel {
                    return shape_err(format!("kernel {kernel} larger than padded input {x:?}"));
                }
                Ok(vec![
                    out_channels,
                    (x[1] + 2 * padding - kernel) / stride + 1,
                    (x[2] + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if x.len() != 3 || x[0] != in_channels {
                    return shape_err(format!("input {x:?} is not [{in_channels}, h, w]"));
                }
                let full_h = (x[1] - 1) * stride + kernel;
                let full_w = (x[2] - 1) * stride + kernel;
                if full_h <= 2 * padding || full_w <= 2 * padding {
                    return shape_err("padding consumes the whole output".into());
                }
                Ok(vec![out_channels, full_h - 2 * padding, full_w - 2 * padding])
            }
            LayerSpec::BatchNorm { channels } => {
                if x.first() != Some(&channels) {
                    return shape_err(format!("input {x:?} does not have {channels} channels"));
                }
                Ok(x.clone())
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::Sigmoid | LayerSpec::SoftmaxChannels => Ok(x.clone()),
            LayerSpec::Concat => {
                let mut out = x.clone();
                for other in &inputs[1..] {
                    if other.len() != x.len() || other[1..] != x[1..] {
                        return shape_err(format!("spatial mismatch {x:?} vs {other:?}"));
                    }
                    out[0] += other[0];
                }
                Ok(out)
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let n: usize = x.iter().product();
                if n != in_features {
                    return shape_err(format!("input {x:?} has {n} features, expected {in_features}"));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Reshape { ref shape } => {
                let n: usize = x.iter().product();
                if n != shape.iter().product::<usize>() {
                    return shape_err(format!("cannot reshape {x:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }
}

/// A trainable tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Param::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    fn normal<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let mut p = Param::zeros(shape);
        let dist = Normal::new(0.0, std).expect("valid std");
        p.value.iter_mut().for_each(|x| *x = dist.sample(rng));
        p
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    cache: Option<BnCache>,
}

/// Instantiated layer: spec plus parameters and any per-layer cache.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Param>,
    pub bias: Option<Param>,
    pub bn: Option<BatchNormState>,
}

impl Layer {
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layer = Layer {
            spec: spec.clone(),
            weight: None,
            bias: None,
            bn: None,
        };
        match spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                layer.weight = Some(Param::normal(
                    &[out_channels, in_channels * kernel * kernel],
                    INIT_STD,
                    rng,
                ));
                layer.bias = Some(Param::zeros(&[out_channels]));
            }
            LayerSpec::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                layer.weight = Some(Param::normal(
                    &[in_channels, out_channels * kernel * kernel],
                    INIT_STD,
                    rng,
                ));
                layer.bias = Some(Param::zeros(&[out_channels]));
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                layer.weight = Some(Param::normal(&[out_features, in_features], INIT_STD, rng));
                layer.bias = Some(Param::zeros(&[out_features]));
            }
            LayerSpec::BatchNorm { channels } => {
                layer.bn = Some(BatchNormState {
                    gamma: Param::filled(&[channels], 1.0),
                    beta: Param::zeros(&[channels]),
                    running_mean: vec![0.0; channels],
                    running_var: vec![1.0; channels],
                    cache: None,
                });
            }
            _ => {}
        }
        Ok(layer)
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        let mut out = Vec::new();
        if let Some(w) = &self.weight {
            out.push(("weight", w));
        }
        if let Some(b) = &self.bias {
            out.push(("bias", b));
        }
        if let Some(bn) = &self.bn {
            out.push(("gamma", &bn.gamma));
            out.push(("beta", &bn.beta));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.weight {
            out.push(("weight", w));
        }
        if let Some(b) = &mut self.bias {
            out.push(("bias", b));
        }
        if let Some(bn) = &mut self.bn {
            out.push(("gamma", &mut bn.gamma));
            out.push(("beta", &mut bn.beta));
        }
        out
    }

    /// Forward pass; in train mode batch norm records its cache and
    /// updates running statistics.
    pub fn forward(&mut self, inputs: &[&Tensor], out_item: &[usize], mode: Mode) -> Result<Tensor> {
        if let Some(bn) = self.bn.as_mut() {
            if mode == Mode::Train {
                return Ok(batch_norm_train(bn, inputs[0]));
            }
            bn.cache = None;
        }
        self.infer(inputs, out_item)
    }

    /// Forward pass that never mutates the layer (batch norm uses running statistics).
    pub fn infer(&self, inputs: &[&Tensor], out_item: &[usize]) -> Result<Tensor> {
        let x = inputs[0];
        let batch = x.batch();
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(out_item);
        Ok(match self.spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (_, _, h, w) = x.dims4();
                let geom = Geometry::new(in_channels, h, w, kernel, stride, padding);
                let mut out = Tensor::zeros(&out_shape);
                let weight = &self.weight.as_ref().expect("conv weight").value;
                let bias = &self.bias.as_ref().expect("conv bias").value;
                let mut cols = vec![0.0; geom.cols_len()];
                let plane = geom.out_h * geom.out_w;
                for b in 0..batch {
                    im2col(x.item(b), &geom, &mut cols);
                    let y = out.item_mut(b);
                    for (c, chunk) in y.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bias[c]);
                    }
                    gemm(out_channels, geom.rows(), plane, weight, false, &cols, false, y, 1.0);
                }
                out
            }
            LayerSpec::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (_, _, h, w) = x.dims4();
                // The output of this layer is the "input" of the adjoint convolution.
                let geom = Geometry::new(out_channels, out_item[1], out_item[2], kernel, stride, padding);
                assert_eq!((geom.out_h, geom.out_w), (h, w));
                let weight = &self.weight.as_ref().expect("deconv weight").value;
                let bias = &self.bias.as_ref().expect("deconv bias").value;
                let mut out = Tensor::zeros(&out_shape);
                let mut cols = vec![0.0; geom.cols_len()];
                let plane = out_item[1] * out_item[2];
                for b in 0..batch {
                    gemm(geom.rows(), in_channels, h * w, weight, true, x.item(b), false, &mut cols, 0.0);
                    let y = out.item_mut(b);
                    for (c, chunk) in y.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bias[c]);
                    }
                    col2im(&cols, &geom, y);
                }
                out
            }
            LayerSpec::BatchNorm { .. } => {
                let bn = self.bn.as_ref().expect("bn state");
                let (b, c, h, w) = x.dims4();
                let plane = h * w;
                let mut out = x.clone();
                for i in 0..b {
                    let item = out.item_mut(i);
                    for ch in 0..c {
                        let scale = bn.gamma.value[ch] / (bn.running_var[ch] + BN_EPS).sqrt();
                        let shift = bn.beta.value[ch] - bn.running_mean[ch] * scale;
                        for v in &mut item[ch * plane..(ch + 1) * plane] {
                            *v = *v * scale + shift;
                        }
                    }
                }
                out
            }
            LayerSpec::LeakyRelu { slope } => {
                let mut out = x.clone();
                out.data_mut().iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v *= slope
                    }
                });
                out
            }
            LayerSpec::Sigmoid => {
                let mut out = x.clone();
                out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
                out
            }
            LayerSpec::SoftmaxChannels => softmax_channels(x),
            LayerSpec::Concat => {
                let mut acc = inputs[0].clone();
                for other in &inputs[1..] {
                    acc = Tensor::concat_channels(&acc, other)?;
                }
                acc
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let weight = &self.weight.as_ref().expect("dense weight").value;
                let bias = &self.bias.as_ref().expect("dense bias").value;
                let mut out = Tensor::zeros(&out_shape);
                for row in out.data_mut().chunks_mut(out_features) {
                    row.copy_from_slice(bias);
                }
                gemm(batch, in_features, out_features, x.data(), false, weight, true, out.data_mut(), 1.0);
                out
            }
            LayerSpec::Reshape { .. } => x.clone().reshape(&out_shape)?,
        })
    }

    /// Backward pass. Accumulates parameter gradients and returns one
    /// gradient per input.
    pub fn backward(&mut self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let batch = x.batch();
        Ok(match self.spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (_, _, h, w) = x.dims4();
                let geom = Geometry::new(in_channels, h, w, kernel, stride, padding);
                let plane = geom.out_h * geom.out_w;
                let rows = geom.rows();
                let weight = self.weight.as_mut().expect("conv weight");
                let bias = self.bias.as_mut().expect("conv bias");
                let mut dx = Tensor::zeros_like(x);
                let mut cols = vec![0.0; geom.cols_len()];
                let mut dcols = vec![0.0; geom.cols_len()];
                for b in 0..batch {
                    let g = grad_out.item(b);
                    for (c, chunk) in g.chunks(plane).enumerate() {
                        bias.grad[c] += chunk.iter().sum::<f32>();
                    }
                    im2col(x.item(b), &geom, &mut cols);
                    gemm(out_channels, plane, rows, g, false, &cols, true, &mut weight.grad, 1.0);
                    gemm(rows, out_channels, plane, &weight.value, true, g, false, &mut dcols, 0.0);
                    col2im(&dcols, &geom, dx.item_mut(b));
                }
                vec![dx]
            }
            LayerSpec::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (_, _, h, w) = x.dims4();
                let (_, _, oh, ow) = output.dims4();
                let geom = Geometry::new(out_channels, oh, ow, kernel, stride, padding);
                let rows = geom.rows();
                let weight = self.weight.as_mut().expect("deconv weight");
                let bias = self.bias.as_mut().expect("deconv bias");
                let mut dx = Tensor::zeros_like(x);
                let mut dcols = vec![0.0; geom.cols_len()];
                for b in 0..batch {
                    let g = grad_out.item(b);
                    for (c, chunk) in g.chunks(oh * ow).enumerate() {
                        bias.grad[c] += chunk.iter().sum::<f32>();
                    }
                    im2col(g, &geom, &mut dcols);
                    gemm(in_channels, rows, h * w, &weight.value, false, &dcols, false, dx.item_mut(b), 0.0);
                    gemm(in_channels, h * w, rows, x.item(b), false, &dcols, true, &mut weight.grad, 1.0);
                }
                vec![dx]
            }
            LayerSpec::BatchNorm { .. } => {
                let bn = self.bn.as_mut().expect("bn state");
                vec![batch_norm_backward(bn, x, grad_out)]
            }
            LayerSpec::LeakyRelu { slope } => {
                let mut dx = grad_out.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v < 0.0 {
                        *d *= slope;
                    }
                }
                vec![dx]
            }
            LayerSpec::Sigmoid => {
                let mut dx = grad_out.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(output.data()) {
                    *d *= y * (1.0 - y);
                }
                vec![dx]
            }
            LayerSpec::SoftmaxChannels => {
                let (b, c, h, w) = output.dims4();
                let plane = h * w;
                let mut dx = grad_out.clone();
                for i in 0..b {
                    let y = output.item(i);
                    let g = grad_out.item(i);
                    let d = dx.item_mut(i);
                    for p in 0..plane {
                        let dot: f32 = (0..c).map(|ch| y[ch * plane + p] * g[ch * plane + p]).sum();
                        for ch in 0..c {
                            let k = ch * plane + p;
                            d[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                vec![dx]
            }
            LayerSpec::Concat => {
                let mut grads = Vec::with_capacity(inputs.len());
                let mut rest = grad_out.clone();
                for (i, inp) in inputs.iter().enumerate() {
                    if i + 1 == inputs.len() {
                        grads.push(rest.clone());
                        break;
                    }
                    let (head, tail) = rest.split_channels(inp.shape()[1])?;
                    grads.push(head);
                    rest = tail;
                }
                grads
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let weight = self.weight.as_mut().expect("dense weight");
                let bias = self.bias.as_mut().expect("dense bias");
                for row in grad_out.data().chunks(out_features) {
                    for (bg, g) in bias.grad.iter_mut().zip(row) {
                        *bg += g;
                    }
                }
                gemm(out_features, batch, in_features, grad_out.data(), true, x.data(), false, &mut weight.grad, 1.0);
                let mut dx = Tensor::zeros_like(x);
                gemm(batch, out_features, in_features, grad_out.data(), false, &weight.value, false, dx.data_mut(), 0.0);
                vec![dx]
            }
            LayerSpec::Reshape { .. } => vec![grad_out.clone().reshape(x.shape())?],
        })
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the channel axis, independently per pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = x.clone();
    for i in 0..b {
        let item = out.item_mut(i);
        for p in 0..plane {
            let mut max = f32::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(item[ch * plane + p]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (item[ch * plane + p] - max).exp();
                item[ch * plane + p] = e;
                sum += e;
            }
            for ch in 0..c {
                item[ch * plane + p] /= sum;
            }
        }
    }
    out
}

fn batch_norm_train(bn: &mut BatchNormState, x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let plane = h * w;
    let n = (b * plane) as f64;
    let mut out = Tensor::zeros_like(x);
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for i in 0..b {
            sum += x.item(i)[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / n;
        let mut sq = 0.0f64;
        for i in 0..b {
            sq += x.item(i)[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>();
        }
        let var = sq / n;
        let istd = 1.0 / (var + BN_EPS as f64).sqrt();
        inv_std[ch] = istd as f32;
        let (g, be) = (bn.gamma.value[ch], bn.beta.value[ch]);
        for i in 0..b {
            let base = i * c * plane + ch * plane;
            for p in 0..plane {
                let xh = ((x.data()[base + p] as f64 - mean) * istd) as f32;
                x_hat[base + p] = xh;
                out.data_mut()[base + p] = g * xh + be;
            }
        }
        let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
        bn.running_mean[ch] = (1.0 - BN_MOMENTUM) * bn.running_mean[ch] + BN_MOMENTUM * mean as f32;
        bn.running_var[ch] = (1.0 - BN_MOMENTUM) * bn.running_var[ch] + BN_MOMENTUM * unbiased as f32;
    }
    bn.cache = Some(BnCache { x_hat, inv_std });
    out
}

fn batch_norm_backward(bn: &mut BatchNormState, x: &Tensor, grad_out: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let plane = h * w;
    let mut dx = Tensor::zeros_like(x);
    match &bn.cache {
        Some(cache) => {
            let n = (b * plane) as f64;
            for ch in 0..c {
                let mut sum_g = 0.0f64;
                let mut sum_gx = 0.0f64;
                for i in 0..b {
                    let base = i * c * plane + ch * plane;
                    for p in 0..plane {
                        let g = grad_out.data()[base + p] as f64;
                        sum_g += g;
                        sum_gx += g * cache.x_hat[base + p] as f64;
                    }
                }
                bn.gamma.grad[ch] += sum_gx as f32;
                bn.beta.grad[ch] += sum_g as f32;
                // The three terms nearly cancel; combine them in f64.
                let k = (bn.gamma.value[ch] * cache.inv_std[ch]) as f64 / n;
                for i in 0..b {
                    let base = i * c * plane + ch * plane;
                    for p in 0..plane {
                        let g = grad_out.data()[base + p] as f64;
                        let xh = cache.x_hat[base + p] as f64;
                        dx.data_mut()[base + p] = (k * (n * g - sum_g - xh * sum_gx)) as f32;
                    }
                }
            }
        }
        None => {
            // Eval-mode forward: affine map with running statistics.
            for ch in 0..c {
                let istd = 1.0 / (bn.running_var[ch] + BN_EPS).sqrt();
                let scale = bn.gamma.value[ch] * istd;
                for i in 0..b {
                    let base = i * c * plane + ch * plane;
                    for p in 0..plane {
                        let g = grad_out.data()[base + p];
                        let xh = (x.data()[base + p] - bn.running_mean[ch]) * istd;
                        bn.gamma.grad[ch] += g * xh;
                        bn.beta.grad[ch] += g;
                        dx.data_mut()[base + p] = g * scale;
                    }
                }
            }
        }
    }
    dx
}

/// Sliding-window geometry of a convolution over a `channels×h×w` input.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Geometry {
            channels,
            h,
            w,
            kernel,
            stride,
            padding,
            out_h: (h + 2 * padding - kernel) / stride + 1,
            out_w: (w + 2 * padding - kernel) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols_len(&self) -> usize {
        self.rows() * self.out_h * self.out_w
    }
}

fn im2col(input: &[f32], g: &Geometry, cols: &mut [f32]) {
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix >= 0 && ix < g.w as isize {
                            src_row[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image.
fn col2im(cols: &[f32], g: &Geometry, out: &mut [f32]) {
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let dst = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn lrelu_definition() {
        let layer = Layer::new(LayerSpec::lrelu(), &mut rng()).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![-1.0, 2.0]).unwrap();
        let y = layer.infer(&[&x], &[2]).unwrap();
        assert!((y.data()[0] + 0.2).abs() < 1e-7);
        assert_eq!(y.data()[1], 2.0);
    }

    #[test]
    fn identity_one_by_one_conv() {
        let mut layer = Layer::new(LayerSpec::conv(3, 3, 1, 1, 0), &mut rng()).unwrap();
        let w = layer.weight.as_mut().unwrap();
        w.value.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..3 {
            w.value[c * 3 + c] = 1.0;
        }
        let x = Tensor::from_vec(&[2, 3, 4, 5], (0..120).map(|v| (v as f32 * 0.1).sin()).collect()).unwrap();
        let y = layer.infer(&[&x], &[3, 4, 5]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_summation() {
        let spec = LayerSpec::conv(2, 3, 3, 2, 1);
        let layer = Layer::new(spec.clone(), &mut rng()).unwrap();
        let out_item = spec.output_shape(&[vec![2, 5, 6]]).unwrap();
        assert_eq!(out_item, vec![3, 3, 3]);
        let x = Tensor::from_vec(&[1, 2, 5, 6], (0..60).map(|v| (v as f32 * 0.7).cos()).collect()).unwrap();
        let y = layer.infer(&[&x], &out_item).unwrap();
        let w = &layer.weight.as_ref().unwrap().value;
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                    s += w[o * 18 + c * 9 + ky * 3 + kx] * x.data()[c * 30 + iy as usize * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[o * 9 + oy * 3 + ox];
                    assert!((got - s).abs() < 1e-6, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn deconv_doubles_resolution() {
        let spec = LayerSpec::conv_transpose(4, 2, 4, 2, 1);
        assert_eq!(spec.output_shape(&[vec![4, 8, 8]]).unwrap(), vec![2, 16, 16]);
        let down = LayerSpec::conv(2, 4, 4, 2, 1);
        assert_eq!(down.output_shape(&[vec![2, 16, 16]]).unwrap(), vec![4, 8, 8]);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut layer = Layer::new(LayerSpec::BatchNorm { channels: 3 }, &mut rng()).unwrap();
        let x = Tensor::from_vec(
            &[4, 3, 2, 2],
            (0..48).map(|v| 5.0 + 3.0 * (v as f32 * 1.3).sin()).collect(),
        )
        .unwrap();
        let y = layer.forward(&[&x], &[3, 2, 2], Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.item(b)[c * 4..(c + 1) * 4].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[2, 5, 3, 3], (0..90).map(|v| (v as f32 * 0.91).sin() * 8.0).collect()).unwrap();
        let y = softmax_channels(&x);
        for b in 0..2 {
            for p in 0..9 {
                let s: f32 = (0..5).map(|c| y.item(b)[c * 9 + p]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(LayerSpec::LeakyRelu { slope: 1.5 }.validate().is_err());
        assert!(LayerSpec::conv(1, 1, 0, 1, 0).validate().is_err());
        assert!(LayerSpec::conv(1, 1, 3, 0, 0).validate().is_err());
        assert!(LayerSpec::Concat.output_shape(&[vec![2, 4, 4], vec![3, 5, 4]]).is_err());
    }
}

//! Differentiable layer primitives: 3x3 convolution, 2x2 max pooling,
//! ReLU, fully connected, dropout, and the softmax cross-entropy head.
//!
//! Every backward routine is the exact adjoint of its forward and is
//! checked against central finite differences (see `gradcheck`).

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One layer in a stage stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3x3 convolution, stride 1, padding 1; preserves the spatial size.
    Conv3 {
        in_channels: usize,
        out_channels: usize,
    },
    /// 2x2 max pooling, stride 2; halves each spatial side (even sides only).
    MaxPool2,
    Relu,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        rate: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Predicts the output shape of a layer stack applied to `input` without
/// running it. This is the shape algebra the model builder validates
/// against, so it must match the kernels exactly.
pub fn output_shape(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        shape = match *layer {
            LayerSpec::Conv3 {
                in_channels,
                out_channels,
            } => {
                if shape.len() != 3 || shape[0] != in_channels {
                    return Err(Error::Shape(format!(
                        "layer {i} (conv3): expected [{in_channels}, H, W], got {shape:?}"
                    )));
                }
                vec![out_channels, shape[1], shape[2]]
            }
            LayerSpec::MaxPool2 => {
                if shape.len() != 3 {
                    return Err(Error::Shape(format!(
                        "layer {i} (maxpool2): expected rank-3 input, got {shape:?}"
                    )));
                }
                if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "layer {i} (maxpool2): spatial sides must be even, got {shape:?}"
                    )));
                }
                vec![shape[0], shape[1] / 2, shape[2] / 2]
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => shape,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let n: usize = shape.iter().product();
                if n != in_features {
                    return Err(Error::Shape(format!(
                        "layer {i} (linear): expected {in_features} input values, got {shape:?}"
                    )));
                }
                vec![out_features]
            }
        };
    }
    Ok(shape)
}

// ---------------------------------------------------------------------------
// Dense kernels. All loops accumulate in a fixed order so results are
// bit-reproducible.
// ---------------------------------------------------------------------------

/// out = a @ b, with a: m x k, b: k x n, all row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        row.fill(0.0);
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[kk * n..kk * n + n];
            for (r, &bv) in row.iter_mut().zip(b_row) {
                *r += aik * bv;
            }
        }
    }
}

/// out = a @ b^T, with a: m x p, b: n x p (row-major rows are dotted).
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        let a_row = &a[i * p..(i + 1) * p];
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(a_row, &b[j * p..(j + 1) * p]);
        }
    }
}

/// out = a^T @ b, with a: p x m, b: p x n.
pub(crate) fn matmul_at(a: &[f64], b: &[f64], p: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_mut(n).enumerate() {
        row.fill(0.0);
        for kk in 0..p {
            let aik = a[kk * m + i];
            let b_row = &b[kk * n..kk * n + n];
            for (r, &bv) in row.iter_mut().zip(b_row) {
                *r += aik * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators; the fixed summation
/// order keeps results reproducible while still vectorizing.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        let (a8, b8) = (&a[i..i + 8], &b[i..i + 8]);
        for l in 0..8 {
            acc[l] += a8[l] * b8[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Unrolls zero-padded 3x3 patches into a (C*9) x (H*W) column matrix.
fn im2col3(input: &Tensor) -> Vec<f64> {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let data = input.data();
    let hw = h * w;
    let mut cols = vec![0.0; c_in * 9 * hw];
    for c in 0..c_in {
        let chan = &data[c * hw..(c + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut cols[(c * 9 + dy * 3 + dx) * hw..(c * 9 + dy * 3 + dx + 1) * hw];
                // source x = x + dx - 1, valid for x in [x_lo, x_hi)
                let x_lo = 1usize.saturating_sub(dx);
                let x_hi = (w + 1 - dx).min(w);
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let src = &chan[(sy - 1) * w..sy * w];
                    row[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&src[x_lo + dx - 1..x_hi + dx - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col3`: scatter-adds column gradients back onto the
/// zero-padded input positions.
fn col2im3(cols: &[f64], c_in: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut grad = Tensor::zeros(&[c_in, h, w]);
    let gdata = grad.data_mut();
    for c in 0..c_in {
        let chan = &mut gdata[c * hw..(c + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &cols[(c * 9 + dy * 3 + dx) * hw..(c * 9 + dy * 3 + dx + 1) * hw];
                let x_lo = 1usize.saturating_sub(dx);
                let x_hi = (w + 1 - dx).min(w);
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let dst = &mut chan[(sy - 1) * w + x_lo + dx - 1..(sy - 1) * w + x_hi + dx - 1];
                    let src = &row[y * w + x_lo..y * w + x_hi];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    grad
}

fn check_conv_shapes(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if input.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "conv3: input must be [C, H, W], got {:?}",
            input.shape()
        )));
    }
    if weights.shape().len() != 4 || weights.shape()[2] != 3 || weights.shape()[3] != 3 {
        return Err(Error::Shape(format!(
            "conv3: weights must be [C_out, C_in, 3, 3], got {:?}",
            weights.shape()
        )));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = weights.shape()[0];
    if weights.shape()[1] != c_in {
        return Err(Error::Shape(format!(
            "conv3: weights expect {} input channels, input has {}",
            weights.shape()[1],
            c_in
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "conv3: bias must be [{}], got {:?}",
            c_out,
            bias.shape()
        )));
    }
    Ok((c_in, c_out, h, w))
}

/// 3x3 convolution, stride 1, padding 1.
pub fn conv3_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, c_out, h, w) = check_conv_shapes(input, weights, bias)?;
    let hw = h * w;
    let cols = im2col3(input);
    let mut out = Tensor::zeros(&[c_out, h, w]);
    matmul(weights.data(), &cols, c_out, c_in * 9, hw, out.data_mut());
    let odata = out.data_mut();
    for (o, &b) in bias.data().iter().enumerate() {
        for v in &mut odata[o * hw..(o + 1) * hw] {
            *v += b;
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through `conv3_forward`.
pub fn conv3_backward(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c_out = weights.shape()[0];
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if upstream.shape() != [c_out, h, w] {
        return Err(Error::Shape(format!(
            "conv3 backward: upstream must be [{c_out}, {h}, {w}], got {:?}",
            upstream.shape()
        )));
    }
    if weights.shape()[1] != c_in {
        return Err(Error::Shape(format!(
            "conv3 backward: weights expect {} input channels, input has {}",
            weights.shape()[1],
            c_in
        )));
    }
    let hw = h * w;
    let k = c_in * 9;

    let mut grad_bias = Tensor::zeros(&[c_out]);
    for (o, g) in grad_bias.data_mut().iter_mut().enumerate() {
        *g = upstream.data()[o * hw..(o + 1) * hw].iter().sum();
    }

    let cols = im2col3(input);
    let mut grad_weights = Tensor::zeros(weights.shape());
    matmul_bt(
        upstream.data(),
        &cols,
        c_out,
        hw,
        k,
        grad_weights.data_mut(),
    );

    let mut grad_cols = vec![0.0; k * hw];
    matmul_at(weights.data(), upstream.data(), c_out, k, hw, &mut grad_cols);
    let grad_input = col2im3(&grad_cols, c_in, h, w);

    Ok((grad_input, grad_weights, grad_bias))
}

/// 2x2 max pooling with stride 2. The returned mask records, per output
/// cell, which of the four window positions won (ties go to the first in
/// row-major order) so the backward pass can route gradients.
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<u8>)> {
    if input.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "maxpool2: input must be [C, H, W], got {:?}",
            input.shape()
        )));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2: spatial sides must be even, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut mask = vec![0u8; c * oh * ow];
    let data = input.data();
    let odata = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = (ch * h + 2 * y) * w + 2 * x;
                let mut best = data[base];
                let mut win = 0u8;
                for (pos, off) in [1usize, w, w + 1].iter().enumerate() {
                    let v = data[base + off];
                    if v > best {
                        best = v;
                        win = pos as u8 + 1;
                    }
                }
                odata[(ch * oh + y) * ow + x] = best;
                mask[(ch * oh + y) * ow + x] = win;
            }
        }
    }
    Ok((out, mask))
}

/// Routes upstream gradients to the positions recorded by the pool mask.
pub fn maxpool2_backward(mask: &[u8], in_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    if upstream.shape() != [c, oh, ow] {
        return Err(Error::Shape(format!(
            "maxpool2 backward: upstream must be [{c}, {oh}, {ow}], got {:?}",
            upstream.shape()
        )));
    }
    let mut grad = Tensor::zeros(in_shape);
    let gdata = grad.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let idx = (ch * oh + y) * ow + x;
                let win = mask[idx] as usize;
                let base = (ch * h + 2 * y) * w + 2 * x;
                let off = match win {
                    0 => 0,
                    1 => 1,
                    2 => w,
                    _ => w + 1,
                };
                gdata[base + off] += upstream.data()[idx];
            }
        }
    }
    Ok(grad)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Tensor {
    let mut grad = upstream.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

/// Fully connected layer. Inputs of higher rank are read flattened.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if weights.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "linear: weights must be [out, in], got {:?}",
            weights.shape()
        )));
    }
    let (out_f, in_f) = (weights.shape()[0], weights.shape()[1]);
    if input.numel() != in_f {
        return Err(Error::Shape(format!(
            "linear: expected {} input values, got shape {:?}",
            in_f,
            input.shape()
        )));
    }
    if bias.shape() != [out_f] {
        return Err(Error::Shape(format!(
            "linear: bias must be [{}], got {:?}",
            out_f,
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[out_f]);
    for (o, v) in out.data_mut().iter_mut().enumerate() {
        *v = bias.data()[o] + dot(&weights.data()[o * in_f..(o + 1) * in_f], input.data());
    }
    Ok(out)
}

pub fn linear_backward(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (out_f, in_f) = (weights.shape()[0], weights.shape()[1]);
    if upstream.numel() != out_f {
        return Err(Error::Shape(format!(
            "linear backward: upstream must have {} values, got {:?}",
            out_f,
            upstream.shape()
        )));
    }
    let mut grad_input = Tensor::zeros(input.shape());
    let gi = grad_input.data_mut();
    for (o, &g) in upstream.data().iter().enumerate() {
        let w_row = &weights.data()[o * in_f..(o + 1) * in_f];
        for (gv, &wv) in gi.iter_mut().zip(w_row) {
            *gv += g * wv;
        }
    }
    let mut grad_weights = Tensor::zeros(weights.shape());
    let gw = grad_weights.data_mut();
    for (o, &g) in upstream.data().iter().enumerate() {
        let row = &mut gw[o * in_f..(o + 1) * in_f];
        for (r, &x) in row.iter_mut().zip(input.data()) {
            *r = g * x;
        }
    }
    let grad_bias = Tensor::from_vec(&[out_f], upstream.data().to_vec())?;
    Ok((grad_input, grad_weights, grad_bias))
}

/// Inverted dropout. In training mode each unit survives with probability
/// `1 - rate` and survivors are scaled by `1/(1 - rate)` so the expected
/// output equals the input. Returns the applied per-unit scale factors for
/// the backward pass (`None` when the layer acted as identity).
pub fn dropout<R: Rng>(
    input: &Tensor,
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mut out = input.clone();
    let mut mask = vec![0.0; input.numel()];
    for (v, m) in out.data_mut().iter_mut().zip(mask.iter_mut()) {
        if rng.gen::<f64>() < rate {
            *v = 0.0;
        } else {
            *v *= keep_scale;
            *m = keep_scale;
        }
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward(scale_mask: &Option<Vec<f64>>, upstream: &Tensor) -> Tensor {
    match scale_mask {
        None => upstream.clone(),
        Some(mask) => {
            let mut grad = upstream.clone();
            for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
                *g *= m;
            }
            grad
        }
    }
}

/// Softmax cross-entropy over a two-logit output. Returns the loss and the
/// gradient with respect to the logits; the gradient components sum to zero.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if logits.numel() != 2 {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy: expected 2 logits, got shape {:?}",
            logits.shape()
        )));
    }
    if label > 1 {
        return Err(Error::Config(format!(
            "label must be 0 or 1, got {label}"
        )));
    }
    let z = logits.data();
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let lse = m + (e0 + e1).ln();
    let loss = lse - z[label];
    let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
    let mut grad = Tensor::zeros(&[2]);
    grad.data_mut()[0] = p[0] - if label == 0 { 1.0 } else { 0.0 };
    grad.data_mut()[1] = p[1] - if label == 1 { 1.0 } else { 0.0 };
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Stages: named sequences of layers with parameters in a ParamStore.
// ---------------------------------------------------------------------------

/// A named stack of layers (one FCN or FC block of the network).
#[derive(Debug, Clone)]
pub struct Stage {
    pub id: String,
    pub layers: Vec<LayerSpec>,
}

/// What each layer saves during the forward pass for its backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor },
    Pool { mask: Vec<u8>, in_shape: Vec<usize> },
    Relu { input: Tensor },
    Linear { input: Tensor },
    Dropout { scale_mask: Option<Vec<f64>> },
}

pub type StageCache = Vec<LayerCache>;

impl Stage {
    pub fn new(id: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        Stage {
            id: id.into(),
            layers,
        }
    }

    /// Parameter names for layer `i`, if it has parameters.
    fn param_names(&self, i: usize) -> Option<(String, String)> {
        match self.layers[i] {
            LayerSpec::Conv3 { .. } => Some((
                format!("{}.conv{}.w", self.id, i),
                format!("{}.conv{}.b", self.id, i),
            )),
            LayerSpec::Linear { .. } => Some((
                format!("{}.fc{}.w", self.id, i),
                format!("{}.fc{}.b", self.id, i),
            )),
            _ => None,
        }
    }

    /// All parameter names of this stage in declaration order.
    pub fn all_param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .filter_map(|i| self.param_names(i))
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Parameter names with their shapes, in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv3 {
                    in_channels,
                    out_channels,
                } => {
                    let (wn, bn) = self.param_names(i).unwrap();
                    out.push((wn, vec![out_channels, in_channels, 3, 3]));
                    out.push((bn, vec![out_channels]));
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let (wn, bn) = self.param_names(i).unwrap();
                    out.push((wn, vec![out_features, in_features]));
                    out.push((bn, vec![out_features]));
                }
                _ => {}
            }
        }
        out
    }

    /// Creates this stage's parameters. Weights are drawn uniformly from
    /// [-a, a] with a = sqrt(6 / (fan_in + fan_out)); biases start at zero.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv3 {
                    in_channels,
                    out_channels,
                } => {
                    let (wn, bn) = self.param_names(i).unwrap();
                    let a = (6.0 / ((in_channels * 9 + out_channels * 9) as f64)).sqrt();
                    let w = random_uniform(&[out_channels, in_channels, 3, 3], a, rng);
                    store.insert(&wn, w)?;
                    store.insert(&bn, Tensor::zeros(&[out_channels]))?;
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let (wn, bn) = self.param_names(i).unwrap();
                    let a = (6.0 / ((in_features + out_features) as f64)).sqrt();
                    let w = random_uniform(&[out_features, in_features], a, rng);
                    store.insert(&wn, w)?;
                    store.insert(&bn, Tensor::zeros(&[out_features]))?;
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Config(format!(
                            "stage {}: dropout rate must be in [0, 1), got {rate}",
                            self.id
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn forward<R: Rng>(
        &self,
        store: &ParamStore,
        input: Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor, StageCache)> {
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv3 { .. } => {
                    let (wn, bn) = self.param_names(i).unwrap();
                    let y = conv3_forward(&x, &store.get(&wn)?.value, &store.get(&bn)?.value)?;
                    cache.push(LayerCache::Conv { input: x });
                    y
                }
                LayerSpec::MaxPool2 => {
                    let (y, mask) = maxpool2_forward(&x)?;
                    cache.push(LayerCache::Pool {
                        mask,
                        in_shape: x.shape().to_vec(),
                    });
                    y
                }
                LayerSpec::Relu => {
                    let y = relu(&x);
                    cache.push(LayerCache::Relu { input: x });
                    y
                }
                LayerSpec::Linear { .. } => {
                    let (wn, bn) = self.param_names(i).unwrap();
                    let y = linear(&x, &store.get(&wn)?.value, &store.get(&bn)?.value)?;
                    cache.push(LayerCache::Linear { input: x });
                    y
                }
                LayerSpec::Dropout { rate } => {
                    let (y, scale_mask) = dropout(&x, rate, rng, mode)?;
                    cache.push(LayerCache::Dropout { scale_mask });
                    y
                }
            };
        }
        Ok((x, cache))
    }

    /// Backward pass; accumulates parameter gradients into the store and
    /// returns the gradient with respect to the stage input.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &StageCache,
        upstream: Tensor,
    ) -> Result<Tensor> {
        if cache.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "stage {}: cache has {} entries for {} layers",
                self.id,
                cache.len(),
                self.layers.len()
            )));
        }
        let mut g = upstream;
        for i in (0..self.layers.len()).rev() {
            g = match (&self.layers[i], &cache[i]) {
                (LayerSpec::Conv3 { .. }, LayerCache::Conv { input }) => {
                    let (wn, bn) = self.param_names(i).unwrap();
                    let (gi, gw, gb) = conv3_backward(input, &store.get(&wn)?.value, &g)?;
                    store.accumulate_grad(&wn, &gw)?;
                    store.accumulate_grad(&bn, &gb)?;
                    gi
                }
                (LayerSpec::MaxPool2, LayerCache::Pool { mask, in_shape }) => {
                    maxpool2_backward(mask, in_shape, &g)?
                }
                (LayerSpec::Relu, LayerCache::Relu { input }) => relu_backward(input, &g),
                (LayerSpec::Linear { .. }, LayerCache::Linear { input }) => {
                    let (wn, bn) = self.param_names(i).unwrap();
                    let (gi, gw, gb) = linear_backward(input, &store.get(&wn)?.value, &g)?;
                    store.accumulate_grad(&wn, &gw)?;
                    store.accumulate_grad(&bn, &gb)?;
                    gi
                }
                (LayerSpec::Dropout { .. }, LayerCache::Dropout { scale_mask }) => {
                    dropout_backward(scale_mask, &g)
                }
                _ => {
                    return Err(Error::Shape(format!(
                        "stage {}: cache entry {} does not match layer",
                        self.id, i
                    )))
                }
            };
        }
        Ok(g)
    }
}

fn random_uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect::<Vec<_>>();
    Tensor::from_vec(shape, data).unwrap()
}

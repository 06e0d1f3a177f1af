//! Layers, networks, the forward pass, loss, and checkpoint I/O.
//!
//! Networks are layer sequences over a channels-last value layout: between
//! layers data always flows as `B x T x d` rows, with an optional spatial
//! extent `(H, W)` carried alongside when the rows are image positions
//! (`T = H * W`, `d` = channels). Conv2d lowers its input with im2col and
//! reuses the linear-layer kernels on the unfolded rows, so one gradient
//! code path serves both layer families.
//!
//! What gets cached during the forward pass depends only on trainability
//! flags, never the math: a layer's (lowered) input is stored exactly when
//! its weight is trainable, because only weight gradients consume it. ReLU
//! keeps a 1-byte sign mask and LayerNorm keeps its normalized values and
//! inverse stddev; both are backprop residue that exists in any mode and is
//! ledger-tagged separately from activation caches.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ledger::{AllocTag, MaskBuf};
use crate::rng::StreamRng;
use crate::tensor::{add_bias, matmul, unfold2d_tagged, Tensor};

/// Variance floor inside LayerNorm's inverse stddev.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPBF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear {
        d_in: usize,
        d_out: usize,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    LayerNorm {
        width: usize,
    },
    Relu,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        !matches!(self, LayerKind::Relu)
    }

    /// Width of the lowered input rows this layer consumes (the `d` of the
    /// cost model): Linear `d_in`, Conv2d `c_in * kH * kW`, LayerNorm its
    /// own width.
    pub fn lowered_in_width(&self) -> Option<usize> {
        match *self {
            LayerKind::Linear { d_in, .. } => Some(d_in),
            LayerKind::Conv2d {
                c_in, kernel: (kh, kw), ..
            } => Some(c_in * kh * kw),
            LayerKind::LayerNorm { width } => Some(width),
            LayerKind::Relu => None,
        }
    }

    /// Output row width (the `p` of the cost model).
    pub fn out_width(&self) -> Option<usize> {
        match *self {
            LayerKind::Linear { d_out, .. } => Some(d_out),
            LayerKind::Conv2d { c_out, .. } => Some(c_out),
            LayerKind::LayerNorm { width } => Some(width),
            LayerKind::Relu => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub(crate) weight: Option<Tensor>,
    pub(crate) bias: Option<Tensor>,
    pub weight_trainable: bool,
    pub bias_trainable: bool,
}

impl Layer {
    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

/// Which parameters start out trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// All weights and biases.
    Full,
    /// Biases only; weight gradients are never needed, so forward caches
    /// no activations.
    Bitfit,
    /// Only the last parametric layer (weight and bias).
    LinearProbe,
    /// Start fully trainable; callers flip flags themselves.
    Custom,
}

/// Identifies one parameter tensor. Ordering (layer ascending, weight
/// before bias) is the registry order used for noise draws and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamKey {
    pub layer: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKind {
    Weight,
    Bias,
}

impl ParamKey {
    pub fn name(&self) -> String {
        match self.kind {
            ParamKind::Weight => format!("layer{}.weight", self.layer),
            ParamKind::Bias => format!("layer{}.bias", self.layer),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    mode: Mode,
}

impl Network {
    /// Build and initialize a network. Weights draw truncated-normal
    /// entries scaled by 1/sqrt(fan_in) (LayerNorm gains start at one);
    /// biases start at zero. Draws happen in layer order, weight before
    /// bias, so initialization is a pure function of the stream.
    pub fn new(kinds: Vec<LayerKind>, mode: Mode, rng: &mut StreamRng) -> Result<Network> {
        let mut layers = Vec::with_capacity(kinds.len());
        for kind in kinds {
            let (weight, bias) = match kind {
                LayerKind::Linear { d_in, d_out } => {
                    if d_in == 0 || d_out == 0 {
                        return Err(Error::Parameter(
                            "linear dims must be positive".into(),
                        ));
                    }
                    let std = 1.0 / (d_in as f64).sqrt();
                    let mut w = Tensor::zeros(&[d_in, d_out]);
                    for v in w.data_mut() {
                        *v = std * rng.next_truncated_gaussian();
                    }
                    (Some(w), Some(Tensor::zeros(&[d_out])))
                }
                LayerKind::Conv2d {
                    c_in,
                    c_out,
                    kernel: (kh, kw),
                    stride: (sh, sw),
                    ..
                } => {
                    if c_in == 0 || c_out == 0 || kh == 0 || kw == 0 || sh == 0 || sw == 0 {
                        return Err(Error::Parameter(
                            "conv dims, kernel, and stride must be positive".into(),
                        ));
                    }
                    let d = c_in * kh * kw;
                    let std = 1.0 / (d as f64).sqrt();
                    let mut w = Tensor::zeros(&[d, c_out]);
                    for v in w.data_mut() {
                        *v = std * rng.next_truncated_gaussian();
                    }
                    (Some(w), Some(Tensor::zeros(&[c_out])))
                }
                LayerKind::LayerNorm { width } => {
                    if width == 0 {
                        return Err(Error::Parameter("layernorm width must be positive".into()));
                    }
                    let w = Tensor::from_vec(&[width], vec![1.0; width])?;
                    (Some(w), Some(Tensor::zeros(&[width])))
                }
                LayerKind::Relu => (None, None),
            };
            layers.push(Layer {
                kind,
                weight,
                bias,
                weight_trainable: false,
                bias_trainable: false,
            });
        }
        let mut net = Network { layers, mode };
        net.apply_mode(mode);
        Ok(net)
    }

    fn apply_mode(&mut self, mode: Mode) {
        self.mode = mode;
        let last_parametric = self
            .layers
            .iter()
            .rposition(|l| l.kind.has_params());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if !layer.kind.has_params() {
                layer.weight_trainable = false;
                layer.bias_trainable = false;
                continue;
            }
            let (w, b) = match mode {
                Mode::Full | Mode::Custom => (true, true),
                Mode::Bitfit => (false, true),
                Mode::LinearProbe => {
                    let on = Some(i) == last_parametric;
                    (on, on)
                }
            };
            layer.weight_trainable = w;
            layer.bias_trainable = b;
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Freeze every weight, leaving biases trainable. This is the phase
    /// boundary of two-phase training.
    pub fn freeze_weights(&mut self) {
        self.mode = Mode::Bitfit;
        for layer in &mut self.layers {
            layer.weight_trainable = false;
            layer.bias_trainable = layer.kind.has_params();
        }
    }

    /// Trainable parameter keys in registry order.
    pub fn trainable_params(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight_trainable && layer.weight.is_some() {
                keys.push(ParamKey {
                    layer: i,
                    kind: ParamKind::Weight,
                });
            }
            if layer.bias_trainable && layer.bias.is_some() {
                keys.push(ParamKey {
                    layer: i,
                    kind: ParamKind::Bias,
                });
            }
        }
        keys
    }

    /// All parameter keys in registry order, trainable or not.
    pub fn all_params(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.is_some() {
                keys.push(ParamKey {
                    layer: i,
                    kind: ParamKind::Weight,
                });
            }
            if layer.bias.is_some() {
                keys.push(ParamKey {
                    layer: i,
                    kind: ParamKind::Bias,
                });
            }
        }
        keys
    }

    pub fn param(&self, key: ParamKey) -> Result<&Tensor> {
        let layer = self
            .layers
            .get(key.layer)
            .ok_or_else(|| Error::Parameter(format!("no layer {}", key.layer)))?;
        let t = match key.kind {
            ParamKind::Weight => layer.weight.as_ref(),
            ParamKind::Bias => layer.bias.as_ref(),
        };
        t.ok_or_else(|| Error::Parameter(format!("layer {} has no {:?}", key.layer, key.kind)))
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Result<&mut Tensor> {
        let layer = self
            .layers
            .get_mut(key.layer)
            .ok_or_else(|| Error::Parameter(format!("no layer {}", key.layer)))?;
        let t = match key.kind {
            ParamKind::Weight => layer.weight.as_mut(),
            ParamKind::Bias => layer.bias.as_mut(),
        };
        t.ok_or_else(|| Error::Parameter(format!("layer {} has no {:?}", key.layer, key.kind)))
    }

    /// Walk input shapes through the net without computing, returning
    /// `(layer index, T, p, d)` for each parametric layer: the dims the
    /// cost model wants. `input_shape` is the per-run input shape without
    /// the batch axis: `[d]`, `[T, d]`, or `[C, H, W]`.
    pub fn layer_dims(&self, input_shape: &[usize]) -> Result<Vec<(usize, usize, usize, usize)>> {
        let (mut t, mut d, mut spatial) = match *input_shape {
            [d] => (1usize, d, None),
            [t, d] => (t, d, None),
            [c, h, w] => (h * w, c, Some((h, w))),
            ref s => {
                return Err(Error::Dimension(format!(
                    "input shape must have 1-3 dims, got {s:?}"
                )))
            }
        };
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Linear { d_in, d_out } => {
                    if d != d_in {
                        return Err(Error::Dimension(format!(
                            "layer {i}: linear expects width {d_in}, got {d}"
                        )));
                    }
                    out.push((i, t, d_out, d_in));
                    d = d_out;
                }
                LayerKind::Conv2d {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w) = spatial.ok_or_else(|| {
                        Error::Dimension(format!("layer {i}: conv input has no spatial extent"))
                    })?;
                    if d != c_in {
                        return Err(Error::Dimension(format!(
                            "layer {i}: conv expects {c_in} channels, got {d}"
                        )));
                    }
                    let oh = out_dim_checked(h, kernel.0, stride.0, padding.0, i)?;
                    let ow = out_dim_checked(w, kernel.1, stride.1, padding.1, i)?;
                    let t_out = oh * ow;
                    out.push((i, t_out, c_out, c_in * kernel.0 * kernel.1));
                    t = t_out;
                    d = c_out;
                    spatial = Some((oh, ow));
                }
                LayerKind::LayerNorm { width } => {
                    if d != width {
                        return Err(Error::Dimension(format!(
                            "layer {i}: layernorm expects width {width}, got {d}"
                        )));
                    }
                    out.push((i, t, width, width));
                }
                LayerKind::Relu => {}
            }
        }
        Ok(out)
    }
}

fn out_dim_checked(input: usize, k: usize, s: usize, p: usize, layer: usize) -> Result<usize> {
    let padded = input + 2 * p;
    if k == 0 || s == 0 || padded < k {
        return Err(Error::Dimension(format!(
            "layer {layer}: kernel {k} stride {s} invalid for padded extent {padded}"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Per-layer forward residue. What is present is a pure function of the
/// layer kind and its trainability flags.
#[derive(Debug)]
pub(crate) struct LayerRecord {
    /// Lowered input, present iff the layer's weight is trainable.
    pub(crate) activation: Option<Tensor>,
    /// ReLU sign mask (1 byte per element).
    pub(crate) relu_mask: Option<MaskBuf>,
    /// LayerNorm normalized values when the gain is frozen (otherwise they
    /// live in `activation`).
    pub(crate) norm_xhat: Option<Tensor>,
    /// LayerNorm per-row inverse stddev, `B x T`.
    pub(crate) norm_inv_std: Option<Tensor>,
    /// Spatial extent of the layer's input (conv backward folds into it).
    pub(crate) in_spatial: Option<(usize, usize)>,
    /// Row count of the layer's lowered input == row count of its output
    /// gradient.
    pub(crate) t_len: usize,
    /// Lowered input width (`d` in the cost model).
    pub(crate) in_width: usize,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub output: Tensor,
    pub(crate) records: Vec<LayerRecord>,
    pub(crate) batch: usize,
}

impl ForwardTrace {
    pub(crate) fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    /// Whether layer `i` cached its (lowered) input for weight gradients.
    pub fn activation_cached(&self, i: usize) -> bool {
        self.records
            .get(i)
            .map(|r| r.activation.is_some())
            .unwrap_or(false)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Channels-last view of image data: `B x C x H x W` -> `B x (H*W) x C`.
pub(crate) fn image_to_seq(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = match *x.shape() {
        [b, c, h, w] => (b, c, h, w),
        ref s => {
            return Err(Error::Dimension(format!(
                "expected rank 4 image, got {s:?}"
            )))
        }
    };
    let mut out = Tensor::zeros(&[b, h * w, c]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for pos in 0..h * w {
                od[(bi * h * w + pos) * c + ci] = xd[(bi * c + ci) * h * w + pos];
            }
        }
    }
    Ok(out)
}

/// Inverse of `image_to_seq`.
pub(crate) fn seq_to_image(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, t, c) = match *x.shape() {
        [b, t, c] => (b, t, c),
        ref s => {
            return Err(Error::Dimension(format!(
                "expected rank 3 rows, got {s:?}"
            )))
        }
    };
    if t != h * w {
        return Err(Error::Dimension(format!(
            "rows {t} do not tile {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for pos in 0..t {
                od[(bi * c + ci) * t + pos] = xd[(bi * t + pos) * c + ci];
            }
        }
    }
    Ok(out)
}

/// LayerNorm row statistics: writes normalized values into `xhat` and
/// returns per-row inverse stddev. Population variance, eps 1e-5.
fn layernorm_rows(x: &[f64], rows: usize, width: usize, xhat: &mut [f64], inv_std: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mut mean = 0.0;
        for v in row {
            mean += v;
        }
        mean /= width as f64;
        let mut var = 0.0;
        for v in row {
            let dv = v - mean;
            var += dv * dv;
        }
        var /= width as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        let out_row = &mut xhat[r * width..(r + 1) * width];
        for (o, v) in out_row.iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
    }
}

/// Run the network forward, recording exactly the residue each layer's
/// backward rule and (trainable) weight gradient will need. Outputs are
/// bitwise independent of trainability flags.
pub fn forward(net: &Network, x: &Tensor) -> Result<ForwardTrace> {
    // Normalize the input into rows + optional spatial extent.
    let (mut cur, mut spatial): (Tensor, Option<(usize, usize)>) = match x.rank() {
        2 => {
            let b = x.shape()[0];
            let d = x.shape()[1];
            (x.clone().reshape(&[b, 1, d])?, None)
        }
        3 => (x.clone(), None),
        4 => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            (image_to_seq(x)?, Some((h, w)))
        }
        _ => {
            return Err(Error::Dimension(format!(
                "network input must be rank 2-4, got {:?}",
                x.shape()
            )))
        }
    };
    let batch = cur.shape()[0];
    let mut records = Vec::with_capacity(net.layers.len());

    for (i, layer) in net.layers.iter().enumerate() {
        let (b, t, d) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
        let mut record = LayerRecord {
            activation: None,
            relu_mask: None,
            norm_xhat: None,
            norm_inv_std: None,
            in_spatial: spatial,
            t_len: t,
            in_width: d,
        };
        match layer.kind {
            LayerKind::Linear { d_in, d_out: _ } => {
                if d != d_in {
                    return Err(Error::Dimension(format!(
                        "layer {i}: linear expects width {d_in}, input has {d}"
                    )));
                }
                if layer.weight_trainable {
                    record.activation = Some(cur.clone_tagged(AllocTag::ActivationCache));
                }
                let mut s = matmul(&cur, layer.weight.as_ref().unwrap())?;
                add_bias(&mut s, layer.bias.as_ref().unwrap())?;
                cur = s;
            }
            LayerKind::Conv2d {
                c_in,
                c_out: _,
                kernel,
                stride,
                padding,
            } => {
                let (h, w) = spatial.ok_or_else(|| {
                    Error::Dimension(format!(
                        "layer {i}: conv input carries no spatial extent"
                    ))
                })?;
                if d != c_in {
                    return Err(Error::Dimension(format!(
                        "layer {i}: conv expects {c_in} channels, input has {d}"
                    )));
                }
                let image = seq_to_image(&cur, h, w)?;
                let tag = if layer.weight_trainable {
                    AllocTag::ActivationCache
                } else {
                    AllocTag::General
                };
                let (u, (oh, ow)) = unfold2d_tagged(&image, kernel, stride, padding, tag)
                    .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
                let mut s = matmul(&u, layer.weight.as_ref().unwrap())?;
                add_bias(&mut s, layer.bias.as_ref().unwrap())?;
                record.t_len = oh * ow;
                record.in_width = u.shape()[2];
                if layer.weight_trainable {
                    record.activation = Some(u);
                }
                spatial = Some((oh, ow));
                cur = s;
            }
            LayerKind::LayerNorm { width } => {
                if d != width {
                    return Err(Error::Dimension(format!(
                        "layer {i}: layernorm expects width {width}, input has {d}"
                    )));
                }
                let tag = if layer.weight_trainable {
                    AllocTag::ActivationCache
                } else {
                    AllocTag::NormStats
                };
                let mut xhat = Tensor::zeros_tagged(&[b, t, width], tag);
                let mut inv_std = Tensor::zeros_tagged(&[b, t], AllocTag::NormStats);
                layernorm_rows(cur.data(), b * t, width, xhat.data_mut(), inv_std.data_mut());
                let mut out = Tensor::zeros(&[b, t, width]);
                {
                    let wv = layer.weight.as_ref().unwrap().data();
                    let bv = layer.bias.as_ref().unwrap().data();
                    let od = out.data_mut();
                    for (r, row) in xhat.data().chunks(width).enumerate() {
                        let orow = &mut od[r * width..(r + 1) * width];
                        for j in 0..width {
                            orow[j] = row[j] * wv[j] + bv[j];
                        }
                    }
                }
                if layer.weight_trainable {
                    record.activation = Some(xhat);
                } else {
                    record.norm_xhat = Some(xhat);
                }
                record.norm_inv_std = Some(inv_std);
                cur = out;
            }
            LayerKind::Relu => {
                let mut mask = vec![0u8; cur.numel()];
                let mut out = Tensor::zeros(&[b, t, d]);
                {
                    let od = out.data_mut();
                    for (k, &v) in cur.data().iter().enumerate() {
                        if v > 0.0 {
                            od[k] = v;
                            mask[k] = 1;
                        }
                    }
                }
                record.relu_mask = Some(MaskBuf::new(mask));
                cur = out;
            }
        }
        records.push(record);
    }

    Ok(ForwardTrace {
        output: cur,
        records,
        batch,
    })
}

/// Forward pass for evaluation only: same math, no residue kept.
pub fn forward_infer(net: &Network, x: &Tensor) -> Result<Tensor> {
    // A trace is cheap at evaluation scale; reuse the exact same code path
    // so eval outputs are bitwise the training outputs.
    Ok(forward(net, x)?.output)
}

/// Result of the softmax cross-entropy loss, summed over the batch (and
/// over rows for rank-3 logits).
#[derive(Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub dlogits: Tensor,
}

/// Softmax cross-entropy with sum reduction. Accepts `B x K` logits or
/// `B x T x K`, where every row `t` of sample `b` is scored against
/// `labels[b]` and per-sample losses sum over rows. The gradient is the
/// classic `softmax - onehot`, per row.
pub fn loss_softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let (b, t, k) = match *logits.shape() {
        [b, k] => (b, 1usize, k),
        [b, t, k] => (b, t, k),
        ref s => {
            return Err(Error::Dimension(format!(
                "logits must be rank 2 or 3, got {s:?}"
            )))
        }
    };
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::Dimension("logits need at least one class".into()));
    }
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut per_sample = vec![0.0; b];
    {
        let ld = logits.data();
        let dd = dlogits.data_mut();
        for bi in 0..b {
            let label = labels[bi];
            if label >= k {
                return Err(Error::Input(format!(
                    "label {label} out of range for {k} classes"
                )));
            }
            for ti in 0..t {
                let row = &ld[(bi * t + ti) * k..(bi * t + ti + 1) * k];
                let mut m = f64::NEG_INFINITY;
                for &v in row {
                    if v > m {
                        m = v;
                    }
                }
                let mut z = 0.0;
                for &v in row {
                    z += (v - m).exp();
                }
                let lse = m + z.ln();
                per_sample[bi] += lse - row[label];
                let drow = &mut dd[(bi * t + ti) * k..(bi * t + ti + 1) * k];
                for (j, &v) in row.iter().enumerate() {
                    drow[j] = (v - m).exp() / z;
                }
                drow[label] -= 1.0;
            }
        }
    }
    let loss = per_sample.iter().sum();
    Ok(LossOutput {
        loss,
        per_sample,
        dlogits,
    })
}

/// Parameter census.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub bias: usize,
    /// bias / total; reported as 0 when the net has no parameters at all.
    pub fraction: f64,
    /// True when total == 0, so the zero fraction is a warning, not a fact.
    pub empty: bool,
}

pub fn count_params(net: &Network) -> ParamCount {
    let mut total = 0;
    let mut bias = 0;
    for layer in net.layers() {
        if let Some(w) = &layer.weight {
            total += w.numel();
        }
        if let Some(b) = &layer.bias {
            total += b.numel();
            bias += b.numel();
        }
    }
    let (fraction, empty) = if total == 0 {
        (0.0, true)
    } else {
        (bias as f64 / total as f64, false)
    };
    ParamCount {
        total,
        bias,
        fraction,
        empty,
    }
}

fn write_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(inp: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    inp.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Serialize every parameter to the binary checkpoint format: magic
/// "DPBF", version 1, record count, then per record the name
/// (`layer{i}.weight` / `layer{i}.bias`), rank, dims, and the raw
/// little-endian f64 payload. Round-trips are bitwise.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let keys = net.all_params();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut out, CHECKPOINT_VERSION)?;
    write_u32(&mut out, keys.len() as u32)?;
    for key in keys {
        let tensor = net.param(key)?;
        let name = key.name();
        write_u32(&mut out, name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        write_u32(&mut out, tensor.rank() as u32)?;
        for &d in tensor.shape() {
            write_u32(&mut out, d as u32)?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Load a checkpoint previously saved from a structurally identical
/// network. Every parameter must be present with a matching shape.
pub fn load_checkpoint(net: &mut Network, path: &Path) -> Result<()> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Config(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut inp)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut inp)? as usize;
    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut inp)? as usize;
        let mut name_buf = vec![0u8; name_len];
        inp.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Config("checkpoint name is not utf-8".into()))?;
        let rank = read_u32(&mut inp)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut inp)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            inp.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        loaded.insert(name, Tensor::from_vec(&shape, data)?);
    }
    let keys = net.all_params();
    if keys.len() != count {
        return Err(Error::Config(format!(
            "checkpoint has {count} parameters, network has {}",
            keys.len()
        )));
    }
    for key in keys {
        let name = key.name();
        let source = loaded
            .remove(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint missing parameter {name}")))?;
        let target = net.param_mut(key)?;
        if target.shape() != source.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: checkpoint shape {:?} vs network {:?}",
                source.shape(),
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(source.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::new(seed, "nn-test")
    }

    fn mlp(mode: Mode, seed: u64) -> Network {
        Network::new(
            vec![
                LayerKind::Linear { d_in: 3, d_out: 4 },
                LayerKind::Relu,
                LayerKind::Linear { d_in: 4, d_out: 2 },
            ],
            mode,
            &mut rng(seed),
        )
        .unwrap()
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.next_f64() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn init_truncated_and_scaled() {
        let net = mlp(Mode::Full, 1);
        let w = net.layers()[0].weight().unwrap();
        let bound = 2.0 / (3.0f64).sqrt();
        for &v in w.data() {
            assert!(v.abs() <= bound + 1e-12);
        }
        assert!(net.layers()[0].bias().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_deterministic_per_seed() {
        let a = mlp(Mode::Full, 9);
        let b = mlp(Mode::Full, 9);
        assert_eq!(
            a.layers()[0].weight().unwrap().data(),
            b.layers()[0].weight().unwrap().data()
        );
    }

    #[test]
    fn mode_sets_trainability() {
        let full = mlp(Mode::Full, 1);
        assert_eq!(full.trainable_params().len(), 4);
        let bitfit = mlp(Mode::Bitfit, 1);
        let keys = bitfit.trainable_params();
        assert_eq!(keys.len(), 2);
        assert!(keys.iter().all(|k| k.kind == ParamKind::Bias));
        let probe = mlp(Mode::LinearProbe, 1);
        let keys = probe.trainable_params();
        assert_eq!(keys.len(), 2);
        assert!(keys.iter().all(|k| k.layer == 2));
    }

    #[test]
    fn forward_output_independent_of_mode() {
        let full = mlp(Mode::Full, 4);
        let mut bitfit = mlp(Mode::Bitfit, 4);
        // Same seed, same params; only flags differ.
        let x = random_input(&[2, 3], 5);
        let a = forward(&full, &x).unwrap();
        let b = forward(&bitfit, &x).unwrap();
        assert_eq!(a.output.data(), b.output.data());
        bitfit.freeze_weights();
        let c = forward(&bitfit, &x).unwrap();
        assert_eq!(a.output.data(), c.output.data());
    }

    #[test]
    fn activation_cached_iff_weight_trainable() {
        let x = random_input(&[2, 3], 6);
        let full = mlp(Mode::Full, 7);
        let tr = forward(&full, &x).unwrap();
        assert!(tr.activation_cached(0));
        assert!(!tr.activation_cached(1)); // relu
        assert!(tr.activation_cached(2));
        let bitfit = mlp(Mode::Bitfit, 7);
        let tr = forward(&bitfit, &x).unwrap();
        assert!(!tr.activation_cached(0) && !tr.activation_cached(2));
    }

    #[test]
    fn bitfit_forward_allocates_zero_activation_cache() {
        let _g = crate::ledger::tests::EXCLUSIVE
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        let bitfit = mlp(Mode::Bitfit, 8);
        let x = random_input(&[4, 3], 8);
        let before = ledger::tag_live(AllocTag::ActivationCache);
        let tr = forward(&bitfit, &x).unwrap();
        assert_eq!(ledger::tag_live(AllocTag::ActivationCache), before);
        drop(tr);
    }

    #[test]
    fn full_forward_activation_cache_is_exact() {
        let _g = crate::ledger::tests::EXCLUSIVE
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        let full = mlp(Mode::Full, 8);
        let x = random_input(&[4, 3], 8);
        let before = ledger::tag_live(AllocTag::ActivationCache);
        let tr = forward(&full, &x).unwrap();
        // Linear(3,4) caches 4x1x3, Linear(4,2) caches 4x1x4.
        let expected = 8 * (4 * 3 + 4 * 4) as u64;
        assert_eq!(ledger::tag_live(AllocTag::ActivationCache) - before, expected);
        drop(tr);
        assert_eq!(ledger::tag_live(AllocTag::ActivationCache), before);
    }

    #[test]
    fn forward_shape_error_names_layer() {
        let net = mlp(Mode::Full, 2);
        let x = random_input(&[2, 5], 2);
        let err = forward(&net, &x).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn relu_zeroes_negatives_and_masks() {
        let net = Network::new(vec![LayerKind::Relu], Mode::Full, &mut rng(1)).unwrap();
        let x = Tensor::from_vec(&[1, 1, 4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let tr = forward(&net, &x).unwrap();
        assert_eq!(tr.output.data(), &[0.0, 0.0, 2.0, 0.0]);
        assert_eq!(tr.records[0].relu_mask.as_ref().unwrap().data(), &[0, 0, 1, 0]);
    }

    #[test]
    fn layernorm_two_point_row() {
        // Row [3, 5] with unit gain and zero shift: mean 4, population
        // variance 1, so outputs are +-1/sqrt(1 + 1e-5).
        let net = Network::new(vec![LayerKind::LayerNorm { width: 2 }], Mode::Full, &mut rng(1))
            .unwrap();
        let x = Tensor::from_vec(&[1, 1, 2], vec![3.0, 5.0]).unwrap();
        let tr = forward(&net, &x).unwrap();
        let want = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((tr.output.data()[0] + want).abs() < 1e-3);
        assert!((tr.output.data()[1] - want).abs() < 1e-3);
        // And exactly, not just within the loose window:
        assert!((tr.output.data()[1] - want).abs() < 1e-15);
    }

    #[test]
    fn layernorm_constant_row_stays_finite() {
        let net = Network::new(vec![LayerKind::LayerNorm { width: 3 }], Mode::Full, &mut rng(1))
            .unwrap();
        let x = Tensor::from_vec(&[1, 1, 3], vec![7.0, 7.0, 7.0]).unwrap();
        let tr = forward(&net, &x).unwrap();
        for &v in tr.output.data() {
            assert!(v.is_finite());
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn conv_matches_direct_convolution_oracle() {
        // Direct nested-loop cross-correlation oracle, no im2col anywhere.
        let mut r = rng(31);
        for &(c_in, c_out, h, w, k, s, pad) in &[
            (1usize, 1usize, 4usize, 4usize, 2usize, 1usize, 0usize),
            (2, 3, 5, 4, 3, 1, 1),
            (3, 2, 6, 6, 3, 2, 1),
        ] {
            let net = Network::new(
                vec![LayerKind::Conv2d {
                    c_in,
                    c_out,
                    kernel: (k, k),
                    stride: (s, s),
                    padding: (pad, pad),
                }],
                Mode::Full,
                &mut r,
            )
            .unwrap();
            let b = 2;
            let x = random_input(&[b, c_in, h, w], 100 + k as u64);
            let tr = forward(&net, &x).unwrap();
            let oh = (h + 2 * pad - k) / s + 1;
            let ow = (w + 2 * pad - k) / s + 1;
            assert_eq!(tr.output.shape(), &[b, oh * ow, c_out]);
            let weight = net.layers()[0].weight().unwrap();
            let bias = net.layers()[0].bias().unwrap();
            for bi in 0..b {
                for oc in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias.data()[oc];
                            for ci in 0..c_in {
                                for i in 0..k {
                                    for j in 0..k {
                                        let y = (oy * s + i) as isize - pad as isize;
                                        let xx = (ox * s + j) as isize - pad as isize;
                                        if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                                            continue;
                                        }
                                        let xv = x.at(&[bi, ci, y as usize, xx as usize]);
                                        let wv =
                                            weight.data()[(ci * k * k + i * k + j) * c_out + oc];
                                        acc += xv * wv;
                                    }
                                }
                            }
                            let have = tr.output.at(&[bi, oy * ow + ox, oc]);
                            assert!(
                                (have - acc).abs() <= 1e-10,
                                "conv mismatch {have} vs {acc}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn loss_uniform_logits_is_ln_k() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.3, 0.3]).unwrap();
        let out = loss_softmax_ce(&logits, &[0]).unwrap();
        assert!((out.loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_sums_over_batch() {
        let logits = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, -1.0]).unwrap();
        let out = loss_softmax_ce(&logits, &[0, 1]).unwrap();
        assert!((out.loss - (out.per_sample[0] + out.per_sample[1])).abs() < 1e-12);
        assert!(out.per_sample[1] > out.per_sample[0]);
    }

    #[test]
    fn loss_gradient_is_softmax_minus_onehot() {
        let logits = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 0.5]).unwrap();
        let out = loss_softmax_ce(&logits, &[1]).unwrap();
        let m = 2.0f64;
        let z: f64 = logits.data().iter().map(|v| (v - m).exp()).sum();
        for j in 0..3 {
            let p = (logits.data()[j] - m).exp() / z;
            let want = if j == 1 { p - 1.0 } else { p };
            assert!((out.dlogits.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut r = rng(77);
        let base: Vec<f64> = (0..6).map(|_| r.next_f64() * 4.0 - 2.0).collect();
        let labels = [2usize, 0usize];
        let logits = Tensor::from_vec(&[2, 3], base.clone()).unwrap();
        let out = loss_softmax_ce(&logits, &labels).unwrap();
        let h = 1e-6;
        for idx in 0..6 {
            let mut plus = base.clone();
            plus[idx] += h;
            let mut minus = base.clone();
            minus[idx] -= h;
            let lp = loss_softmax_ce(&Tensor::from_vec(&[2, 3], plus).unwrap(), &labels)
                .unwrap()
                .loss;
            let lm = loss_softmax_ce(&Tensor::from_vec(&[2, 3], minus).unwrap(), &labels)
                .unwrap()
                .loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = out.dlogits.data()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!((fd - an).abs() / denom <= 1e-7, "fd {fd} vs {an}");
        }
    }

    #[test]
    fn loss_rank3_sums_rows() {
        let logits3 = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.5, 0.25]).unwrap();
        let out3 = loss_softmax_ce(&logits3, &[1]).unwrap();
        let r1 = loss_softmax_ce(&Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap(), &[1])
            .unwrap()
            .loss;
        let r2 = loss_softmax_ce(&Tensor::from_vec(&[1, 2], vec![0.5, 0.25]).unwrap(), &[1])
            .unwrap()
            .loss;
        assert!((out3.loss - (r1 + r2)).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(loss_softmax_ce(&logits, &[2]).is_err());
        assert!(loss_softmax_ce(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn count_params_mlp() {
        // 100 -> 50 -> 10 MLP: 5560 params, 60 biases, fraction ~ 1.08%.
        let net = Network::new(
            vec![
                LayerKind::Linear { d_in: 100, d_out: 50 },
                LayerKind::Relu,
                LayerKind::Linear { d_in: 50, d_out: 10 },
            ],
            Mode::Full,
            &mut rng(1),
        )
        .unwrap();
        let pc = count_params(&net);
        assert_eq!(pc.total, 5560);
        assert_eq!(pc.bias, 60);
        assert!((pc.fraction - 60.0 / 5560.0).abs() < 1e-12);
        assert!(!pc.empty);
    }

    #[test]
    fn count_params_empty_net_warns() {
        let net = Network::new(vec![LayerKind::Relu], Mode::Full, &mut rng(1)).unwrap();
        let pc = count_params(&net);
        assert_eq!(pc.total, 0);
        assert_eq!(pc.fraction, 0.0);
        assert!(pc.empty);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dpbf");
        let src = mlp(Mode::Full, 21);
        save_checkpoint(&src, &path).unwrap();
        let mut dst = mlp(Mode::Full, 22);
        load_checkpoint(&mut dst, &path).unwrap();
        for key in src.all_params() {
            let a = src.param(key).unwrap();
            let b = dst.param(key).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Saved bytes are reproducible.
        let path2 = dir.path().join("net2.dpbf");
        save_checkpoint(&dst, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_wrong_magic_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dpbf");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let mut net = mlp(Mode::Full, 3);
        assert!(load_checkpoint(&mut net, &path).is_err());

        let good = dir.path().join("good.dpbf");
        save_checkpoint(&mlp(Mode::Full, 3), &good).unwrap();
        let mut other = Network::new(
            vec![LayerKind::Linear { d_in: 3, d_out: 5 }],
            Mode::Full,
            &mut rng(1),
        )
        .unwrap();
        assert!(load_checkpoint(&mut other, &good).is_err());
    }

    #[test]
    fn layer_dims_walks_shapes() {
        let net = Network::new(
            vec![
                LayerKind::Conv2d {
                    c_in: 2,
                    c_out: 3,
                    kernel: (2, 2),
                    stride: (1, 1),
                    padding: (0, 0),
                },
                LayerKind::Relu,
                LayerKind::Linear { d_in: 3, d_out: 4 },
            ],
            Mode::Full,
            &mut rng(1),
        )
        .unwrap();
        let dims = net.layer_dims(&[2, 4, 4]).unwrap();
        // Conv: T = 3*3 = 9, p = 3, d = 2*2*2 = 8. Linear: T = 9, p = 4, d = 3.
        assert_eq!(dims, vec![(0, 9, 3, 8), (2, 9, 4, 3)]);
    }
}

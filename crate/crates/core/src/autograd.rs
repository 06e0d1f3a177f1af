//! Backward passes and the per-sample gradient machinery.
//!
//! Everything here is a consumer of one shared reverse sweep that walks the
//! layer stack from the loss toward the input, handing each layer's output
//! gradient to a visitor before propagating it further. The visitors differ
//! in what they harvest:
//!
//! * [`per_sample_bias_grads`] collects only bias gradients (row sums of the
//!   output gradient), which need no cached activations at all;
//! * [`per_sample_weight_grads`] instantiates the full `B x d x p` gradient
//!   per trainable weight;
//! * [`ghost_weight_norms`] gets per-sample weight-gradient norms without
//!   instantiating gradients, from the Gram matrices of the layer input and
//!   output gradient;
//! * [`mixed_weight_norms`] picks, per layer, whichever of the two norm
//!   routes touches fewer elements;
//! * [`reweighted_backward`] scales each sample's loss gradient by a given
//!   factor and accumulates ordinary summed gradients.
//!
//! Summed gradients are always formed by adding per-sample partials in
//! ascending sample order, with each partial computed by the same kernel
//! regardless of the route. Scaling by exactly 1.0 leaves every bit intact,
//! so a noise-free, clip-free private step reproduces the non-private
//! gradient bit for bit no matter which strategy produced it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ledger::AllocTag;
use crate::nn::{image_to_seq, ForwardTrace, Layer, LayerKind, Network, ParamKey, ParamKind};
use crate::tensor::{accumulate_atg, fold2d_acc, for_each_row, matmul_nt, Tensor};

/// Per-sample squared gradient norms, one vector (length `B`) per
/// parameter, in registry order.
pub type SquaredNorms = BTreeMap<ParamKey, Vec<f64>>;

/// Per-sample or summed gradients keyed by parameter, in registry order.
pub type GradMap = BTreeMap<ParamKey, Tensor>;

/// True when the Gram route (`2 T^2` elements) is no bigger than
/// instantiating the per-sample gradient (`2 p d` elements). Ties go to the
/// Gram route.
pub fn ghost_is_cheaper(t: usize, p: usize, d: usize) -> bool {
    2 * t * t <= 2 * p * d
}

fn dlogits_rank3(dlogits: &Tensor) -> Result<Tensor> {
    match *dlogits.shape() {
        [b, k] => dlogits.clone().reshape(&[b, 1, k]),
        [_, _, _] => Ok(dlogits.clone()),
        ref s => Err(Error::Dimension(format!(
            "loss gradient must be rank 2 or 3, got {s:?}"
        ))),
    }
}

/// Reverse sweep. Calls `visit(layer index, layer, output gradient)` for
/// every layer, last to first, then propagates the gradient to the layer's
/// input. `factors`, when given, scales sample `b`'s loss-gradient rows by
/// `factors[b]` before the sweep starts.
fn backward_sweep<F>(
    net: &Network,
    trace: &ForwardTrace,
    dlogits: &Tensor,
    factors: Option<&[f64]>,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &Layer, &Tensor) -> Result<()>,
{
    let mut g = dlogits_rank3(dlogits)?;
    if g.shape() != trace.output.shape() {
        return Err(Error::Dimension(format!(
            "loss gradient shape {:?} does not match network output {:?}",
            g.shape(),
            trace.output.shape()
        )));
    }
    let b = g.shape()[0];
    if let Some(f) = factors {
        if f.len() != b {
            return Err(Error::Dimension(format!(
                "{} factors for batch of {b}",
                f.len()
            )));
        }
        let row = g.shape()[1] * g.shape()[2];
        let gd = g.data_mut();
        for bi in 0..b {
            let c = f[bi];
            for v in &mut gd[bi * row..(bi + 1) * row] {
                *v *= c;
            }
        }
    }

    let records = trace.records();
    for (i, layer) in net.layers().iter().enumerate().rev() {
        let record = &records[i];
        visit(i, layer, &g)?;
        if i == 0 {
            break;
        }
        g = match layer.kind {
            LayerKind::Linear { .. } => matmul_nt(&g, layer.weight().unwrap())?,
            LayerKind::Conv2d {
                c_in,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (h, w) = record.in_spatial.ok_or_else(|| {
                    Error::Internal(format!("layer {i}: conv record lost its spatial extent"))
                })?;
                let du = matmul_nt(&g, layer.weight().unwrap())?;
                let gimg = fold2d_acc(&du, c_in, h, w, kernel, stride, padding)?;
                image_to_seq(&gimg)?
            }
            LayerKind::LayerNorm { width } => {
                let xhat = record
                    .activation
                    .as_ref()
                    .or(record.norm_xhat.as_ref())
                    .ok_or_else(|| {
                        Error::Internal(format!("layer {i}: layernorm record has no normalized values"))
                    })?;
                let inv_std = record.norm_inv_std.as_ref().ok_or_else(|| {
                    Error::Internal(format!("layer {i}: layernorm record has no inverse stddev"))
                })?;
                let mut out = Tensor::zeros(g.shape());
                let gd = g.data();
                let xd = xhat.data();
                let sd = inv_std.data();
                let wv = layer.weight().unwrap().data().to_vec();
                let rows = g.shape()[0] * g.shape()[1];
                for_each_row(out.data_mut(), width, rows * width, |r, orow| {
                    let grow = &gd[r * width..(r + 1) * width];
                    let xrow = &xd[r * width..(r + 1) * width];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..width {
                        let gh = grow[j] * wv[j];
                        m1 += gh;
                        m2 += gh * xrow[j];
                    }
                    m1 /= width as f64;
                    m2 /= width as f64;
                    let is = sd[r];
                    for j in 0..width {
                        let gh = grow[j] * wv[j];
                        orow[j] = is * (gh - m1 - xrow[j] * m2);
                    }
                });
                out
            }
            LayerKind::Relu => {
                let mask = record.relu_mask.as_ref().ok_or_else(|| {
                    Error::Internal(format!("layer {i}: relu record has no mask"))
                })?;
                let mut out = Tensor::zeros(g.shape());
                let md = mask.data();
                let gd = g.data();
                let od = out.data_mut();
                for k in 0..gd.len() {
                    if md[k] == 1 {
                        od[k] = gd[k];
                    }
                }
                out
            }
        };
    }
    Ok(())
}

/// Per-sample row sum of a `B x T x p` gradient: the bias partial.
fn bias_partials(g: &Tensor, tag: AllocTag) -> Tensor {
    let (b, t, p) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = Tensor::zeros_tagged(&[b, p], tag);
    let gd = g.data();
    for_each_row(out.data_mut(), p, b * t * p, |bi, orow| {
        for ti in 0..t {
            let grow = &gd[(bi * t + ti) * p..(bi * t + ti + 1) * p];
            for (ov, gv) in orow.iter_mut().zip(grow.iter()) {
                *ov += gv;
            }
        }
    });
    out
}

/// Per-sample LayerNorm gain partial: row sums of `xhat * g`.
fn gain_partials(xhat: &Tensor, g: &Tensor, tag: AllocTag) -> Tensor {
    let (b, t, p) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = Tensor::zeros_tagged(&[b, p], tag);
    let gd = g.data();
    let xd = xhat.data();
    for_each_row(out.data_mut(), p, b * t * p, |bi, orow| {
        for ti in 0..t {
            let base = (bi * t + ti) * p;
            for j in 0..p {
                orow[j] += xd[base + j] * gd[base + j];
            }
        }
    });
    out
}

fn layer_xhat<'a>(i: usize, record: &'a crate::nn::LayerRecord) -> Result<&'a Tensor> {
    record
        .activation
        .as_ref()
        .or(record.norm_xhat.as_ref())
        .ok_or_else(|| Error::Internal(format!("layer {i}: missing normalized values")))
}

fn layer_activation<'a>(i: usize, record: &'a crate::nn::LayerRecord) -> Result<&'a Tensor> {
    record.activation.as_ref().ok_or_else(|| {
        Error::Internal(format!(
            "layer {i}: weight is trainable but no activation was cached"
        ))
    })
}

/// Gradients of every trainable bias, one `B x p` tensor per bias, without
/// touching (or requiring) any cached layer inputs.
pub fn per_sample_bias_grads(
    net: &Network,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<GradMap> {
    let mut out = GradMap::new();
    backward_sweep(net, trace, dlogits, None, |i, layer, g| {
        if layer.bias_trainable && layer.bias().is_some() {
            out.insert(
                ParamKey {
                    layer: i,
                    kind: ParamKind::Bias,
                },
                bias_partials(g, AllocTag::PerSampleGrad),
            );
        }
        Ok(())
    })?;
    Ok(out)
}

/// Instantiated per-sample gradients for every trainable parameter:
/// `B x d x p` per weight (LayerNorm gains and biases are `B x p`).
pub fn per_sample_weight_grads(
    net: &Network,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<GradMap> {
    let records = trace.records();
    let mut out = GradMap::new();
    backward_sweep(net, trace, dlogits, None, |i, layer, g| {
        let record = &records[i];
        let (b, t, p) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        if layer.weight_trainable && layer.weight().is_some() {
            let key = ParamKey {
                layer: i,
                kind: ParamKind::Weight,
            };
            match layer.kind {
                LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                    let a = layer_activation(i, record)?;
                    let d = record.in_width;
                    let mut psg = Tensor::zeros_tagged(&[b, d, p], AllocTag::PerSampleGrad);
                    let ad = a.data();
                    let gd = g.data();
                    for_each_row(psg.data_mut(), d * p, b * t * d * p, |bi, slice| {
                        accumulate_atg(
                            &ad[bi * t * d..(bi + 1) * t * d],
                            &gd[bi * t * p..(bi + 1) * t * p],
                            t,
                            d,
                            p,
                            1.0,
                            slice,
                        );
                    });
                    out.insert(key, psg);
                }
                LayerKind::LayerNorm { .. } => {
                    let xhat = layer_xhat(i, record)?;
                    out.insert(key, gain_partials(xhat, g, AllocTag::PerSampleGrad));
                }
                LayerKind::Relu => {}
            }
        }
        if layer.bias_trainable && layer.bias().is_some() {
            out.insert(
                ParamKey {
                    layer: i,
                    kind: ParamKind::Bias,
                },
                bias_partials(g, AllocTag::PerSampleGrad),
            );
        }
        Ok(())
    })?;
    Ok(out)
}

/// Squared per-sample norms of instantiated gradients.
pub fn squared_norms_from_grads(grads: &GradMap) -> SquaredNorms {
    let mut out = SquaredNorms::new();
    for (&key, tensor) in grads {
        let b = tensor.shape()[0];
        let row = tensor.numel() / b.max(1);
        let norms = tensor
            .data()
            .chunks(row.max(1))
            .map(|slice| slice.iter().map(|v| v * v).sum())
            .take(b)
            .collect();
        out.insert(key, norms);
    }
    out
}

/// Squared weight-gradient norm per sample from Gram matrices: with `A` the
/// layer input (`T x d`) and `G` the output gradient (`T x p`), the squared
/// Frobenius norm of `A^T G` equals `sum_{t,t'} (A A^T)[t,t'] (G G^T)[t,t']`,
/// which costs `O(T^2 (d + p))` and `2 T^2` transient elements instead of
/// `p d`.
fn gram_squared_norms(a: &Tensor, g: &Tensor) -> Vec<f64> {
    let (b, t, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let p = g.shape()[2];
    let mut agram = Tensor::zeros_tagged(&[b, t, t], AllocTag::Gram);
    let mut ggram = Tensor::zeros_tagged(&[b, t, t], AllocTag::Gram);
    let ad = a.data();
    for_each_row(agram.data_mut(), t * t, b * t * t * d, |bi, slice| {
        let base = bi * t * d;
        for ti in 0..t {
            for tj in ti..t {
                let mut s = 0.0;
                for k in 0..d {
                    s += ad[base + ti * d + k] * ad[base + tj * d + k];
                }
                slice[ti * t + tj] = s;
                slice[tj * t + ti] = s;
            }
        }
    });
    let gd = g.data();
    for_each_row(ggram.data_mut(), t * t, b * t * t * p, |bi, slice| {
        let base = bi * t * p;
        for ti in 0..t {
            for tj in ti..t {
                let mut s = 0.0;
                for k in 0..p {
                    s += gd[base + ti * p + k] * gd[base + tj * p + k];
                }
                slice[ti * t + tj] = s;
                slice[tj * t + ti] = s;
            }
        }
    });
    let adg = agram.data();
    let gdg = ggram.data();
    (0..b)
        .map(|bi| {
            let mut s = 0.0;
            for k in 0..t * t {
                s += adg[bi * t * t + k] * gdg[bi * t * t + k];
            }
            s
        })
        .collect()
}

/// Instantiate one layer's per-sample weight gradients just long enough to
/// take their norms.
fn instantiated_squared_norms(a: &Tensor, g: &Tensor) -> Vec<f64> {
    let (b, t, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let p = g.shape()[2];
    let mut psg = Tensor::zeros_tagged(&[b, d, p], AllocTag::PerSampleGrad);
    let ad = a.data();
    let gd = g.data();
    for_each_row(psg.data_mut(), d * p, b * t * d * p, |bi, slice| {
        accumulate_atg(
            &ad[bi * t * d..(bi + 1) * t * d],
            &gd[bi * t * p..(bi + 1) * t * p],
            t,
            d,
            p,
            1.0,
            slice,
        );
    });
    psg.data()
        .chunks(d * p)
        .map(|slice| slice.iter().map(|v| v * v).sum())
        .collect()
}

enum NormRoute {
    AlwaysGram,
    PerLayerCheaper,
}

fn weight_norm_sweep(
    net: &Network,
    trace: &ForwardTrace,
    dlogits: &Tensor,
    route: NormRoute,
) -> Result<SquaredNorms> {
    let records = trace.records();
    let mut out = SquaredNorms::new();
    backward_sweep(net, trace, dlogits, None, |i, layer, g| {
        let record = &records[i];
        let (t, p) = (g.shape()[1], g.shape()[2]);
        if layer.weight_trainable && layer.weight().is_some() {
            let key = ParamKey {
                layer: i,
                kind: ParamKind::Weight,
            };
            match layer.kind {
                LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                    let a = layer_activation(i, record)?;
                    let d = record.in_width;
                    let use_gram = match route {
                        NormRoute::AlwaysGram => true,
                        NormRoute::PerLayerCheaper => ghost_is_cheaper(t, p, d),
                    };
                    let norms = if use_gram {
                        gram_squared_norms(a, g)
                    } else {
                        instantiated_squared_norms(a, g)
                    };
                    out.insert(key, norms);
                }
                LayerKind::LayerNorm { .. } => {
                    let xhat = layer_xhat(i, record)?;
                    let partial = gain_partials(xhat, g, AllocTag::PerSampleGrad);
                    out.insert(
                        key,
                        partial
                            .data()
                            .chunks(p)
                            .map(|s| s.iter().map(|v| v * v).sum())
                            .collect(),
                    );
                }
                LayerKind::Relu => {}
            }
        }
        if layer.bias_trainable && layer.bias().is_some() {
            let partial = bias_partials(g, AllocTag::PerSampleGrad);
            out.insert(
                ParamKey {
                    layer: i,
                    kind: ParamKind::Bias,
                },
                partial
                    .data()
                    .chunks(p)
                    .map(|s| s.iter().map(|v| v * v).sum())
                    .collect(),
            );
        }
        Ok(())
    })?;
    Ok(out)
}

/// Per-sample squared gradient norms via the Gram route for every trainable
/// weight matrix; gains and biases are summed directly.
pub fn ghost_weight_norms(
    net: &Network,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<SquaredNorms> {
    weight_norm_sweep(net, trace, dlogits, NormRoute::AlwaysGram)
}

/// Like [`ghost_weight_norms`], but each weight matrix independently takes
/// whichever route touches fewer elements (`2 T^2` vs `2 p d`, ties to the
/// Gram route).
pub fn mixed_weight_norms(
    net: &Network,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<SquaredNorms> {
    weight_norm_sweep(net, trace, dlogits, NormRoute::PerLayerCheaper)
}

/// Backward pass with per-sample loss-gradient factors, producing summed
/// gradients for every trainable parameter. Unit factors give the plain
/// (non-private) gradient of the summed loss.
pub fn reweighted_backward(
    net: &Network,
    trace: &ForwardTrace,
    dlogits: &Tensor,
    factors: &[f64],
) -> Result<GradMap> {
    weighted_backward_impl(net, trace, dlogits, Some(factors))
}

/// Plain summed backward. Equivalent to [`reweighted_backward`] with unit
/// factors (a unit prescale is a bitwise no-op), but skips the prescale
/// pass over the loss gradient, so private and non-private steps run the
/// same heavy code and timing comparisons between them isolate only the
/// private extras.
pub fn summed_backward(net: &Network, trace: &ForwardTrace, dlogits: &Tensor) -> Result<GradMap> {
    weighted_backward_impl(net, trace, dlogits, None)
}

fn weighted_backward_impl(
    net: &Network,
    trace: &ForwardTrace,
    dlogits: &Tensor,
    factors: Option<&[f64]>,
) -> Result<GradMap> {
    let records = trace.records();
    let mut out = GradMap::new();
    backward_sweep(net, trace, dlogits, factors, |i, layer, g| {
        let record = &records[i];
        let (b, t, p) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        if layer.weight_trainable && layer.weight().is_some() {
            let key = ParamKey {
                layer: i,
                kind: ParamKind::Weight,
            };
            match layer.kind {
                LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                    let a = layer_activation(i, record)?;
                    let d = record.in_width;
                    let mut sum = Tensor::zeros(&[d, p]);
                    let mut partial = Tensor::zeros(&[d, p]);
                    let ad = a.data();
                    let gd = g.data();
                    // Form each sample's partial separately, then add it,
                    // so the floating-point association matches summing
                    // instantiated per-sample gradients exactly.
                    for bi in 0..b {
                        partial.data_mut().fill(0.0);
                        accumulate_atg(
                            &ad[bi * t * d..(bi + 1) * t * d],
                            &gd[bi * t * p..(bi + 1) * t * p],
                            t,
                            d,
                            p,
                            1.0,
                            partial.data_mut(),
                        );
                        for (o, v) in sum.data_mut().iter_mut().zip(partial.data().iter()) {
                            *o += v;
                        }
                    }
                    out.insert(key, sum);
                }
                LayerKind::LayerNorm { .. } => {
                    let xhat = layer_xhat(i, record)?;
                    let partial = gain_partials(xhat, g, AllocTag::General);
                    out.insert(key, sum_leading(&partial));
                }
                LayerKind::Relu => {}
            }
        }
        if layer.bias_trainable && layer.bias().is_some() {
            let partial = bias_partials(g, AllocTag::General);
            out.insert(
                ParamKey {
                    layer: i,
                    kind: ParamKind::Bias,
                },
                sum_leading(&partial),
            );
        }
        Ok(())
    })?;
    Ok(out)
}

/// Sum a `B x p` stack of per-sample partials over samples, ascending.
///
/// This is the reduction the plain (non-private) step applies to each
/// parameter's per-sample partials. It is public so harnesses can time it
/// against the clipped reduction of the private step; the two steps share
/// every other code path.
pub fn sum_leading(partials: &Tensor) -> Tensor {
    let (b, p) = (partials.shape()[0], partials.shape()[1]);
    let mut out = Tensor::zeros(&[p]);
    let pd = partials.data();
    let od = out.data_mut();
    for bi in 0..b {
        for j in 0..p {
            od[j] += pd[bi * p + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, loss_softmax_ce, Mode, Network};
    use crate::rng::StreamRng;
    use proptest::prelude::*;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::new(seed, "autograd-test")
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.next_f64() * 2.0 - 1.0).collect()).unwrap()
    }

    /// Conv -> LayerNorm -> ReLU -> Linear stack exercising every backward
    /// rule at once.
    fn zoo(mode: Mode, seed: u64) -> Network {
        Network::new(
            vec![
                LayerKind::Conv2d {
                    c_in: 1,
                    c_out: 2,
                    kernel: (2, 2),
                    stride: (1, 1),
                    padding: (0, 0),
                },
                LayerKind::LayerNorm { width: 2 },
                LayerKind::Relu,
                LayerKind::Linear { d_in: 2, d_out: 3 },
            ],
            mode,
            &mut rng(seed),
        )
        .unwrap()
    }

    fn loss_of(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
        let trace = forward(net, x).unwrap();
        loss_softmax_ce(&trace.output, labels).unwrap().loss
    }

    #[test]
    fn summed_gradients_match_finite_differences() {
        let mut net = zoo(Mode::Full, 11);
        let x = random_input(&[2, 1, 3, 3], 12);
        let labels = [1usize, 2usize];
        let trace = forward(&net, &x).unwrap();
        let loss = loss_softmax_ce(&trace.output, &labels).unwrap();
        let grads = reweighted_backward(&net, &trace, &loss.dlogits, &[1.0, 1.0]).unwrap();
        assert_eq!(grads.len(), net.trainable_params().len());

        let h = 1e-5;
        for key in net.trainable_params() {
            let grad = grads[&key].clone();
            for idx in 0..grad.numel() {
                let orig = net.param(key).unwrap().data()[idx];
                net.param_mut(key).unwrap().data_mut()[idx] = orig + h;
                let lp = loss_of(&net, &x, &labels);
                net.param_mut(key).unwrap().data_mut()[idx] = orig - h;
                let lm = loss_of(&net, &x, &labels);
                net.param_mut(key).unwrap().data_mut()[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.data()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom <= 1e-5,
                    "{key:?}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn per_sample_grads_sum_to_reweighted_unit_grads() {
        let net = zoo(Mode::Full, 21);
        let x = random_input(&[3, 1, 3, 3], 22);
        let labels = [0usize, 1, 2];
        let trace = forward(&net, &x).unwrap();
        let loss = loss_softmax_ce(&trace.output, &labels).unwrap();
        let psg = per_sample_weight_grads(&net, &trace, &loss.dlogits).unwrap();
        let summed = reweighted_backward(&net, &trace, &loss.dlogits, &[1.0; 3]).unwrap();
        for (key, tensor) in &summed {
            let stack = &psg[key];
            let b = stack.shape()[0];
            let row = tensor.numel();
            let mut acc = vec![0.0f64; row];
            for bi in 0..b {
                for j in 0..row {
                    acc[j] += stack.data()[bi * row + j];
                }
            }
            for (have, want) in acc.iter().zip(tensor.data().iter()) {
                assert_eq!(have, want, "{key:?} differs bitwise");
            }
        }
    }

    #[test]
    fn per_sample_grads_are_sample_isolated() {
        let net = zoo(Mode::Full, 31);
        let x = random_input(&[3, 1, 3, 3], 32);
        let labels = [2usize, 0, 1];
        let trace = forward(&net, &x).unwrap();
        let loss = loss_softmax_ce(&trace.output, &labels).unwrap();
        let psg = per_sample_weight_grads(&net, &trace, &loss.dlogits).unwrap();

        for bi in 0..3 {
            let xi = Tensor::from_vec(
                &[1, 1, 3, 3],
                x.data()[bi * 9..(bi + 1) * 9].to_vec(),
            )
            .unwrap();
            let ti = forward(&net, &xi).unwrap();
            let li = loss_softmax_ce(&ti.output, &labels[bi..bi + 1]).unwrap();
            let gi = per_sample_weight_grads(&net, &ti, &li.dlogits).unwrap();
            for (key, stack) in &psg {
                let row = stack.numel() / 3;
                let batch_slice = &stack.data()[bi * row..(bi + 1) * row];
                let solo = gi[key].data();
                for (a, b) in batch_slice.iter().zip(solo.iter()) {
                    assert_eq!(a, b, "{key:?} sample {bi} differs");
                }
            }
        }
    }

    #[test]
    fn bias_grads_match_full_per_sample_path_bitwise() {
        let full = zoo(Mode::Full, 41);
        let bitfit = zoo(Mode::Bitfit, 41);
        let x = random_input(&[2, 1, 3, 3], 42);
        let labels = [1usize, 1];
        let tr_full = forward(&full, &x).unwrap();
        let loss_full = loss_softmax_ce(&tr_full.output, &labels).unwrap();
        let psg = per_sample_weight_grads(&full, &tr_full, &loss_full.dlogits).unwrap();

        let tr_b = forward(&bitfit, &x).unwrap();
        let loss_b = loss_softmax_ce(&tr_b.output, &labels).unwrap();
        let bias = per_sample_bias_grads(&bitfit, &tr_b, &loss_b.dlogits).unwrap();
        assert_eq!(bias.len(), 3); // conv, layernorm, linear biases
        for (key, tensor) in &bias {
            assert_eq!(key.kind, ParamKind::Bias);
            let full_tensor = &psg[key];
            for (a, b) in tensor.data().iter().zip(full_tensor.data().iter()) {
                assert_eq!(a, b);
            }
        }
        // The bitfit sweep really ran without any cached activations.
        assert!(!tr_b.activation_cached(0) && !tr_b.activation_cached(3));
    }

    #[test]
    fn ghost_norms_match_instantiated_norms() {
        let net = zoo(Mode::Full, 51);
        let x = random_input(&[3, 1, 3, 3], 52);
        let labels = [0usize, 2, 1];
        let trace = forward(&net, &x).unwrap();
        let loss = loss_softmax_ce(&trace.output, &labels).unwrap();
        let ghost = ghost_weight_norms(&net, &trace, &loss.dlogits).unwrap();
        let mixed = mixed_weight_norms(&net, &trace, &loss.dlogits).unwrap();
        let inst = squared_norms_from_grads(
            &per_sample_weight_grads(&net, &trace, &loss.dlogits).unwrap(),
        );
        assert_eq!(ghost.len(), inst.len());
        for (key, want) in &inst {
            for (bi, (&gv, &iv)) in ghost[key].iter().zip(want.iter()).enumerate() {
                let denom = iv.abs().max(1e-12);
                assert!(
                    (gv - iv).abs() / denom <= 1e-10,
                    "{key:?} sample {bi}: gram {gv} vs instantiated {iv}"
                );
            }
            for (&mv, &iv) in mixed[key].iter().zip(want.iter()) {
                let denom = iv.abs().max(1e-12);
                assert!((mv - iv).abs() / denom <= 1e-10);
            }
        }
    }

    #[test]
    fn gram_route_decision_prefers_smaller_side() {
        assert!(ghost_is_cheaper(1, 64, 64));
        assert!(!ghost_is_cheaper(64, 2, 2));
        // Tie: 2 t^2 == 2 p d.
        assert!(ghost_is_cheaper(4, 4, 4));
    }

    #[test]
    fn reweighted_factors_scale_gradients_linearly() {
        let net = zoo(Mode::Full, 61);
        let x = random_input(&[2, 1, 3, 3], 62);
        let labels = [1usize, 0];
        let trace = forward(&net, &x).unwrap();
        let loss = loss_softmax_ce(&trace.output, &labels).unwrap();
        let unit = reweighted_backward(&net, &trace, &loss.dlogits, &[1.0, 0.0]).unwrap();
        let psg = per_sample_weight_grads(&net, &trace, &loss.dlogits).unwrap();
        // Factor [1, 0] selects sample 0's gradient exactly.
        for (key, tensor) in &unit {
            let stack = &psg[key];
            let row = tensor.numel();
            for j in 0..row {
                let have = tensor.data()[j];
                let want = stack.data()[j];
                assert!((have - want).abs() <= 1e-14, "{key:?}[{j}]");
            }
        }
        // A scalar factor scales the single-sample gradient linearly.
        let scaled = reweighted_backward(&net, &trace, &loss.dlogits, &[0.25, 0.0]).unwrap();
        for (key, tensor) in &scaled {
            for (j, v) in tensor.data().iter().enumerate() {
                let want = 0.25 * unit[&key].data()[j];
                let denom = want.abs().max(1e-12);
                assert!((v - want).abs() / denom <= 1e-10, "{key:?}[{j}]");
            }
        }
    }

    #[test]
    fn factor_length_must_match_batch() {
        let net = zoo(Mode::Full, 71);
        let x = random_input(&[2, 1, 3, 3], 72);
        let trace = forward(&net, &x).unwrap();
        let loss = loss_softmax_ce(&trace.output, &[0, 0]).unwrap();
        assert!(reweighted_backward(&net, &trace, &loss.dlogits, &[1.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// The Gram identity holds for any batch of inputs and gradients on
        /// a single linear layer.
        #[test]
        fn gram_identity_holds(seed in 0u64..1000, b in 1usize..4, t in 1usize..5,
                               d in 1usize..5, p in 1usize..5) {
            let a = random_input(&[b, t, d], seed);
            let g = random_input(&[b, t, p], seed + 1000);
            let ghost = gram_squared_norms(&a, &g);
            let inst = instantiated_squared_norms(&a, &g);
            for (gv, iv) in ghost.iter().zip(inst.iter()) {
                let denom = iv.abs().max(1e-12);
                prop_assert!((gv - iv).abs() / denom <= 1e-10);
            }
        }
    }
}

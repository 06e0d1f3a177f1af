//! Differentially private gradient machinery: Poisson subsampling,
//! per-sample norm aggregation, clipping factors, and noisy clipped sums,
//! for both bias-only training and full fine-tuning.
//!
//! A private step always has the same skeleton: sample, compute per-sample
//! gradient norms, turn each norm into a clipping factor, sum the scaled
//! per-sample gradients in ascending sample order, then add `sigma * R`
//! Gaussian noise parameter-by-parameter in registry order. The paths
//! differ only in how the norms are obtained:
//!
//! * the bias path ([`dp_bitfit_step`]) instantiates per-sample bias
//!   gradients directly — one backward pass, no activation caches at all;
//! * [`Strategy::Opacus`] instantiates per-sample weight gradients;
//! * [`Strategy::Ghost`] computes weight-gradient norms from Gram matrices
//!   (pass 1), then reruns forward+backward with the factors folded into
//!   the loss gradient (pass 2);
//! * [`Strategy::Mixed`] is Ghost with a per-layer choice of the cheaper
//!   norm route.
//!
//! The noise stream is consumed in parameter registry order with a fixed
//! element order, so runs with equal seeds are comparable bit for bit.

use crate::autograd::{
    ghost_weight_norms, mixed_weight_norms, per_sample_bias_grads, per_sample_weight_grads,
    reweighted_backward, squared_norms_from_grads, summed_backward, GradMap, SquaredNorms,
};
use crate::error::{Error, Result};
use crate::nn::{forward, loss_softmax_ce, Network, ParamKind};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Per-sample clipping rule. The factor is applied multiplicatively to the
/// sample's gradient before summation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClippingFn {
    /// `min(R / norm, 1)`, with a zero norm mapping to 1.
    Abadi { radius: f64 },
    /// `R / (norm + gamma)`: smooth, never exactly 1, always active.
    AutoS { radius: f64, gamma: f64 },
    /// Factor 1 for every sample. Provides no sensitivity bound, so it is
    /// only legal in runs that do not claim privacy.
    NoClip,
}

pub const AUTO_S_DEFAULT_GAMMA: f64 = 0.01;

impl ClippingFn {
    pub fn auto_s(radius: f64) -> ClippingFn {
        ClippingFn::AutoS {
            radius,
            gamma: AUTO_S_DEFAULT_GAMMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ClippingFn::Abadi { radius } => {
                if !(radius > 0.0) || !radius.is_finite() {
                    return Err(Error::Parameter(format!(
                        "clipping radius must be positive and finite, got {radius}"
                    )));
                }
            }
            ClippingFn::AutoS { radius, gamma } => {
                if !(radius > 0.0) || !radius.is_finite() {
                    return Err(Error::Parameter(format!(
                        "clipping radius must be positive and finite, got {radius}"
                    )));
                }
                if !(gamma > 0.0) || !gamma.is_finite() {
                    return Err(Error::Parameter(format!(
                        "clipping gamma must be positive and finite, got {gamma}"
                    )));
                }
            }
            ClippingFn::NoClip => {}
        }
        Ok(())
    }

    /// The sensitivity radius `R`; 1 for the unclipped rule (it only
    /// scales noise in explicitly acknowledged non-private runs).
    pub fn radius(&self) -> f64 {
        match *self {
            ClippingFn::Abadi { radius } | ClippingFn::AutoS { radius, .. } => radius,
            ClippingFn::NoClip => 1.0,
        }
    }

    /// Clipping factor for one per-sample gradient norm.
    pub fn factor(&self, norm: f64) -> Result<f64> {
        if norm < 0.0 || !norm.is_finite() {
            return Err(Error::Internal(format!(
                "gradient norm must be finite and non-negative, got {norm}"
            )));
        }
        Ok(match *self {
            ClippingFn::Abadi { radius } => {
                if norm == 0.0 {
                    1.0
                } else {
                    (radius / norm).min(1.0)
                }
            }
            ClippingFn::AutoS { radius, gamma } => radius / (norm + gamma),
            ClippingFn::NoClip => 1.0,
        })
    }
}

/// Everything a private run must fix up front.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpec {
    /// Poisson sampling probability.
    pub q: f64,
    /// Noise multiplier; noise stddev per element is `sigma * R`.
    pub sigma: f64,
    pub clipping: ClippingFn,
    /// Total number of steps the accountant will compose over.
    pub steps: u64,
    /// Explicit acknowledgment that an unclipped run carries no privacy
    /// guarantee; required to combine `NoClip` with `sigma > 0`.
    pub non_private_ok: bool,
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Parameter(format!(
                "sampling probability must be in (0, 1], got {}",
                self.q
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Parameter(format!(
                "noise multiplier must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.steps == 0 {
            return Err(Error::Parameter("step count must be positive".into()));
        }
        self.clipping.validate()?;
        if matches!(self.clipping, ClippingFn::NoClip)
            && self.sigma != 0.0
            && !self.non_private_ok
        {
            return Err(Error::Policy(
                "unclipped gradients give no sensitivity bound, so noise adds no privacy; \
                 set the non-private acknowledgment flag to run anyway"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// How a full fine-tuning step obtains per-sample weight-gradient norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Instantiate per-sample gradients, then clip and sum them.
    Opacus,
    /// Gram-matrix norms, then a second forward+backward with the factors
    /// folded into the loss gradient.
    Ghost,
    /// Ghost with a per-layer choice of the cheaper norm route.
    Mixed,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Opacus => "opacus",
            Strategy::Ghost => "ghost",
            Strategy::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "opacus" => Ok(Strategy::Opacus),
            "ghost" => Ok(Strategy::Ghost),
            "mixed" => Ok(Strategy::Mixed),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; expected opacus, ghost, or mixed"
            ))),
        }
    }
}

/// Each index enters the batch independently with probability `q`; indices
/// come back ascending. Always draws exactly `n` uniforms, so the stream
/// position after a step is independent of the outcome.
pub fn poisson_sample(n: usize, q: f64, rng: &mut StreamRng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Parameter("cannot sample from an empty set".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Parameter(format!(
            "sampling probability must be in (0, 1], got {q}"
        )));
    }
    let mut out = Vec::new();
    for i in 0..n {
        if rng.next_f64() < q {
            out.push(i);
        }
    }
    Ok(out)
}

/// Aggregate per-parameter squared norms into one norm per sample:
/// `out[i] = sqrt(sum over params of sq[param][i])`.
pub fn aggregate_norm(per_param: &SquaredNorms, batch: usize) -> Result<Vec<f64>> {
    let mut total = vec![0.0f64; batch];
    for (key, sq) in per_param {
        if sq.len() != batch {
            return Err(Error::Internal(format!(
                "{key:?} has {} per-sample norms for batch of {batch}",
                sq.len()
            )));
        }
        for (t, v) in total.iter_mut().zip(sq.iter()) {
            *t += v;
        }
    }
    Ok(total.into_iter().map(f64::sqrt).collect())
}

/// Clipping factors for a batch of aggregated norms.
pub fn clip_factors(norms: &[f64], clipping: &ClippingFn) -> Result<Vec<f64>> {
    norms.iter().map(|&n| clipping.factor(n)).collect()
}

/// Adds i.i.d. `N(0, (sigma * radius)^2)` to every element, in row-major
/// order. With `sigma == 0` the input is returned untouched, bit for bit.
pub fn noisy_sum(sum: &Tensor, sigma: f64, radius: f64, rng: &mut StreamRng) -> Tensor {
    let mut out = sum.clone();
    if sigma != 0.0 {
        let std = sigma * radius;
        for v in out.data_mut() {
            *v += std * rng.next_gaussian();
        }
    }
    out
}

/// Noise every gradient in the map, in registry order. Skips drawing
/// entirely when `sigma == 0` so noise-free runs are bitwise clean.
pub fn add_noise_map(grads: &mut GradMap, sigma: f64, radius: f64, rng: &mut StreamRng) {
    if sigma == 0.0 {
        return;
    }
    let std = sigma * radius;
    for tensor in grads.values_mut() {
        for v in tensor.data_mut() {
            *v += std * rng.next_gaussian();
        }
    }
}

/// Pre-noise result of a clipped-sum computation.
#[derive(Debug)]
pub struct ClippedSum {
    /// Summed clipped gradients, one tensor per trainable parameter.
    pub grads: GradMap,
    /// Aggregated per-sample gradient norms, before clipping.
    pub norms: Vec<f64>,
    /// The factor each sample was scaled by.
    pub factors: Vec<f64>,
    /// Summed per-sample losses (pre-clipping, for reporting only).
    pub loss_sum: f64,
}

/// One private step: noisy clipped gradients plus the per-sample
/// diagnostics the training loop reports.
#[derive(Debug)]
pub struct StepOutput {
    pub grads: GradMap,
    pub norms: Vec<f64>,
    pub factors: Vec<f64>,
    pub loss_sum: f64,
    pub batch: usize,
}

fn zero_grads(net: &Network) -> Result<GradMap> {
    let mut out = GradMap::new();
    for key in net.trainable_params() {
        let shape = net.param(key)?.shape().to_vec();
        out.insert(key, Tensor::zeros(&shape));
    }
    Ok(out)
}

fn debug_check_sensitivity(sum: &ClippedSum, clipping: &ClippingFn) {
    if matches!(clipping, ClippingFn::NoClip) {
        return;
    }
    let radius = clipping.radius();
    for (norm, factor) in sum.norms.iter().zip(sum.factors.iter()) {
        debug_assert!(
            norm * factor <= radius + 1e-9,
            "clipped contribution {} exceeds radius {radius}",
            norm * factor
        );
    }
}

/// Scale each sample's gradient slice by its factor and sum in ascending
/// sample order.
///
/// This is the reduction every clipped sum ends with. It is public so
/// harnesses can time the private extras (norms, factors, this reduction,
/// noise) against the plain step's unweighted reduction; everything else
/// the two steps do is shared code.
pub fn scaled_sum(per_sample: &GradMap, factors: &[f64]) -> GradMap {
    let mut out = GradMap::new();
    for (&key, stack) in per_sample {
        let b = stack.shape()[0];
        let row = stack.numel() / b.max(1);
        let mut sum = Tensor::zeros(&stack.shape()[1..]);
        let sd = sum.data_mut();
        let pd = stack.data();
        for bi in 0..b {
            let c = factors[bi];
            let slice = &pd[bi * row..(bi + 1) * row];
            for (o, v) in sd.iter_mut().zip(slice.iter()) {
                *o += c * v;
            }
        }
        out.insert(key, sum);
    }
    out
}

/// Clipped sum of per-sample bias gradients: one forward (which caches no
/// activations when all weights are frozen) and one backward.
pub fn clipped_bias_sum(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    clipping: &ClippingFn,
) -> Result<ClippedSum> {
    let trace = forward(net, x)?;
    let loss = loss_softmax_ce(&trace.output, labels)?;
    let per_sample = per_sample_bias_grads(net, &trace, &loss.dlogits)?;
    let sq = squared_norms_from_grads(&per_sample);
    let norms = aggregate_norm(&sq, trace.batch())?;
    let factors = clip_factors(&norms, clipping)?;
    let grads = scaled_sum(&per_sample, &factors);
    let out = ClippedSum {
        grads,
        norms,
        factors,
        loss_sum: loss.loss,
    };
    debug_check_sensitivity(&out, clipping);
    Ok(out)
}

/// Clipped sum over all trainable parameters using the chosen norm
/// strategy.
pub fn clipped_full_sum(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    clipping: &ClippingFn,
    strategy: Strategy,
) -> Result<ClippedSum> {
    if !net
        .trainable_params()
        .iter()
        .any(|k| k.kind == ParamKind::Weight)
    {
        return Err(Error::Policy(
            "full-step strategies need trainable weights with cached activations; \
             this network trains no weights, use the bias path"
                .into(),
        ));
    }
    let trace = forward(net, x)?;
    let loss = loss_softmax_ce(&trace.output, labels)?;
    let out = match strategy {
        Strategy::Opacus => {
            let per_sample = per_sample_weight_grads(net, &trace, &loss.dlogits)?;
            let sq = squared_norms_from_grads(&per_sample);
            let norms = aggregate_norm(&sq, trace.batch())?;
            let factors = clip_factors(&norms, clipping)?;
            let grads = scaled_sum(&per_sample, &factors);
            ClippedSum {
                grads,
                norms,
                factors,
                loss_sum: loss.loss,
            }
        }
        Strategy::Ghost | Strategy::Mixed => {
            let sq = if strategy == Strategy::Ghost {
                ghost_weight_norms(net, &trace, &loss.dlogits)?
            } else {
                mixed_weight_norms(net, &trace, &loss.dlogits)?
            };
            let norms = aggregate_norm(&sq, trace.batch())?;
            let factors = clip_factors(&norms, clipping)?;
            // Pass 2: rerun forward and backward with the factors folded
            // into the loss gradient. The recomputation is deliberate —
            // this is the two-backprop realization, and the bench module
            // measures it as such.
            drop(trace);
            let trace2 = forward(net, x)?;
            let loss2 = loss_softmax_ce(&trace2.output, labels)?;
            let grads = reweighted_backward(net, &trace2, &loss2.dlogits, &factors)?;
            ClippedSum {
                grads,
                norms,
                factors,
                loss_sum: loss2.loss,
            }
        }
    };
    debug_check_sensitivity(&out, clipping);
    Ok(out)
}

/// One bias-only private step. The empty batch is legal: its clipped sum
/// is zero, so the step degenerates to pure noise (and still advances the
/// optimizer and the accountant).
pub fn dp_bitfit_step(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    spec: &PrivacySpec,
    noise_rng: &mut StreamRng,
) -> Result<StepOutput> {
    spec.validate()?;
    if net
        .trainable_params()
        .iter()
        .any(|k| k.kind == ParamKind::Weight)
    {
        return Err(Error::Policy(
            "bias-only step requires every weight to be frozen".into(),
        ));
    }
    let batch = x.shape()[0];
    let (mut grads, norms, factors, loss_sum) = if batch == 0 {
        (zero_grads(net)?, Vec::new(), Vec::new(), 0.0)
    } else {
        let sum = clipped_bias_sum(net, x, labels, &spec.clipping)?;
        (sum.grads, sum.norms, sum.factors, sum.loss_sum)
    };
    add_noise_map(&mut grads, spec.sigma, spec.clipping.radius(), noise_rng);
    Ok(StepOutput {
        grads,
        norms,
        factors,
        loss_sum,
        batch,
    })
}

/// One full fine-tuning private step with the chosen strategy.
pub fn dp_full_step(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    spec: &PrivacySpec,
    strategy: Strategy,
    noise_rng: &mut StreamRng,
) -> Result<StepOutput> {
    spec.validate()?;
    let batch = x.shape()[0];
    let (mut grads, norms, factors, loss_sum) = if batch == 0 {
        if !net
            .trainable_params()
            .iter()
            .any(|k| k.kind == ParamKind::Weight)
        {
            return Err(Error::Policy(
                "full-step strategies need trainable weights with cached activations; \
                 this network trains no weights, use the bias path"
                    .into(),
            ));
        }
        (zero_grads(net)?, Vec::new(), Vec::new(), 0.0)
    } else {
        let sum = clipped_full_sum(net, x, labels, &spec.clipping, strategy)?;
        (sum.grads, sum.norms, sum.factors, sum.loss_sum)
    };
    add_noise_map(&mut grads, spec.sigma, spec.clipping.radius(), noise_rng);
    Ok(StepOutput {
        grads,
        norms,
        factors,
        loss_sum,
        batch,
    })
}

/// Plain (non-private) gradient step: forward, backward, sum — no
/// sampling-noise machinery anywhere near the gradients.
pub fn plain_step(net: &Network, x: &Tensor, labels: &[usize]) -> Result<StepOutput> {
    let batch = x.shape()[0];
    if batch == 0 {
        return Ok(StepOutput {
            grads: zero_grads(net)?,
            norms: Vec::new(),
            factors: Vec::new(),
            loss_sum: 0.0,
            batch,
        });
    }
    let trace = forward(net, x)?;
    let loss = loss_softmax_ce(&trace.output, labels)?;
    let grads = summed_backward(net, &trace, &loss.dlogits)?;
    Ok(StepOutput {
        grads,
        norms: Vec::new(),
        factors: Vec::new(),
        loss_sum: loss.loss,
        batch,
    })
}

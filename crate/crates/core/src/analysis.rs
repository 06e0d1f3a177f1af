//! Analytic per-layer time/space cost model for the supported training
//! methods, in element-operation and element counts (never seconds or
//! bytes — the bench harness supplies measured wall-clock and ledger bytes
//! separately).
//!
//! For one layer mapping `B x T x d` to `B x T x p`:
//!
//! * every method pays `4BTpd` for the forward pass plus output gradients;
//! * weight-training methods pay a `2BTpd` base, plus a method extra
//!   (instantiation `+2BTpd`; Gram norms `+2BTpd + 2BT^2(p+d)`; the mixed
//!   route takes the per-layer min of the Gram and instantiation terms;
//!   low-rank adapters pay rank-scaled extras);
//! * bias-training methods pay a `BTp` base and, privately, `+3Bp` — the
//!   only extra with no `T` or `d` factor, which is the whole point.
//!
//! Space mirrors the same split: weight methods start from
//! `pd + BT(p+d)` stored elements, bias methods from `p`.

use crate::error::{Error, Result};

/// Dimensions of one layer's workload: batch `b`, rows `t` (sequence
/// positions or spatial sites), output width `p`, input width `d`, and an
/// adapter rank `r` for the low-rank methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub b: u64,
    pub t: u64,
    pub p: u64,
    pub d: u64,
    pub r: Option<u64>,
}

impl LayerDims {
    pub fn new(b: u64, t: u64, p: u64, d: u64) -> LayerDims {
        LayerDims {
            b,
            t,
            p,
            d,
            r: None,
        }
    }

    pub fn with_rank(mut self, r: u64) -> LayerDims {
        self.r = Some(r);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.t == 0 || self.p == 0 || self.d == 0 {
            return Err(Error::Parameter(format!(
                "layer dims must be positive, got B={} T={} p={} d={}",
                self.b, self.t, self.p, self.d
            )));
        }
        if self.r == Some(0) {
            return Err(Error::Parameter("rank must be positive when given".into()));
        }
        Ok(())
    }

    fn rank_for(&self, method: Method) -> Result<u64> {
        self.r.ok_or_else(|| {
            Error::Parameter(format!(
                "method {} needs an adapter rank r",
                method.name()
            ))
        })
    }
}

/// Training methods covered by the cost model. The engine executes the
/// first six; the low-rank methods are modeled analytically only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    NonDpFull,
    Opacus,
    GhostClip,
    MixGhostClip,
    Lora,
    Adapter,
    NonDpBias,
    DpBias,
}

pub const ALL_METHODS: [Method; 8] = [
    Method::NonDpFull,
    Method::Opacus,
    Method::GhostClip,
    Method::MixGhostClip,
    Method::Lora,
    Method::Adapter,
    Method::NonDpBias,
    Method::DpBias,
];

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::NonDpFull => "non_dp_full",
            Method::Opacus => "opacus",
            Method::GhostClip => "ghost_clip",
            Method::MixGhostClip => "mix_ghost_clip",
            Method::Lora => "lora",
            Method::Adapter => "adapter",
            Method::NonDpBias => "non_dp_bias",
            Method::DpBias => "dp_bias",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        ALL_METHODS
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    ALL_METHODS
                        .iter()
                        .map(|m| m.name())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }

    pub fn trains_bias_only(&self) -> bool {
        matches!(self, Method::NonDpBias | Method::DpBias)
    }

    pub fn needs_rank(&self) -> bool {
        matches!(self, Method::Lora | Method::Adapter)
    }

    /// Number of backward passes one step performs.
    pub fn n_backprops(&self) -> u32 {
        match self {
            Method::GhostClip | Method::MixGhostClip => 2,
            _ => 1,
        }
    }

    /// Whether the method must intercept layer inputs during the forward
    /// pass.
    pub fn needs_forward_hook(&self) -> bool {
        matches!(
            self,
            Method::Opacus
                | Method::GhostClip
                | Method::MixGhostClip
                | Method::Lora
                | Method::Adapter
        )
    }
}

/// Per-layer cost of one training step under a method, in element
/// operations (time) and stored elements (space).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub method: Method,
    /// Forward pass plus output-gradient backward: `4BTpd` for everyone.
    pub forward_and_output_grad_time: u64,
    /// Parameter-gradient base: `2BTpd` for weight methods, `BTp` for bias
    /// methods.
    pub train_base_time: u64,
    /// Method-specific additional operations.
    pub train_extra_time: u64,
    pub total_time: u64,
    /// Stored elements every variant of the method needs.
    pub space_baseline: u64,
    /// Method-specific additional stored elements.
    pub space_extra: u64,
    pub space_total: u64,
    pub n_backprops: u32,
    pub needs_forward_hook: bool,
}

/// Time fields of the cost report.
pub fn time_cost(dims: &LayerDims, method: Method) -> Result<(u64, u64, u64, u64)> {
    dims.validate()?;
    let (b, t, p, d) = (dims.b, dims.t, dims.p, dims.d);
    let fwd_outgrad = 4 * b * t * p * d;
    let (base, extra) = match method {
        Method::NonDpFull => (2 * b * t * p * d, 0),
        Method::Opacus => (2 * b * t * p * d, 2 * b * t * p * d),
        Method::GhostClip => (2 * b * t * p * d, 2 * b * t * p * d + 2 * b * t * t * (p + d)),
        Method::MixGhostClip => (
            2 * b * t * p * d,
            2 * b * t * p * d + (2 * b * t * t * (p + d)).min(2 * b * t * p * d),
        ),
        Method::Lora => {
            let r = dims.rank_for(method)?;
            (2 * b * t * p * d, 2 * b * t * (p * r + d * r))
        }
        Method::Adapter => {
            let r = dims.rank_for(method)?;
            (2 * b * t * p * d, 4 * b * t * p * r)
        }
        Method::NonDpBias => (b * t * p, 0),
        Method::DpBias => (b * t * p, 3 * b * p),
    };
    Ok((fwd_outgrad, base, extra, fwd_outgrad + base + extra))
}

/// Space fields of the cost report.
pub fn space_cost(dims: &LayerDims, method: Method) -> Result<(u64, u64, u64)> {
    dims.validate()?;
    let (b, t, p, d) = (dims.b, dims.t, dims.p, dims.d);
    let (baseline, extra) = if method.trains_bias_only() {
        let extra = match method {
            Method::DpBias => b * p,
            _ => 0,
        };
        (p, extra)
    } else {
        let baseline = p * d + b * t * (p + d);
        let extra = match method {
            Method::NonDpFull => 0,
            Method::Opacus => b * p * d,
            Method::GhostClip => 2 * b * t * t,
            Method::MixGhostClip => (2 * b * t * t).min(2 * b * p * d),
            Method::Lora => {
                let r = dims.rank_for(method)?;
                b * (p * r + d * r)
            }
            Method::Adapter => {
                let r = dims.rank_for(method)?;
                2 * b * p * r
            }
            _ => unreachable!(),
        };
        (baseline, extra)
    };
    Ok((baseline, extra, baseline + extra))
}

/// Full per-layer report for one method.
pub fn cost_report(dims: &LayerDims, method: Method) -> Result<CostReport> {
    let (fwd, base, textra, ttotal) = time_cost(dims, method)?;
    let (sbase, sextra, stotal) = space_cost(dims, method)?;
    Ok(CostReport {
        method,
        forward_and_output_grad_time: fwd,
        train_base_time: base,
        train_extra_time: textra,
        total_time: ttotal,
        space_baseline: sbase,
        space_extra: sextra,
        space_total: stotal,
        n_backprops: method.n_backprops(),
        needs_forward_hook: method.needs_forward_hook(),
    })
}

/// Ratio of summed per-layer total time of `method_a` to `method_b` across
/// a network.
pub fn network_ratio(net_dims: &[LayerDims], method_a: Method, method_b: Method) -> Result<f64> {
    if net_dims.is_empty() {
        return Err(Error::Parameter("network has no layers to compare".into()));
    }
    let mut num = 0u64;
    let mut den = 0u64;
    for dims in net_dims {
        num += time_cost(dims, method_a)?.3;
        den += time_cost(dims, method_b)?.3;
    }
    Ok(num as f64 / den as f64)
}

/// Parameter census of a network (totals, bias share).
pub use crate::nn::{count_params as param_report, ParamCount};

//! Benchmark harness: wall-time and ledger-peak memory for one training
//! step, swept over feature dimension T (`bench-scaling`) or over model
//! sizes under a memory budget (`bench-models`).
//!
//! Memory is measured by the engine's allocation ledger, not the OS: the
//! cost model's space columns are element counts, and ledger bytes map onto
//! them exactly, so the numbers are reproducible anywhere. Timing takes the
//! median of five reps after two warmups, all sequential. Every measured
//! region is followed by a ledger audit, so a tensor that escaped its tag
//! accounting fails the run instead of skewing a column.

use std::time::Instant;

use dpbf_core::analysis::Method;
use dpbf_core::error::{Error, Result};
use dpbf_core::ledger::{self, AllocTag};
use dpbf_core::nn::{LayerKind, Mode, Network};
use dpbf_core::privacy::{
    dp_bitfit_step, dp_full_step, plain_step, ClippingFn, PrivacySpec, Strategy,
};
use dpbf_core::rng::StreamRng;
use dpbf_core::tensor::{gaussian, Tensor};

pub const WARMUP_REPS: usize = 2;
pub const MEASURED_REPS: usize = 5;

/// One row of benchmark output.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: Method,
    pub b: usize,
    pub t: usize,
    pub model_tag: String,
    /// Median over measured reps; NaN flags a rep with a non-finite loss.
    pub step_wall_seconds: f64,
    pub peak_bytes: u64,
    pub activation_cache_bytes: u64,
    pub per_sample_grad_bytes: u64,
    /// Only `bench-models` fills this in.
    pub max_batch: Option<usize>,
}

pub const BENCH_CSV_HEADER: &str =
    "method,B,T,model_tag,step_wall_seconds,peak_bytes,activation_cache_bytes,per_sample_grad_bytes,max_batch";

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let max_batch = r.max_batch.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method.name(),
            r.b,
            r.t,
            r.model_tag,
            r.step_wall_seconds,
            r.peak_bytes,
            r.activation_cache_bytes,
            r.per_sample_grad_bytes,
            max_batch
        ));
    }
    out
}

/// The methods the harness can actually execute (the other two are
/// analytic-only entries in the cost model).
pub fn runnable(method: Method) -> bool {
    !matches!(method, Method::Lora | Method::Adapter)
}

fn network_for(method: Method, kinds: &[LayerKind], seed: u64) -> Result<Network> {
    let mode = if method.trains_bias_only() { Mode::Bitfit } else { Mode::Full };
    let mut rng = StreamRng::new(seed, "init");
    Network::new(kinds.to_vec(), mode, &mut rng)
}

fn bench_spec() -> PrivacySpec {
    PrivacySpec {
        q: 1.0,
        sigma: 1.0,
        clipping: ClippingFn::auto_s(1.0),
        steps: 1,
        non_private_ok: false,
    }
}

/// Runs one training step for `method` and returns the loss sum.
fn run_step(
    method: Method,
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    noise: &mut StreamRng,
) -> Result<f64> {
    let spec = bench_spec();
    let out = match method {
        Method::NonDpFull | Method::NonDpBias => plain_step(net, x, labels)?,
        Method::Opacus => dp_full_step(net, x, labels, &spec, Strategy::Opacus, noise)?,
        Method::GhostClip => dp_full_step(net, x, labels, &spec, Strategy::Ghost, noise)?,
        Method::MixGhostClip => dp_full_step(net, x, labels, &spec, Strategy::Mixed, noise)?,
        Method::DpBias => dp_bitfit_step(net, x, labels, &spec, noise)?,
        Method::Lora | Method::Adapter => {
            return Err(Error::Config(format!(
                "method {} is analytic-only; the bench can run: {}",
                method.name(),
                runnable_names().join(", ")
            )))
        }
    };
    Ok(out.loss_sum)
}

pub fn runnable_names() -> Vec<&'static str> {
    dpbf_core::analysis::ALL_METHODS
        .iter()
        .copied()
        .filter(|m| runnable(*m))
        .map(|m| m.name())
        .collect()
}

/// Memory + timing for one (method, input) cell. The dedicated memory rep
/// keeps ledger reads out of the timed region.
fn measure_cell(
    method: Method,
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<(f64, u64, u64, u64)> {
    let mut noise = StreamRng::new(seed, "noise");
    for _ in 0..WARMUP_REPS {
        run_step(method, net, x, labels, &mut noise)?;
    }

    ledger::begin_peak_window();
    let loss = run_step(method, net, x, labels, &mut noise)?;
    let peak = ledger::window_peak_bytes();
    let cache = ledger::window_tag_peak(AllocTag::ActivationCache);
    let psg = ledger::window_tag_peak(AllocTag::PerSampleGrad);
    ledger::audit()?;

    let mut finite = loss.is_finite();
    let mut times = Vec::with_capacity(MEASURED_REPS);
    for _ in 0..MEASURED_REPS {
        let start = Instant::now();
        let loss = run_step(method, net, x, labels, &mut noise)?;
        times.push(start.elapsed().as_secs_f64());
        finite &= loss.is_finite();
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("wall times are finite"));
    let median = times[times.len() / 2];
    ledger::audit()?;
    let wall = if finite { median } else { f64::NAN };
    Ok((wall, peak, cache, psg))
}

/// `bench-scaling`: fixed batch, a single linear layer of the given width,
/// one measured cell per (method, T). Rows come back sorted by
/// (method name, T).
pub fn bench_scaling(
    methods: &[Method],
    t_list: &[usize],
    batch: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if t_list.len() < 2 {
        return Err(Error::Config(
            "bench-scaling needs at least two T values to show a trend".into(),
        ));
    }
    if methods.is_empty() {
        return Err(Error::Config("bench-scaling needs at least one method".into()));
    }
    for m in methods {
        if !runnable(*m) {
            return Err(Error::Config(format!(
                "method {} is analytic-only; the bench can run: {}",
                m.name(),
                runnable_names().join(", ")
            )));
        }
    }
    let kinds = vec![LayerKind::Linear { d_in: width, d_out: width }];
    let tag = format!("linear_{width}");
    let mut rows = Vec::new();
    let mut sorted: Vec<Method> = methods.to_vec();
    sorted.sort_by_key(|m| m.name());
    sorted.dedup();
    let mut ts = t_list.to_vec();
    ts.sort_unstable();
    ts.dedup();
    for method in sorted {
        let net = network_for(method, &kinds, seed)?;
        for &t in &ts {
            let mut data_rng = StreamRng::new(seed ^ t as u64, "task");
            let x = gaussian(&[batch, t, width], 0.0, 1.0, &mut data_rng)?;
            let labels: Vec<usize> = (0..batch).map(|i| i % width).collect();
            let (wall, peak, cache, psg) = measure_cell(method, &net, &x, &labels, seed)?;
            if wall.is_nan() {
                eprintln!(
                    "warning: non-finite loss for method={} T={t}; row flagged",
                    method.name()
                );
            }
            rows.push(BenchRow {
                method,
                b: batch,
                t,
                model_tag: tag.clone(),
                step_wall_seconds: wall,
                peak_bytes: peak,
                activation_cache_bytes: cache,
                per_sample_grad_bytes: psg,
                max_batch: None,
            });
        }
    }
    Ok(rows)
}

/// Ledger peak for one step of `method` at batch size `b`.
fn peak_at_batch(
    method: Method,
    net: &Network,
    t: usize,
    dims: usize,
    classes: usize,
    b: usize,
    seed: u64,
) -> Result<u64> {
    let mut data_rng = StreamRng::new(seed ^ b as u64, "task");
    let x = gaussian(&[b, t, dims], 0.0, 1.0, &mut data_rng)?;
    let labels: Vec<usize> = (0..b).map(|i| i % classes).collect();
    let mut noise = StreamRng::new(seed, "noise");
    ledger::begin_peak_window();
    run_step(method, net, &x, &labels, &mut noise)?;
    let peak = ledger::window_peak_bytes();
    ledger::audit()?;
    Ok(peak)
}

/// Largest batch whose step peak fits the budget: doubling then bisection.
/// Returns 0 when even B=1 does not fit.
pub fn max_batch_under_budget(
    method: Method,
    net: &Network,
    t: usize,
    dims: usize,
    classes: usize,
    budget_bytes: u64,
    seed: u64,
) -> Result<usize> {
    const CAP: usize = 1 << 20;
    if peak_at_batch(method, net, t, dims, classes, 1, seed)? > budget_bytes {
        return Ok(0);
    }
    let mut lo = 1usize; // known to fit
    let mut hi = 2usize;
    while hi <= CAP && peak_at_batch(method, net, t, dims, classes, hi, seed)? <= budget_bytes {
        lo = hi;
        hi *= 2;
    }
    if hi > CAP {
        return Ok(lo);
    }
    // Invariant: lo fits, hi does not.
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if peak_at_batch(method, net, t, dims, classes, mid, seed)? <= budget_bytes {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// `bench-models`: for each (method, width) find the maximum batch under
/// the byte budget, then measure a step at that batch. The model is an MLP
/// `dims -> width -> classes` and the tag records the width.
pub fn bench_models(
    methods: &[Method],
    widths: &[usize],
    budget_bytes: u64,
    t: usize,
    dims: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if methods.is_empty() || widths.is_empty() {
        return Err(Error::Config("bench-models needs methods and widths".into()));
    }
    for m in methods {
        if !runnable(*m) {
            return Err(Error::Config(format!(
                "method {} is analytic-only; the bench can run: {}",
                m.name(),
                runnable_names().join(", ")
            )));
        }
    }
    let mut sorted: Vec<Method> = methods.to_vec();
    sorted.sort_by_key(|m| m.name());
    sorted.dedup();
    let mut ws = widths.to_vec();
    ws.sort_unstable();
    ws.dedup();
    let mut rows = Vec::new();
    let mut any_fit = false;
    for &width in &ws {
        let kinds = vec![
            LayerKind::Linear { d_in: dims, d_out: width },
            LayerKind::Relu,
            LayerKind::Linear { d_in: width, d_out: classes },
        ];
        let tag = format!("mlp_{width}");
        for &method in &sorted {
            let net = network_for(method, &kinds, seed)?;
            let max_batch =
                max_batch_under_budget(method, &net, t, dims, classes, budget_bytes, seed)?;
            if max_batch == 0 {
                eprintln!(
                    "warning: method={} model={tag} does not fit one sample in the budget",
                    method.name()
                );
                rows.push(BenchRow {
                    method,
                    b: 0,
                    t,
                    model_tag: tag.clone(),
                    step_wall_seconds: f64::NAN,
                    peak_bytes: 0,
                    activation_cache_bytes: 0,
                    per_sample_grad_bytes: 0,
                    max_batch: Some(0),
                });
                continue;
            }
            any_fit = true;
            let mut data_rng = StreamRng::new(seed ^ max_batch as u64, "task");
            let x = gaussian(&[max_batch, t, dims], 0.0, 1.0, &mut data_rng)?;
            let labels: Vec<usize> = (0..max_batch).map(|i| i % classes).collect();
            let (wall, peak, cache, psg) = measure_cell(method, &net, &x, &labels, seed)?;
            println!(
                "model={tag} method={} max_batch={max_batch} throughput={:.1} samples/s",
                method.name(),
                max_batch as f64 / wall
            );
            rows.push(BenchRow {
                method,
                b: max_batch,
                t,
                model_tag: tag.clone(),
                step_wall_seconds: wall,
                peak_bytes: peak,
                activation_cache_bytes: cache,
                per_sample_grad_bytes: psg,
                max_batch: Some(max_batch),
            });
        }
    }
    if !any_fit {
        return Err(Error::Config(format!(
            "budget of {budget_bytes} bytes is below one sample's footprint for every method"
        )));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_rows_are_sorted_and_complete() {
        let rows = bench_scaling(
            &[Method::DpBias, Method::NonDpBias],
            &[4, 8],
            2,
            6,
            3,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        let keys: Vec<(&str, usize)> = rows.iter().map(|r| (r.method.name(), r.t)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for r in &rows {
            assert!(r.step_wall_seconds.is_finite() && r.step_wall_seconds > 0.0);
            assert!(r.peak_bytes >= r.activation_cache_bytes + r.per_sample_grad_bytes);
            assert!(r.max_batch.is_none());
        }
    }

    #[test]
    fn bitfit_rows_cache_no_activations() {
        let rows = bench_scaling(&[Method::DpBias], &[4, 8, 16], 2, 5, 1).unwrap();
        for r in &rows {
            assert_eq!(r.activation_cache_bytes, 0, "T={}", r.t);
        }
    }

    #[test]
    fn scaling_needs_two_t_values() {
        let err = bench_scaling(&[Method::DpBias], &[4], 2, 5, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn analytic_methods_are_refused() {
        let err = bench_scaling(&[Method::Lora], &[4, 8], 2, 5, 1).unwrap_err();
        assert!(err.to_string().contains("analytic-only"));
    }

    #[test]
    fn doubling_search_matches_exhaustive_search() {
        let kinds = vec![
            LayerKind::Linear { d_in: 3, d_out: 4 },
            LayerKind::Relu,
            LayerKind::Linear { d_in: 4, d_out: 2 },
        ];
        for method in [Method::Opacus, Method::DpBias, Method::NonDpFull] {
            let net = network_for(method, &kinds, 11).unwrap();
            for budget in [4_000u64, 12_000, 40_000] {
                let fast =
                    max_batch_under_budget(method, &net, 2, 3, 2, budget, 11).unwrap();
                // Exhaustive oracle: walk batches up from 1.
                let mut slow = 0usize;
                for b in 1..200 {
                    if peak_at_batch(method, &net, 2, 3, 2, b, 11).unwrap() <= budget {
                        slow = b;
                    } else {
                        break;
                    }
                }
                assert_eq!(fast, slow, "method {} budget {budget}", method.name());
            }
        }
    }

    #[test]
    fn bias_methods_fit_larger_batches_than_opacus() {
        let kinds = vec![
            LayerKind::Linear { d_in: 6, d_out: 32 },
            LayerKind::Relu,
            LayerKind::Linear { d_in: 32, d_out: 3 },
        ];
        let budget = 300_000u64;
        let opacus = {
            let net = network_for(Method::Opacus, &kinds, 5).unwrap();
            max_batch_under_budget(Method::Opacus, &net, 4, 6, 3, budget, 5).unwrap()
        };
        let bias = {
            let net = network_for(Method::DpBias, &kinds, 5).unwrap();
            max_batch_under_budget(Method::DpBias, &net, 4, 6, 3, budget, 5).unwrap()
        };
        assert!(opacus >= 1);
        assert!(
            bias > opacus,
            "bias-only max batch {bias} should beat opacus {opacus}"
        );
    }

    #[test]
    fn csv_shape_is_stable() {
        let rows = vec![BenchRow {
            method: Method::Opacus,
            b: 4,
            t: 16,
            model_tag: "linear_8".into(),
            step_wall_seconds: 0.25,
            peak_bytes: 1000,
            activation_cache_bytes: 300,
            per_sample_grad_bytes: 200,
            max_batch: None,
        }];
        let csv = rows_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), BENCH_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "opacus,4,16,linear_8,0.25,1000,300,200,");
    }
}

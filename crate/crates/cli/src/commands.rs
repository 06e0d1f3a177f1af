//! Subcommand bodies: training runs with their file outputs, accountant
//! queries, the analytic cost table, and the parameter census. Each body
//! is a pure function returning strings/values so tests can call it
//! without touching stdout; the `cmd_*` wrappers do the printing and file
//! writes.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use dpbf_core::accountant::{calibrate_sigma, eps_for};
use dpbf_core::analysis::{cost_report, LayerDims, Method, ALL_METHODS};
use dpbf_core::error::{Error, Result};
use dpbf_core::nn::{count_params, save_checkpoint};
use dpbf_core::train::{make_task, train, EpochMetrics, TrainOutput};

use crate::config::RunSpec;

pub const METRICS_CSV_HEADER: &str =
    "epoch,step,loss,accuracy,eps_so_far,grad_norm_median,clip_fraction";

pub const COMPLEXITY_CSV_HEADER: &str =
    "method,layer_index,B,T,p,d,r,time_total,space_total,n_backprops,forward_hook";

/// Renders per-epoch metrics. `f64` Display keeps full shortest-round-trip
/// precision and writes non-finite values as `NaN` / `inf`, which is what
/// downstream parsers expect for non-private columns.
pub fn metrics_to_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.epoch, m.step, m.loss, m.accuracy, m.eps_so_far, m.grad_norm_median, m.clip_fraction
        )
        .expect("string writes cannot fail");
    }
    out
}

/// Privacy summary of a finished run. Non-private runs report `null`
/// budget fields but the true step count, so the file always says what
/// happened.
pub fn privacy_report_json(out: &TrainOutput) -> Value {
    match &out.privacy {
        Some(r) => json!({
            "eps": r.eps,
            "delta": r.delta,
            "sigma": r.sigma,
            "steps": r.steps,
            "alpha": r.alpha,
        }),
        None => json!({
            "eps": null,
            "delta": null,
            "sigma": null,
            "steps": out.total_steps,
            "alpha": null,
        }),
    }
}

/// Runs a training job end to end and writes `metrics.csv`, `model.ckpt`,
/// and `privacy_report.json` into the run's output directory.
pub fn cmd_train(spec: &RunSpec) -> Result<()> {
    let data = make_task(&spec.task)?;
    let mut net = spec.build_network()?;
    let out = train(&mut net, &data, &spec.train)?;

    std::fs::create_dir_all(&spec.output_dir)?;
    let metrics_path = spec.output_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_to_csv(&out.metrics))?;
    let ckpt_path = spec.output_dir.join("model.ckpt");
    save_checkpoint(&net, &ckpt_path)?;
    let report_path = spec.output_dir.join("privacy_report.json");
    let mut report = serde_json::to_string_pretty(&privacy_report_json(&out))
        .expect("report serializes");
    report.push('\n');
    std::fs::write(&report_path, report)?;

    if let Some(last) = out.metrics.last() {
        println!(
            "trained {} steps: loss={} accuracy={}",
            out.total_steps, last.loss, last.accuracy
        );
    }
    match &out.privacy {
        Some(r) => println!("privacy: eps={} at delta={} (alpha={})", r.eps, r.delta, r.alpha),
        None => println!("privacy: non-private run"),
    }
    println!(
        "wrote {}, {}, {}",
        metrics_path.display(),
        ckpt_path.display(),
        report_path.display()
    );
    Ok(())
}

/// Accountant query: epsilon spent by `steps` subsampled-Gaussian steps.
pub fn account_json(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<Value> {
    let ed = eps_for(q, sigma, steps, delta)?;
    Ok(json!({
        "eps": ed.eps,
        "alpha": ed.alpha,
        "sigma": sigma,
        "steps": steps,
        "q": q,
        "delta": delta,
    }))
}

pub fn cmd_account(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<()> {
    println!("{}", account_json(q, sigma, steps, delta)?);
    Ok(())
}

/// Inverse accountant query: smallest noise multiplier meeting an epsilon
/// budget; the reported `eps` is what that multiplier actually spends.
pub fn calibrate_json(target_eps: f64, delta: f64, q: f64, steps: u64) -> Result<Value> {
    let sigma = calibrate_sigma(target_eps, delta, q, steps)?;
    let ed = eps_for(q, sigma, steps, delta)?;
    Ok(json!({
        "eps": ed.eps,
        "alpha": ed.alpha,
        "sigma": sigma,
        "steps": steps,
        "q": q,
        "delta": delta,
    }))
}

pub fn cmd_calibrate(target_eps: f64, delta: f64, q: f64, steps: u64) -> Result<()> {
    println!("{}", calibrate_json(target_eps, delta, q, steps)?);
    Ok(())
}

/// Methods that work without an adapter rank; used as the default set when
/// no rank is supplied.
fn rankless_methods() -> Vec<Method> {
    ALL_METHODS.iter().copied().filter(|m| !m.needs_rank()).collect()
}

/// Builds the analytic cost table: one row per (method, parametric layer).
/// `layers` pairs each layer index with its workload dimensions.
pub fn complexity_csv(layers: &[(usize, LayerDims)], methods: &[Method]) -> Result<String> {
    if layers.is_empty() {
        return Err(Error::Config("no parametric layers to model".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let mut sorted: Vec<Method> = methods.to_vec();
    sorted.sort_by_key(|m| m.name());
    sorted.dedup();
    let mut out = String::from(COMPLEXITY_CSV_HEADER);
    out.push('\n');
    for method in sorted {
        for &(index, dims) in layers {
            let report = cost_report(&dims, method)?;
            let r = dims.r.map(|r| r.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                method.name(),
                index,
                dims.b,
                dims.t,
                dims.p,
                dims.d,
                r,
                report.total_time,
                report.space_total,
                report.n_backprops,
                report.needs_forward_hook
            )
            .expect("string writes cannot fail");
        }
    }
    Ok(out)
}

/// Parses a comma-separated method list, or defaults to every method the
/// given rank supports.
pub fn parse_methods(arg: Option<&str>, have_rank: bool) -> Result<Vec<Method>> {
    match arg {
        Some(list) => list.split(',').map(|s| Method::parse(s.trim())).collect(),
        None if have_rank => Ok(ALL_METHODS.to_vec()),
        None => Ok(rankless_methods()),
    }
}

/// Cost table for a single synthetic layer given as raw dimensions.
pub fn complexity_from_dims(
    b: u64,
    t: u64,
    p: u64,
    d: u64,
    r: Option<u64>,
    methods: &[Method],
) -> Result<String> {
    let mut dims = LayerDims::new(b, t, p, d);
    if let Some(r) = r {
        dims = dims.with_rank(r);
    }
    complexity_csv(&[(0, dims)], methods)
}

/// Cost table for every parametric layer of a configured network, at the
/// given batch size.
pub fn complexity_from_spec(spec: &RunSpec, batch: u64, methods: &[Method]) -> Result<String> {
    let dims = match spec.task.kind {
        dpbf_core::train::TaskKind::Blobs { dims, .. }
        | dpbf_core::train::TaskKind::Teacher { dims, .. } => dims,
    };
    let net = spec.build_network()?;
    let per_layer = net.layer_dims(&[1, dims])?;
    let layers: Vec<(usize, LayerDims)> = per_layer
        .into_iter()
        .map(|(i, t, p, d)| (i, LayerDims::new(batch, t as u64, p as u64, d as u64)))
        .collect();
    complexity_csv(&layers, methods)
}

/// Parameter census of the configured network.
pub fn param_report_json(spec: &RunSpec) -> Result<Value> {
    let net = spec.build_network()?;
    let count = count_params(&net);
    Ok(json!({
        "total": count.total,
        "bias": count.bias,
        "fraction": count.fraction,
        "empty": count.empty,
    }))
}

pub fn cmd_param_report(spec: &RunSpec) -> Result<()> {
    println!("{}", param_report_json(spec)?);
    Ok(())
}

/// Writes `text` to stdout and, when a directory is given, to `name`
/// inside it.
pub fn emit(text: &str, out_dir: Option<&Path>, name: &str) -> Result<()> {
    print!("{text}");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_prints_non_finite_values_verbatim() {
        let rows = vec![EpochMetrics {
            epoch: 1,
            step: 4,
            loss: 0.5,
            accuracy: 0.75,
            eps_so_far: f64::INFINITY,
            grad_norm_median: f64::NAN,
            clip_fraction: f64::NAN,
        }];
        let csv = metrics_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "1,4,0.5,0.75,inf,NaN,NaN");
    }

    #[test]
    fn account_json_has_the_full_field_set() {
        let v = account_json(0.01, 1.0, 100, 1e-5).unwrap();
        for key in ["eps", "alpha", "sigma", "steps", "q", "delta"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["eps"].as_f64().unwrap() > 0.0);
        assert!(v["alpha"].as_u64().unwrap() >= 2);
    }

    #[test]
    fn calibrate_json_meets_its_budget() {
        let v = calibrate_json(3.0, 1e-5, 0.02, 200).unwrap();
        let eps = v["eps"].as_f64().unwrap();
        assert!(eps <= 3.0, "spent {eps}");
        assert!(v["sigma"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn complexity_rows_carry_exact_model_values() {
        let dims = LayerDims::new(2, 3, 5, 4);
        let csv = complexity_csv(&[(0, dims)], &[Method::NonDpFull, Method::DpBias]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], COMPLEXITY_CSV_HEADER);
        // dp_bias sorts before non_dp_full. Hand check at B=2 T=3 p=5 d=4:
        // dp_bias time 480+30+30, space 5+10; non_dp_full time 480+240,
        // space 20+54.
        assert_eq!(lines[1], "dp_bias,0,2,3,5,4,,540,15,1,false");
        assert_eq!(lines[2], "non_dp_full,0,2,3,5,4,,720,74,1,false");
    }

    #[test]
    fn rank_method_without_rank_is_an_error() {
        let dims = LayerDims::new(2, 3, 5, 4);
        let err = complexity_csv(&[(0, dims)], &[Method::Lora]).unwrap_err();
        assert!(err.to_string().contains("rank"));
    }

    #[test]
    fn default_method_set_depends_on_rank() {
        assert_eq!(parse_methods(None, false).unwrap().len(), 6);
        assert_eq!(parse_methods(None, true).unwrap().len(), 8);
        let picked = parse_methods(Some("opacus, ghost_clip"), false).unwrap();
        assert_eq!(picked, vec![Method::Opacus, Method::GhostClip]);
        assert!(parse_methods(Some("sgd"), false).is_err());
    }
}

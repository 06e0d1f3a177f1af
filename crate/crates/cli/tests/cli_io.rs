//! End-to-end tests of the `dpbf` binary: run files, exit codes, output
//! formats, and determinism, all through the real executable.

use std::path::Path;
use std::process::{Command, Output};

use dpbf_core::nn::{load_checkpoint, LayerKind, Mode, Network};
use dpbf_core::rng::StreamRng;

fn dpbf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpbf"))
}

fn run(args: &[&str]) -> Output {
    dpbf().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, body: &serde_json::Value) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, body.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn base_config(out_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "task": {"kind": "blobs", "n": 120, "dims": 2, "classes": 2, "separation": 4.0},
        "network": [
            {"type": "linear", "in": 2, "out": 8},
            {"type": "relu"},
            {"type": "linear", "in": 8, "out": 2}
        ],
        "mode": "bitfit",
        "privacy": {"sigma": 0.8, "delta": 1e-5, "clipping": "auto_s", "R": 1.0},
        "optimizer": {"type": "adam", "lr": 0.1},
        "epochs": 2,
        "q": 0.25,
        "seed": 11,
        "output_dir": out_dir.join("out").to_str().unwrap()
    })
}

#[test]
fn train_writes_all_artifacts_with_pinned_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(dir.path()));
    let out = run(&["train", "--config", &cfg]);
    assert_success(&out);

    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "epoch,step,loss,accuracy,eps_so_far,grad_norm_median,clip_fraction"
    );
    assert_eq!(metrics.lines().count(), 3, "header plus one row per epoch");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/privacy_report.json")).unwrap())
            .unwrap();
    for key in ["eps", "delta", "sigma", "steps", "alpha"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["sigma"].as_f64(), Some(0.8));
    assert_eq!(report["steps"].as_u64(), Some(8));
    assert!(dir.path().join("out/model.ckpt").exists());
}

#[test]
fn missing_section_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg_v = base_config(dir.path());
    cfg_v.as_object_mut().unwrap().remove("network");
    let cfg = write_config(dir.path(), &cfg_v);
    let out = run(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/network"), "stderr: {stderr}");
}

#[test]
fn unparseable_numbers_exit_2() {
    let out = run(&["account", "--q", "fast", "--sigma", "1", "--steps", "1", "--delta", "1e-5"]);
    assert_eq!(out.status.code(), Some(2), "clap rejects bad values with code 2");
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_v = serde_json::json!({
        "task": {"kind": "blobs", "n": 64, "dims": 2, "classes": 2, "separation": 4.0},
        "network": [
            {"type": "linear", "in": 2, "out": 4},
            {"type": "linear", "in": 4, "out": 2}
        ],
        "mode": "full",
        "optimizer": {"type": "sgd", "lr": 1e160},
        "epochs": 2,
        "q": 1.0,
        "seed": 1,
        "output_dir": dir.path().join("divout").to_str().unwrap()
    });
    let cfg = write_config(dir.path(), &cfg_v);
    let out = run(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("diverged"), "stderr: {stderr}");
}

#[test]
fn bitfit_checkpoint_keeps_initial_weights_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(dir.path()));
    assert_success(&run(&["train", "--config", &cfg]));

    let kinds = vec![
        LayerKind::Linear { d_in: 2, d_out: 8 },
        LayerKind::Relu,
        LayerKind::Linear { d_in: 8, d_out: 2 },
    ];
    // Rebuild the starting network exactly as the run did.
    let mut rng = StreamRng::new(11, "init");
    let fresh = Network::new(kinds.clone(), Mode::Bitfit, &mut rng).unwrap();
    let mut rng = StreamRng::new(11, "init");
    let mut trained = Network::new(kinds, Mode::Bitfit, &mut rng).unwrap();
    load_checkpoint(&mut trained, &dir.path().join("out/model.ckpt")).unwrap();

    let mut bias_moved = false;
    for (a, b) in fresh.layers().iter().zip(trained.layers().iter()) {
        if let (Some(wa), Some(wb)) = (a.weight(), b.weight()) {
            assert_eq!(wa.data(), wb.data(), "weights must stay at their initial values");
        }
        if let (Some(ba), Some(bb)) = (a.bias(), b.bias()) {
            bias_moved |= ba.data() != bb.data();
        }
    }
    assert!(bias_moved, "training should have moved at least one bias");
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg_a = write_config(dir_a.path(), &base_config(dir_a.path()));
    let cfg_b = write_config(dir_b.path(), &base_config(dir_b.path()));
    assert_success(&run(&["train", "--config", &cfg_a]));
    assert_success(&run(&["train", "--config", &cfg_b]));

    let metrics_a = std::fs::read(dir_a.path().join("out/metrics.csv")).unwrap();
    let metrics_b = std::fs::read(dir_b.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b);
    let ckpt_a = std::fs::read(dir_a.path().join("out/model.ckpt")).unwrap();
    let ckpt_b = std::fs::read(dir_b.path().join("out/model.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(dir.path()));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    assert_success(&run(&["train", "--config", &cfg, "--seed", "21", "--out", out_a.to_str().unwrap()]));
    assert_success(&run(&["train", "--config", &cfg, "--seed", "22", "--out", out_b.to_str().unwrap()]));
    let a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_ne!(a, b, "different seeds must give different trajectories");
}

#[test]
fn account_reports_the_known_single_step_epsilon() {
    let out = run(&["account", "--q", "1", "--sigma", "1", "--steps", "1", "--delta", "1e-5"]);
    assert_success(&out);
    let v: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("account prints one JSON object");
    for key in ["eps", "alpha", "sigma", "steps", "q", "delta"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let eps = v["eps"].as_f64().unwrap();
    assert!((eps - 5.3026).abs() < 0.01, "eps {eps}");
}

#[test]
fn calibrate_round_trips_through_account() {
    let out = run(&["calibrate", "--eps", "3", "--delta", "1e-5", "--q", "0.02", "--steps", "50"]);
    assert_success(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let sigma = v["sigma"].as_f64().unwrap();
    let spent = v["eps"].as_f64().unwrap();
    assert!(spent <= 3.0);

    let check = run(&[
        "account",
        "--q",
        "0.02",
        "--sigma",
        &format!("{sigma}"),
        "--steps",
        "50",
        "--delta",
        "1e-5",
    ]);
    assert_success(&check);
    let v2: serde_json::Value = serde_json::from_slice(&check.stdout).unwrap();
    assert_eq!(v2["eps"].as_f64().unwrap(), spent, "account must agree with calibrate");
}

#[test]
fn complexity_csv_header_and_flag_form() {
    let out = run(&["complexity", "--b", "2", "--t", "3", "--p", "5", "--d", "4"]);
    assert_success(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,layer_index,B,T,p,d,r,time_total,space_total,n_backprops,forward_hook"
    );
    assert_eq!(lines.clone().count(), 6, "six rankless methods");
    assert!(lines.any(|l| l == "non_dp_full,0,2,3,5,4,,720,74,1,false"));
}

#[test]
fn complexity_needs_dims_or_config() {
    let out = run(&["complexity"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_scaling_writes_sorted_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "bench-scaling",
        "--methods",
        "dp_bias,non_dp_bias",
        "--t",
        "4,8",
        "--batch",
        "2",
        "--width",
        "4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    let csv = std::fs::read_to_string(dir.path().join("bench_scaling.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "method,B,T,model_tag,step_wall_seconds,peak_bytes,activation_cache_bytes,per_sample_grad_bytes,max_batch"
    );
    assert_eq!(lines.len(), 5);
    let keys: Vec<(String, u64)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].parse().unwrap())
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn bench_scaling_rejects_analytic_methods_and_single_t() {
    let out = run(&["bench-scaling", "--methods", "lora", "--t", "4,8"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["bench-scaling", "--methods", "dp_bias", "--t", "4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_models_reports_max_batches() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "bench-models",
        "--methods",
        "opacus,dp_bias",
        "--widths",
        "4",
        "--budget",
        "400000",
        "--t",
        "2",
        "--dims",
        "3",
        "--classes",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    let csv = std::fs::read_to_string(dir.path().join("bench_models.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        let b: u64 = fields[1].parse().unwrap();
        let max_batch: u64 = fields[8].parse().unwrap();
        assert_eq!(b, max_batch);
        assert!(max_batch >= 1);
    }
}

#[test]
fn param_report_matches_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_config(dir.path()));
    let out = run(&["param-report", "--config", &cfg]);
    assert_success(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // linear 2x8 + 8 biases, linear 8x2 + 2 biases.
    assert_eq!(v["total"].as_u64(), Some(16 + 8 + 16 + 2));
    assert_eq!(v["bias"].as_u64(), Some(10));
    assert_eq!(v["empty"].as_bool(), Some(false));
}

#[test]
fn threads_env_and_flag_are_accepted() {
    let out = dpbf()
        .env("DPBF_THREADS", "2")
        .args(["account", "--q", "0.5", "--sigma", "1", "--steps", "2", "--delta", "1e-5"])
        .output()
        .unwrap();
    assert_success(&out);
    let out = run(&["--threads", "1", "account", "--q", "0.5", "--sigma", "1", "--steps", "2", "--delta", "1e-5"]);
    assert_success(&out);
}

//! Run-configuration parsing and validation.
//!
//! Configs are JSON documents walked by hand so every validation failure
//! can name the exact JSON pointer path that is wrong (`/network/2/out`,
//! `/privacy/delta`, ...). The privacy section accepts exactly one of
//! `eps` / `sigma`; an `eps` budget is converted to a noise multiplier by
//! the accountant's calibration before training starts.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use dpbf_core::accountant::calibrate_sigma;
use dpbf_core::error::{Error, Result};
use dpbf_core::nn::{LayerKind, Mode, Network};
use dpbf_core::privacy::{ClippingFn, Strategy, AUTO_S_DEFAULT_GAMMA};
use dpbf_core::rng::StreamRng;
use dpbf_core::train::{
    NoiseConfig, OptimizerKind, SyntheticTask, TaskKind, TrainConfig, TrainMode,
};

/// A fully validated run: everything `cmd_train` needs.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub task: SyntheticTask,
    pub net_kinds: Vec<LayerKind>,
    /// Mode the network is constructed in (two-phase runs start fully
    /// trainable and freeze later).
    pub initial_mode: Mode,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl RunSpec {
    /// Builds the network exactly as a run would: from the `"init"` stream
    /// of the run seed.
    pub fn build_network(&self) -> Result<Network> {
        let mut rng = StreamRng::new(self.train.seed, "init");
        Network::new(self.net_kinds.clone(), self.initial_mode, &mut rng)
    }
}

fn bad(path: &str, msg: impl AsRef<str>) -> Error {
    Error::Config(format!("invalid config at {path}: {}", msg.as_ref()))
}

fn as_obj<'v>(v: &'v Value, path: &str) -> Result<&'v Map<String, Value>> {
    v.as_object().ok_or_else(|| bad(path, "expected an object"))
}

fn req<'v>(map: &'v Map<String, Value>, parent: &str, key: &str) -> Result<&'v Value> {
    map.get(key)
        .ok_or_else(|| bad(&format!("{parent}/{key}"), "missing required field"))
}

fn get_f64(map: &Map<String, Value>, parent: &str, key: &str) -> Result<f64> {
    let path = format!("{parent}/{key}");
    req(map, parent, key)?
        .as_f64()
        .ok_or_else(|| bad(&path, "expected a number"))
}

fn get_u64(map: &Map<String, Value>, parent: &str, key: &str) -> Result<u64> {
    let path = format!("{parent}/{key}");
    req(map, parent, key)?
        .as_u64()
        .ok_or_else(|| bad(&path, "expected a nonnegative integer"))
}

fn get_usize(map: &Map<String, Value>, parent: &str, key: &str) -> Result<usize> {
    Ok(get_u64(map, parent, key)? as usize)
}

fn get_str<'v>(map: &'v Map<String, Value>, parent: &str, key: &str) -> Result<&'v str> {
    let path = format!("{parent}/{key}");
    req(map, parent, key)?
        .as_str()
        .ok_or_else(|| bad(&path, "expected a string"))
}

fn reject_unknown(map: &Map<String, Value>, parent: &str, allowed: &[&str]) -> Result<()> {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(bad(
                &format!("{parent}/{key}"),
                format!("unknown field; expected one of: {}", allowed.join(", ")),
            ));
        }
    }
    Ok(())
}

fn positive_dim(map: &Map<String, Value>, parent: &str, key: &str) -> Result<usize> {
    let v = get_usize(map, parent, key)?;
    if v == 0 {
        return Err(bad(&format!("{parent}/{key}"), "dimension must be positive"));
    }
    Ok(v)
}

/// `[a, b]` pair or a single integer meaning `[v, v]`.
fn get_pair(map: &Map<String, Value>, parent: &str, key: &str) -> Result<(usize, usize)> {
    let path = format!("{parent}/{key}");
    let v = req(map, parent, key)?;
    if let Some(n) = v.as_u64() {
        return Ok((n as usize, n as usize));
    }
    let arr = v
        .as_array()
        .ok_or_else(|| bad(&path, "expected an integer or a pair [h, w]"))?;
    if arr.len() != 2 {
        return Err(bad(&path, "expected exactly two entries"));
    }
    let h = arr[0]
        .as_u64()
        .ok_or_else(|| bad(&format!("{path}/0"), "expected a nonnegative integer"))?;
    let w = arr[1]
        .as_u64()
        .ok_or_else(|| bad(&format!("{path}/1"), "expected a nonnegative integer"))?;
    Ok((h as usize, w as usize))
}

fn parse_layer(v: &Value, path: &str) -> Result<LayerKind> {
    let map = as_obj(v, path)?;
    let ty = get_str(map, path, "type")?;
    match ty {
        "linear" => {
            reject_unknown(map, path, &["type", "in", "out"])?;
            Ok(LayerKind::Linear {
                d_in: positive_dim(map, path, "in")?,
                d_out: positive_dim(map, path, "out")?,
            })
        }
        "conv2d" => {
            reject_unknown(map, path, &["type", "in", "out", "kernel", "stride", "padding"])?;
            let kernel = get_pair(map, path, "kernel")?;
            if kernel.0 == 0 || kernel.1 == 0 {
                return Err(bad(&format!("{path}/kernel"), "kernel must be positive"));
            }
            let stride = if map.contains_key("stride") {
                let s = get_pair(map, path, "stride")?;
                if s.0 == 0 || s.1 == 0 {
                    return Err(bad(&format!("{path}/stride"), "stride must be positive"));
                }
                s
            } else {
                (1, 1)
            };
            let padding = if map.contains_key("padding") {
                get_pair(map, path, "padding")?
            } else {
                (0, 0)
            };
            Ok(LayerKind::Conv2d {
                c_in: positive_dim(map, path, "in")?,
                c_out: positive_dim(map, path, "out")?,
                kernel,
                stride,
                padding,
            })
        }
        "layer_norm" => {
            reject_unknown(map, path, &["type", "width"])?;
            Ok(LayerKind::LayerNorm { width: positive_dim(map, path, "width")? })
        }
        "relu" => {
            reject_unknown(map, path, &["type"])?;
            Ok(LayerKind::Relu)
        }
        other => Err(bad(
            &format!("{path}/type"),
            format!("unknown layer type {other:?}; expected linear, conv2d, layer_norm, or relu"),
        )),
    }
}

fn parse_task(v: &Value, seed: u64) -> Result<SyntheticTask> {
    let path = "/task";
    let map = as_obj(v, path)?;
    let kind = get_str(map, path, "kind")?;
    let task_kind = match kind {
        "blobs" => {
            reject_unknown(map, path, &["kind", "n", "dims", "classes", "separation"])?;
            TaskKind::Blobs {
                n: get_usize(map, path, "n")?,
                dims: positive_dim(map, path, "dims")?,
                classes: get_usize(map, path, "classes")?,
                separation: get_f64(map, path, "separation")?,
            }
        }
        "teacher" => {
            reject_unknown(map, path, &["kind", "n", "dims", "classes", "noise_std"])?;
            TaskKind::Teacher {
                n: get_usize(map, path, "n")?,
                dims: positive_dim(map, path, "dims")?,
                classes: get_usize(map, path, "classes")?,
                noise_std: get_f64(map, path, "noise_std")?,
            }
        }
        other => {
            return Err(bad(
                "/task/kind",
                format!("unknown task kind {other:?}; expected blobs or teacher"),
            ))
        }
    };
    Ok(SyntheticTask { kind: task_kind, seed })
}

fn parse_mode(v: &Value, epochs: u64) -> Result<TrainMode> {
    match v {
        Value::String(s) => match s.as_str() {
            "full" => Ok(TrainMode::Full),
            "bitfit" => Ok(TrainMode::Bitfit),
            "linear_probe" => Ok(TrainMode::LinearProbe),
            "two_phase" => Err(bad(
                "/mode",
                "two_phase takes an object: {\"type\": \"two_phase\", \"x\": N}",
            )),
            other => Err(bad(
                "/mode",
                format!("unknown mode {other:?}; expected full, bitfit, linear_probe, or two_phase"),
            )),
        },
        Value::Object(map) => {
            let ty = get_str(map, "/mode", "type")?;
            if ty != "two_phase" {
                return Err(bad("/mode/type", "only two_phase uses the object form"));
            }
            reject_unknown(map, "/mode", &["type", "x"])?;
            let x = get_u64(map, "/mode", "x")?;
            if x > epochs {
                return Err(bad(
                    "/mode/x",
                    format!("phase boundary {x} exceeds epoch count {epochs}"),
                ));
            }
            Ok(TrainMode::TwoPhase { x })
        }
        _ => Err(bad("/mode", "expected a string or a two_phase object")),
    }
}

fn parse_clipping(map: &Map<String, Value>, parent: &str) -> Result<ClippingFn> {
    let kind = get_str(map, parent, "clipping")?;
    match kind {
        "abadi" | "auto_s" => {
            let radius = get_f64(map, parent, "R")?;
            if !(radius > 0.0 && radius.is_finite()) {
                return Err(bad(&format!("{parent}/R"), "radius must be positive and finite"));
            }
            if kind == "abadi" {
                Ok(ClippingFn::Abadi { radius })
            } else {
                let gamma = if map.contains_key("gamma") {
                    let g = get_f64(map, parent, "gamma")?;
                    if !(g > 0.0 && g.is_finite()) {
                        return Err(bad(
                            &format!("{parent}/gamma"),
                            "stability constant must be positive and finite",
                        ));
                    }
                    g
                } else {
                    AUTO_S_DEFAULT_GAMMA
                };
                Ok(ClippingFn::AutoS { radius, gamma })
            }
        }
        "none" => Ok(ClippingFn::NoClip),
        other => Err(bad(
            &format!("{parent}/clipping"),
            format!("unknown clipping {other:?}; expected abadi, auto_s, or none"),
        )),
    }
}

fn parse_privacy(v: &Value, q: f64, total_steps: u64) -> Result<NoiseConfig> {
    let path = "/privacy";
    let map = as_obj(v, path)?;
    reject_unknown(
        map,
        path,
        &["eps", "sigma", "delta", "clipping", "R", "gamma", "non_private_ok"],
    )?;
    let delta = get_f64(map, path, "delta")?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(bad("/privacy/delta", "must be strictly between 0 and 1"));
    }
    let clipping = parse_clipping(map, path)?;
    let non_private_ok = match map.get("non_private_ok") {
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(bad("/privacy/non_private_ok", "expected a boolean")),
        None => false,
    };
    let sigma = match (map.get("eps"), map.get("sigma")) {
        (Some(_), Some(_)) => {
            return Err(bad(path, "give exactly one of eps or sigma, not both"))
        }
        (None, None) => return Err(bad(path, "give exactly one of eps or sigma")),
        (None, Some(s)) => {
            let sigma = s.as_f64().ok_or_else(|| bad("/privacy/sigma", "expected a number"))?;
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(bad("/privacy/sigma", "must be nonnegative and finite"));
            }
            sigma
        }
        (Some(e), None) => {
            let eps = e.as_f64().ok_or_else(|| bad("/privacy/eps", "expected a number"))?;
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(bad("/privacy/eps", "must be positive and finite"));
            }
            calibrate_sigma(eps, delta, q, total_steps)
                .map_err(|e| bad("/privacy/eps", format!("cannot calibrate: {e}")))?
        }
    };
    Ok(NoiseConfig { sigma, clipping, delta, non_private_ok })
}

fn parse_optimizer(v: &Value) -> Result<(OptimizerKind, Option<f64>)> {
    let path = "/optimizer";
    let map = as_obj(v, path)?;
    reject_unknown(map, path, &["type", "lr", "weight_decay", "lr_bitfit"])?;
    let lr = get_f64(map, path, "lr")?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(bad("/optimizer/lr", "must be positive and finite"));
    }
    let kind = match get_str(map, path, "type")? {
        "sgd" => OptimizerKind::sgd(lr),
        "adam" => OptimizerKind::adam(lr),
        "adamw" => {
            let wd = get_f64(map, path, "weight_decay")?;
            if !(wd >= 0.0 && wd.is_finite()) {
                return Err(bad("/optimizer/weight_decay", "must be nonnegative and finite"));
            }
            OptimizerKind::adamw(lr, wd)
        }
        other => {
            return Err(bad(
                "/optimizer/type",
                format!("unknown optimizer {other:?}; expected sgd, adam, or adamw"),
            ))
        }
    };
    let lr_bitfit = match map.get("lr_bitfit") {
        Some(v) => {
            let l = v.as_f64().ok_or_else(|| bad("/optimizer/lr_bitfit", "expected a number"))?;
            if !(l > 0.0 && l.is_finite()) {
                return Err(bad("/optimizer/lr_bitfit", "must be positive and finite"));
            }
            Some(l)
        }
        None => None,
    };
    Ok((kind, lr_bitfit))
}

/// Checks that the network starts and ends with dimensions matching the
/// task, and that its layer chain is internally consistent.
fn check_network_against_task(
    kinds: &[LayerKind],
    initial_mode: Mode,
    task: &SyntheticTask,
) -> Result<()> {
    let (dims, classes) = match task.kind {
        TaskKind::Blobs { dims, classes, .. } | TaskKind::Teacher { dims, classes, .. } => {
            (dims, classes)
        }
    };
    if kinds.is_empty() {
        return Err(bad("/network", "network needs at least one layer"));
    }
    for (i, kind) in kinds.iter().enumerate() {
        if let LayerKind::Conv2d { .. } = kind {
            return Err(bad(
                &format!("/network/{i}"),
                "training tasks produce vector features; conv2d layers need image input \
                 and are only supported by the bench and complexity commands",
            ));
        }
    }
    match kinds[0] {
        LayerKind::Linear { d_in, .. } if d_in != dims => {
            return Err(bad(
                "/network/0/in",
                format!("first layer takes {d_in} features but the task produces {dims}"),
            ));
        }
        LayerKind::LayerNorm { width } if width != dims => {
            return Err(bad(
                "/network/0/width",
                format!("first layer normalizes {width} features but the task produces {dims}"),
            ));
        }
        _ => {}
    }
    // Build a throwaway instance to validate the rest of the chain.
    let mut rng = StreamRng::new(task.seed, "init");
    let probe = Network::new(kinds.to_vec(), initial_mode, &mut rng)
        .map_err(|e| bad("/network", format!("{e}")))?;
    probe
        .layer_dims(&[1, dims])
        .map_err(|e| bad("/network", format!("{e}")))?;
    let out_width = kinds
        .iter()
        .rev()
        .find_map(|k| match *k {
            LayerKind::Linear { d_out, .. } => Some(d_out),
            LayerKind::LayerNorm { width } => Some(width),
            _ => None,
        })
        .unwrap_or(dims);
    if out_width != classes {
        return Err(bad(
            "/network",
            format!("network emits {out_width} logits but the task has {classes} classes"),
        ));
    }
    Ok(())
}

/// Parses and validates a config document. `seed_override` and
/// `out_override` come from the command line and win over the file.
pub fn parse_config(
    text: &str,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<RunSpec> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    let map = as_obj(&root, "/")?;
    reject_unknown(
        map,
        "",
        &[
            "task",
            "network",
            "mode",
            "privacy",
            "optimizer",
            "epochs",
            "q",
            "strategy",
            "seed",
            "output_dir",
        ],
    )?;

    let epochs = get_u64(map, "", "epochs")?;
    if epochs == 0 {
        return Err(bad("/epochs", "must be at least 1"));
    }
    let q = get_f64(map, "", "q")?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(bad("/q", "sampling rate must be in (0, 1]"));
    }
    let seed = match seed_override {
        Some(s) => s,
        None => get_u64(map, "", "seed")?,
    };

    let task = parse_task(req(map, "", "task")?, seed)?;

    let network_v = req(map, "", "network")?;
    let layers = network_v
        .as_array()
        .ok_or_else(|| bad("/network", "expected an array of layers"))?;
    let mut kinds = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        kinds.push(parse_layer(layer, &format!("/network/{i}"))?);
    }

    let mode = parse_mode(req(map, "", "mode")?, epochs)?;
    let initial_mode = match mode {
        TrainMode::Full | TrainMode::TwoPhase { .. } => Mode::Full,
        TrainMode::Bitfit => Mode::Bitfit,
        TrainMode::LinearProbe => Mode::LinearProbe,
    };
    check_network_against_task(&kinds, initial_mode, &task)?;

    let (optimizer, lr_bitfit) = parse_optimizer(req(map, "", "optimizer")?)?;

    let strategy = match map.get("strategy") {
        Some(Value::String(s)) => Strategy::parse(s).map_err(|e| bad("/strategy", format!("{e}")))?,
        Some(_) => return Err(bad("/strategy", "expected a string")),
        None => Strategy::Opacus,
    };

    let steps_per_epoch = (1.0 / q).ceil() as u64;
    let total_steps = epochs * steps_per_epoch;
    let privacy = match map.get("privacy") {
        Some(v) => Some(parse_privacy(v, q, total_steps)?),
        None => None,
    };

    let output_dir = match out_override {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(get_str(map, "", "output_dir")?),
    };

    let train = TrainConfig {
        mode,
        epochs,
        q,
        privacy,
        strategy,
        optimizer,
        lr_bitfit,
        seed,
    };
    train.validate().map_err(|e| Error::Config(format!("invalid config: {e}")))?;

    Ok(RunSpec { task, net_kinds: kinds, initial_mode, train, output_dir })
}

/// Reads and parses the config file at `path`.
pub fn load_config(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> Result<RunSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_config(&text, seed_override, out_override)
}

//! Training loop: optimizers, synthetic tasks, and the epoch driver.
//!
//! The driver wires the pieces together: Poisson-subsampled batches feed one
//! of the gradient steps (bias-only private, full private, or plain), the
//! optimizer applies the result, and per-epoch metrics are collected. All
//! randomness comes from named streams keyed by the run seed — `"task"` for
//! data synthesis, `"init"` for parameters (consumed by the caller when the
//! network is built), `"poisson"` for batch selection, and `"noise"` for the
//! privacy noise — so two runs with the same config and seed produce
//! bit-identical trajectories regardless of what else is going on.
//!
//! Two-phase runs train everything for the first `x` epochs, then freeze the
//! weights and continue on biases alone. The boundary drops the optimizer's
//! weight moments (those parameters will never move again) but keeps the bias
//! moments and the step counter, so the bias updates stay continuous across
//! the switch. `x == 0` never touches the weights and `x == epochs` never
//! freezes, so the endpoints coincide exactly with the single-phase modes.

use std::collections::BTreeMap;

use crate::accountant::eps_for;
use crate::autograd::GradMap;
use crate::error::{Error, Result};
use crate::nn::{
    forward_infer, LayerKind, Mode, Network, ParamKey, ParamKind,
};
use crate::privacy::{
    dp_bitfit_step, dp_full_step, plain_step, poisson_sample, ClippingFn, PrivacySpec, StepOutput,
    Strategy,
};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Adam/AdamW defaults.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which update rule the optimizer applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    AdamW { lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn sgd(lr: f64) -> OptimizerKind {
        OptimizerKind::Sgd { lr }
    }

    /// Adam with the standard (0.9, 0.999, 1e-8) constants.
    pub fn adam(lr: f64) -> OptimizerKind {
        OptimizerKind::Adam { lr, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }

    /// AdamW: Adam plus decoupled weight decay.
    pub fn adamw(lr: f64, weight_decay: f64) -> OptimizerKind {
        OptimizerKind::AdamW {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr }
            | OptimizerKind::Adam { lr, .. }
            | OptimizerKind::AdamW { lr, .. } => lr,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            OptimizerKind::Sgd { lr }
            | OptimizerKind::Adam { lr, .. }
            | OptimizerKind::AdamW { lr, .. } => *lr = new_lr,
        }
    }

    fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive and finite, got {lr}"
            )));
        }
        if let OptimizerKind::AdamW { weight_decay, .. } = *self {
            if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
                return Err(Error::Parameter(format!(
                    "weight decay must be nonnegative and finite, got {weight_decay}"
                )));
            }
        }
        Ok(())
    }
}

/// Stateful optimizer. Moment buffers are keyed per parameter; the step
/// counter is global and advances on every applied update, including steps
/// whose gradient is pure noise from an empty batch.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: BTreeMap<ParamKey, Tensor>,
    v: BTreeMap<ParamKey, Tensor>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Optimizer {
        Optimizer { kind, m: BTreeMap::new(), v: BTreeMap::new(), step_count: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.kind.set_lr(lr);
    }

    /// Discard moment buffers for weight parameters. Bias moments and the
    /// step counter survive, keeping bias updates continuous when a run
    /// freezes its weights mid-way.
    pub fn drop_weight_moments(&mut self) {
        self.m.retain(|k, _| k.kind == ParamKind::Bias);
        self.v.retain(|k, _| k.kind == ParamKind::Bias);
    }

    /// Applies one update. `grads` must hold a gradient for exactly the
    /// network's trainable parameters; anything else is an internal error.
    pub fn step(&mut self, net: &mut Network, grads: &GradMap) -> Result<()> {
        let trainable = net.trainable_params();
        if grads.len() != trainable.len() {
            return Err(Error::Internal(format!(
                "optimizer got {} gradients for {} trainable parameters",
                grads.len(),
                trainable.len()
            )));
        }
        for key in &trainable {
            if !grads.contains_key(key) {
                return Err(Error::Internal(format!(
                    "missing gradient for trainable parameter {}",
                    key.name()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        for (key, grad) in grads {
            let param = net.param_mut(*key)?;
            if param.shape() != grad.shape() {
                return Err(Error::Internal(format!(
                    "gradient shape {:?} does not match parameter {} shape {:?}",
                    grad.shape(),
                    key.name(),
                    param.shape()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd { lr } => {
                    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let m = self
                        .m
                        .entry(*key)
                        .or_insert_with(|| Tensor::zeros(grad.shape()));
                    for (mv, g) in m.data_mut().iter_mut().zip(grad.data()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * g;
                    }
                    let v = self
                        .v
                        .entry(*key)
                        .or_insert_with(|| Tensor::zeros(grad.shape()));
                    for (vv, g) in v.data_mut().iter_mut().zip(grad.data()) {
                        *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                    }
                    let mc = 1.0 - beta1.powi(t as i32);
                    let vc = 1.0 - beta2.powi(t as i32);
                    let m = &self.m[key];
                    let v = &self.v[key];
                    for ((p, mv), vv) in param
                        .data_mut()
                        .iter_mut()
                        .zip(m.data())
                        .zip(v.data())
                    {
                        let mhat = mv / mc;
                        let vhat = vv / vc;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::AdamW { lr, beta1, beta2, eps, weight_decay } => {
                    let m = self
                        .m
                        .entry(*key)
                        .or_insert_with(|| Tensor::zeros(grad.shape()));
                    for (mv, g) in m.data_mut().iter_mut().zip(grad.data()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * g;
                    }
                    let v = self
                        .v
                        .entry(*key)
                        .or_insert_with(|| Tensor::zeros(grad.shape()));
                    for (vv, g) in v.data_mut().iter_mut().zip(grad.data()) {
                        *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                    }
                    let mc = 1.0 - beta1.powi(t as i32);
                    let vc = 1.0 - beta2.powi(t as i32);
                    let m = &self.m[key];
                    let v = &self.v[key];
                    for ((p, mv), vv) in param
                        .data_mut()
                        .iter_mut()
                        .zip(m.data())
                        .zip(v.data())
                    {
                        let mhat = mv / mc;
                        let vhat = vv / vc;
                        // Decoupled decay: the decay term uses the current
                        // parameter value, not the gradient.
                        *p -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *p);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which parameters train, and when.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// All weights and biases.
    Full,
    /// Biases only.
    Bitfit,
    /// Only the last parametric layer.
    LinearProbe,
    /// Everything for the first `x` epochs, then biases only.
    TwoPhase { x: u64 },
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::Bitfit => "bitfit",
            TrainMode::LinearProbe => "linear_probe",
            TrainMode::TwoPhase { .. } => "two_phase",
        }
    }
}

/// Noise/clipping half of a privacy configuration. The sampling rate and
/// step count come from the schedule, so they are not repeated here.
#[derive(Debug, Clone)]
pub struct NoiseConfig {
    /// Noise multiplier; the added noise is `N(0, (sigma * radius)^2)`.
    pub sigma: f64,
    pub clipping: ClippingFn,
    /// Failure probability for the (eps, delta) report.
    pub delta: f64,
    /// Must be set to run with `NoClip` and `sigma > 0`.
    pub non_private_ok: bool,
}

/// Full description of a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: u64,
    /// Poisson sampling rate; each epoch runs `ceil(1/q)` steps.
    pub q: f64,
    /// `None` trains without any privacy machinery.
    pub privacy: Option<NoiseConfig>,
    /// Per-sample gradient strategy for steps that train weights.
    pub strategy: Strategy,
    pub optimizer: OptimizerKind,
    /// Learning rate after the two-phase boundary. Defaults to ten times
    /// the main rate, reflecting that bias-only training tolerates (and
    /// wants) a larger step size.
    pub lr_bitfit: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn steps_per_epoch(&self) -> u64 {
        (1.0 / self.q).ceil() as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch()
    }

    fn lr_phase2(&self) -> f64 {
        self.lr_bitfit.unwrap_or(10.0 * self.optimizer.lr())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Parameter(format!(
                "sampling rate must be in (0, 1], got {}",
                self.q
            )));
        }
        if let TrainMode::TwoPhase { x } = self.mode {
            if x > self.epochs {
                return Err(Error::Parameter(format!(
                    "two-phase boundary {x} exceeds epoch count {}",
                    self.epochs
                )));
            }
        }
        self.optimizer.validate()?;
        if let Some(lr2) = self.lr_bitfit {
            if !(lr2 > 0.0 && lr2.is_finite()) {
                return Err(Error::Parameter(format!(
                    "bias-phase learning rate must be positive and finite, got {lr2}"
                )));
            }
        }
        if let Some(noise) = &self.privacy {
            if !(noise.delta > 0.0 && noise.delta < 1.0) {
                return Err(Error::Parameter(format!(
                    "delta must be in (0, 1), got {}",
                    noise.delta
                )));
            }
            // Validates sigma/clipping and the no-clipping policy.
            self.privacy_spec(noise).validate()?;
        }
        Ok(())
    }

    fn privacy_spec(&self, noise: &NoiseConfig) -> PrivacySpec {
        PrivacySpec {
            q: self.q,
            sigma: noise.sigma,
            clipping: noise.clipping.clone(),
            steps: self.total_steps(),
            non_private_ok: noise.non_private_ok,
        }
    }
}

/// A synthetic classification dataset held fully in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(n, dims)` feature matrix.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Synthetic task families.
#[derive(Debug, Clone)]
pub enum TaskKind {
    /// Isotropic Gaussian blobs: class `c` is centered at `separation` times
    /// the `c`-th coordinate axis, unit variance, labels round-robin.
    Blobs { n: usize, dims: usize, classes: usize, separation: f64 },
    /// Features are standard normal; labels come from a randomly initialized
    /// teacher network's noisy argmax.
    Teacher { n: usize, dims: usize, classes: usize, noise_std: f64 },
}

/// A task plus the seed that makes it reproducible.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
}

/// Materializes a task into a dataset using the `"task"` stream of its seed.
pub fn make_task(task: &SyntheticTask) -> Result<Dataset> {
    let mut rng = StreamRng::new(task.seed, "task");
    match task.kind {
        TaskKind::Blobs { n, dims, classes, separation } => {
            if classes < 2 {
                return Err(Error::Parameter(format!(
                    "blobs need at least 2 classes, got {classes}"
                )));
            }
            if dims < classes {
                return Err(Error::Parameter(format!(
                    "blobs place class centers on coordinate axes, so dims \
                     ({dims}) must be at least the class count ({classes})"
                )));
            }
            if n < 2 * classes {
                return Err(Error::Parameter(format!(
                    "blobs need at least 2 points per class, got {n} for {classes} classes"
                )));
            }
            if !(separation >= 0.0 && separation.is_finite()) {
                return Err(Error::Parameter(format!(
                    "separation must be nonnegative and finite, got {separation}"
                )));
            }
            let mut data = vec![0.0f64; n * dims];
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % classes;
                labels.push(class);
                let row = &mut data[i * dims..(i + 1) * dims];
                rng.fill_gaussian(row, 0.0, 1.0);
                row[class] += separation;
            }
            Ok(Dataset { features: Tensor::from_vec(&[n, dims], data)?, labels, classes })
        }
        TaskKind::Teacher { n, dims, classes, noise_std } => {
            if classes < 2 {
                return Err(Error::Parameter(format!(
                    "teacher task needs at least 2 classes, got {classes}"
                )));
            }
            if n == 0 || dims == 0 {
                return Err(Error::Parameter(
                    "teacher task needs a nonempty dataset with at least one feature".into(),
                ));
            }
            if !(noise_std >= 0.0 && noise_std.is_finite()) {
                return Err(Error::Parameter(format!(
                    "label noise must be nonnegative and finite, got {noise_std}"
                )));
            }
            // Teacher first, then features, then label noise: a fixed draw
            // order keeps the dataset a pure function of the seed.
            let hidden = 2 * dims;
            let teacher = Network::new(
                vec![
                    LayerKind::Linear { d_in: dims, d_out: hidden },
                    LayerKind::Relu,
                    LayerKind::Linear { d_in: hidden, d_out: classes },
                ],
                Mode::Full,
                &mut rng,
            )?;
            let mut data = vec![0.0f64; n * dims];
            rng.fill_gaussian(&mut data, 0.0, 1.0);
            let features = Tensor::from_vec(&[n, dims], data)?;
            let logits = forward_infer(&teacher, &features)?;
            let mut labels = Vec::with_capacity(n);
            let k = classes;
            for i in 0..n {
                let row = &logits.data()[i * k..(i + 1) * k];
                let mut best = 0usize;
                let mut best_val = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    let noisy = v + noise_std * rng.next_gaussian();
                    if noisy > best_val {
                        best_val = noisy;
                        best = j;
                    }
                }
                labels.push(best);
            }
            Ok(Dataset { features, labels, classes })
        }
    }
}

/// One row of the per-epoch metrics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Global step count at the end of this epoch.
    pub step: u64,
    /// Mean per-sample training loss over the batches this epoch saw;
    /// NaN if every batch was empty.
    pub loss: f64,
    /// Whole-dataset accuracy at the end of the epoch.
    pub accuracy: f64,
    /// Privacy spent so far; infinite for non-private runs.
    pub eps_so_far: f64,
    /// Median per-sample gradient norm this epoch; NaN when none were taken.
    pub grad_norm_median: f64,
    /// Fraction of per-sample gradients that were scaled down; NaN when no
    /// clipping happened.
    pub clip_fraction: f64,
}

/// Final privacy accounting for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyReport {
    pub eps: f64,
    pub delta: f64,
    pub sigma: f64,
    pub steps: u64,
    /// Order at which the conversion was tightest.
    pub alpha: u32,
}

/// Everything a run produces besides the mutated network.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: Vec<EpochMetrics>,
    /// Present when the run was private with nonzero noise.
    pub privacy: Option<PrivacyReport>,
    pub total_steps: u64,
}

/// Copies the selected rows into a `(B, dims)` batch.
fn gather(data: &Dataset, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let dims = data.dims();
    let mut x = vec![0.0f64; idx.len() * dims];
    let mut labels = Vec::with_capacity(idx.len());
    let src = data.features.data();
    for (row, &i) in idx.iter().enumerate() {
        if i >= data.len() {
            return Err(Error::Internal(format!(
                "sampled index {i} out of range for dataset of {}",
                data.len()
            )));
        }
        x[row * dims..(row + 1) * dims].copy_from_slice(&src[i * dims..(i + 1) * dims]);
        labels.push(data.labels[i]);
    }
    Ok((Tensor::from_vec(&[idx.len(), dims], x)?, labels))
}

/// Whole-dataset accuracy under the current parameters. Rank-3 logits are
/// summed over the middle axis before the argmax; ties pick the lowest class.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty dataset".into()));
    }
    let logits = forward_infer(net, &data.features)?;
    let (b, t, k) = match *logits.shape() {
        [b, k] => (b, 1, k),
        [b, t, k] => (b, t, k),
        ref s => {
            return Err(Error::Internal(format!(
                "evaluation expects rank-2 or rank-3 logits, got {s:?}"
            )))
        }
    };
    if b != data.len() {
        return Err(Error::Internal(format!(
            "evaluation produced {b} logit rows for {} examples",
            data.len()
        )));
    }
    let ld = logits.data();
    let mut correct = 0usize;
    for i in 0..b {
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for j in 0..k {
            let mut v = 0.0;
            for tt in 0..t {
                v += ld[i * t * k + tt * k + j];
            }
            if v > best_val {
                best_val = v;
                best = j;
            }
        }
        if best == data.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / b as f64)
}

/// Median of a sample; NaN for an empty one, mean of the middle pair for
/// even lengths.
fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("norms are never NaN"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Runs the configured schedule against `net`, mutating it in place.
///
/// The caller is responsible for building `net` in the state the mode
/// expects (`TwoPhase` starts fully trainable; `Bitfit` starts frozen); the
/// step functions reject mismatches. Divergence — a non-finite loss on a
/// nonempty batch — aborts the run with an error naming the step.
pub fn train(net: &mut Network, data: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("cannot train on an empty dataset".into()));
    }
    let spe = config.steps_per_epoch();
    let total_steps = config.total_steps();
    let spec = config.privacy.as_ref().map(|noise| config.privacy_spec(noise));

    let mut poisson = StreamRng::new(config.seed, "poisson");
    let mut noise_rng = StreamRng::new(config.seed, "noise");
    let mut optimizer = Optimizer::new(config.optimizer);

    // Phase bookkeeping. For a two-phase run with x == 0 the bias-only
    // phase starts before any step is taken; x == epochs means the
    // boundary never fires.
    let mut in_bias_phase = match config.mode {
        TrainMode::TwoPhase { x } => x == 0,
        _ => false,
    };
    if in_bias_phase {
        net.freeze_weights();
        optimizer.drop_weight_moments();
        optimizer.set_lr(config.lr_phase2());
    }

    let mut metrics = Vec::with_capacity(config.epochs as usize);
    let mut global_step: u64 = 0;
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut epoch_norms: Vec<f64> = Vec::new();
        let mut clipped = 0usize;
        let mut factored = 0usize;
        for _ in 0..spe {
            global_step += 1;
            let idx = poisson_sample(data.len(), config.q, &mut poisson)?;
            let (x, labels) = gather(data, &idx)?;
            let bias_only = match config.mode {
                TrainMode::Bitfit => true,
                TrainMode::Full | TrainMode::LinearProbe => false,
                TrainMode::TwoPhase { .. } => in_bias_phase,
            };
            let out: StepOutput = match (&spec, bias_only) {
                (Some(spec), true) => dp_bitfit_step(net, &x, &labels, spec, &mut noise_rng)?,
                (Some(spec), false) => {
                    dp_full_step(net, &x, &labels, spec, config.strategy, &mut noise_rng)?
                }
                (None, _) => plain_step(net, &x, &labels)?,
            };
            if out.batch > 0 && !out.loss_sum.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at step {global_step} (epoch {epoch})"
                )));
            }
            loss_sum += out.loss_sum;
            seen += out.batch;
            epoch_norms.extend_from_slice(&out.norms);
            clipped += out.factors.iter().filter(|&&f| f < 1.0).count();
            factored += out.factors.len();
            optimizer.step(net, &out.grads)?;
        }
        let eps_so_far = match &spec {
            Some(s) if s.sigma > 0.0 => {
                eps_for(config.q, s.sigma, global_step, config.privacy.as_ref().unwrap().delta)?
                    .eps
            }
            _ => f64::INFINITY,
        };
        metrics.push(EpochMetrics {
            epoch,
            step: global_step,
            loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            accuracy: evaluate(net, data)?,
            eps_so_far,
            grad_norm_median: median(&epoch_norms),
            clip_fraction: if factored > 0 {
                clipped as f64 / factored as f64
            } else {
                f64::NAN
            },
        });
        if let TrainMode::TwoPhase { x } = config.mode {
            if !in_bias_phase && epoch == x && epoch < config.epochs {
                net.freeze_weights();
                optimizer.drop_weight_moments();
                optimizer.set_lr(config.lr_phase2());
                in_bias_phase = true;
            }
        }
    }

    let privacy = match (&spec, &config.privacy) {
        (Some(s), Some(noise)) if s.sigma > 0.0 => {
            let ed = eps_for(config.q, s.sigma, total_steps, noise.delta)?;
            Some(PrivacyReport {
                eps: ed.eps,
                delta: noise.delta,
                sigma: s.sigma,
                steps: total_steps,
                alpha: ed.alpha,
            })
        }
        _ => None,
    };
    Ok(TrainOutput { metrics, privacy, total_steps })
}

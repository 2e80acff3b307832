//! Online meta-training: interleaved updates of the meta-net parameters
//! theta (one-step hypergradient plus Adam) and the learner weights w
//! (SGD at the predicted rate).
//!
//! Every step samples a train batch and applies a real SGD update at the
//! rate the meta-net predicts from the batch loss. Every `t_val` steps a
//! validation batch is drawn first and theta is updated through the
//! one-step lookahead w_hat(theta) = w - alpha(theta) * g_train: the
//! hypergradient is -(g_val . g_train) * d(alpha)/d(theta), with g_val
//! evaluated at w_hat. The lookahead runs on a cloned recurrent state, so
//! the persistent state advances exactly once per step, on the real update.
//!
//! Baseline runs reuse the same loop with a scheduler in place of the
//! meta-net, which keeps the two paths step-for-step comparable.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlrsnet::{normalize_loss, MLRSNetParams, MLRSNetState, Normalizer};
use crate::models::{
    Architecture, DataSplits, Gradients, LearnerModel, MiniBatch, OptimizerKind, OptimizerState,
};
use crate::numcore::{clip_grad_norm, RngStream};
use crate::schedules::{lr_at, ScheduleContext, ScheduleSpec, SchedulerRuntime};

/// Adam state for the meta parameters, with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            weight_decay,
        }
    }
}

/// m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2; bias-corrected step plus
/// decoupled decay: theta <- theta - lr*m_hat/(sqrt(v_hat)+eps) - lr*wd*theta.
pub fn adam_update(theta: &mut MLRSNetParams, grad: &[f64], adam: &mut AdamState) -> Result<()> {
    if grad.len() != adam.m.len() || grad.len() != theta.num_params() {
        return Err(Error::ShapeMismatch(format!(
            "adam_update: grad length {} vs state {} vs params {}",
            grad.len(),
            adam.m.len(),
            theta.num_params()
        )));
    }
    adam.t += 1;
    let bc1 = 1.0 - adam.beta1.powi(adam.t as i32);
    let bc2 = 1.0 - adam.beta2.powi(adam.t as i32);
    let mut flat = theta.to_flat();
    for k in 0..grad.len() {
        let g = grad[k];
        adam.m[k] = adam.beta1 * adam.m[k] + (1.0 - adam.beta1) * g;
        adam.v[k] = adam.beta2 * adam.v[k] + (1.0 - adam.beta2) * g * g;
        let m_hat = adam.m[k] / bc1;
        let v_hat = adam.v[k] / bc2;
        flat[k] -= adam.lr * m_hat / (v_hat.sqrt() + adam.eps) + adam.lr * adam.weight_decay * flat[k];
    }
    theta.set_from_flat(&flat)
}

/// Everything a meta update needs from the one-step lookahead.
#[derive(Debug, Clone)]
pub struct VirtualStep {
    pub w_hat: LearnerModel,
    pub alpha: f64,
    pub train_loss: f64,
    pub meta_cache: crate::mlrsnet::ForwardCache,
    pub g_train: Gradients,
}

fn lookahead(
    model: &LearnerModel,
    train_loss: f64,
    g_train: &Gradients,
    theta: &MLRSNetParams,
    state: &MLRSNetState,
    normalizer: Normalizer,
) -> Result<(LearnerModel, f64, crate::mlrsnet::ForwardCache)> {
    let loss_in = normalize_loss(train_loss, normalizer);
    let (alpha, _, meta_cache) = theta.forward(state, loss_in)?;
    let mut w_hat = model.clone();
    w_hat.plain_step(g_train, alpha);
    Ok((w_hat, alpha, meta_cache))
}

/// w_hat = w - alpha(theta) * grad of the batch loss; no weight decay, no
/// momentum, and the persistent recurrent state is left untouched.
pub fn virtual_step(
    model: &LearnerModel,
    batch: &MiniBatch,
    theta: &MLRSNetParams,
    state: &MLRSNetState,
    normalizer: Normalizer,
) -> Result<VirtualStep> {
    let (train_loss, cache) = model.forward_loss(batch)?;
    if !train_loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite training loss {train_loss}"
        )));
    }
    let g_train = model.backward(&cache)?;
    let (w_hat, alpha, meta_cache) = lookahead(model, train_loss, &g_train, theta, state, normalizer)?;
    Ok(VirtualStep {
        w_hat,
        alpha,
        train_loss,
        meta_cache,
        g_train,
    })
}

/// Chain rule through the scalar rate: grad = -(g_val . g_train) * dalpha.
pub fn hypergradient(
    g_train: &[f64],
    g_val: &[f64],
    dalpha_dtheta: &[f64],
) -> Result<Vec<f64>> {
    if g_train.len() != g_val.len() {
        return Err(Error::Domain(format!(
            "hypergradient: g_train length {} != g_val length {}",
            g_train.len(),
            g_val.len()
        )));
    }
    let dot: f64 = g_val.iter().zip(g_train.iter()).map(|(a, b)| a * b).sum();
    Ok(dalpha_dtheta.iter().map(|d| -dot * d).collect())
}

fn meta_step_from(
    model: &LearnerModel,
    train_loss: f64,
    g_train: &Gradients,
    theta: &mut MLRSNetParams,
    state: &MLRSNetState,
    adam: &mut AdamState,
    val_batch: &MiniBatch,
    normalizer: Normalizer,
) -> Result<f64> {
    let (w_hat, _, meta_cache) = lookahead(model, train_loss, g_train, theta, state, normalizer)?;
    let (val_loss, val_cache) = w_hat.forward_loss(val_batch)?;
    if !val_loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite validation loss {val_loss}"
        )));
    }
    let g_val = w_hat.backward(&val_cache)?;
    let dalpha = theta.backward_theta(state, &meta_cache)?;
    let grad_theta = hypergradient(&g_train.to_flat(), &g_val.to_flat(), &dalpha)?;
    adam_update(theta, &grad_theta, adam)?;
    Ok(val_loss)
}

/// One meta update of theta. The learner and the persistent recurrent state
/// are read-only here; returns the validation minibatch loss at w_hat.
pub fn meta_step(
    model: &LearnerModel,
    theta: &mut MLRSNetParams,
    state: &MLRSNetState,
    adam: &mut AdamState,
    train_batch: &MiniBatch,
    val_batch: &MiniBatch,
    normalizer: Normalizer,
) -> Result<f64> {
    let (train_loss, cache) = model.forward_loss(train_batch)?;
    if !train_loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite training loss {train_loss}"
        )));
    }
    let g_train = model.backward(&cache)?;
    meta_step_from(
        model, train_loss, &g_train, theta, state, adam, val_batch, normalizer,
    )
}

/// Settings for one training run (meta or baseline; baselines ignore the
/// meta-only knobs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    pub total_steps: u64,
    pub steps_per_epoch: u64,
    /// Meta-update period in steps.
    pub t_val: u64,
    /// Train batch size n.
    pub train_batch: usize,
    /// Validation batch size m.
    pub val_batch: usize,
    pub gamma: f64,
    pub hidden_size: usize,
    pub seed: u64,
    pub normalizer: Normalizer,
    /// Max global norm for the learner gradient; None disables clipping.
    pub clip_norm: Option<f64>,
    pub adam_lr: f64,
    pub adam_weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Full val/test evaluation every this many epochs.
    pub eval_every_epochs: u64,
    /// When false, wall_us is recorded as 0 so metrics stay byte-reproducible.
    pub record_timings: bool,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            total_steps: 1,
            steps_per_epoch: 1,
            t_val: 10,
            train_batch: 64,
            val_batch: 100,
            gamma: 1.0,
            hidden_size: 40,
            seed: 0,
            normalizer: Normalizer::Identity,
            clip_norm: None,
            adam_lr: 1e-3,
            adam_weight_decay: 1e-4,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            eval_every_epochs: 1,
            record_timings: false,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 || self.steps_per_epoch == 0 {
            return bad("total_steps and steps_per_epoch must be >= 1".into());
        }
        if self.t_val == 0 {
            return bad("t_val must be >= 1".into());
        }
        if self.train_batch == 0 || self.val_batch == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.hidden_size == 0 {
            return bad("hidden_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || self.adam_weight_decay < 0.0 {
            return bad("weight decay must be >= 0".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if !(self.adam_lr > 0.0) {
            return bad(format!("adam_lr must be positive, got {}", self.adam_lr));
        }
        if self.eval_every_epochs == 0 {
            return bad("eval_every_epochs must be >= 1".into());
        }
        Ok(())
    }
}

/// Row of the metrics table. Train rows carry lr and train_loss (plus the
/// validation minibatch loss on meta-update steps); eval rows carry full
/// split metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: u64,
    pub epoch: u64,
    pub phase: Phase,
    pub lr: Option<f64>,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub wall_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

/// What the per-step driver produced: the lr plus any meta bookkeeping.
enum StepLr {
    Plain(f64),
    Meta { alpha: f64, val_loss: Option<f64> },
}

enum Driver<'a> {
    Meta {
        theta: &'a mut MLRSNetParams,
        state: &'a mut MLRSNetState,
        adam: &'a mut AdamState,
        t_val: u64,
        val_rng: &'a mut RngStream,
        checkpoints: &'a mut Vec<MLRSNetParams>,
        state_advances: &'a mut u64,
        meta_updates: &'a mut u64,
    },
    Schedule {
        spec: &'a ScheduleSpec,
        runtime: &'a mut SchedulerRuntime,
    },
}

fn run_loop(
    driver: &mut Driver,
    cfg: &MetaTrainConfig,
    data: &DataSplits,
    model: &mut LearnerModel,
    opt: &mut OptimizerState,
    batches_rng: &mut RngStream,
    records: &mut Vec<TrainStepRecord>,
) -> Result<()> {
    let wants_grad_vec = matches!(driver, Driver::Schedule { spec: ScheduleSpec::Hd { .. }, .. });
    for step in 0..cfg.total_steps {
        let started = if cfg.record_timings {
            Some(Instant::now())
        } else {
            None
        };
        let epoch = step / cfg.steps_per_epoch;
        let batch = data.train.sample_batch(cfg.train_batch, batches_rng);

        let (train_loss, cache) = model.forward_loss(&batch)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite training loss {train_loss} at step {step}"
            )));
        }
        let mut g_train = model.backward(&cache)?;
        if let Some(max_norm) = cfg.clip_norm {
            let mut flat = g_train.to_flat();
            clip_grad_norm(&mut flat, max_norm);
            g_train = Gradients::from_flat(model, &flat);
        }

        let outcome = match driver {
            Driver::Meta {
                theta,
                state,
                adam,
                t_val,
                val_rng,
                meta_updates,
                state_advances,
                ..
            } => {
                let mut val_loss = None;
                // First update fires at step t_val, so t_val > total_steps
                // reduces exactly to a frozen-theta run.
                if step > 0 && step % *t_val == 0 {
                    let val_batch = data.val.sample_batch(cfg.val_batch, val_rng);
                    val_loss = Some(meta_step_from(
                        model,
                        train_loss,
                        &g_train,
                        theta,
                        state,
                        adam,
                        &val_batch,
                        cfg.normalizer,
                    )?);
                    **meta_updates += 1;
                }
                // Real update: alpha from the post-update theta, advancing
                // the persistent state exactly once.
                let loss_in = normalize_loss(train_loss, cfg.normalizer);
                let (alpha, new_state, _) = theta.forward(state, loss_in)?;
                **state = new_state;
                **state_advances += 1;
                StepLr::Meta { alpha, val_loss }
            }
            Driver::Schedule { spec, runtime } => {
                let grad_flat;
                let grad_arg = if wants_grad_vec {
                    grad_flat = g_train.to_flat();
                    Some(grad_flat.as_slice())
                } else {
                    None
                };
                StepLr::Plain(lr_at(spec, runtime, step, epoch, Some(train_loss), grad_arg)?)
            }
        };

        let (lr, val_loss) = match outcome {
            StepLr::Plain(lr) => (lr, None),
            StepLr::Meta { alpha, val_loss } => (alpha, val_loss),
        };
        model.sgd_step(&g_train, lr, opt)?;

        let wall_us = started.map_or(0, |t| t.elapsed().as_micros() as u64);
        records.push(TrainStepRecord {
            step,
            epoch,
            phase: Phase::Train,
            lr: Some(lr),
            train_loss: Some(train_loss),
            val_loss,
            test_loss: None,
            test_acc: None,
            wall_us,
        });

        if (step + 1) % cfg.steps_per_epoch == 0 {
            let epochs_done = (step + 1) / cfg.steps_per_epoch;
            if let Driver::Meta {
                theta, checkpoints, ..
            } = driver
            {
                checkpoints.push(theta.clone());
            }
            if epochs_done % cfg.eval_every_epochs == 0 {
                let (val_full, _) = model.evaluate(&data.val)?;
                let (test_loss, test_acc) = model.evaluate(&data.test)?;
                records.push(TrainStepRecord {
                    step,
                    epoch,
                    phase: Phase::Eval,
                    lr: None,
                    train_loss: None,
                    val_loss: Some(val_full),
                    test_loss: Some(test_loss),
                    test_acc: Some(test_acc),
                    wall_us: 0,
                });
            }
        }
    }
    Ok(())
}

/// Final artifacts of a meta-training run.
#[derive(Debug, Clone)]
pub struct MetaRunOutput {
    pub model: LearnerModel,
    pub theta: MLRSNetParams,
    pub final_state: MLRSNetState,
    /// Snapshot of theta after each completed epoch.
    pub checkpoints: Vec<MLRSNetParams>,
    pub state_advances: u64,
    pub meta_updates: u64,
}

/// Runs Algorithm 1. `initial_theta` overrides the seeded init (its gamma
/// and hidden size win over the config's); partial metrics stay in
/// `records` if the run aborts on divergence.
pub fn train_mlrsnet(
    cfg: &MetaTrainConfig,
    data: &DataSplits,
    arch: &Architecture,
    initial_theta: Option<MLRSNetParams>,
    records: &mut Vec<TrainStepRecord>,
) -> Result<MetaRunOutput> {
    cfg.validate()?;
    let mut model_rng = RngStream::named(cfg.seed, "model-init");
    let mut model = LearnerModel::init(arch.clone(), &mut model_rng);
    let mut opt = OptimizerState::new(&model, cfg.optimizer, cfg.momentum, cfg.weight_decay);

    let mut theta = match initial_theta {
        Some(t) => t,
        None => {
            let mut meta_rng = RngStream::named(cfg.seed, "meta-init");
            MLRSNetParams::init(cfg.hidden_size, cfg.gamma, &mut meta_rng)?
        }
    };
    let mut state = MLRSNetState::zeros(theta.hidden_size());
    let mut adam = AdamState::new(theta.num_params(), cfg.adam_lr, cfg.adam_weight_decay);

    let mut batches_rng = RngStream::named(cfg.seed, "batches");
    let mut val_rng = RngStream::named(cfg.seed, "val-batches");
    let mut checkpoints = Vec::new();
    let mut state_advances = 0;
    let mut meta_updates = 0;

    let mut driver = Driver::Meta {
        theta: &mut theta,
        state: &mut state,
        adam: &mut adam,
        t_val: cfg.t_val,
        val_rng: &mut val_rng,
        checkpoints: &mut checkpoints,
        state_advances: &mut state_advances,
        meta_updates: &mut meta_updates,
    };
    run_loop(
        &mut driver,
        cfg,
        data,
        &mut model,
        &mut opt,
        &mut batches_rng,
        records,
    )?;

    Ok(MetaRunOutput {
        model,
        theta,
        final_state: state,
        checkpoints,
        state_advances,
        meta_updates,
    })
}

/// Same loop with a scheduler instead of meta updates.
pub fn train_with_schedule(
    spec: &ScheduleSpec,
    cfg: &MetaTrainConfig,
    data: &DataSplits,
    arch: &Architecture,
    records: &mut Vec<TrainStepRecord>,
) -> Result<LearnerModel> {
    let ctx = ScheduleContext {
        steps_per_epoch: cfg.steps_per_epoch,
        normalizer: cfg.normalizer,
        reset_state_on_switch: false,
    };
    let mut runtime = SchedulerRuntime::for_spec(spec, &ctx)?;
    train_with_runtime(spec, &mut runtime, cfg, data, arch, records)
}

/// Schedule run against an externally built runtime (transfer plans build
/// segmented frozen-meta runtimes themselves).
pub fn train_with_runtime(
    spec: &ScheduleSpec,
    runtime: &mut SchedulerRuntime,
    cfg: &MetaTrainConfig,
    data: &DataSplits,
    arch: &Architecture,
    records: &mut Vec<TrainStepRecord>,
) -> Result<LearnerModel> {
    cfg.validate()?;
    let mut model_rng = RngStream::named(cfg.seed, "model-init");
    let mut model = LearnerModel::init(arch.clone(), &mut model_rng);
    let mut opt = OptimizerState::new(&model, cfg.optimizer, cfg.momentum, cfg.weight_decay);
    let mut batches_rng = RngStream::named(cfg.seed, "batches");

    let mut driver = Driver::Schedule { spec, runtime };
    run_loop(
        &mut driver,
        cfg,
        data,
        &mut model,
        &mut opt,
        &mut batches_rng,
        records,
    )?;
    Ok(model)
}

/// Wall-time ratio of meta training (meta update every `cfg.t_val` steps)
/// against the identical run with meta updates disabled.
#[derive(Debug, Clone, Copy)]
pub struct OverheadReport {
    pub ratio: f64,
    pub samples: u64,
    pub with_meta_us_per_step: f64,
    pub without_meta_us_per_step: f64,
}

pub fn measure_overhead(
    cfg: &MetaTrainConfig,
    data: &DataSplits,
    arch: &Architecture,
) -> Result<OverheadReport> {
    cfg.validate()?;
    let mut warm_cfg = cfg.clone();
    warm_cfg.total_steps = cfg.total_steps.min(50);
    let mut sink = Vec::new();
    train_mlrsnet(&warm_cfg, data, arch, None, &mut sink)?;

    let time_run = |cfg: &MetaTrainConfig| -> Result<f64> {
        let mut records = Vec::new();
        let start = Instant::now();
        train_mlrsnet(cfg, data, arch, None, &mut records)?;
        Ok(start.elapsed().as_nanos() as f64 / 1000.0 / cfg.total_steps as f64)
    };

    let mut without = cfg.clone();
    without.t_val = cfg.total_steps + 1;
    let without_us = time_run(&without)?;
    let with_us = time_run(cfg)?;
    Ok(OverheadReport {
        ratio: with_us / without_us,
        samples: cfg.total_steps,
        with_meta_us_per_step: with_us,
        without_meta_us_per_step: without_us,
    })
}

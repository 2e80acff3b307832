//! Learning-rate schedules behind a single runtime contract.
//!
//! Classical baselines (fixed, exponential decay, multi-step decay, cosine
//! annealing with warm restarts, hypergradient descent) plus a frozen
//! meta-net mode that replays trained checkpoints at inference time,
//! optionally segmented over the horizon for transfer runs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlrsnet::{load_checkpoint, normalize_loss, MLRSNetParams, MLRSNetState, Normalizer};

/// Schedule selector, expressible in experiment config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    Fixed {
        lr0: f64,
    },
    /// lr = lr0 * rate^epoch.
    Exponential {
        lr0: f64,
        rate: f64,
    },
    /// lr = lr0 * factor^floor(epoch / period_epochs).
    MultiStep {
        lr0: f64,
        period_epochs: u64,
        factor: f64,
    },
    /// Cosine annealing with warm restarts; cycle lengths t0, t0*t_mult, ...
    Sgdr {
        eta_max: f64,
        eta_min: f64,
        t0: u64,
        t_mult: u64,
    },
    /// Online scalar-lr adaptation from consecutive gradient alignment.
    Hd {
        alpha0: f64,
        hyper_lr: f64,
    },
    /// Replay trained meta-net checkpoints with frozen parameters.
    FrozenMetaNet {
        checkpoints: Vec<PathBuf>,
        #[serde(default)]
        gamma_override: Option<f64>,
    },
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            ScheduleSpec::Fixed { lr0 } => {
                // Zero is allowed: a frozen learner is a useful control.
                if !(*lr0 >= 0.0) || !lr0.is_finite() {
                    return bad(format!("fixed lr0 must be >= 0 and finite, got {lr0}"));
                }
            }
            ScheduleSpec::Exponential { lr0, rate } => {
                if !(*lr0 > 0.0) || !(*rate > 0.0) {
                    return bad(format!("exponential lr0/rate must be > 0, got {lr0}/{rate}"));
                }
            }
            ScheduleSpec::MultiStep {
                lr0,
                period_epochs,
                factor,
            } => {
                if !(*lr0 > 0.0) {
                    return bad(format!("multi-step lr0 must be > 0, got {lr0}"));
                }
                if *period_epochs == 0 {
                    return bad("multi-step period_epochs must be >= 1".into());
                }
                if !(*factor > 0.0 && *factor < 1.0) {
                    return bad(format!("multi-step factor must be in (0,1), got {factor}"));
                }
            }
            ScheduleSpec::Sgdr {
                eta_max,
                eta_min,
                t0,
                t_mult,
            } => {
                if !(*eta_max > 0.0) || !(*eta_min > 0.0) || eta_min >= eta_max {
                    return bad(format!(
                        "sgdr needs 0 < eta_min < eta_max, got {eta_min}/{eta_max}"
                    ));
                }
                if *t0 == 0 || *t_mult == 0 {
                    return bad("sgdr t0 and t_mult must be >= 1".into());
                }
            }
            ScheduleSpec::Hd { alpha0, hyper_lr } => {
                if !(*alpha0 > 0.0) || !(*hyper_lr > 0.0) {
                    return bad(format!("hd alpha0/hyper_lr must be > 0, got {alpha0}/{hyper_lr}"));
                }
            }
            ScheduleSpec::FrozenMetaNet {
                checkpoints,
                gamma_override,
            } => {
                if checkpoints.is_empty() {
                    return bad("frozen-meta-net needs at least one checkpoint".into());
                }
                if let Some(g) = gamma_override {
                    if !(*g > 0.0) {
                        return bad(format!("gamma_override must be > 0, got {g}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Context a runtime needs beyond the spec itself.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleContext {
    pub steps_per_epoch: u64,
    pub normalizer: Normalizer,
    /// Reset the recurrent state when a segmented plan switches nets.
    pub reset_state_on_switch: bool,
}

impl Default for ScheduleContext {
    fn default() -> Self {
        ScheduleContext {
            steps_per_epoch: 1,
            normalizer: Normalizer::Identity,
            reset_state_on_switch: false,
        }
    }
}

/// Frozen meta-net replay state: loaded nets, the active segment, and the
/// persistent recurrent state that survives segment switches.
#[derive(Debug, Clone)]
pub struct FrozenMetaRuntime {
    nets: Vec<MLRSNetParams>,
    /// Segment start steps, one per net, first entry 0.
    starts: Vec<u64>,
    active: usize,
    state: MLRSNetState,
    normalizer: Normalizer,
    reset_state_on_switch: bool,
}

impl FrozenMetaRuntime {
    /// Single net or an already-segmented list; `starts[i]` is the first step
    /// on which net i drives the run.
    pub fn from_params(
        nets: Vec<MLRSNetParams>,
        starts: Vec<u64>,
        ctx: &ScheduleContext,
    ) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::Config("frozen meta runtime needs at least one net".into()));
        }
        if starts.len() != nets.len() || starts[0] != 0 {
            return Err(Error::Config(
                "segment starts must have one entry per net, beginning at 0".into(),
            ));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("segment starts must be strictly increasing".into()));
        }
        let h = nets[0].hidden_size();
        if nets.iter().any(|n| n.hidden_size() != h) {
            return Err(Error::Config(format!(
                "checkpoint hidden sizes differ (expected {h})"
            )));
        }
        Ok(FrozenMetaRuntime {
            state: MLRSNetState::zeros(h),
            nets,
            starts,
            active: 0,
            normalizer: ctx.normalizer,
            reset_state_on_switch: ctx.reset_state_on_switch,
        })
    }

    pub fn from_paths(
        paths: &[PathBuf],
        gamma_override: Option<f64>,
        starts: Vec<u64>,
        ctx: &ScheduleContext,
    ) -> Result<Self> {
        let mut nets = Vec::with_capacity(paths.len());
        for p in paths {
            let mut params = load_checkpoint(p)?.to_params()?;
            if let Some(g) = gamma_override {
                params.set_gamma(g)?;
            }
            nets.push(params);
        }
        FrozenMetaRuntime::from_params(nets, starts, ctx)
    }

    pub fn active_gamma(&self) -> f64 {
        self.nets[self.active].gamma()
    }

    pub fn active_index(&self) -> usize {
        self.active
    }

    pub fn state(&self) -> &MLRSNetState {
        &self.state
    }

    fn select_segment(&mut self, step: u64) {
        let mut idx = 0;
        for (i, s) in self.starts.iter().enumerate() {
            if step >= *s {
                idx = i;
            }
        }
        if idx != self.active {
            self.active = idx;
            if self.reset_state_on_switch {
                self.state = MLRSNetState::zeros(self.nets[0].hidden_size());
            }
        }
    }
}

/// Advances the active frozen net one step and returns the predicted lr.
pub fn frozen_meta_lr(runtime: &mut FrozenMetaRuntime, observed_loss: f64) -> Result<f64> {
    let net = &runtime.nets[runtime.active];
    let loss_in = normalize_loss(observed_loss, runtime.normalizer);
    let (lr, new_state, _) = net.forward(&runtime.state, loss_in)?;
    runtime.state = new_state;
    Ok(lr)
}

/// Per-run mutable scheduler state.
#[derive(Debug, Clone)]
pub enum SchedulerRuntime {
    Stateless,
    Sgdr {
        steps_in_cycle: u64,
        t_i_epochs: u64,
        steps_per_epoch: u64,
    },
    Hd {
        alpha: f64,
        prev_grad: Option<Vec<f64>>,
    },
    FrozenMeta(FrozenMetaRuntime),
}

impl SchedulerRuntime {
    pub fn for_spec(spec: &ScheduleSpec, ctx: &ScheduleContext) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            ScheduleSpec::Fixed { .. }
            | ScheduleSpec::Exponential { .. }
            | ScheduleSpec::MultiStep { .. } => SchedulerRuntime::Stateless,
            ScheduleSpec::Sgdr { t0, .. } => SchedulerRuntime::Sgdr {
                steps_in_cycle: 0,
                t_i_epochs: *t0,
                steps_per_epoch: ctx.steps_per_epoch.max(1),
            },
            ScheduleSpec::Hd { alpha0, .. } => SchedulerRuntime::Hd {
                alpha: *alpha0,
                prev_grad: None,
            },
            ScheduleSpec::FrozenMetaNet {
                checkpoints,
                gamma_override,
            } => {
                if checkpoints.len() > 1 {
                    return Err(Error::Config(
                        "multiple checkpoints need explicit segment boundaries; \
                         build a TransferPlan instead"
                            .into(),
                    ));
                }
                SchedulerRuntime::FrozenMeta(FrozenMetaRuntime::from_paths(
                    checkpoints,
                    *gamma_override,
                    vec![0],
                    ctx,
                )?)
            }
        })
    }
}

/// Cosine value inside one restart cycle.
pub fn sgdr_lr(t_cur: f64, t_i: f64, eta_min: f64, eta_max: f64) -> f64 {
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos())
}

/// One hypergradient-descent update of the scalar lr, floored at zero.
pub fn hd_update(alpha_prev: f64, g_t: &[f64], g_prev: &[f64], hyper_lr: f64) -> f64 {
    assert_eq!(g_t.len(), g_prev.len(), "hd_update: gradient length mismatch");
    let dot: f64 = g_t.iter().zip(g_prev.iter()).map(|(a, b)| a * b).sum();
    (alpha_prev + hyper_lr * dot).max(0.0)
}

/// The lr to use for training step `step` in epoch `epoch`, advancing any
/// runtime state. HD wants the current gradient; the frozen meta-net wants
/// the current training loss.
pub fn lr_at(
    spec: &ScheduleSpec,
    runtime: &mut SchedulerRuntime,
    step: u64,
    epoch: u64,
    observed_loss: Option<f64>,
    observed_grad: Option<&[f64]>,
) -> Result<f64> {
    match (spec, runtime) {
        (ScheduleSpec::Fixed { lr0 }, SchedulerRuntime::Stateless) => Ok(*lr0),
        (ScheduleSpec::Exponential { lr0, rate }, SchedulerRuntime::Stateless) => {
            Ok(lr0 * rate.powi(epoch as i32))
        }
        (
            ScheduleSpec::MultiStep {
                lr0,
                period_epochs,
                factor,
            },
            SchedulerRuntime::Stateless,
        ) => Ok(lr0 * factor.powi((epoch / period_epochs) as i32)),
        (
            ScheduleSpec::Sgdr {
                eta_max,
                eta_min,
                t_mult,
                ..
            },
            SchedulerRuntime::Sgdr {
                steps_in_cycle,
                t_i_epochs,
                steps_per_epoch,
            },
        ) => {
            let t_cur = *steps_in_cycle as f64 / *steps_per_epoch as f64;
            let lr = sgdr_lr(t_cur, *t_i_epochs as f64, *eta_min, *eta_max);
            *steps_in_cycle += 1;
            if *steps_in_cycle >= *t_i_epochs * *steps_per_epoch {
                *steps_in_cycle = 0;
                *t_i_epochs *= *t_mult;
            }
            Ok(lr)
        }
        (ScheduleSpec::Hd { hyper_lr, .. }, SchedulerRuntime::Hd { alpha, prev_grad }) => {
            let g_t = observed_grad
                .ok_or_else(|| Error::Usage("hd schedule needs the current gradient".into()))?;
            if let Some(prev) = prev_grad.as_deref() {
                *alpha = hd_update(*alpha, g_t, prev, *hyper_lr);
            }
            *prev_grad = Some(g_t.to_vec());
            Ok(*alpha)
        }
        (ScheduleSpec::FrozenMetaNet { .. }, SchedulerRuntime::FrozenMeta(rt)) => {
            let loss = observed_loss.ok_or_else(|| {
                Error::Usage("frozen-meta-net schedule needs the current training loss".into())
            })?;
            rt.select_segment(step);
            frozen_meta_lr(rt, loss)
        }
        _ => Err(Error::Usage("scheduler runtime does not match spec".into())),
    }
}

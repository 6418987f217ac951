//! Policy training loop: differentiable rollout, closed-loop BPTT,
//! smoothness regularization, gradient clipping and an optimizer step per
//! iteration, with absolute-change early stopping.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{backward_closedloop, GradientBundle};
use crate::env::{rollout, Scenario, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::optim::{clip_gradient, l2_norm, optimizer_step, OptimizerKind, OptimizerState};
use crate::policy::{init_params, NeuralPolicy, PolicyParams};
use crate::smoothing::Smoothing;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub t_max: usize,
    pub stop_eps: f64,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    /// β, weight of the smoothness penalty.
    pub smooth_weight: f64,
    /// α, heading-vs-speed balance inside the smoothness penalty.
    pub angle_weight: f64,
    pub clip_threshold: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 2000,
            t_max: 500,
            stop_eps: 1e-3,
            early_stop_delta: 1e-3,
            early_stop_patience: 5,
            smooth_weight: 1.0,
            angle_weight: 1e-3,
            clip_threshold: 10.0,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn smoothing(&self) -> Smoothing {
        Smoothing {
            weight: self.smooth_weight,
            angle_weight: self.angle_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_iters == 0 || self.t_max == 0 {
            return bad("max_iters and t_max must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if !(self.stop_eps > 0.0 && self.early_stop_delta > 0.0) {
            return bad("stop_eps and early_stop_delta must be positive");
        }
        if !(self.clip_threshold > 0.0 && self.learning_rate > 0.0) {
            return bad("clip_threshold and learning_rate must be positive");
        }
        if !(self.smooth_weight >= 0.0 && self.angle_weight >= 0.0) {
            return bad("smoothness weights must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub j_task: f64,
    pub j_smooth: f64,
    pub j_total: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    /// Wall-clock time of the iteration in milliseconds.
    pub ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Objective change stayed below the threshold for `patience` iterations.
    EarlyStop,
    /// The gradient is exactly zero, so no update can change anything.
    ZeroGradient,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub stop_reason: Option<StopReason>,
    /// Learning rate in effect at the end (halved once after a numeric failure).
    pub final_learning_rate: f64,
    pub total_ms: f64,
}

impl TrainingLog {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.j_total)
    }

    /// The log with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainingLog {
        let mut log = self.clone();
        log.total_ms = 0.0;
        for r in &mut log.records {
            r.ms = 0.0;
        }
        log
    }

    pub const CSV_HEADER: &'static str =
        "iteration,J_task,J_smooth,J_total,grad_norm_pre,grad_norm_post,ms";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.3}",
                r.iteration, r.j_task, r.j_smooth, r.j_total, r.grad_norm_pre, r.grad_norm_post, r.ms
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(File::create(path)?))
    }
}

/// Forward rollout plus closed-loop gradient at `params`.
pub fn evaluate_with_gradient(
    params: &PolicyParams,
    scn: &Scenario,
    t_max: usize,
    stop_eps: f64,
    smooth: Smoothing,
) -> Result<(TrajectoryRecord, GradientBundle)> {
    let traj = rollout(&mut NeuralPolicy::new(params), scn, t_max, stop_eps)?;
    let grads = backward_closedloop(&traj, params, scn, smooth)?;
    Ok((traj, grads))
}

/// Trains a fresh policy initialised from `cfg.seed`.
pub fn train(scn: &Scenario, cfg: &TrainConfig) -> Result<(PolicyParams, TrainingLog)> {
    let init = init_params(cfg.seed, scn.num_users())?;
    train_from(scn, cfg, init)
}

struct Snapshot {
    params: Vec<f64>,
    opt: OptimizerState,
}

/// Runs the training loop starting from `params`.
///
/// On a numeric failure the last update is undone and the learning rate is
/// halved; a second failure aborts with [`Error::TrainingFailure`].
pub fn train_from(
    scn: &Scenario,
    cfg: &TrainConfig,
    mut params: PolicyParams,
) -> Result<(PolicyParams, TrainingLog)> {
    scn.validate()?;
    cfg.validate()?;
    let start = Instant::now();
    let smooth = cfg.smoothing();
    let mut opt = OptimizerState::new(cfg.optimizer, params.len());
    let mut lr = cfg.learning_rate;
    let mut retried = false;
    let mut snapshot: Option<Snapshot> = None;
    let mut log = TrainingLog {
        records: Vec::new(),
        converged: false,
        stop_reason: None,
        final_learning_rate: lr,
        total_ms: 0.0,
    };
    let mut streak = 0usize;

    let mut iteration = 1;
    while iteration <= cfg.max_iters {
        let it_start = Instant::now();
        let outcome = evaluate_with_gradient(&params, scn, cfg.t_max, cfg.stop_eps, smooth)
            .and_then(|(_, g)| {
                let norm = l2_norm(&g.param_grad);
                if !norm.is_finite() {
                    return Err(Error::numeric(0, "gradient norm is not finite"));
                }
                Ok((g, norm))
            });

        let (grads, norm_pre) = match outcome {
            Ok(v) => v,
            Err(e) => {
                let Some(snap) = snapshot.take().filter(|_| !retried) else {
                    log.total_ms = start.elapsed().as_secs_f64() * 1e3;
                    return Err(Error::TrainingFailure {
                        source: Box::new(e),
                        log: Box::new(log),
                    });
                };
                retried = true;
                lr *= 0.5;
                log.final_learning_rate = lr;
                params.values = snap.params;
                opt = snap.opt;
                log.records.pop();
                streak = 0;
                iteration -= 1;
                continue;
            }
        };

        let clipped = clip_gradient(&grads.param_grad, cfg.clip_threshold);
        let norm_post = l2_norm(&clipped);

        if let Some(prev) = log.records.last() {
            if (grads.j_total - prev.j_total).abs() < cfg.early_stop_delta {
                streak += 1;
            } else {
                streak = 0;
            }
        }

        log.records.push(IterationRecord {
            iteration,
            j_task: grads.j_task,
            j_smooth: grads.j_smooth,
            j_total: grads.j_total,
            grad_norm_pre: norm_pre,
            grad_norm_post: norm_post,
            ms: 0.0,
        });

        let stop = if norm_pre == 0.0 {
            Some(StopReason::ZeroGradient)
        } else if streak >= cfg.early_stop_patience {
            Some(StopReason::EarlyStop)
        } else {
            None
        };

        if stop.is_none() {
            let saved = Snapshot {
                params: params.values.clone(),
                opt: opt.clone(),
            };
            if let Err(e) = optimizer_step(&mut params.values, &clipped, &mut opt, lr) {
                if retried {
                    log.total_ms = start.elapsed().as_secs_f64() * 1e3;
                    return Err(Error::TrainingFailure {
                        source: Box::new(e),
                        log: Box::new(log),
                    });
                }
                retried = true;
                lr *= 0.5;
                log.final_learning_rate = lr;
                params.values = saved.params;
                opt = saved.opt;
                log.records.pop();
                continue;
            }
            snapshot = Some(saved);
        }

        log.records.last_mut().unwrap().ms = it_start.elapsed().as_secs_f64() * 1e3;
        if let Some(reason) = stop {
            log.stop_reason = Some(reason);
            log.converged = true;
            break;
        }
        iteration += 1;
    }

    if log.stop_reason.is_none() {
        log.stop_reason = Some(StopReason::MaxIters);
    }
    log.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((params, log))
}

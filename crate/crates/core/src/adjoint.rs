//! Exact gradients of the accumulated objective through an unrolled
//! trajectory.
//!
//! Two reverse sweeps share the same analytic Jacobians:
//!
//! * [`backward_openloop`] treats every control as a free variable and runs
//!   the co-state recursion `λ[t] = ∂L/∂x[t] + λ[t+1]ᵀ A[t]` with action
//!   gradients `λ[t+1]ᵀ B[t]`.
//! * [`backward_closedloop`] differentiates the closed-loop graph
//!   `x[t+1] = f(x[t], π(x[t]))`, so the policy's dependence on the state
//!   feeds back into the co-state. This is the gradient used for training.
//!
//! The objective follows the rollout indexing `J = Σ_t L(x[t+1])`: the
//! initial state carries no stage cost. The clamp masks are frozen from the
//! forward pass.

use crate::env::{self, rate_grad_q, Control, Scenario, State, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::policy::{self, ForwardCache, PolicyParams};
use crate::smoothing::{smoothness_grads, smoothness_penalty, total_objective, Smoothing};

/// `∂f/∂x` at one trajectory point, stored by block.
///
/// The full matrix is `[[I₂, 0], [∂d'/∂q, diag(mask)]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateJacobian {
    pub mask: Vec<bool>,
    /// Row `i` of `∂d'/∂q`.
    pub dd_dq: Vec<[f64; 2]>,
}

impl StateJacobian {
    pub fn dim(&self) -> usize {
        2 + self.mask.len()
    }

    /// Dense row-major `(2+K)×(2+K)` matrix.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut a = vec![vec![0.0; n]; n];
        a[0][0] = 1.0;
        a[1][1] = 1.0;
        for (i, (&m, g)) in self.mask.iter().zip(&self.dd_dq).enumerate() {
            a[2 + i][0] = g[0];
            a[2 + i][1] = g[1];
            a[2 + i][2 + i] = if m { 1.0 } else { 0.0 };
        }
        a
    }

    /// Adds `λᵀ A` into `out`.
    pub fn transpose_mul_add(&self, lambda: &[f64], out: &mut [f64]) {
        out[0] += lambda[0];
        out[1] += lambda[1];
        for (i, (&m, g)) in self.mask.iter().zip(&self.dd_dq).enumerate() {
            let li = lambda[2 + i];
            out[0] += li * g[0];
            out[1] += li * g[1];
            if m {
                out[2 + i] += li;
            }
        }
    }
}

/// `∂f/∂u`. Only the position rows are nonzero because the backlog update
/// reads the pre-step position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlJacobian {
    pub dq_dv: [f64; 2],
    pub dq_dtheta: [f64; 2],
}

impl ControlJacobian {
    pub fn to_dense(&self, k: usize) -> Vec<[f64; 2]> {
        let mut b = vec![[0.0; 2]; 2 + k];
        b[0] = [self.dq_dv[0], self.dq_dtheta[0]];
        b[1] = [self.dq_dv[1], self.dq_dtheta[1]];
        b
    }

    /// `λᵀ B`.
    pub fn transpose_mul(&self, lambda: &[f64]) -> [f64; 2] {
        [
            lambda[0] * self.dq_dv[0] + lambda[1] * self.dq_dv[1],
            lambda[0] * self.dq_dtheta[0] + lambda[1] * self.dq_dtheta[1],
        ]
    }
}

pub fn jacobian_state(x: &State, _u: Control, mask: &[bool], scn: &Scenario) -> StateJacobian {
    let dd_dq = mask
        .iter()
        .zip(&scn.users)
        .map(|(&m, &w)| {
            if m {
                let g = rate_grad_q(x.q, w, scn);
                [-scn.tau * g[0], -scn.tau * g[1]]
            } else {
                [0.0, 0.0]
            }
        })
        .collect();
    StateJacobian {
        mask: mask.to_vec(),
        dd_dq,
    }
}

pub fn jacobian_control(_x: &State, u: Control, scn: &Scenario) -> ControlJacobian {
    let (s, c) = u.theta.sin_cos();
    ControlJacobian {
        dq_dv: [scn.tau * c, scn.tau * s],
        dq_dtheta: [-u.v * scn.tau * s, u.v * scn.tau * c],
    }
}

/// `∂L/∂x`. At a user's exact position the shaping term contributes zero.
pub fn cost_grad_state(x: &State, scn: &Scenario) -> Vec<f64> {
    let mut g = vec![1.0; scn.state_dim()];
    g[0] = 0.0;
    g[1] = 0.0;
    if scn.dist_weight != 0.0 {
        for w in &scn.users {
            let dx = x.q[0] - w[0];
            let dy = x.q[1] - w[1];
            let r = (dx * dx + dy * dy).sqrt();
            if r > 0.0 {
                g[0] += scn.dist_weight * dx / r;
                g[1] += scn.dist_weight * dy / r;
            }
        }
    }
    g
}

fn add_cost_grad(x: &State, scn: &Scenario, out: &mut [f64]) {
    for (o, g) in out.iter_mut().zip(cost_grad_state(x, scn)) {
        *o += g;
    }
}

/// `H(x, u, λ_next) = L(x) + λ_nextᵀ f(x, u)`.
pub fn hamiltonian(x: &State, u: Control, lambda_next: &[f64], scn: &Scenario) -> Result<f64> {
    if lambda_next.len() != scn.state_dim() || x.d.len() != scn.num_users() {
        return Err(Error::usage("co-state and state dimensions disagree"));
    }
    let (next, _) = env::step(x, u, scn)?;
    let fx = next.q.iter().chain(&next.d);
    Ok(env::stage_cost(x, scn) + lambda_next.iter().zip(fx).map(|(l, f)| l * f).sum::<f64>())
}

fn check_record(traj: &TrajectoryRecord, scn: &Scenario) -> Result<()> {
    let t = traj.controls.len();
    let k = scn.num_users();
    if traj.states.len() != t + 1
        || traj.observations.len() != t
        || traj.stage_costs.len() != t
        || traj.active_masks.len() != t
    {
        return Err(Error::usage("trajectory record lengths are inconsistent"));
    }
    if traj.states.iter().any(|s| s.d.len() != k) || traj.active_masks.iter().any(|m| m.len() != k) {
        return Err(Error::usage("trajectory record does not match the scenario"));
    }
    Ok(())
}

fn check_finite(step: usize, v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(step, format!("non-finite {what}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopGradients {
    /// `λ[0..=T]`; `λ[t] = dJ/dx[t]`.
    pub costates: Vec<Vec<f64>>,
    /// `dJ/du[t]` with every other control held fixed.
    pub action_grads: Vec<[f64; 2]>,
}

/// Co-state recursion for the task cost with the controls as free variables.
pub fn backward_openloop(traj: &TrajectoryRecord, scn: &Scenario) -> Result<OpenLoopGradients> {
    check_record(traj, scn)?;
    let horizon = traj.len();
    let n = scn.state_dim();
    let mut costates = vec![vec![0.0; n]; horizon + 1];
    let mut action_grads = vec![[0.0; 2]; horizon];
    if horizon == 0 {
        return Ok(OpenLoopGradients {
            costates,
            action_grads,
        });
    }
    add_cost_grad(&traj.states[horizon], scn, &mut costates[horizon]);
    for t in (0..horizon).rev() {
        let x = &traj.states[t];
        let u = traj.controls[t];
        let (head, tail) = costates.split_at_mut(t + 1);
        let next = &tail[0];
        action_grads[t] = jacobian_control(x, u, scn).transpose_mul(next);
        let cur = &mut head[t];
        jacobian_state(x, u, &traj.active_masks[t], scn).transpose_mul_add(next, cur);
        if t > 0 {
            add_cost_grad(x, scn, cur);
        }
        check_finite(t, cur, "co-state")?;
    }
    Ok(OpenLoopGradients {
        costates,
        action_grads,
    })
}

/// Objective values and gradients from one closed-loop reverse sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Total derivative of `J_total` with respect to each control, including
    /// the smoothness term.
    pub action_grads: Vec<[f64; 2]>,
    /// `dJ_total/dθ` over the flat policy parameters.
    pub param_grad: Vec<f64>,
    pub j_task: f64,
    pub j_smooth: f64,
    pub j_total: f64,
}

/// Task, smoothness and total objective of a recorded rollout.
pub fn objective(traj: &TrajectoryRecord, smooth: Smoothing) -> (f64, f64, f64) {
    let j_task = traj.task_cost();
    let j_smooth = smoothness_penalty(&traj.controls, smooth.angle_weight);
    (j_task, j_smooth, total_objective(j_task, j_smooth, smooth.weight))
}

/// Backpropagation through time over the closed-loop rollout `traj`, which
/// must have been produced by `params` on `scn`.
pub fn backward_closedloop(
    traj: &TrajectoryRecord,
    params: &PolicyParams,
    scn: &Scenario,
    smooth: Smoothing,
) -> Result<GradientBundle> {
    check_record(traj, scn)?;
    let horizon = traj.len();
    let n = scn.state_dim();
    let (j_task, j_smooth, j_total) = objective(traj, smooth);
    let mut param_grad = vec![0.0; params.len()];
    let mut action_grads = vec![[0.0; 2]; horizon];
    if horizon == 0 {
        return Ok(GradientBundle {
            action_grads,
            param_grad,
            j_task,
            j_smooth,
            j_total,
        });
    }

    let smooth_g = if smooth.weight != 0.0 {
        smoothness_grads(&traj.controls, smooth.angle_weight)
    } else {
        vec![[0.0; 2]; horizon]
    };

    let mut cache = ForwardCache::default();
    let mut obs_grad = vec![0.0; params.spec.input_dim()];
    // dJ/dx[t+1] entering step t.
    let mut lambda = vec![0.0; n];
    let mut lambda_prev = vec![0.0; n];
    add_cost_grad(&traj.states[horizon], scn, &mut lambda);

    for t in (0..horizon).rev() {
        let x = &traj.states[t];
        let u = traj.controls[t];
        let replay = policy::forward_cached(params, &traj.observations[t], scn.v_max, &mut cache)?;
        if replay != u {
            return Err(Error::usage(format!(
                "control at step {t} was not produced by these parameters"
            )));
        }

        let bu = jacobian_control(x, u, scn).transpose_mul(&lambda);
        let gu = [
            bu[0] + smooth.weight * smooth_g[t][0],
            bu[1] + smooth.weight * smooth_g[t][1],
        ];
        check_finite(t, &gu, "action gradient")?;
        action_grads[t] = gu;

        policy::backward_accumulate(params, &cache, scn.v_max, gu, &mut param_grad, &mut obs_grad);

        lambda_prev.iter_mut().for_each(|v| *v = 0.0);
        jacobian_state(x, u, &traj.active_masks[t], scn).transpose_mul_add(&lambda, &mut lambda_prev);
        policy::observe_vjp(&obs_grad, scn, &mut lambda_prev);
        if t > 0 {
            add_cost_grad(x, scn, &mut lambda_prev);
        }
        check_finite(t, &lambda_prev, "co-state")?;
        std::mem::swap(&mut lambda, &mut lambda_prev);
    }
    if let Some(i) = param_grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(0, format!("non-finite gradient for parameter {i}")));
    }

    Ok(GradientBundle {
        action_grads,
        param_grad,
        j_task,
        j_smooth,
        j_total,
    })
}

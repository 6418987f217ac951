//! Mission model: scenario and state types, the LoS rate model, the
//! state-transition function, the stage cost and closed-loop rollout.
//!
//! The composite state is `x = [q, d]` with `q` the horizontal AAV position
//! and `d` the per-user remaining data. One step applies
//!
//! ```text
//! q' = q + v·τ·[cos θ, sin θ]
//! d'_i = max(0, d_i − R_i(q)·τ)
//! ```
//!
//! where the rate is evaluated at the pre-step position `q`.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy;

/// One mission instance: user layout, demands, and channel/physical constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Ground user positions `w_i`.
    pub users: Vec<[f64; 2]>,
    /// Data each user must upload, `D_i`.
    pub demands: Vec<f64>,
    /// Side of the square service region `[-L/2, L/2]²`.
    pub area_side: f64,
    /// Received power at unit distance.
    pub eta: f64,
    pub sigma2: f64,
    pub altitude: f64,
    /// Total bandwidth, split evenly across users.
    pub bandwidth: f64,
    /// Slot duration.
    pub tau: f64,
    pub v_max: f64,
    /// Weight of the AAV-user distance shaping term in the stage cost.
    pub dist_weight: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Physical and channel constants shared by generated scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Physics {
    pub eta: f64,
    pub sigma2: f64,
    pub altitude: f64,
    /// `None` means one unit of bandwidth per user.
    pub bandwidth: Option<f64>,
    pub tau: f64,
    pub v_max: f64,
    pub dist_weight: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Physics {
            eta: 1.0,
            sigma2: 0.1,
            altitude: 1.0,
            bandwidth: None,
            tau: 1.0,
            v_max: 0.2,
            dist_weight: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub q: [f64; 2],
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub v: f64,
    /// Heading in radians; any real value, consumed modulo 2π.
    pub theta: f64,
}

impl Control {
    pub const HOVER: Control = Control { v: 0.0, theta: 0.0 };

    pub fn new(v: f64, theta: f64) -> Self {
        Control { v, theta }
    }
}

/// The unrolled rollout; everything the backward passes need.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// `T + 1` states, `states[0]` is the initial state.
    pub states: Vec<State>,
    pub observations: Vec<Vec<f64>>,
    pub controls: Vec<Control>,
    /// `stage_costs[t] = L(states[t + 1])`.
    pub stage_costs: Vec<f64>,
    /// `active_masks[t][i]` is true iff the clamp in the backlog update was
    /// inactive at step `t`.
    pub active_masks: Vec<Vec<bool>>,
    /// First step index at which each user's backlog reached zero. Users still
    /// holding a residue when the mission terminates get the termination step.
    pub completion_step: Vec<Option<usize>>,
    /// Step at which the total backlog dropped below the stop threshold.
    pub terminated_step: Option<usize>,
}

impl TrajectoryRecord {
    /// Number of controls applied.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Accumulated task cost `Σ_t L(x[t+1])`.
    pub fn task_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    pub fn completed(&self) -> bool {
        self.terminated_step.is_some()
    }
}

impl Scenario {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn state_dim(&self) -> usize {
        2 + self.num_users()
    }

    /// Per-user bandwidth `B / K`.
    pub fn user_bandwidth(&self) -> f64 {
        self.bandwidth / self.num_users() as f64
    }

    pub fn initial_state(&self) -> State {
        State {
            q: [0.0, 0.0],
            d: self.demands.clone(),
        }
    }

    /// Checks the type invariants. Demands may be zero (an already
    /// satisfied user) but not negative.
    pub fn validate(&self) -> Result<()> {
        let k = self.users.len();
        if k == 0 {
            return Err(Error::usage("scenario needs at least one user"));
        }
        if self.demands.len() != k {
            return Err(Error::usage(format!(
                "{} users but {} demands",
                k,
                self.demands.len()
            )));
        }
        if self.demands.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::usage("demands must be finite and nonnegative"));
        }
        let positive = [
            ("area_side", self.area_side),
            ("eta", self.eta),
            ("sigma2", self.sigma2),
            ("altitude", self.altitude),
            ("bandwidth", self.bandwidth),
            ("tau", self.tau),
            ("v_max", self.v_max),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::usage(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.dist_weight.is_finite() && self.dist_weight >= 0.0) {
            return Err(Error::usage("dist_weight must be nonnegative"));
        }
        let half = self.area_side / 2.0;
        for (i, w) in self.users.iter().enumerate() {
            if w.iter().any(|c| !c.is_finite() || c.abs() > half) {
                return Err(Error::usage(format!(
                    "user {i} at {w:?} lies outside the region of side {}",
                    self.area_side
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn sq_dist(q: [f64; 2], w: [f64; 2]) -> f64 {
    let dx = q[0] - w[0];
    let dy = q[1] - w[1];
    dx * dx + dy * dy
}

#[inline]
pub(crate) fn rate_unchecked(q: [f64; 2], w: [f64; 2], scn: &Scenario) -> f64 {
    let snr = scn.eta / ((sq_dist(q, w) + scn.altitude * scn.altitude) * scn.sigma2);
    scn.user_bandwidth() * snr.ln_1p() / LN_2
}

/// Achievable uplink rate of user `i` with the AAV hovering above `q`.
pub fn rate(q: [f64; 2], i: usize, scn: &Scenario) -> Result<f64> {
    let w = scn
        .users
        .get(i)
        .ok_or_else(|| Error::usage(format!("user index {i} out of range (K = {})", scn.num_users())))?;
    Ok(rate_unchecked(q, *w, scn))
}

/// Gradient of the rate of the user at `w` with respect to the AAV position.
pub(crate) fn rate_grad_q(q: [f64; 2], w: [f64; 2], scn: &Scenario) -> [f64; 2] {
    let dist2 = sq_dist(q, w) + scn.altitude * scn.altitude;
    let snr = scn.eta / (dist2 * scn.sigma2);
    let coef = -scn.user_bandwidth() / LN_2 / (1.0 + snr) * 2.0 * scn.eta
        / (scn.sigma2 * dist2 * dist2);
    [coef * (q[0] - w[0]), coef * (q[1] - w[1])]
}

fn check_speed(u: Control, scn: &Scenario) -> Result<()> {
    if !(u.v >= 0.0 && u.v <= scn.v_max) {
        return Err(Error::usage(format!(
            "speed {} outside [0, {}]",
            u.v, scn.v_max
        )));
    }
    Ok(())
}

pub fn step_kinematics(q: [f64; 2], u: Control, scn: &Scenario) -> Result<[f64; 2]> {
    check_speed(u, scn)?;
    let (s, c) = u.theta.sin_cos();
    let dist = u.v * scn.tau;
    Ok([q[0] + dist * c, q[1] + dist * s])
}

/// Backlog update at position `q`. The mask is true where `d_i − R_i τ > 0`;
/// an exact zero counts as clamped.
pub fn step_tasks(d: &[f64], q: [f64; 2], scn: &Scenario) -> (Vec<f64>, Vec<bool>) {
    d.iter()
        .zip(&scn.users)
        .map(|(&di, &w)| {
            let left = di - rate_unchecked(q, w, scn) * scn.tau;
            if left > 0.0 {
                (left, true)
            } else {
                (0.0, false)
            }
        })
        .unzip()
}

/// `x[t+1] = f(x[t], u[t])`.
pub fn step(x: &State, u: Control, scn: &Scenario) -> Result<(State, Vec<bool>)> {
    let q = step_kinematics(x.q, u, scn)?;
    let (d, mask) = step_tasks(&x.d, x.q, scn);
    Ok((State { q, d }, mask))
}

/// `L(x) = Σ d_i + w_dist · Σ ‖q − w_i‖`.
pub fn stage_cost(x: &State, scn: &Scenario) -> f64 {
    let backlog: f64 = x.d.iter().sum();
    if scn.dist_weight == 0.0 {
        return backlog;
    }
    let dist: f64 = scn.users.iter().map(|&w| sq_dist(x.q, w).sqrt()).sum();
    backlog + scn.dist_weight * dist
}

/// Anything that can pick a control for the current state.
pub trait ControlSource {
    fn control(&mut self, t: usize, state: &State, obs: &[f64], scn: &Scenario) -> Result<Control>;
}

/// Always hovers in place.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hover;

impl ControlSource for Hover {
    fn control(&mut self, _: usize, _: &State, _: &[f64], _: &Scenario) -> Result<Control> {
        Ok(Control::HOVER)
    }
}

/// Replays a precomputed control sequence, hovering once it runs out.
#[derive(Debug, Clone, Copy)]
pub struct FixedControls<'a>(pub &'a [Control]);

impl ControlSource for FixedControls<'_> {
    fn control(&mut self, t: usize, _: &State, _: &[f64], _: &Scenario) -> Result<Control> {
        Ok(self.0.get(t).copied().unwrap_or(Control::HOVER))
    }
}

/// Applies the same control at every step.
#[derive(Debug, Clone, Copy)]
pub struct ConstantControl(pub Control);

impl ControlSource for ConstantControl {
    fn control(&mut self, _: usize, _: &State, _: &[f64], _: &Scenario) -> Result<Control> {
        Ok(self.0)
    }
}

/// Stop threshold on the total backlog: `stop_eps · K`.
pub fn stop_threshold(scn: &Scenario, stop_eps: f64) -> f64 {
    stop_eps * scn.num_users() as f64
}

/// Closed-loop unroll of `source` from the scenario's initial state.
///
/// Runs until the total backlog drops below `stop_eps · K` or `t_max`
/// controls have been applied.
pub fn rollout<S: ControlSource + ?Sized>(
    source: &mut S,
    scn: &Scenario,
    t_max: usize,
    stop_eps: f64,
) -> Result<TrajectoryRecord> {
    if t_max == 0 {
        return Err(Error::usage("t_max must be at least 1"));
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(stop_eps > 0.0) {
        return Err(Error::usage("stop_eps must be positive"));
    }
    let k = scn.num_users();
    let threshold = stop_threshold(scn, stop_eps);
    let x0 = scn.initial_state();
    let mut completion_step: Vec<Option<usize>> = x0
        .d
        .iter()
        .map(|&d| if d <= 0.0 { Some(0) } else { None })
        .collect();

    let mut rec = TrajectoryRecord {
        states: Vec::with_capacity(t_max.min(1024) + 1),
        observations: Vec::new(),
        controls: Vec::new(),
        stage_costs: Vec::new(),
        active_masks: Vec::new(),
        completion_step: Vec::new(),
        terminated_step: None,
    };
    rec.states.push(x0);

    for t in 0..=t_max {
        let x = &rec.states[t];
        if x.d.iter().sum::<f64>() < threshold {
            rec.terminated_step = Some(t);
            break;
        }
        if t == t_max {
            break;
        }
        let obs = policy::observe(x, scn);
        let u = source.control(t, x, &obs, scn)?;
        if !(u.v.is_finite() && u.theta.is_finite()) {
            return Err(Error::numeric(t, format!("non-finite control {u:?}")));
        }
        let (next, mask) = step(x, u, scn)?;
        if next.q.iter().chain(&next.d).any(|v| !v.is_finite()) {
            return Err(Error::numeric(t, "non-finite state"));
        }
        for (i, c) in completion_step.iter_mut().enumerate() {
            if c.is_none() && next.d[i] <= 0.0 {
                *c = Some(t + 1);
            }
        }
        rec.stage_costs.push(stage_cost(&next, scn));
        rec.observations.push(obs);
        rec.controls.push(u);
        rec.active_masks.push(mask);
        rec.states.push(next);
    }

    if let Some(end) = rec.terminated_step {
        for c in completion_step.iter_mut().filter(|c| c.is_none()) {
            *c = Some(end);
        }
    }
    debug_assert_eq!(completion_step.len(), k);
    rec.completion_step = completion_step;
    Ok(rec)
}

/// Draws a scenario: users uniform on `[-L/2, L/2]²`, demands uniform on
/// `[demand_lo, demand_hi]`. The AAV starts at the region center.
pub fn generate_scenario(
    seed: u64,
    num_users: usize,
    area_side: f64,
    demand_lo: f64,
    demand_hi: f64,
    physics: &Physics,
) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scn = generate_scenario_with(&mut rng, num_users, area_side, demand_lo, demand_hi, physics)?;
    scn.seed = Some(seed);
    Ok(scn)
}

pub fn generate_scenario_with<R: Rng + ?Sized>(
    rng: &mut R,
    num_users: usize,
    area_side: f64,
    demand_lo: f64,
    demand_hi: f64,
    physics: &Physics,
) -> Result<Scenario> {
    if num_users == 0 {
        return Err(Error::usage("need at least one user"));
    }
    if !(area_side > 0.0 && area_side.is_finite()) {
        return Err(Error::usage("area side must be positive"));
    }
    if !(demand_lo >= 0.0 && demand_lo <= demand_hi && demand_hi.is_finite()) {
        return Err(Error::usage(format!(
            "invalid demand range [{demand_lo}, {demand_hi}]"
        )));
    }
    let half = area_side / 2.0;
    let users = (0..num_users)
        .map(|_| [rng.random_range(-half..=half), rng.random_range(-half..=half)])
        .collect();
    let demands = (0..num_users)
        .map(|_| {
            if demand_lo == demand_hi {
                demand_lo
            } else {
                rng.random_range(demand_lo..=demand_hi)
            }
        })
        .collect();
    let scn = Scenario {
        users,
        demands,
        area_side,
        eta: physics.eta,
        sigma2: physics.sigma2,
        altitude: physics.altitude,
        bandwidth: physics.bandwidth.unwrap_or(num_users as f64),
        tau: physics.tau,
        v_max: physics.v_max,
        dist_weight: physics.dist_weight,
        seed: None,
    };
    scn.validate()?;
    Ok(scn)
}

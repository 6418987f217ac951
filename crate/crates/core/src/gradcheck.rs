//! Finite-difference check of the closed-loop parameter gradient.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::objective;
use crate::env::{generate_scenario_with, rate_unchecked, rollout, stop_threshold, Physics, Scenario, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::policy::{init_params_with, LayerSpec, NeuralPolicy, PolicyParams};
use crate::smoothing::Smoothing;
use crate::trainer::evaluate_with_gradient;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub users: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, as a fraction of the largest
    /// finite-difference component.
    pub rel_floor: f64,
    pub area_side: f64,
    pub demand_lo: f64,
    pub demand_hi: f64,
    /// Minimum distance of every clamp and termination test from its switch point.
    pub margin: f64,
    pub stop_eps: f64,
    pub smooth_weight: f64,
    pub angle_weight: f64,
    pub max_resamples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            users: 2,
            horizon: 20,
            seed: 0,
            step: 1e-6,
            tolerance: 1e-5,
            rel_floor: 1e-2,
            area_side: 10.0,
            demand_lo: 2.0,
            demand_hi: 20.0,
            margin: 1e-4,
            stop_eps: 1e-3,
            smooth_weight: 1.0,
            angle_weight: 1e-3,
            max_resamples: 1000,
        }
    }
}

impl GradcheckConfig {
    pub fn smoothing(&self) -> Smoothing {
        Smoothing {
            weight: self.smooth_weight,
            angle_weight: self.angle_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.horizon == 0 {
            return Err(Error::Config("users and horizon must be positive".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config("step must be positive".into()));
        }
        if !(self.rel_floor > 0.0 && self.tolerance > 0.0) {
            return Err(Error::Config("tolerance and rel_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub param_index: usize,
    pub analytic: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Closest approach of any clamp or stop test to its switch point.
    pub margin: f64,
    pub horizon: usize,
}

impl GradcheckReport {
    pub const CSV_HEADER: &'static str = "param_index,analytic,finite_diff,rel_err";

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wr.write_record(Self::CSV_HEADER.split(','))?;
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

pub fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}

/// Smallest gap between `d_i − R_i τ` and zero, and between the backlog
/// sum and the stop threshold, over every step of `traj`.
pub fn switch_margin(traj: &TrajectoryRecord, scn: &Scenario, stop_eps: f64) -> f64 {
    let thresh = stop_threshold(scn, stop_eps);
    let mut m = f64::INFINITY;
    for x in &traj.states[..traj.len()] {
        for (d, &w) in x.d.iter().zip(&scn.users) {
            m = m.min((d - rate_unchecked(x.q, w, scn) * scn.tau).abs());
        }
    }
    for x in &traj.states {
        let sum: f64 = x.d.iter().sum();
        if sum > 0.0 {
            m = m.min((sum - thresh).abs());
        }
    }
    m
}

/// Total objective of the closed-loop rollout under `params`.
pub fn closed_loop_objective(
    params: &PolicyParams,
    scn: &Scenario,
    t_max: usize,
    stop_eps: f64,
    smooth: Smoothing,
) -> Result<f64> {
    let traj = rollout(&mut NeuralPolicy::new(params), scn, t_max, stop_eps)?;
    Ok(objective(&traj, smooth).2)
}

/// Draws a scenario and policy whose rollout keeps every switch at least
/// `cfg.margin` away.
pub fn sample_instance<R: Rng>(rng: &mut R, cfg: &GradcheckConfig) -> Result<(Scenario, PolicyParams)> {
    let physics = Physics::default();
    for _ in 0..cfg.max_resamples.max(1) {
        let scn = generate_scenario_with(rng, cfg.users, cfg.area_side, cfg.demand_lo, cfg.demand_hi, &physics)?;
        let params = init_params_with(rng, LayerSpec::for_users(cfg.users));
        let traj = rollout(&mut NeuralPolicy::new(&params), &scn, cfg.horizon, cfg.stop_eps)?;
        if switch_margin(&traj, &scn, cfg.stop_eps) > cfg.margin {
            return Ok((scn, params));
        }
    }
    Err(Error::numeric(0, "no instance clear of the clamp boundaries"))
}

/// Compares the analytic gradient with central differences on every parameter.
pub fn check_params(
    params: &PolicyParams,
    scn: &Scenario,
    cfg: &GradcheckConfig,
    exec: Exec,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    let smooth = cfg.smoothing();
    let (traj, bundle) = evaluate_with_gradient(params, scn, cfg.horizon, cfg.stop_eps, smooth)?;
    let h = cfg.step;
    let fd: Vec<Result<f64>> = exec.map_range(params.len(), |j| {
        let mut p = params.clone();
        p.values[j] = params.values[j] + h;
        let up = closed_loop_objective(&p, scn, cfg.horizon, cfg.stop_eps, smooth)?;
        p.values[j] = params.values[j] - h;
        let down = closed_loop_objective(&p, scn, cfg.horizon, cfg.stop_eps, smooth)?;
        Ok((up - down) / (2.0 * h))
    });
    let fd = fd.into_iter().collect::<Result<Vec<f64>>>()?;
    let scale = fd.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    let floor = (cfg.rel_floor * scale).max(f64::MIN_POSITIVE);
    let mut rows = Vec::with_capacity(params.len());
    let mut max_rel_err: f64 = 0.0;
    for (j, f) in fd.into_iter().enumerate() {
        let a = bundle.param_grad[j];
        let e = rel_err(a, f, floor);
        max_rel_err = max_rel_err.max(e);
        rows.push(GradcheckRow {
            param_index: j,
            analytic: a,
            finite_diff: f,
            rel_err: e,
        });
    }
    Ok(GradcheckReport {
        rows,
        max_rel_err,
        tolerance: cfg.tolerance,
        passed: max_rel_err <= cfg.tolerance,
        margin: switch_margin(&traj, scn, cfg.stop_eps),
        horizon: traj.len(),
    })
}

/// Samples an instance from `cfg.seed` and checks it.
pub fn run(cfg: &GradcheckConfig, exec: Exec) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (scn, params) = sample_instance(&mut rng, cfg)?;
    check_params(&params, &scn, cfg, exec)
}

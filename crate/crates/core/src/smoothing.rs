//! Temporal smoothness penalty on control sequences.

use serde::{Deserialize, Serialize};

use crate::env::Control;

/// Weights of the smoothness term: `J_total = J_task + weight · J_smooth`,
/// with `angle_weight` balancing heading against speed changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub weight: f64,
    pub angle_weight: f64,
}

impl Smoothing {
    pub const OFF: Smoothing = Smoothing {
        weight: 0.0,
        angle_weight: 0.0,
    };
}

/// `Σ_{t≥1} (v_t − v_{t−1})² + α (1 − cos(θ_t − θ_{t−1}))`.
pub fn smoothness_penalty(controls: &[Control], angle_weight: f64) -> f64 {
    controls
        .windows(2)
        .map(|w| {
            let dv = w[1].v - w[0].v;
            dv * dv + angle_weight * (1.0 - (w[1].theta - w[0].theta).cos())
        })
        .sum()
}

/// Partial derivatives of [`smoothness_penalty`] with respect to each
/// `(v_t, θ_t)`. Endpoints only see their one neighbour.
pub fn smoothness_grads(controls: &[Control], angle_weight: f64) -> Vec<[f64; 2]> {
    let n = controls.len();
    let mut g = vec![[0.0; 2]; n];
    for t in 1..n {
        let dv = controls[t].v - controls[t - 1].v;
        let s = angle_weight * (controls[t].theta - controls[t - 1].theta).sin();
        g[t][0] += 2.0 * dv;
        g[t][1] += s;
        g[t - 1][0] -= 2.0 * dv;
        g[t - 1][1] -= s;
    }
    g
}

pub fn total_objective(j_task: f64, j_smooth: f64, weight: f64) -> f64 {
    j_task + weight * j_smooth
}

/// Heading difference wrapped into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Mean absolute wrapped heading change per step.
pub fn mean_heading_change(controls: &[Control]) -> f64 {
    if controls.len() < 2 {
        return 0.0;
    }
    let total: f64 = controls
        .windows(2)
        .map(|w| wrap_angle(w[1].theta - w[0].theta).abs())
        .sum();
    total / (controls.len() - 1) as f64
}

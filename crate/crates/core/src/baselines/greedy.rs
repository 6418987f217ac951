//! Myopic baseline: each slot, pick the grid control that maximizes the
//! aggregate rate of still-active users at the next position.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::env::{rate_unchecked, step_kinematics, Control, ControlSource, Scenario, State};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreedyConfig {
    pub heading_grid: usize,
    /// Candidate speeds as fractions of `v_max`.
    pub speed_fractions: Vec<f64>,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig {
            heading_grid: 64,
            speed_fractions: vec![0.0, 0.5, 1.0],
        }
    }
}

impl GreedyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heading_grid < 4 {
            return Err(Error::Config("heading_grid must be at least 4".into()));
        }
        if self.speed_fractions.is_empty()
            || self.speed_fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(Error::Config("speed fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Candidate controls in tie-break order: speeds outer, headings inner.
    pub fn candidates(&self, v_max: f64) -> Vec<Control> {
        self.speed_fractions
            .iter()
            .flat_map(|&f| {
                (0..self.heading_grid)
                    .map(move |j| Control::new(f * v_max, TAU * j as f64 / self.heading_grid as f64))
            })
            .collect()
    }
}

/// Sum of rates at `q` over users with backlog left.
pub fn aggregate_active_rate(q: [f64; 2], x: &State, scn: &Scenario) -> f64 {
    x.d.iter()
        .zip(&scn.users)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &w)| rate_unchecked(q, w, scn))
        .sum()
}

/// Best grid control; hovers when every user is done. Ties go to the lowest
/// candidate index.
pub fn greedy_action(x: &State, scn: &Scenario, cfg: &GreedyConfig) -> Result<Control> {
    if x.d.iter().all(|&d| d <= 0.0) {
        return Ok(Control::HOVER);
    }
    let mut best = Control::HOVER;
    let mut best_val = f64::NEG_INFINITY;
    for u in cfg.candidates(scn.v_max) {
        let q = step_kinematics(x.q, u, scn)?;
        let val = aggregate_active_rate(q, x, scn);
        if val > best_val {
            best_val = val;
            best = u;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    pub cfg: GreedyConfig,
}

impl ControlSource for GreedyPolicy {
    fn control(&mut self, _: usize, x: &State, _: &[f64], scn: &Scenario) -> Result<Control> {
        greedy_action(x, scn, &self.cfg)
    }
}

//! Mission-level metrics shared by every method.

use serde::{Deserialize, Serialize};

use crate::env::{rate_unchecked, rollout, ControlSource, Scenario, TrajectoryRecord};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionMetrics {
    /// `T_i` per user; `t_max` for users that never finished.
    pub completion_steps: Vec<usize>,
    /// `(1/K) Σ T_i`.
    pub mean_completion_steps: f64,
    /// `max_i T_i` when complete, else `t_max`.
    pub mission_steps: usize,
    pub completed: bool,
    /// Mean over mission steps of the mean rate of users still active at
    /// that step, evaluated at the pre-move position.
    pub avg_rate: f64,
}

/// Metrics of a recorded trajectory. Depends only on the record, the
/// scenario and `t_max`.
pub fn metrics_from_record(rec: &TrajectoryRecord, scn: &Scenario, t_max: usize) -> MissionMetrics {
    let completed = rec.completed();
    let completion_steps: Vec<usize> = rec
        .completion_step
        .iter()
        .map(|c| c.unwrap_or(t_max))
        .collect();
    let mean_completion_steps =
        completion_steps.iter().sum::<usize>() as f64 / completion_steps.len() as f64;
    let mission_steps = if completed {
        completion_steps.iter().copied().max().unwrap_or(0)
    } else {
        t_max
    };

    let mut rate_sum = 0.0;
    let mut counted = 0usize;
    for x in &rec.states[..rec.len()] {
        let (sum, n) = x
            .d
            .iter()
            .zip(&scn.users)
            .filter(|(d, _)| **d > 0.0)
            .fold((0.0, 0usize), |(s, n), (_, &w)| (s + rate_unchecked(x.q, w, scn), n + 1));
        if n > 0 {
            rate_sum += sum / n as f64;
            counted += 1;
        }
    }
    let avg_rate = if counted > 0 { rate_sum / counted as f64 } else { 0.0 };

    MissionMetrics {
        completion_steps,
        mean_completion_steps,
        mission_steps,
        completed,
        avg_rate,
    }
}

/// Rolls out `source` and summarizes the mission.
pub fn evaluate_policy<S: ControlSource + ?Sized>(
    source: &mut S,
    scn: &Scenario,
    t_max: usize,
    stop_eps: f64,
) -> Result<(MissionMetrics, TrajectoryRecord)> {
    let rec = rollout(source, scn, t_max, stop_eps)?;
    Ok((metrics_from_record(&rec, scn, t_max), rec))
}

//! Comparison methods and the shared mission evaluator.

pub mod ga;
pub mod greedy;
pub mod metrics;

pub use ga::{ga_optimize, ga_optimize_with, GaConfig, GaObjective, GaResult, GenerationStats};
pub use greedy::{greedy_action, GreedyConfig, GreedyPolicy};
pub use metrics::{evaluate_policy, metrics_from_record, MissionMetrics};

//! Adjoint-gradient trajectory learning for an aerial data collector.
//!
//! A drone flies over ground users and drains their upload backlogs at a
//! distance-dependent rate. A small neural policy maps observations to speed
//! and heading; it is trained by exact backpropagation through the
//! deterministic simulator. Greedy and genetic-algorithm baselines and a
//! seeded sweep harness sit alongside.

pub mod adjoint;
pub mod baselines;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod par;
pub mod policy;
pub mod smoothing;
pub mod trainer;

pub use error::{Error, Result};

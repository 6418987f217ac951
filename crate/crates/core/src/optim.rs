//! First-order parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent, `θ ← θ − lr·g`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        step: i32,
    },
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => OptimizerState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
            OptimizerKind::Sgd => OptimizerState::Sgd,
        }
    }
}

/// Applies one update in place. Rejects non-finite gradients before touching
/// any state.
pub fn optimizer_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::usage(format!(
            "gradient length {} does not match {} parameters",
            grad.len(),
            params.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(0, format!("non-finite gradient entry {i}")));
    }
    match state {
        OptimizerState::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        OptimizerState::Adam { m, v, step } => {
            if m.len() != params.len() {
                return Err(Error::usage("optimizer state was built for a different size"));
            }
            *step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(*step);
            let bc2 = 1.0 - ADAM_BETA2.powi(*step);
            for ((p, g), (mi, vi)) in params.iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `g` to norm at most `c`, keeping its direction.
pub fn clip_gradient(g: &[f64], c: f64) -> Vec<f64> {
    let norm = l2_norm(g);
    if norm <= c || norm == 0.0 {
        return g.to_vec();
    }
    // Rounding can leave the rescaled norm an ulp above `c`.
    let mut s = c / norm;
    loop {
        let out: Vec<f64> = g.iter().map(|x| x * s).collect();
        if l2_norm(&out) <= c {
            return out;
        }
        s = s.next_down();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut p = vec![1.0, -2.0, 3.5];
            let mut st = OptimizerState::new(kind, 3);
            optimizer_step(&mut p, &[0.0; 3], &mut st, 0.1).unwrap();
            assert_eq!(p, vec![1.0, -2.0, 3.5]);
        }
    }

    #[test]
    fn sgd_example() {
        let mut p = vec![1.0];
        optimizer_step(&mut p, &[2.0], &mut OptimizerState::Sgd, 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let mut p = vec![0.0];
            let mut st = OptimizerState::new(OptimizerKind::Adam, 1);
            optimizer_step(&mut p, &[g], &mut st, 1e-3).unwrap();
            let expected = -1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0].abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![1.0, 1.0];
        let mut st = OptimizerState::new(OptimizerKind::Adam, 2);
        let err = optimizer_step(&mut p, &[1.0, f64::NAN], &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NumericFailure { .. }));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(st, OptimizerState::new(OptimizerKind::Adam, 2));
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_gradient(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let c = clip_gradient(&[3.0, 4.0], 2.5);
        assert!((c[0] - 1.5).abs() < 1e-15 && (c[1] - 2.0).abs() < 1e-15);
        assert_eq!(clip_gradient(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn clip_bounds_norm_and_keeps_direction(
            g in proptest::collection::vec(-1e3f64..1e3, 1..50),
            c in 1e-3f64..100.0,
        ) {
            let out = clip_gradient(&g, c);
            let n = l2_norm(&g);
            prop_assert!(l2_norm(&out) <= c);
            if n <= c {
                prop_assert_eq!(&out, &g);
            } else {
                for (a, b) in out.iter().zip(&g) {
                    prop_assert!((a - b * c / n).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }
    }
}

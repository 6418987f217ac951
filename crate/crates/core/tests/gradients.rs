use std::f64::consts::TAU;

use aav_core::adjoint::{backward_closedloop, backward_openloop, jacobian_state, objective};
use aav_core::env::{generate_scenario, generate_scenario_with, rollout, Control, FixedControls, Physics};
use aav_core::gradcheck::{self, check_params, closed_loop_objective, sample_instance, switch_margin, GradcheckConfig};
use aav_core::par::Exec;
use aav_core::policy::{init_params, vjp, LayerSpec, NeuralPolicy, PolicyParams};
use aav_core::smoothing::Smoothing;
use aav_core::trainer::evaluate_with_gradient;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fd_param_grad(params: &PolicyParams, scn: &aav_core::env::Scenario, t_max: usize, smooth: Smoothing) -> Vec<f64> {
    let h = 1e-6;
    Exec::default().map_range(params.len(), |j| {
        let mut p = params.clone();
        p.values[j] += h;
        let up = closed_loop_objective(&p, scn, t_max, 1e-3, smooth).unwrap();
        p.values[j] = params.values[j] - h;
        let down = closed_loop_objective(&p, scn, t_max, 1e-3, smooth).unwrap();
        (up - down) / (2.0 * h)
    })
}

fn worst(a: &[f64], f: &[f64]) -> f64 {
    let floor = 1e-2 * f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    a.iter()
        .zip(f)
        .map(|(a, f)| gradcheck::rel_err(*a, *f, floor.max(f64::MIN_POSITIVE)))
        .fold(0.0, f64::max)
}

#[test]
fn closed_loop_gradient_matches_finite_differences() {
    for (users, seed) in [(1, 11), (2, 12)] {
        let cfg = GradcheckConfig { users, horizon: 15, seed, ..GradcheckConfig::default() };
        let rep = gradcheck::run(&cfg, Exec::default()).unwrap();
        assert!(rep.passed, "K={users}: {}", rep.max_rel_err);
    }
}

/// Σ_t (open-loop dJ/du[t])ᵀ ∂π/∂θ drops the feedback path through the
/// observation and should not pass the same check.
#[test]
fn open_loop_parameter_gradient_misses_feedback() {
    let cfg = GradcheckConfig { users: 2, horizon: 15, seed: 3, smooth_weight: 0.0, ..GradcheckConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (scn, params) = sample_instance(&mut rng, &cfg).unwrap();
    let traj = rollout(&mut NeuralPolicy::new(&params), &scn, cfg.horizon, cfg.stop_eps).unwrap();
    let ol = backward_openloop(&traj, &scn).unwrap();
    let mut naive = vec![0.0; params.len()];
    for (obs, g) in traj.observations.iter().zip(&ol.action_grads) {
        let (pg, _) = vjp(&params, obs, scn.v_max, *g).unwrap();
        naive.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
    }
    let fd = fd_param_grad(&params, &scn, cfg.horizon, Smoothing::OFF);
    let closed = backward_closedloop(&traj, &params, &scn, Smoothing::OFF).unwrap();
    assert!(worst(&closed.param_grad, &fd) <= 1e-5);
    assert!(worst(&naive, &fd) > 1e-3);
}

#[test]
fn constant_output_network_reduces_to_open_loop() {
    let scn = generate_scenario(6, 2, 10.0, 3.0, 8.0, &Physics::default()).unwrap();
    let mut params = init_params(6, 2).unwrap();
    // Zero every hidden weight so the output ignores the observation.
    let spec = params.spec.clone();
    let layers: Vec<_> = spec.offsets().collect();
    for &(n_in, n_out, w_off, _) in &layers[..layers.len() - 1] {
        params.values[w_off..w_off + n_in * n_out].iter_mut().for_each(|w| *w = 0.0);
    }
    let traj = rollout(&mut NeuralPolicy::new(&params), &scn, 12, 1e-3).unwrap();
    assert!(traj.controls.windows(2).all(|w| w[0] == w[1]));
    let closed = backward_closedloop(&traj, &params, &scn, Smoothing::OFF).unwrap();
    let ol = backward_openloop(&traj, &scn).unwrap();
    let mut expect = vec![0.0; params.len()];
    for (obs, g) in traj.observations.iter().zip(&ol.action_grads) {
        let (pg, _) = vjp(&params, obs, scn.v_max, *g).unwrap();
        expect.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
    }
    for (a, b) in closed.param_grad.iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
    assert_eq!(closed.action_grads, ol.action_grads);
}

#[test]
fn empty_horizon_gives_zero_gradient() {
    let scn = generate_scenario(1, 3, 10.0, 0.0, 0.0, &Physics::default()).unwrap();
    let params = init_params(0, 3).unwrap();
    let (traj, g) = evaluate_with_gradient(&params, &scn, 100, 1e-3, Smoothing { weight: 1.0, angle_weight: 1e-3 }).unwrap();
    assert!(traj.is_empty());
    assert!(g.param_grad.iter().all(|&x| x == 0.0));
    assert_eq!(g.j_total, 0.0);
    let rep = check_params(&params, &scn, &GradcheckConfig { users: 3, ..GradcheckConfig::default() }, Exec::default()).unwrap();
    assert!(rep.passed);
}

#[test]
fn gradient_has_zero_variance() {
    let scn = generate_scenario(2, 4, 10.0, 0.5, 1.0, &Physics::default()).unwrap();
    let params = init_params(2, 4).unwrap();
    let smooth = Smoothing { weight: 1.0, angle_weight: 1e-3 };
    let (_, a) = evaluate_with_gradient(&params, &scn, 500, 1e-3, smooth).unwrap();
    for _ in 0..5 {
        let (_, b) = evaluate_with_gradient(&params, &scn, 500, 1e-3, smooth).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn open_loop_action_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    while checked < 5 {
        let scn = generate_scenario_with(&mut rng, 2, 10.0, 2.0, 20.0, &Physics::default()).unwrap();
        let u: Vec<Control> =
            (0..10).map(|_| Control::new(rng.random_range(0.01..0.19), rng.random_range(0.0..TAU))).collect();
        let traj = rollout(&mut FixedControls(&u), &scn, 10, 1e-3).unwrap();
        if switch_margin(&traj, &scn, 1e-3) <= 1e-4 {
            continue;
        }
        checked += 1;
        let g = backward_openloop(&traj, &scn).unwrap();
        let j = |c: &[Control]| rollout(&mut FixedControls(c), &scn, 10, 1e-3).unwrap().task_cost();
        let h = 1e-6;
        let (mut a, mut f) = (Vec::new(), Vec::new());
        for t in 0..traj.len() {
            for comp in 0..2 {
                let (mut p, mut m) = (u.clone(), u.clone());
                if comp == 0 {
                    p[t].v += h;
                    m[t].v -= h;
                } else {
                    p[t].theta += h;
                    m[t].theta -= h;
                }
                f.push((j(&p) - j(&m)) / (2.0 * h));
                a.push(g.action_grads[t][comp]);
            }
        }
        assert!(worst(&a, &f) <= 1e-5);
    }
}

#[test]
fn state_jacobian_diagonal_is_binary() {
    let scn = generate_scenario(9, 5, 10.0, 0.5, 3.0, &Physics::default()).unwrap();
    let params = init_params(9, 5).unwrap();
    let traj = rollout(&mut NeuralPolicy::new(&params), &scn, 100, 1e-3).unwrap();
    for (t, x) in traj.states[..traj.len()].iter().enumerate() {
        let a = jacobian_state(x, traj.controls[t], &traj.active_masks[t], &scn).to_dense();
        for (i, row) in a.iter().enumerate() {
            assert!(row[i] == 0.0 || row[i] == 1.0);
            // Lower block-triangular: nothing above the diagonal.
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backlog_never_increases(seed in 0u64..10_000, k in 1usize..6) {
        let scn = generate_scenario(seed, k, 10.0, 0.5, 4.0, &Physics::default()).unwrap();
        let params = init_params(seed, k).unwrap();
        let traj = rollout(&mut NeuralPolicy::new(&params), &scn, 100, 1e-3).unwrap();
        for w in traj.states.windows(2) {
            for (b, a) in w[1].d.iter().zip(&w[0].d) {
                prop_assert!(*b <= *a && *b >= 0.0);
            }
        }
        let (task, _, total) = objective(&traj, Smoothing::OFF);
        prop_assert_eq!(task, total);
    }

    #[test]
    fn layer_spec_matches_params(k in 1usize..10) {
        let p = init_params(0, k).unwrap();
        prop_assert_eq!(p.len(), LayerSpec::for_users(k).num_params());
    }
}

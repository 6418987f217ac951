//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::f64::consts::TAU;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aav_core::adjoint::{backward_openloop, hamiltonian};
use aav_core::baselines::{evaluate_policy, ga_optimize_with, GaConfig, GaObjective, GreedyConfig, GreedyPolicy};
use aav_core::env::{generate_scenario_with, rollout, Control, FixedControls, Physics, Scenario};
use aav_core::gradcheck::{closed_loop_objective, sample_instance, switch_margin, GradcheckConfig};
use aav_core::harness::{run_sweep, write_aggregates, write_rows, GeneratorConfig, Method, RunConfig, SweepSpec, SweptVariable};
use aav_core::optim::{clip_gradient, l2_norm};
use aav_core::par::Exec;
use aav_core::policy::{forward, init_params, NeuralPolicy};
use aav_core::smoothing::{mean_heading_change, smoothness_penalty};
use aav_core::trainer::{evaluate_with_gradient, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Relative error with a denominator floor at 1% of the largest
/// finite-difference magnitude; see the gradcheck module.
fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    let floor = (1e-2 * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn default_scenario(seed: u64) -> Scenario {
    GeneratorConfig::default().generate_seeded(seed).unwrap()
}

fn c1_gradient_oracle() -> Outcome {
    let start = Instant::now();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut min_margin = f64::INFINITY;
    for seed in 0..20 {
        let cfg = GradcheckConfig { users: 2, horizon: 20, seed, ..GradcheckConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scn, params) = sample_instance(&mut rng, &cfg).unwrap();
        let smooth = cfg.smoothing();
        let (traj, bundle) = evaluate_with_gradient(&params, &scn, 20, cfg.stop_eps, smooth).unwrap();
        min_margin = min_margin.min(switch_margin(&traj, &scn, cfg.stop_eps));
        let fd: Vec<f64> = Exec::default().map_range(params.len(), |j| {
            let mut p = params.clone();
            p.values[j] += h;
            let up = closed_loop_objective(&p, &scn, 20, cfg.stop_eps, smooth).unwrap();
            p.values[j] = params.values[j] - h;
            let down = closed_loop_objective(&p, &scn, 20, cfg.stop_eps, smooth).unwrap();
            (up - down) / (2.0 * h)
        });
        worst = worst.max(max_rel_err(&bundle.param_grad, &fd));
    }
    let el = start.elapsed();
    outcome(
        worst <= 1e-5 && min_margin > 1e-4 && el < Duration::from_secs(120),
        format!("max rel err {worst:.2e} over 20 instances, min switch margin {min_margin:.2e}, {:.1} s", el.as_secs_f64()),
    )
}

fn c2_openloop_oracle() -> Outcome {
    let start = Instant::now();
    let h = 1e-6;
    let t_max = 10;
    let (mut worst_j, mut worst_h) = (0.0f64, 0.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut done = 0;
    while done < 20 {
        let scn = generate_scenario_with(&mut rng, 2, 10.0, 2.0, 20.0, &Physics::default()).unwrap();
        let controls: Vec<Control> = (0..t_max)
            .map(|_| Control::new(rng.random_range(0.01..0.19), rng.random_range(0.0..TAU)))
            .collect();
        let traj = rollout(&mut FixedControls(&controls), &scn, t_max, 1e-3).unwrap();
        if switch_margin(&traj, &scn, 1e-3) <= 1e-4 {
            continue;
        }
        done += 1;
        let grads = backward_openloop(&traj, &scn).unwrap();
        let j_of = |c: &[Control]| rollout(&mut FixedControls(c), &scn, t_max, 1e-3).unwrap().task_cost();
        let mut analytic = Vec::new();
        let mut fd_j = Vec::new();
        let mut fd_h = Vec::new();
        for t in 0..traj.len() {
            for comp in 0..2 {
                let bump = |c: &mut Control, d: f64| if comp == 0 { c.v += d } else { c.theta += d };
                let (mut up, mut down) = (controls.clone(), controls.clone());
                bump(&mut up[t], h);
                bump(&mut down[t], -h);
                fd_j.push((j_of(&up) - j_of(&down)) / (2.0 * h));
                let x = &traj.states[t];
                let lam = &grads.costates[t + 1];
                let hu = hamiltonian(x, up[t], lam, &scn).unwrap();
                let hd = hamiltonian(x, down[t], lam, &scn).unwrap();
                fd_h.push((hu - hd) / (2.0 * h));
                analytic.push(grads.action_grads[t][comp]);
            }
        }
        worst_j = worst_j.max(max_rel_err(&analytic, &fd_j));
        worst_h = worst_h.max(max_rel_err(&analytic, &fd_h));
    }
    let el = start.elapsed();
    outcome(
        worst_j <= 1e-5 && worst_h <= 1e-5 && el < Duration::from_secs(60),
        format!("max rel err vs FD of J {worst_j:.2e}, vs FD of H {worst_h:.2e}, 20 instances, {:.2} s", el.as_secs_f64()),
    )
}

fn c3_zero_variance() -> Outcome {
    let mut ok = 0;
    for rep in 0..10u64 {
        let scn = default_scenario(rep);
        let params = init_params(rep, 4).unwrap();
        let cfg = TrainConfig { seed: rep, ..TrainConfig::default() };
        let smooth = cfg.smoothing();
        let (_, g1) = evaluate_with_gradient(&params, &scn, cfg.t_max, cfg.stop_eps, smooth).unwrap();
        let (_, g2) = evaluate_with_gradient(&params, &scn, cfg.t_max, cfg.stop_eps, smooth).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let same_grad = bits(&g1.param_grad) == bits(&g2.param_grad)
            && g1.action_grads == g2.action_grads
            && g1.j_total.to_bits() == g2.j_total.to_bits();
        let (p1, l1) = train(&scn, &cfg).unwrap();
        let (p2, l2) = train(&scn, &cfg).unwrap();
        if same_grad && l1.without_timing() == l2.without_timing() && bits(&p1.values) == bits(&p2.values) {
            ok += 1;
        }
    }
    outcome(ok == 10, format!("{ok}/10 repetitions bitwise identical"))
}

fn c4_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();

    let mut clip_ok = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let scale = 10f64.powf(rng.random_range(-3.0..4.0));
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let c = 10f64.powf(rng.random_range(-2.0..2.0));
        if l2_norm(&clip_gradient(&g, c)) <= c {
            clip_ok += 1;
        }
    }
    if clip_ok < 1000 {
        failures.push(format!("clip {clip_ok}/1000"));
    }

    let mut period_ok = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..50);
        let c: Vec<Control> = (0..n)
            .map(|_| Control::new(rng.random_range(0.0..0.2), rng.random_range(-10.0..10.0)))
            .collect();
        let shifted: Vec<Control> = c
            .iter()
            .map(|u| Control::new(u.v, u.theta + TAU * rng.random_range(-5..=5) as f64))
            .collect();
        let alpha = rng.random_range(0.0..2.0);
        let (a, b) = (smoothness_penalty(&c, alpha), smoothness_penalty(&shifted, alpha));
        if (a - b).abs() <= 1e-9 * a.abs().max(1.0) {
            period_ok += 1;
        }
    }
    if period_ok < 1000 {
        failures.push(format!("periodicity {period_ok}/1000"));
    }

    let mut speed_ok = 0;
    for i in 0..1000u64 {
        let k = rng.random_range(1..8);
        let params = init_params(i, k).unwrap();
        let scale = 10f64.powf(rng.random_range(-1.0..2.0));
        let obs: Vec<f64> = (0..2 + 3 * k).map(|_| rng.random_range(-scale..scale)).collect();
        let u = forward(&params, &obs, 0.2).unwrap();
        if u.v > 0.0 && u.v < 0.2 {
            speed_ok += 1;
        }
    }
    if speed_ok < 1000 {
        failures.push(format!("speed bound {speed_ok}/1000"));
    }

    let mut mono_ok = 0;
    for i in 0..100u64 {
        let k = rng.random_range(1..6);
        let scn = generate_scenario_with(&mut rng, k, 10.0, 0.5, 5.0, &Physics::default()).unwrap();
        let params = init_params(1000 + i, k).unwrap();
        let traj = rollout(&mut NeuralPolicy::new(&params), &scn, 200, 1e-3).unwrap();
        if traj
            .states
            .windows(2)
            .all(|w| w[1].d.iter().zip(&w[0].d).all(|(b, a)| b <= a && *b >= 0.0))
        {
            mono_ok += 1;
        }
    }
    if mono_ok < 100 {
        failures.push(format!("backlog monotonicity {mono_ok}/100"));
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "clip 1000/1000, periodicity 1000/1000, speed bound 1000/1000, backlog monotonicity 100/100".into()
        } else {
            failures.join(", ")
        },
    )
}

fn c5_training_efficacy() -> Outcome {
    let start = Instant::now();
    let (mut completed, mut converged) = (0, 0);
    let (mut l4v, mut greedy) = (0.0, 0.0);
    for seed in 0..10u64 {
        let scn = default_scenario(seed);
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let (params, log) = train(&scn, &cfg).unwrap();
        let (m, _) = evaluate_policy(&mut NeuralPolicy::new(&params), &scn, 500, cfg.stop_eps).unwrap();
        let (g, _) =
            evaluate_policy(&mut GreedyPolicy { cfg: GreedyConfig::default() }, &scn, 500, cfg.stop_eps).unwrap();
        completed += m.completed as usize;
        converged += (log.converged && log.iterations() <= 2000) as usize;
        l4v += m.mean_completion_steps / 10.0;
        greedy += g.mean_completion_steps / 10.0;
    }
    let el = start.elapsed();
    outcome(
        completed >= 9 && converged >= 9 && l4v <= greedy && el < Duration::from_secs(1800),
        format!(
            "completed {completed}/10, converged {converged}/10, mean completion steps l4v {l4v:.3} vs greedy {greedy:.3}, {:.1} s",
            el.as_secs_f64()
        ),
    )
}

fn c6_training_cost() -> Outcome {
    let (mut l4v_ms, mut ga_ms) = (0.0, 0.0);
    let mut censored = 0;
    for seed in 0..5u64 {
        let scn = default_scenario(seed);
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let (_, log) = train(&scn, &cfg).unwrap();
        let target = log.final_objective().unwrap();
        let obj = GaObjective { t_max: cfg.t_max, stop_eps: cfg.stop_eps, smooth: cfg.smoothing() };
        let ga_cfg = GaConfig { seed, ..GaConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = ga_optimize_with(&mut rng, &scn, &ga_cfg, &obj, Exec::Sequential).unwrap();
        let t = match res.time_to_objective(target) {
            Some(t) => t,
            None => {
                censored += 1;
                res.total_ms()
            }
        };
        l4v_ms += log.total_ms / 5.0;
        ga_ms += t / 5.0;
    }
    outcome(
        l4v_ms < ga_ms,
        format!("mean wall-clock l4v {l4v_ms:.3} ms vs ga {ga_ms:.3} ms to match ({censored}/5 ga runs never matched)"),
    )
}

fn c7_smoothness_effect() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10u64 {
        let scn = default_scenario(seed);
        let on = TrainConfig { seed, ..TrainConfig::default() };
        let off = TrainConfig { smooth_weight: 0.0, ..on.clone() };
        let change = |cfg: &TrainConfig| {
            let (params, _) = train(&scn, cfg).unwrap();
            let traj = rollout(&mut NeuralPolicy::new(&params), &scn, cfg.t_max, cfg.stop_eps).unwrap();
            mean_heading_change(&traj.controls)
        };
        let (a, b) = (change(&on), change(&off));
        if a <= b {
            wins += 1;
        }
        pairs.push(format!("{a:.3}/{b:.3}"));
    }
    outcome(
        wins >= 8,
        format!("beta>0 no rougher than beta=0 in {wins}/10 pairs (heading change on/off: {})", pairs.join(" ")),
    )
}

fn c8_sweep_integrity() -> Outcome {
    let start = Instant::now();
    let spec = SweepSpec {
        swept_variable: SweptVariable::K,
        values: vec![2.0, 4.0, 6.0, 8.0, 10.0],
        trials_per_setting: 10,
        root_seed: 0,
        methods: Method::ALL.to_vec(),
        base: RunConfig::default(),
    };
    let render = || {
        let mut out = run_sweep(&spec, Exec::default()).unwrap();
        for r in &mut out.rows {
            r.train_wallclock_ms = None;
        }
        for a in &mut out.aggregates {
            a.train_wallclock_ms_mean = None;
            a.train_wallclock_ms_std = None;
        }
        let (mut d, mut a) = (Vec::new(), Vec::new());
        write_rows(&out.rows, &mut d).unwrap();
        write_aggregates(&out.aggregates, &mut a).unwrap();
        (out, d, a)
    };
    let (out, d1, a1) = render();
    let (_, d2, a2) = render();
    let failures = out.rows.iter().filter(|r| !r.error.is_empty()).count();
    let el = start.elapsed();
    outcome(
        out.rows.len() == 150 && out.aggregates.len() == 15 && failures == 0 && d1 == d2 && a1 == a2,
        format!(
            "{} detail rows, {} aggregate rows, {failures} failed trials, reproducible {}, {:.1} s for two runs",
            out.rows.len(),
            out.aggregates.len(),
            d1 == d2 && a1 == a2,
            el.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient oracle", c1_gradient_oracle),
        ("open-loop adjoint oracle", c2_openloop_oracle),
        ("zero-variance determinism", c3_zero_variance),
        ("invariant suite", c4_invariants),
        ("training efficacy", c5_training_efficacy),
        ("training-cost ordering", c6_training_cost),
        ("smoothness regularization effect", c7_smoothness_effect),
        ("sweep harness integrity", c8_sweep_integrity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!("criterion {} {} {name}: {}", i + 1, if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.passed as usize;
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

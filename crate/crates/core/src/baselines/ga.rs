//! Genetic algorithm over open-loop control sequences.
//!
//! A chromosome is a full `(v, θ)` sequence of length `t_max`; its fitness
//! is `−J_total` of the open-loop rollout. Tournament selection, single-point
//! crossover, Gaussian mutation and elitism. Fitness evaluation runs through
//! [`Exec`] and is the only parallel part; all randomness is drawn on the
//! calling thread so results do not depend on the execution mode.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adjoint::objective;
use crate::env::{rollout, Control, FixedControls, Scenario};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::smoothing::Smoothing;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    /// Per-gene mutation probability.
    pub mutation_rate: f64,
    pub speed_std: f64,
    pub heading_std: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 50,
            generations: 300,
            tournament_size: 3,
            crossover_rate: 0.9,
            mutation_rate: 0.05,
            speed_std: 0.02,
            heading_std: 0.3,
            elitism: 1,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if self.tournament_size == 0 {
            return bad("tournament_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("crossover and mutation rates must lie in [0, 1]");
        }
        if !(self.speed_std >= 0.0 && self.heading_std >= 0.0) {
            return bad("mutation standard deviations must be nonnegative");
        }
        if self.elitism >= self.population {
            return bad("elitism must be smaller than the population");
        }
        Ok(())
    }
}

/// What a chromosome is scored on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaObjective {
    pub t_max: usize,
    pub stop_eps: f64,
    pub smooth: Smoothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone)]
pub struct GaResult {
    pub best_controls: Vec<Control>,
    pub best_fitness: f64,
    pub log: Vec<GenerationStats>,
    /// Cumulative wall-clock ms at the end of each logged generation.
    pub elapsed_ms: Vec<f64>,
}

impl GaResult {
    /// Wall-clock ms until the best-so-far objective first reached
    /// `target_j` or better, if it ever did.
    pub fn time_to_objective(&self, target_j: f64) -> Option<f64> {
        self.log
            .iter()
            .zip(&self.elapsed_ms)
            .find(|(s, _)| -s.best_so_far <= target_j)
            .map(|(_, &ms)| ms)
    }

    pub fn total_ms(&self) -> f64 {
        self.elapsed_ms.last().copied().unwrap_or(0.0)
    }
}

/// `−J_total` of the open-loop rollout of `controls`.
pub fn fitness(controls: &[Control], scn: &Scenario, obj: &GaObjective) -> Result<f64> {
    let rec = rollout(&mut FixedControls(controls), scn, obj.t_max, obj.stop_eps)?;
    Ok(-objective(&rec, obj.smooth).2)
}

pub fn ga_optimize(scn: &Scenario, cfg: &GaConfig, obj: &GaObjective) -> Result<GaResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ga_optimize_with(&mut rng, scn, cfg, obj, Exec::default())
}

fn tournament<R: Rng>(rng: &mut R, fit: &[f64], size: usize) -> usize {
    let mut best = rng.random_range(0..fit.len());
    for _ in 1..size {
        let c = rng.random_range(0..fit.len());
        if fit[c] > fit[best] || (fit[c] == fit[best] && c < best) {
            best = c;
        }
    }
    best
}

pub fn ga_optimize_with<R: Rng>(
    rng: &mut R,
    scn: &Scenario,
    cfg: &GaConfig,
    obj: &GaObjective,
    exec: Exec,
) -> Result<GaResult> {
    cfg.validate()?;
    scn.validate()?;
    let start = Instant::now();
    let len = obj.t_max;
    let v_max = scn.v_max;
    let speed_noise = Normal::new(0.0, cfg.speed_std).map_err(|e| Error::Config(e.to_string()))?;
    let heading_noise = Normal::new(0.0, cfg.heading_std).map_err(|e| Error::Config(e.to_string()))?;

    let evaluate = |pop: &[Vec<Control>]| -> Result<Vec<f64>> {
        exec.map(pop, |c| fitness(c, scn, obj)).into_iter().collect()
    };

    let mut pop: Vec<Vec<Control>> = (0..cfg.population)
        .map(|_| {
            (0..len)
                .map(|_| Control::new(rng.random_range(0.0..=v_max), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut fit = evaluate(&pop)?;

    let mut best_idx = argmax(&fit);
    let mut best_controls = pop[best_idx].clone();
    let mut best_fitness = fit[best_idx];
    let mut log = vec![stats(0, &fit, best_fitness)];
    let mut elapsed_ms = vec![start.elapsed().as_secs_f64() * 1e3];

    for generation in 1..=cfg.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[b].total_cmp(&fit[a]).then(a.cmp(&b)));

        let mut next: Vec<Vec<Control>> = order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
        let elite_fit: Vec<f64> = order[..cfg.elitism].iter().map(|&i| fit[i]).collect();

        while next.len() < cfg.population {
            let a = tournament(rng, &fit, cfg.tournament_size);
            let b = tournament(rng, &fit, cfg.tournament_size);
            let (mut c1, mut c2) = if len > 1 && rng.random_bool(cfg.crossover_rate) {
                let cut = rng.random_range(1..len);
                let mut c1 = pop[a][..cut].to_vec();
                c1.extend_from_slice(&pop[b][cut..]);
                let mut c2 = pop[b][..cut].to_vec();
                c2.extend_from_slice(&pop[a][cut..]);
                (c1, c2)
            } else {
                (pop[a].clone(), pop[b].clone())
            };
            for child in [&mut c1, &mut c2] {
                for gene in child.iter_mut() {
                    if rng.random_bool(cfg.mutation_rate) {
                        gene.v = (gene.v + speed_noise.sample(rng)).clamp(0.0, v_max);
                        gene.theta += heading_noise.sample(rng);
                    }
                }
            }
            next.push(c1);
            if next.len() < cfg.population {
                next.push(c2);
            }
        }

        let fresh = evaluate(&next[cfg.elitism..])?;
        pop = next;
        fit = elite_fit.into_iter().chain(fresh).collect();

        best_idx = argmax(&fit);
        if fit[best_idx] > best_fitness {
            best_fitness = fit[best_idx];
            best_controls = pop[best_idx].clone();
        }
        log.push(stats(generation, &fit, best_fitness));
        elapsed_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }

    Ok(GaResult {
        best_controls,
        best_fitness,
        log,
        elapsed_ms,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn stats(generation: usize, fit: &[f64], best_so_far: f64) -> GenerationStats {
    GenerationStats {
        generation,
        best_fitness: fit[argmax(fit)],
        mean_fitness: fit.iter().sum::<f64>() / fit.len() as f64,
        best_so_far,
    }
}

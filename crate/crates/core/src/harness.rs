//! Run configuration, per-method mission runs and seeded parameter sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{evaluate_policy, ga_optimize_with, GaConfig, GaObjective, GreedyConfig, GreedyPolicy, MissionMetrics};
use crate::env::{generate_scenario_with, FixedControls, Physics, Scenario, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::policy::{init_params, NeuralPolicy, PolicyParams};
use crate::trainer::{train_from, TrainConfig, TrainingLog};

/// Random scenario parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_users: usize,
    pub area_side: f64,
    pub demand_lo: f64,
    pub demand_hi: f64,
    pub physics: Physics,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_users: 4,
            area_side: 10.0,
            demand_lo: 0.5,
            demand_hi: 1.0,
            physics: Physics::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Scenario> {
        generate_scenario_with(rng, self.num_users, self.area_side, self.demand_lo, self.demand_hi, &self.physics)
    }

    pub fn generate_seeded(&self, seed: u64) -> Result<Scenario> {
        let mut scn = self.generate(&mut ChaCha8Rng::seed_from_u64(seed))?;
        scn.seed = Some(seed);
        Ok(scn)
    }
}

/// Everything a single run needs. An explicit `scenario` takes precedence
/// over the generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Option<Scenario>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub greedy: GreedyConfig,
    pub ga: GaConfig,
}

fn config_error(path: &Path, e: impl fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

/// Reads a JSON document; every failure is reported as a config error.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| config_error(path, e))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = load_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.scenario {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.train.validate()?;
        self.greedy.validate()?;
        self.ga.validate()
    }

    /// The explicit scenario, or one generated from `seed`.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        match &self.scenario {
            Some(s) => Ok(s.clone()),
            None => self.generator.generate_seeded(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    L4v,
    Greedy,
    Ga,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::L4v, Method::Greedy, Method::Ga];

    fn tag(self) -> u8 {
        self as u8 + 1
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::L4v => "l4v",
            Method::Greedy => "greedy",
            Method::Ga => "ga",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l4v" => Ok(Method::L4v),
            "greedy" => Ok(Method::Greedy),
            "ga" => Ok(Method::Ga),
            _ => Err(Error::usage(format!("unknown method `{s}`"))),
        }
    }
}

/// Output of one method on one scenario.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub metrics: MissionMetrics,
    pub record: TrajectoryRecord,
    /// Training iterations or GA generations; `None` for greedy.
    pub iterations: Option<usize>,
    pub wallclock_ms: Option<f64>,
    pub params: Option<PolicyParams>,
    pub train_log: Option<TrainingLog>,
}

/// Runs `method` on `scn`. Method-level seeds are drawn from `rng`.
pub fn run_method<R: Rng>(
    method: Method,
    scn: &Scenario,
    cfg: &RunConfig,
    rng: &mut R,
    exec: Exec,
) -> Result<MethodOutcome> {
    let t_max = cfg.train.t_max;
    let stop_eps = cfg.train.stop_eps;
    match method {
        Method::L4v => {
            let train_cfg = TrainConfig {
                seed: rng.random(),
                ..cfg.train.clone()
            };
            let init = init_params(train_cfg.seed, scn.num_users())?;
            let (params, log) = train_from(scn, &train_cfg, init)?;
            let (metrics, record) = evaluate_policy(&mut NeuralPolicy::new(&params), scn, t_max, stop_eps)?;
            Ok(MethodOutcome {
                metrics,
                record,
                iterations: Some(log.iterations()),
                wallclock_ms: Some(log.total_ms),
                params: Some(params),
                train_log: Some(log),
            })
        }
        Method::Greedy => {
            cfg.greedy.validate()?;
            let mut policy = GreedyPolicy { cfg: cfg.greedy.clone() };
            let (metrics, record) = evaluate_policy(&mut policy, scn, t_max, stop_eps)?;
            Ok(MethodOutcome {
                metrics,
                record,
                iterations: None,
                wallclock_ms: None,
                params: None,
                train_log: None,
            })
        }
        Method::Ga => {
            let obj = GaObjective {
                t_max,
                stop_eps,
                smooth: cfg.train.smoothing(),
            };
            let mut ga_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let res = ga_optimize_with(&mut ga_rng, scn, &cfg.ga, &obj, exec)?;
            let (metrics, record) = evaluate_policy(&mut FixedControls(&res.best_controls), scn, t_max, stop_eps)?;
            Ok(MethodOutcome {
                metrics,
                record,
                iterations: Some(cfg.ga.generations),
                wallclock_ms: Some(res.total_ms()),
                params: None,
                train_log: None,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweptVariable {
    K,
    L,
    #[serde(rename = "eta")]
    Eta,
    #[serde(rename = "sigma2")]
    Sigma2,
}

impl SweptVariable {
    fn tag(self) -> u8 {
        self as u8 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            SweptVariable::K => "K",
            SweptVariable::L => "L",
            SweptVariable::Eta => "eta",
            SweptVariable::Sigma2 => "sigma2",
        }
    }

    /// Sets this variable to `value` in `g`.
    pub fn apply(self, g: &mut GeneratorConfig, value: f64) -> Result<()> {
        let positive = value > 0.0 && value.is_finite();
        match self {
            SweptVariable::K if positive && value.fract() == 0.0 => g.num_users = value as usize,
            SweptVariable::L if positive => g.area_side = value,
            SweptVariable::Eta if positive => g.physics.eta = value,
            SweptVariable::Sigma2 if positive => g.physics.sigma2 = value,
            _ => return Err(Error::Config(format!("invalid value {value} for {}", self.name()))),
        }
        Ok(())
    }
}

fn default_trials() -> usize {
    10
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub swept_variable: SweptVariable,
    pub values: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials_per_setting: usize,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub base: RunConfig,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: SweepSpec = load_json(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.trials_per_setting == 0 {
            return Err(Error::Config("trials_per_setting must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("sweep needs at least one method".into()));
        }
        if self.base.scenario.is_some() {
            return Err(Error::Config("sweeps generate their own scenarios; drop `scenario`".into()));
        }
        let mut g = self.base.generator.clone();
        for &v in &self.values {
            self.swept_variable.apply(&mut g, v)?;
        }
        self.base.validate()
    }
}

/// Scenario draws share this tag so every method sees the same missions.
const SCENARIO_TAG: u8 = 0;

/// Injective packing of a sweep cell into a ChaCha seed.
pub fn cell_key(root: u64, method_tag: u8, var: SweptVariable, value: f64, trial: u32) -> [u8; 32] {
    let mut k = [0u8; 32];
    k[..8].copy_from_slice(&root.to_le_bytes());
    k[8] = method_tag;
    k[9] = var.tag();
    k[10..18].copy_from_slice(&value.to_bits().to_le_bytes());
    k[18..22].copy_from_slice(&trial.to_le_bytes());
    k
}

fn key_hex(k: &[u8; 32]) -> String {
    k[..22].iter().map(|b| format!("{b:02x}")).collect()
}

/// One row of the per-trial results table. Metric fields are empty when
/// the trial failed; training fields are empty for greedy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub swept_variable: String,
    pub value: Option<f64>,
    pub trial_seed: String,
    pub mean_completion_steps: Option<f64>,
    pub mission_steps: Option<usize>,
    pub avg_rate: Option<f64>,
    pub completed: Option<bool>,
    pub train_iterations: Option<usize>,
    pub train_wallclock_ms: Option<f64>,
    pub error: String,
}

impl ResultRow {
    pub const HEADER: [&'static str; 11] = [
        "method",
        "swept_variable",
        "value",
        "trial_seed",
        "mean_completion_steps",
        "mission_steps",
        "avg_rate",
        "completed",
        "train_iterations",
        "train_wallclock_ms",
        "error",
    ];

    fn empty(method: &str) -> Self {
        ResultRow {
            method: method.to_string(),
            swept_variable: String::new(),
            value: None,
            trial_seed: String::new(),
            mean_completion_steps: None,
            mission_steps: None,
            avg_rate: None,
            completed: None,
            train_iterations: None,
            train_wallclock_ms: None,
            error: String::new(),
        }
    }

    /// A row carrying mission metrics only.
    pub fn from_metrics(method: &str, m: &MissionMetrics) -> Self {
        ResultRow {
            mean_completion_steps: Some(m.mean_completion_steps),
            mission_steps: Some(m.mission_steps),
            avg_rate: Some(m.avg_rate),
            completed: Some(m.completed),
            ..Self::empty(method)
        }
    }

    pub fn from_outcome(method: Method, outcome: &Result<MethodOutcome>) -> Self {
        let name = method.to_string();
        match outcome {
            Ok(o) => ResultRow {
                train_iterations: o.iterations,
                train_wallclock_ms: o.wallclock_ms,
                ..Self::from_metrics(&name, &o.metrics)
            },
            Err(e) => ResultRow {
                error: e.to_string(),
                ..Self::empty(&name)
            },
        }
    }
}

pub fn write_rows<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(ResultRow::HEADER)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Mean and sample standard deviation per (method, value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub swept_variable: String,
    pub value: f64,
    pub trials: usize,
    pub failures: usize,
    pub completed_fraction: f64,
    pub mean_completion_steps_mean: Option<f64>,
    pub mean_completion_steps_std: Option<f64>,
    pub mission_steps_mean: Option<f64>,
    pub mission_steps_std: Option<f64>,
    pub avg_rate_mean: Option<f64>,
    pub avg_rate_std: Option<f64>,
    pub train_iterations_mean: Option<f64>,
    pub train_iterations_std: Option<f64>,
    pub train_wallclock_ms_mean: Option<f64>,
    pub train_wallclock_ms_std: Option<f64>,
}

impl AggregateRow {
    pub const HEADER: [&'static str; 16] = [
        "method",
        "swept_variable",
        "value",
        "trials",
        "failures",
        "completed_fraction",
        "mean_completion_steps_mean",
        "mean_completion_steps_std",
        "mission_steps_mean",
        "mission_steps_std",
        "avg_rate_mean",
        "avg_rate_std",
        "train_iterations_mean",
        "train_iterations_std",
        "train_wallclock_ms_mean",
        "train_wallclock_ms_std",
    ];
}

pub fn write_aggregates<W: Write>(rows: &[AggregateRow], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(AggregateRow::HEADER)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// `(mean, sample std)`; the std of a single value is 0.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    // Keyed by first appearance so the output follows the detail order.
    let mut order: Vec<(String, String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, String, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.method.clone(), r.swept_variable.clone(), r.value.unwrap_or(f64::NAN).to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let ok: Vec<&&ResultRow> = g.iter().filter(|r| r.error.is_empty()).collect();
            let col = |f: &dyn Fn(&ResultRow) -> Option<f64>| -> Option<(f64, f64)> {
                mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let mcs = col(&|r| r.mean_completion_steps);
            let ms = col(&|r| r.mission_steps.map(|m| m as f64));
            let ar = col(&|r| r.avg_rate);
            let ti = col(&|r| r.train_iterations.map(|m| m as f64));
            let tw = col(&|r| r.train_wallclock_ms);
            AggregateRow {
                method: key.0.clone(),
                swept_variable: key.1.clone(),
                value: f64::from_bits(key.2),
                trials: g.len(),
                failures: g.len() - ok.len(),
                completed_fraction: ok.iter().filter(|r| r.completed == Some(true)).count() as f64 / g.len() as f64,
                mean_completion_steps_mean: mcs.map(|m| m.0),
                mean_completion_steps_std: mcs.map(|m| m.1),
                mission_steps_mean: ms.map(|m| m.0),
                mission_steps_std: ms.map(|m| m.1),
                avg_rate_mean: ar.map(|m| m.0),
                avg_rate_std: ar.map(|m| m.1),
                train_iterations_mean: ti.map(|m| m.0),
                train_iterations_std: ti.map(|m| m.1),
                train_wallclock_ms_mean: tw.map(|m| m.0),
                train_wallclock_ms_std: tw.map(|m| m.1),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl SweepOutput {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_rows(&self.rows, std::io::BufWriter::new(std::fs::File::create(dir.join("details.csv"))?))?;
        write_aggregates(
            &self.aggregates,
            std::io::BufWriter::new(std::fs::File::create(dir.join("aggregates.csv"))?),
        )
    }
}

struct Cell {
    method: Method,
    value: f64,
    trial: u32,
}

/// Runs every (method, value, trial) cell. A failing cell is recorded in its
/// row and the sweep carries on.
pub fn run_sweep(spec: &SweepSpec, exec: Exec) -> Result<SweepOutput> {
    spec.validate()?;
    let trials = u32::try_from(spec.trials_per_setting).map_err(|_| Error::Config("too many trials".into()))?;
    let mut methods = spec.methods.clone();
    methods.sort();
    methods.dedup();
    let mut cells = Vec::new();
    for &method in &methods {
        for &value in &spec.values {
            for trial in 0..trials {
                cells.push(Cell { method, value, trial });
            }
        }
    }

    let var = spec.swept_variable;
    let rows = exec.map(&cells, |c| {
        let key = cell_key(spec.root_seed, c.method.tag(), var, c.value, c.trial);
        let outcome = (|| {
            let mut cfg = spec.base.clone();
            var.apply(&mut cfg.generator, c.value)?;
            let mut scn_rng = ChaCha8Rng::from_seed(cell_key(spec.root_seed, SCENARIO_TAG, var, c.value, c.trial));
            let scn = cfg.generator.generate(&mut scn_rng)?;
            let mut rng = ChaCha8Rng::from_seed(key);
            run_method(c.method, &scn, &cfg, &mut rng, Exec::Sequential)
        })();
        let mut row = ResultRow::from_outcome(c.method, &outcome);
        row.swept_variable = var.name().to_string();
        row.value = Some(c.value);
        row.trial_seed = key_hex(&key);
        row
    });
    let aggregates = aggregate(&rows);
    Ok(SweepOutput { rows, aggregates })
}

/// Writes a trajectory as one row per recorded state.
pub fn write_trajectory<W: Write>(rec: &TrajectoryRecord, w: W) -> Result<()> {
    let k = rec.states.first().map_or(0, |x| x.d.len());
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["step", "x", "y", "v", "theta"].iter().map(|s| s.to_string()).collect();
    header.extend((0..k).map(|i| format!("d{i}")));
    wr.write_record(&header)?;
    for (t, x) in rec.states.iter().enumerate() {
        let mut fields = vec![t.to_string(), x.q[0].to_string(), x.q[1].to_string()];
        match rec.controls.get(t) {
            Some(u) => fields.extend([u.v.to_string(), u.theta.to_string()]),
            None => fields.extend([String::new(), String::new()]),
        }
        fields.extend(x.d.iter().map(|d| d.to_string()));
        wr.write_record(&fields)?;
    }
    wr.flush()?;
    Ok(())
}

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aav_core::baselines::{evaluate_policy, MissionMetrics};
use aav_core::env::{ConstantControl, Control, Scenario, TrajectoryRecord};
use aav_core::gradcheck::{self, GradcheckConfig};
use aav_core::harness::{self, load_json, run_method, Method, ResultRow, RunConfig, SweepSpec};
use aav_core::par::Exec;
use aav_core::policy::{Checkpoint, NeuralPolicy};
use aav_core::trainer::TrainConfig;
use aav_core::Error;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "aav", version, about = "Train and evaluate aerial data-collection trajectories")]
struct Cli {
    /// Seed for scenario generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config: run config for train/eval/baseline, sweep spec for sweep.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write checkpoint.json and train_log.csv.
    Train,
    /// Roll out a checkpoint or a fixed control and write metrics.csv and trajectory.csv.
    Eval {
        #[arg(long, required_unless_present = "fixed_speed")]
        checkpoint: Option<PathBuf>,
        /// Scenario JSON; overrides the config.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Fly at this constant speed instead of using a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        fixed_speed: Option<f64>,
        #[arg(long, default_value_t = 0.0, requires = "fixed_speed")]
        fixed_heading: f64,
    },
    /// Run a parameter sweep and write details.csv and aggregates.csv.
    Sweep,
    /// Compare the parameter gradient with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        users: usize,
        #[arg(long, default_value_t = 20)]
        horizon: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
    /// Run the greedy or GA baseline.
    Baseline {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: &Cli) -> aav_core::Result<ExitCode> {
    match &cli.command {
        Command::Train => train(cli),
        Command::Eval {
            checkpoint,
            scenario,
            fixed_speed,
            fixed_heading,
        } => eval(cli, checkpoint.as_deref(), scenario.as_deref(), *fixed_speed, *fixed_heading),
        Command::Sweep => sweep(cli),
        Command::Gradcheck { users, horizon, step } => gradcheck(cli, *users, *horizon, *step),
        Command::Baseline { method, scenario } => baseline(cli, *method, scenario.as_deref()),
    }
}

fn run_config(cli: &Cli) -> aav_core::Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn scenario_for(cli: &Cli, cfg: &RunConfig, path: Option<&Path>) -> aav_core::Result<Scenario> {
    let scn = match path {
        Some(p) => load_json::<Scenario>(p)?,
        None => cfg.scenario(cli.seed.unwrap_or(cfg.train.seed))?,
    };
    scn.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(scn)
}

fn out_dir(cli: &Cli) -> aav_core::Result<&Path> {
    fs::create_dir_all(&cli.out)?;
    Ok(&cli.out)
}

fn write_outputs(dir: &Path, row: &ResultRow, rec: &TrajectoryRecord) -> aav_core::Result<()> {
    harness::write_rows(std::slice::from_ref(row), BufWriter::new(fs::File::create(dir.join("metrics.csv"))?))?;
    harness::write_trajectory(rec, BufWriter::new(fs::File::create(dir.join("trajectory.csv"))?))
}

fn summary(m: &MissionMetrics) -> String {
    format!(
        "completed {} mean completion steps {} mission steps {} avg rate {:.4}",
        m.completed, m.mean_completion_steps, m.mission_steps, m.avg_rate
    )
}

fn train(cli: &Cli) -> aav_core::Result<ExitCode> {
    let mut cfg = run_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let scn = scenario_for(cli, &cfg, None)?;
    let dir = out_dir(cli)?;
    let (params, log) = aav_core::trainer::train(&scn, &cfg.train)?;
    let ckpt_path = dir.join("checkpoint.json");
    Checkpoint::new(&params, Some(cfg.train.seed))?.save(&ckpt_path)?;
    log.save_csv(&dir.join("train_log.csv"))?;
    fs::write(dir.join("scenario.json"), serde_json::to_string_pretty(&scn)? + "\n")?;
    let digest = Sha256::digest(fs::read(&ckpt_path)?);
    println!(
        "trained {} iterations ({:?}), J_total {:.6}",
        log.iterations(),
        log.stop_reason.unwrap(),
        log.final_objective().unwrap_or(0.0)
    );
    println!("checkpoint sha256 {}", hex(&digest));
    Ok(ExitCode::SUCCESS)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn eval(
    cli: &Cli,
    checkpoint: Option<&Path>,
    scenario: Option<&Path>,
    fixed_speed: Option<f64>,
    fixed_heading: f64,
) -> aav_core::Result<ExitCode> {
    let cfg = run_config(cli)?;
    let scn = scenario_for(cli, &cfg, scenario)?;
    let TrainConfig { t_max, stop_eps, .. } = cfg.train;
    let (metrics, rec, method) = match (checkpoint, fixed_speed) {
        (_, Some(v)) => {
            if !(0.0..=scn.v_max).contains(&v) {
                return Err(Error::Config(format!("fixed speed {v} outside [0, {}]", scn.v_max)));
            }
            let (m, r) = evaluate_policy(&mut ConstantControl(Control::new(v, fixed_heading)), &scn, t_max, stop_eps)?;
            (m, r, "fixed")
        }
        (Some(path), None) => {
            let params = load_json::<Checkpoint>(path)?.into_params()?;
            if params.num_users() != Some(scn.num_users()) {
                return Err(Error::Config(format!(
                    "checkpoint was trained for {} users but the scenario has {}",
                    params.num_users().unwrap_or(0),
                    scn.num_users()
                )));
            }
            let (m, r) = evaluate_policy(&mut NeuralPolicy::new(&params), &scn, t_max, stop_eps)?;
            (m, r, "l4v")
        }
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --fixed-speed".into())),
    };
    let row = ResultRow::from_metrics(method, &metrics);
    write_outputs(out_dir(cli)?, &row, &rec)?;
    println!("{}", summary(&metrics));
    Ok(ExitCode::SUCCESS)
}

fn sweep(cli: &Cli) -> aav_core::Result<ExitCode> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs --config <sweep spec>".into()))?;
    let mut spec = SweepSpec::load(path)?;
    if let Some(s) = cli.seed {
        spec.root_seed = s;
    }
    let out = harness::run_sweep(&spec, Exec::default())?;
    out.save(out_dir(cli)?)?;
    let failed = out.rows.iter().filter(|r| !r.error.is_empty()).count();
    println!(
        "{} rows, {} aggregates, {failed} failed trials, written to {}",
        out.rows.len(),
        out.aggregates.len(),
        cli.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(cli: &Cli, users: usize, horizon: usize, step: f64) -> aav_core::Result<ExitCode> {
    let cfg = GradcheckConfig {
        users,
        horizon,
        step,
        seed: cli.seed.unwrap_or(0),
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg, Exec::default())?;
    report.save_csv(&out_dir(cli)?.join("gradcheck.csv"))?;
    println!(
        "{} parameters, max rel err {:.3e} (tolerance {:.0e}), horizon {}: {}",
        report.rows.len(),
        report.max_rel_err,
        report.tolerance,
        report.horizon,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn baseline(cli: &Cli, method: Method, scenario: Option<&Path>) -> aav_core::Result<ExitCode> {
    if method == Method::L4v {
        return Err(Error::Config("baseline --method must be greedy or ga".into()));
    }
    let mut cfg = run_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.ga.seed = s;
    }
    let scn = scenario_for(cli, &cfg, scenario)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.ga.seed);
    let outcome = run_method(method, &scn, &cfg, &mut rng, Exec::default());
    let row = ResultRow::from_outcome(method, &outcome);
    let o = outcome?;
    write_outputs(out_dir(cli)?, &row, &o.record)?;
    println!("{}", summary(&o.metrics));
    Ok(ExitCode::SUCCESS)
}

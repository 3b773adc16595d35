use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use tll_repair::bounds::{analyze_bounds, find_counterexample, SafetySpec};
use tll_repair::dynamics::{BoxSet, DynamicsModel, Trajectory};
use tll_repair::io::{self, CertificateReport, DynamicsConfig, PatternFile, RepairReport, SpecFile};
use tll_repair::repair::{repair_tll, validate_repair, RepairConfig};
use tll_repair::tll::TllNetwork;
use tll_repair::{demo, Error};

#[derive(Parser)]
#[command(name = "tll-repair", version, about = "Repair unsafe TLL ReLU controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the closed loop and write a trajectory CSV.
    Simulate(SimulateArgs),
    /// Grid search for a counterexample.
    FindCe(FindCeArgs),
    /// Bound functions, budget and certificate for a network.
    Bounds(BoundsArgs),
    /// Repair a network at a counterexample.
    Repair(RepairArgs),
    /// Check a repaired network against the original.
    Validate(ValidateArgs),
    /// Write the synthetic car scenario files.
    DemoCar(DemoArgs),
}

#[derive(Args)]
struct Problem {
    /// Dynamics JSON
    #[arg(long)]
    dynamics: PathBuf,
    /// Safety-spec JSON
    #[arg(long)]
    spec: PathBuf,
    /// Network JSON
    #[arg(long)]
    network: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    dynamics: PathBuf,
    #[arg(long)]
    network: PathBuf,
    /// Safety spec; when given, the first unsafe step is reported.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Initial state, comma separated
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x0: Vec<f64>,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FindCeArgs {
    #[command(flatten)]
    problem: Problem,
    /// Lower corner of the search box (default: workspace)
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    lower: Option<Vec<f64>>,
    /// Upper corner of the search box (default: workspace)
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    upper: Option<Vec<f64>>,
    /// Grid points per axis
    #[arg(long, default_value_t = 11)]
    grid: usize,
    #[arg(long, default_value_t = 2)]
    ce_horizon: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    problem: Problem,
    /// Grid points per axis for the sups over the safe set
    #[arg(long, default_value_t = 11)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Tuning {
    /// Repair configuration JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    margin_eps: Option<f64>,
    #[arg(long)]
    ce_horizon: Option<usize>,
    #[arg(long)]
    repair_horizon: Option<usize>,
    #[arg(long)]
    solver_tol: Option<f64>,
    /// Drop the budget caps on rows moved by the global program.
    #[arg(long)]
    no_global_caps: bool,
}

impl Tuning {
    fn resolve(&self) -> Result<RepairConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&read(p)?)?,
            None => RepairConfig::default(),
        };
        if let Some(v) = self.margin_eps {
            cfg.margin_eps = v;
        }
        if let Some(v) = self.ce_horizon {
            cfg.ce_horizon = v;
        }
        if let Some(v) = self.repair_horizon {
            cfg.repair_horizon = v;
        }
        if let Some(v) = self.solver_tol {
            cfg.solver_tol = v;
        }
        if self.no_global_caps {
            cfg.enforce_global_safety_caps = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RepairArgs {
    #[command(flatten)]
    problem: Problem,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x_ce: Vec<f64>,
    #[command(flatten)]
    tuning: Tuning,
    /// Length of the before/after trajectories
    #[arg(long, default_value_t = 50)]
    check_steps: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dynamics: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    repaired: PathBuf,
    /// Counterexample (default: centre of the safe set)
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x_ce: Option<Vec<f64>>,
    #[command(flatten)]
    tuning: Tuning,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    out_dir: PathBuf,
}

/// Failure with its exit code: 2 for bad input, 3 for an infeasible stage.
enum Failure {
    Input(String),
    Infeasible { stage: &'static str, message: String },
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InfeasibleBudget { .. } => Failure::Infeasible {
                stage: "budget",
                message: e.to_string(),
            },
            Error::Builder(_) => Failure::Internal(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn load<T>(path: &Path, f: impl FnOnce(&Path) -> Result<T, Error>) -> Result<T, Error> {
    f(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidInput(format!("{}: {io}", path.display())),
        Error::Json(j) => Error::InvalidInput(format!("{}: {j}", path.display())),
        other => other,
    })
}

fn load_problem(p: &Problem) -> Result<(DynamicsModel, SafetySpec, TllNetwork), Error> {
    Ok((
        load(&p.dynamics, |p| io::read_dynamics(p))?,
        load(&p.spec, |p| io::read_spec(p))?,
        load(&p.network, |p| io::read_network(p))?,
    ))
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), Error> {
    match out {
        Some(p) => io::write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn closed_loop(model: &DynamicsModel, net: &TllNetwork, x0: &[f64], steps: usize) -> Result<Trajectory, Error> {
    model.simulate(|x: &[f64]| net.eval_lattice(x), x0, steps)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Failure> {
    if a.steps == 0 {
        return Err(Failure::Input("--steps must be positive".into()));
    }
    let model = load(&a.dynamics, |p| io::read_dynamics(p))?;
    let net = load(&a.network, |p| io::read_network(p))?;
    let traj = closed_loop(&model, &net, &a.x0, a.steps)?;
    io::save_trajectory_csv(&a.out, &traj)?;
    if let Some(spec) = &a.spec {
        let spec = load(spec, |p| io::read_spec(p))?;
        match traj.first_step_where(|s| spec.unsafe_set.contains(s)) {
            Some(k) => println!("first unsafe step: {k}"),
            None => println!("no unsafe step within {} steps", a.steps),
        }
    }
    Ok(())
}

fn cmd_find_ce(a: &FindCeArgs) -> Result<(), Failure> {
    let (model, spec, net) = load_problem(&a.problem)?;
    let search = BoxSet::new(
        a.lower.clone().unwrap_or_else(|| spec.workspace.lower.clone()),
        a.upper.clone().unwrap_or_else(|| spec.workspace.upper.clone()),
    )?;
    let ce = find_counterexample(&model, &net, &spec, &search, a.grid, a.ce_horizon)?;
    let first_unsafe_step = match &ce {
        Some(x) => closed_loop(&model, &net, x, a.ce_horizon)?.first_step_where(|s| spec.unsafe_set.contains(s)),
        None => None,
    };
    emit(
        a.out.as_deref(),
        &json!({
            "found": ce.is_some(),
            "x_ce": ce,
            "first_unsafe_step": first_unsafe_step,
            "grid": a.grid,
            "ce_horizon": a.ce_horizon,
            "search": search,
        }),
    )?;
    Ok(())
}

fn cmd_bounds(a: &BoundsArgs) -> Result<(), Failure> {
    let (model, spec, net) = load_problem(&a.problem)?;
    let analysis = analyze_bounds(&model, &net, &spec, a.samples)?;
    emit(
        a.out.as_deref(),
        &json!({
            "certificate": CertificateReport::from_analysis(&analysis),
            "safe_sups": analysis.safe_sups,
            "distance": analysis.distance,
        }),
    )?;
    Ok(())
}

fn cmd_repair(a: &RepairArgs) -> Result<(), Failure> {
    let config = a.tuning.resolve()?;
    let (model, spec, net) = load_problem(&a.problem)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Failure::Input(format!("{}: {e}", a.out_dir.display())))?;
    let report_path = a.out_dir.join("report.json");
    let result = match repair_tll(&model, &net, &spec, &a.x_ce, &config) {
        Err(e @ Error::InfeasibleBudget { .. }) => {
            let message = e.to_string();
            io::write_json(
                &report_path,
                &json!({ "status": "infeasible", "stage": "budget", "message": message }),
            )?;
            return Err(Failure::Infeasible {
                stage: "budget",
                message,
            });
        }
        other => other?,
    };

    let mut report = RepairReport::new(&result);
    let before = a.out_dir.join("trajectory_before.csv");
    io::save_trajectory_csv(&before, &closed_loop(&model, &net, &a.x_ce, a.check_steps)?)?;
    report.trajectory_before = Some(before.display().to_string());
    if let Some(repaired) = &result.repaired {
        let net_path = a.out_dir.join("repaired_network.json");
        io::write_network(&net_path, repaired)?;
        report.network = Some(net_path.display().to_string());
        let after = a.out_dir.join("trajectory_after.csv");
        io::save_trajectory_csv(&after, &closed_loop(&model, repaired, &a.x_ce, a.check_steps)?)?;
        report.trajectory_after = Some(after.display().to_string());
        report.validation = Some(validate_repair(
            &model,
            &net,
            repaired,
            &spec,
            &a.x_ce,
            &result.pattern,
            &config,
        )?);
    }
    io::write_json(&report_path, &report)?;
    match result.status.stage() {
        None => {
            println!("status: repaired");
            Ok(())
        }
        Some(stage) => Err(Failure::Infeasible {
            stage,
            message: result.message.unwrap_or_default(),
        }),
    }
}

fn cmd_validate(a: &ValidateArgs) -> Result<(), Failure> {
    let config = a.tuning.resolve()?;
    let model = load(&a.dynamics, |p| io::read_dynamics(p))?;
    let spec = load(&a.spec, |p| io::read_spec(p))?;
    let original = load(&a.original, |p| io::read_network(p))?;
    let repaired = load(&a.repaired, |p| io::read_network(p))?;
    let x_ce = a.x_ce.clone().unwrap_or_else(|| spec.safe.center());
    if x_ce.len() != model.state_dim() {
        return Err(Failure::Input(format!("--x-ce needs {} components", model.state_dim())));
    }
    let pattern = original.active_indices(&x_ce)?;
    let report = validate_repair(&model, &original, &repaired, &spec, &x_ce, &pattern, &config)?;
    emit(
        a.out.as_deref(),
        &json!({ "pattern": PatternFile::from(&pattern), "validation": report }),
    )?;
    Ok(())
}

fn cmd_demo(a: &DemoArgs) -> Result<(), Failure> {
    let sc = demo::car_scenario()?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Failure::Input(format!("{}: {e}", a.out_dir.display())))?;
    let dynamics = DynamicsConfig::from_model(&sc.model).ok_or_else(|| Failure::Internal("custom model".into()))?;
    io::write_json(a.out_dir.join("dynamics.json"), &dynamics)?;
    io::write_json(a.out_dir.join("spec.json"), &SpecFile::from_spec(&sc.spec))?;
    io::write_network(a.out_dir.join("network.json"), &sc.network)?;
    io::write_json(a.out_dir.join("config.json"), &sc.config)?;
    io::write_json(
        a.out_dir.join("scenario.json"),
        &json!({
            "x_ce": sc.x_ce,
            "search": sc.search,
            "search_grid": sc.search_grid,
            "check_steps": sc.check_steps,
        }),
    )?;
    println!("wrote car scenario to {}", a.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::FindCe(a) => cmd_find_ce(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Repair(a) => cmd_repair(a),
        Command::Validate(a) => cmd_validate(a),
        Command::DemoCar(a) => cmd_demo(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Infeasible { stage, message }) => {
            eprintln!("infeasible at stage {stage}: {message}");
            ExitCode::from(3)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}

//! Counterexample-driven repair of a TLL controller.
//!
//! [`repair_tll`] runs the whole pipeline: reach-set budget from the original
//! network, activation pattern at the counterexample, the local program that
//! moves the active rows, and the global program that makes the lattice pick
//! them again. [`validate_repair`] checks the outcome independently.

mod global;
mod local;

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use global::{build_global_program, choose_iota, solve_global, GlobalOutcome, GlobalProgram};
pub use local::{
    build_local_program, solve_halfspace, solve_local, AffineRows, AttemptStatus, HalfspaceAttempt, Linearization,
    LocalRepair, LocalSetup,
};

use crate::bounds::{analyze_bounds, omega_norms, reach_bound, BoundAnalysis, BoundFn, SafetySpec};
use crate::dynamics::{sampled_sups, DynamicsModel};
use crate::error::{Error, Result};
use crate::socp::{AffineExpr, ConvexProgram, SolverOptions};
use crate::tll::{ActivationPattern, TllNetwork};

/// Per-row limits `beta(||w||, |b|) <= beta_max` and `L(||w||, |b|) <= L_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RowBudget {
    pub beta_fn: BoundFn,
    pub l_fn: BoundFn,
    pub beta_max: f64,
    pub l_max: f64,
}

impl RowBudget {
    pub fn from_analysis(a: &BoundAnalysis) -> Self {
        Self {
            beta_fn: a.beta_fn,
            l_fn: a.l_fn,
            beta_max: a.certificate.beta_max,
            l_max: a.certificate.l_max,
        }
    }

    pub fn admits(&self, w_norm: f64, b_abs: f64, tol: f64) -> bool {
        self.beta_fn.value(w_norm, b_abs) <= self.beta_max + tol && self.l_fn.value(w_norm, b_abs) <= self.l_max + tol
    }

    /// Adds epigraph scalars `t_w >= ||w||`, `t_b >= |b|` and the two linear caps.
    pub fn add_caps(&self, p: &mut ConvexProgram, w: AffineExpr, b: AffineExpr, tag: &str) -> Result<()> {
        let tw = p.add_variable(format!("tw{tag}"), 1);
        let tb = p.add_variable(format!("tb{tag}"), 1);
        p.add_cone(w, AffineExpr::var(tw))?;
        p.add_cone(b, AffineExpr::var(tb))?;
        for (f, cap) in [(&self.beta_fn, self.beta_max), (&self.l_fn, self.l_max)] {
            p.add_ineq(
                AffineExpr::dot(&[f.c_w], tw)
                    .plus(&AffineExpr::dot(&[f.c_b], tb))
                    .plus_scalar(f.c0 - cap),
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairConfig {
    /// Required distance of the repaired successors from the unsafe boundary.
    pub margin_eps: f64,
    /// Steps within which a counterexample's trajectory reaches the unsafe set.
    pub ce_horizon: usize,
    /// Successor states constrained by the local program.
    pub repair_horizon: usize,
    pub enforce_global_safety_caps: bool,
    /// Separation kept between the repaired row and its competitors at the
    /// counterexample.
    pub activation_margin: f64,
    pub solver_tol: f64,
    pub max_iter: usize,
    /// Re-linearization rounds when `repair_horizon > 1`.
    pub max_rounds: usize,
    /// Grid points per axis for the sups over the safe set.
    pub sup_samples: usize,
    /// Grid points per axis for the safe-set trajectories in validation.
    pub validation_samples: usize,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            margin_eps: 1e-3,
            ce_horizon: 2,
            repair_horizon: 1,
            enforce_global_safety_caps: true,
            activation_margin: 1e-6,
            solver_tol: 1e-8,
            max_iter: 200,
            max_rounds: 20,
            sup_samples: 11,
            validation_samples: 5,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_eps > 0.0 && self.solver_tol > 0.0 && self.activation_margin >= 0.0) {
            return Err(Error::invalid(
                "margin_eps and solver_tol must be positive, activation_margin nonnegative",
            ));
        }
        if self.ce_horizon == 0 || self.repair_horizon == 0 || self.max_iter == 0 || self.sup_samples == 0 {
            return Err(Error::invalid(
                "ce_horizon, repair_horizon, max_iter and sup_samples must be positive",
            ));
        }
        Ok(())
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver_tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStatus {
    Repaired,
    /// The original network already exceeds the budget it defines.
    OriginalBoundsViolated,
    LocalInfeasible,
    GlobalInfeasible,
}

impl RepairStatus {
    /// Pipeline stage that stopped the repair.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            RepairStatus::Repaired => None,
            RepairStatus::OriginalBoundsViolated => Some("bounds"),
            RepairStatus::LocalInfeasible => Some("local"),
            RepairStatus::GlobalInfeasible => Some("global"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RepairResult {
    pub status: RepairStatus,
    pub message: Option<String>,
    pub pattern: ActivationPattern,
    pub bounds: BoundAnalysis,
    pub local_attempts: Vec<HalfspaceAttempt>,
    pub local: Option<LocalRepair>,
    pub iota: Vec<BTreeMap<usize, usize>>,
    pub global_objective: Option<f64>,
    pub repaired: Option<TllNetwork>,
}

fn check_counterexample(model: &DynamicsModel, net: &TllNetwork, spec: &SafetySpec, x_ce: &[f64]) -> Result<()> {
    if x_ce.len() != model.state_dim() {
        return Err(Error::dim("counterexample", model.state_dim(), x_ce.len()));
    }
    if net.input_dim() != model.state_dim() || net.output_dim() != model.input_dim() {
        return Err(Error::invalid("network and model dimensions disagree"));
    }
    if spec.safe.contains(x_ce) {
        return Err(Error::invalid("counterexample lies in the safe set"));
    }
    if spec.unsafe_set.contains(x_ce) {
        return Err(Error::invalid("counterexample is already unsafe"));
    }
    Ok(())
}

/// Repairs `net` at the counterexample `x_ce`.
///
/// Budget errors (safe distance not exceeding `beta_max`) and invalid inputs
/// are returned as errors. Infeasibility at a later stage is reported through
/// [`RepairResult::status`] with whatever was computed up to that point.
pub fn repair_tll(
    model: &DynamicsModel,
    net: &TllNetwork,
    spec: &SafetySpec,
    x_ce: &[f64],
    config: &RepairConfig,
) -> Result<RepairResult> {
    config.validate()?;
    check_counterexample(model, net, spec, x_ce)?;
    let bounds = analyze_bounds(model, net, spec, config.sup_samples)?;
    let pattern = net.active_indices(x_ce)?;
    let mut result = RepairResult {
        status: RepairStatus::OriginalBoundsViolated,
        message: None,
        pattern: pattern.clone(),
        bounds,
        local_attempts: Vec::new(),
        local: None,
        iota: Vec::new(),
        global_objective: None,
        repaired: None,
    };
    if !bounds.certificate.original_net_ok {
        result.message = Some(format!(
            "L(Omega_W, Omega_b) = {} exceeds L_max = {}",
            bounds.l_fn.value(bounds.omega.omega_w, bounds.omega.omega_b),
            bounds.certificate.l_max
        ));
        return Ok(result);
    }

    let budget = RowBudget::from_analysis(&bounds);
    let (weights, bias) = net.active_affine(&pattern);
    let setup = LocalSetup {
        model,
        x_ce,
        original: AffineRows { weights, bias },
        budget: Some(budget),
        unsafe_set: &spec.unsafe_set,
        margin: config.margin_eps,
        horizon: config.repair_horizon,
        solver: config.solver(),
        max_rounds: config.max_rounds,
    };
    let (attempts, local) = solve_local(&setup)?;
    result.local_attempts = attempts;
    let Some(local) = local else {
        result.status = RepairStatus::LocalInfeasible;
        result.message = Some("no halfspace of the unsafe-set complement admits a repair within the budget".into());
        return Ok(result);
    };
    result.local = Some(local.clone());

    let iota = choose_iota(net, x_ce, &pattern);
    result.iota = iota.clone();
    let caps = config.enforce_global_safety_caps.then_some(&budget);
    let gp = build_global_program(net, x_ce, &pattern, &local.rows, &iota, caps, config.activation_margin)?;
    match solve_global(net, &gp, &pattern, &local.rows, &config.solver())? {
        GlobalOutcome::Solved { network, objective } => {
            result.global_objective = Some(objective);
            if network.check_activation(x_ce, &pattern) {
                result.status = RepairStatus::Repaired;
            } else {
                result.status = RepairStatus::GlobalInfeasible;
                result.message = Some("the repaired rows are not active at the counterexample".into());
            }
            result.repaired = Some(network);
        }
        GlobalOutcome::Infeasible => {
            result.status = RepairStatus::GlobalInfeasible;
            result.message = Some("no re-activation of the repaired rows exists".into());
        }
        GlobalOutcome::SolverFailure(s) => {
            result.status = RepairStatus::GlobalInfeasible;
            result.message = Some(format!("global program stopped with solver status {s:?}"));
        }
    }
    Ok(result)
}

/// Independent checks of a repaired network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// First step (`1..=ce_horizon`) at which the repaired closed loop from the
    /// counterexample is unsafe.
    pub ce_first_unsafe_step: Option<usize>,
    pub one_step_safe: bool,
    pub ce_horizon_safe: bool,
    pub activation_holds: bool,
    pub safe_set_samples: usize,
    /// Sampled safe-set trajectories entering the unsafe set within `T` steps.
    pub safe_set_violations: usize,
    /// Largest `||x_T - x_0||` over the sampled safe-set trajectories.
    pub max_excursion: f64,
    /// `beta(Omega_W, Omega_b) sum_k L(Omega_W, Omega_b)^k` for the repaired network.
    pub reach_radius: f64,
    pub reach_bound_holds: bool,
    /// Every repaired row respects the budget derived from the original
    /// network; `None` when the original network admits no budget.
    pub rows_within_budget: Option<bool>,
    /// `beta_max sum_k L_max^k` from the original network's budget.
    pub certified_radius: Option<f64>,
    pub same_architecture: bool,
    pub same_selectors: bool,
    /// `sum_k ||W_k - W'_k||_F + ||b_k - b'_k||`
    pub parameter_change: f64,
    pub all_pass: bool,
}

pub fn validate_repair(
    model: &DynamicsModel,
    original: &TllNetwork,
    repaired: &TllNetwork,
    spec: &SafetySpec,
    x_ce: &[f64],
    pattern: &ActivationPattern,
    config: &RepairConfig,
) -> Result<ValidationReport> {
    config.validate()?;
    let same_architecture = original.same_architecture(repaired);
    let same_selectors = same_architecture && original.same_selectors(repaired);
    let controller = |x: &[f64]| repaired.eval_lattice(x);

    let traj = model.simulate(controller, x_ce, config.ce_horizon)?;
    let ce_first_unsafe_step = traj.first_step_where(|s| spec.unsafe_set.contains(s));
    let activation_holds = repaired.check_activation(x_ce, pattern);

    let sups = sampled_sups(model, &spec.safe, config.sup_samples)?;
    let beta_fn = crate::bounds::make_beta_fn(spec, &sups);
    let l_fn = crate::bounds::make_l_fn(model, &sups);
    let om = omega_norms(repaired);
    let reach_radius = reach_bound(
        beta_fn.value(om.omega_w, om.omega_b),
        l_fn.value(om.omega_w, om.omega_b),
        spec.horizon,
    );
    let budget = analyze_bounds(model, original, spec, config.sup_samples)
        .ok()
        .map(|a| RowBudget::from_analysis(&a));
    let rows_within_budget = budget.map(|b| {
        repaired
            .outputs()
            .iter()
            .all(|o| (0..o.n_linear()).all(|i| b.admits(o.weights().row(i).norm(), o.bias()[i].abs(), 1e-9)))
    });

    let starts = spec.safe.grid(config.validation_samples.max(1));
    let mut safe_set_violations = 0;
    let mut max_excursion = 0.0f64;
    for x0 in &starts {
        let t = model.simulate(controller, x0, spec.horizon)?;
        if t.first_step_where(|s| spec.unsafe_set.contains(s)).is_some() {
            safe_set_violations += 1;
        }
        max_excursion = max_excursion.max((&t.states[spec.horizon] - DVector::from_column_slice(x0)).norm());
    }
    let reach_bound_holds = max_excursion <= reach_radius + 1e-9;

    let parameter_change = if same_architecture {
        original
            .outputs()
            .iter()
            .zip(repaired.outputs())
            .map(|(a, b)| (a.weights() - b.weights()).norm() + (a.bias() - b.bias()).norm())
            .sum()
    } else {
        f64::NAN
    };

    let one_step_safe = ce_first_unsafe_step != Some(1);
    let ce_horizon_safe = ce_first_unsafe_step.is_none();
    let all_pass = ce_horizon_safe
        && activation_holds
        && safe_set_violations == 0
        && reach_bound_holds
        && rows_within_budget != Some(false)
        && same_architecture
        && same_selectors;
    Ok(ValidationReport {
        ce_first_unsafe_step,
        one_step_safe,
        ce_horizon_safe,
        activation_holds,
        safe_set_samples: starts.len(),
        safe_set_violations,
        max_excursion,
        reach_radius,
        reach_bound_holds,
        rows_within_budget,
        certified_radius: budget.map(|b| reach_bound(b.beta_max, b.l_max, spec.horizon)),
        same_architecture,
        same_selectors,
        parameter_change,
        all_pass,
    })
}

//! Acceptance suite: one line per criterion. Runs without the test harness so
//! the lines are always shown; exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tll_repair::bounds::{make_beta_fn, make_l_fn, omega_norms, reach_bound, safe_distance, solve_lmax};
use tll_repair::demo;
use tll_repair::dynamics::{car_model, sampled_sups};
use tll_repair::repair::{repair_tll, validate_repair, RepairStatus, RowBudget};
use tll_repair::socp::{AffineExpr, ConvexProgram, SolverOptions, Status};
use tll_repair::tll::TllNetwork;

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if elapsed > limit {
        o.pass = false;
    }
    o.detail = format!("{} [{:.3?} / limit {:?}]", o.detail, elapsed, limit);
    o
}

fn lmax_reproduction() -> Outcome {
    let d = safe_distance(&demo::car_spec().unwrap().safe, &demo::car_spec().unwrap().unsafe_set).unwrap();
    let start = Instant::now();
    let l = solve_lmax(0.0865, d.distance, 7).unwrap();
    let elapsed = start.elapsed();
    Outcome {
        pass: d.distance == 3.25 && (l - 1.4243).abs() <= 5e-3 && elapsed < Duration::from_millis(1),
        detail: format!(
            "d_safe = {}, L_max = {l:.6} (want 1.4243 +- 5e-3) in {elapsed:.3?}",
            d.distance
        ),
    }
}

fn counterexample_reproduction() -> Outcome {
    let model = car_model(0.3, 0.01).unwrap();
    let k = DVector::from_row_slice(&demo::FAULTY_W);
    let start = Instant::now();
    let traj = model
        .simulate(
            |x: &[f64]| {
                Ok(DVector::from_element(
                    1,
                    k.dot(&DVector::from_column_slice(x)) + demo::FAULTY_B,
                ))
            },
            &demo::X_CE,
            3,
        )
        .unwrap();
    let first = traj.first_step_where(|x| x[1] > 3.0);
    let elapsed = start.elapsed();
    Outcome {
        pass: first == Some(2) && elapsed < Duration::from_millis(1),
        detail: format!(
            "x2 = {:.6}, {:.6}, {:.6}; first step above 3: {first:?} in {elapsed:.3?}",
            traj.states[0][1], traj.states[1][1], traj.states[2][1]
        ),
    }
}

fn random_suite() -> Vec<(TllNetwork, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..200)
        .map(|_| {
            let m = rng.gen_range(1..=2);
            let net = common::random_small_tll(&mut rng, m);
            let pts = (0..1000)
                .map(|_| common::uniform_cube(&mut rng, net.input_dim(), 3.0))
                .collect();
            (net, pts)
        })
        .collect()
}

fn lattice_relu_equivalence(suite: &[(TllNetwork, Vec<Vec<f64>>)]) -> Outcome {
    let mut worst = 0.0f64;
    for (net, pts) in suite {
        let stacks = net.lower_to_relu();
        for x in pts {
            let lattice = net.eval_lattice(x).unwrap();
            for (k, stack) in stacks.iter().enumerate() {
                worst = worst.max((stack.eval(x).unwrap()[0] - lattice[k]).abs());
            }
        }
    }
    Outcome {
        pass: worst <= 1e-9,
        detail: format!("200 networks x 1000 points, max |lattice - relu| = {worst:.3e}"),
    }
}

fn activation_soundness(suite: &[(TllNetwork, Vec<Vec<f64>>)]) -> Outcome {
    let (mut mismatches, mut unchecked) = (0usize, 0usize);
    for (net, pts) in suite {
        for x in pts {
            let y = net.eval_lattice(x).unwrap();
            let p = net.active_indices(x).unwrap();
            for (k, out) in net.outputs().iter().enumerate() {
                if out.row_value(p.act[k], x) != y[k] {
                    mismatches += 1;
                }
            }
            if !net.check_activation(x, &p) {
                unchecked += 1;
            }
        }
    }
    Outcome {
        pass: mismatches == 0 && unchecked == 0,
        detail: format!("active row differs from output at {mismatches} points, pattern rejected at {unchecked}"),
    }
}

fn reach_bound_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = demo::car_spec().unwrap();
    let model = car_model(0.3, 0.01)
        .unwrap()
        .with_sampled_lipschitz(&spec.workspace, 9)
        .unwrap();
    let sups = sampled_sups(&model, &spec.safe, 11).unwrap();
    let (beta_fn, l_fn) = (make_beta_fn(&spec, &sups), make_l_fn(&model, &sups));
    let d_safe = safe_distance(&spec.safe, &spec.unsafe_set).unwrap().distance;
    let (mut violations, mut unsafe_hits, mut certified) = (0usize, 0usize, 0usize);
    let mut tightest = f64::INFINITY;
    for _ in 0..20 {
        let scale = rng.gen_range(0.2..8.0);
        let n_linear = rng.gen_range(1..=8);
        let n_groups = rng.gen_range(1..=4);
        let net = common::random_tll(&mut rng, 3, 1, n_linear, n_groups, scale);
        let om = omega_norms(&net);
        let radius = reach_bound(
            beta_fn.value(om.omega_w, om.omega_b),
            l_fn.value(om.omega_w, om.omega_b),
            spec.horizon,
        );
        if radius <= d_safe {
            certified += 1;
        }
        for _ in 0..200 {
            let x0 = common::uniform_in(&mut rng, &spec.safe);
            let traj = model
                .simulate(|x: &[f64]| net.eval_lattice(x), &x0, spec.horizon)
                .unwrap();
            let exc = (&traj.states[spec.horizon] - DVector::from_column_slice(&x0)).norm();
            tightest = tightest.min(radius - exc);
            if exc > radius + 1e-9 {
                violations += 1;
            }
            if radius <= d_safe && traj.first_step_where(|s| spec.unsafe_set.contains(s)).is_some() {
                unsafe_hits += 1;
            }
        }
    }
    Outcome {
        pass: violations == 0 && unsafe_hits == 0,
        detail: format!(
            "4000 trajectories: {violations} exceed the radius (min slack {tightest:.3e}), \
             {certified}/20 nets certified, {unsafe_hits} certified trajectories unsafe"
        ),
    }
}

fn project(
    p: &DVector<f64>,
    constrain: impl FnOnce(&mut ConvexProgram, tll_repair::socp::Var),
) -> (Status, DVector<f64>) {
    let mut prog = ConvexProgram::new();
    let x = prog.add_variable("x", p.len());
    prog.add_norm_objective(AffineExpr::var(x).plus_constant(&(-p)))
        .unwrap();
    constrain(&mut prog, x);
    let sol = prog.solve(&SolverOptions::default());
    let v = if sol.status == Status::Optimal {
        sol.value(x).clone()
    } else {
        DVector::zeros(p.len())
    };
    (sol.status, v)
}

fn solver_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut bad_status = 0;
    for trial in 0..20 {
        let n = 2 + trial % 4;
        let p = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));

        // halfspace a.x <= c with p outside
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let c = a.dot(&p) - rng.gen_range(0.5..3.0);
        let expect = &p - &a * ((a.dot(&p) - c) / a.norm_squared());
        let (s, got) = project(&p, |prog, x| {
            prog.add_ineq(AffineExpr::dot(a.as_slice(), x).plus_scalar(-c)).unwrap();
        });
        bad_status += usize::from(s != Status::Optimal);
        worst = worst.max((got - expect).amax());

        // ball ||x - q|| <= r with p outside
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let r = 0.9 * (&p - &q).norm() * rng.gen_range(0.1..1.0);
        let expect = &q + (&p - &q) * (r / (&p - &q).norm());
        let (s, got) = project(&p, |prog, x| {
            prog.add_cone(AffineExpr::var(x).plus_constant(&(-&q)), AffineExpr::scalar(r))
                .unwrap();
        });
        bad_status += usize::from(s != Status::Optimal);
        worst = worst.max((got - expect).amax());

        // line {x : A x = d} of codimension n - 1
        let am = DMatrix::from_fn(n - 1, n, |_, _| rng.gen_range(-1.0..1.0));
        let d = DVector::from_fn(n - 1, |_, _| rng.gen_range(-1.0..1.0));
        let gram = &am * am.transpose();
        let expect = &p - am.transpose() * gram.lu().solve(&(&am * &p - &d)).unwrap();
        let (s, got) = project(&p, |prog, x| {
            prog.add_eq(AffineExpr::zeros(n - 1).term(am.clone(), x).plus_constant(&(-&d)))
                .unwrap();
        });
        bad_status += usize::from(s != Status::Optimal);
        worst = worst.max((got - expect).amax());
    }

    let mut infeasible = Vec::new();
    let mut prog = ConvexProgram::new();
    let x = prog.add_variable("x", 1);
    prog.add_norm_objective(AffineExpr::var(x)).unwrap();
    prog.add_ineq(AffineExpr::var(x).plus_scalar(1.0)).unwrap();
    prog.add_ineq(AffineExpr::var(x).scaled(-1.0).plus_scalar(1.0)).unwrap();
    infeasible.push(prog.solve(&SolverOptions::default()).status);

    let mut prog = ConvexProgram::new();
    let x = prog.add_variable("x", 2);
    prog.add_norm_objective(AffineExpr::var(x)).unwrap();
    prog.add_cone(AffineExpr::var(x), AffineExpr::scalar(1.0)).unwrap();
    prog.add_ineq(AffineExpr::component(x, 0).scaled(-1.0).plus_scalar(2.0))
        .unwrap();
    infeasible.push(prog.solve(&SolverOptions::default()).status);

    let all_infeasible = infeasible.iter().all(|s| *s == Status::Infeasible);
    Outcome {
        pass: worst <= 1e-6 && bad_status == 0 && all_infeasible,
        detail: format!(
            "60 projections, max error {worst:.3e}, {bad_status} non-optimal; infeasible toys report {infeasible:?}"
        ),
    }
}

fn end_to_end_repair() -> Outcome {
    let sc = demo::car_scenario().unwrap();
    let result = repair_tll(&sc.model, &sc.network, &sc.spec, &sc.x_ce, &sc.config).unwrap();
    let Some(repaired) = result
        .repaired
        .clone()
        .filter(|_| result.status == RepairStatus::Repaired)
    else {
        return Outcome {
            pass: false,
            detail: format!("status {:?}: {:?}", result.status, result.message),
        };
    };
    let spec = &sc.spec;
    let margin = sc.config.margin_eps;
    let activation = repaired.check_activation(&sc.x_ce, &result.pattern);
    let controller = |x: &[f64]| repaired.eval_lattice(x);
    let traj = sc.model.simulate(controller, &sc.x_ce, sc.check_steps).unwrap();
    let one_step = spec.unsafe_set.row_slack(0, traj.states[1].as_slice());
    let stays_safe = traj.first_step_where(|s| spec.unsafe_set.contains(s)).is_none();
    let max_x2 = traj.states.iter().map(|s| s[1]).fold(f64::MIN, f64::max);
    let report = validate_repair(
        &sc.model,
        &sc.network,
        &repaired,
        spec,
        &sc.x_ce,
        &result.pattern,
        &sc.config,
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (local_ok, local_tried) = local_minimality(&sc, &result, &mut rng);
    let (global_ok, global_tried) = global_minimality(&sc, &result, &repaired, &mut rng);

    Outcome {
        pass: activation
            && one_step <= -margin + 1e-9
            && stays_safe
            && report.all_pass
            && local_ok
            && global_ok,
        detail: format!(
            "activation {activation}, one-step slack {one_step:.3e} (margin {margin:e}), {} steps safe: {stays_safe} \
             (max x2 {max_x2:.6}), validation {}, local {:.4} <= 100 feasible perturbations: {local_ok} ({local_tried} drawn), \
             global {:.4} <= 100 feasible perturbations: {global_ok} ({global_tried} drawn)",
            sc.check_steps,
            report.all_pass,
            result.local.as_ref().unwrap().objective,
            result.global_objective.unwrap(),
        ),
    }
}

/// Random points of the local feasible set near the optimum never beat it.
fn local_minimality(
    sc: &demo::CarScenario,
    result: &tll_repair::repair::RepairResult,
    rng: &mut ChaCha8Rng,
) -> (bool, usize) {
    let local = result.local.as_ref().unwrap();
    let budget = RowBudget::from_analysis(&result.bounds);
    let w0 = DVector::from_row_slice(&demo::FAULTY_W);
    let b0 = demo::FAULTY_B;
    let w_opt = local.rows.weights.row(0).transpose();
    let b_opt = local.rows.bias[0];
    let feasible = |w: &DVector<f64>, b: f64| {
        let mut x = DVector::from_column_slice(&sc.x_ce);
        for _ in 0..sc.config.repair_horizon {
            let u = w.dot(&x) + b;
            x = sc.model.step(x.as_slice(), &[u]).unwrap();
            if sc.spec.unsafe_set.row_slack(local.halfspace, x.as_slice()) > -sc.config.margin_eps {
                return false;
            }
        }
        budget.admits(w.norm(), b.abs(), 0.0)
    };
    let (mut found, mut drawn, mut ok) = (0, 0, true);
    while found < 100 && drawn < 200_000 {
        drawn += 1;
        let r = 10f64.powf(rng.gen_range(-4.0..0.0));
        let w = &w_opt + DVector::from_fn(3, |_, _| rng.gen_range(-r..r));
        let b = b_opt + rng.gen_range(-r..r);
        if feasible(&w, b) {
            found += 1;
            ok &= local.objective <= (&w - &w0).norm() + (b - b0).abs() + 1e-6;
        }
    }
    (ok && found == 100, drawn)
}

/// Random perturbations of the rows the global program may move, pushed back
/// into its feasible set along the bias, never beat the optimum.
fn global_minimality(
    sc: &demo::CarScenario,
    result: &tll_repair::repair::RepairResult,
    repaired: &TllNetwork,
    rng: &mut ChaCha8Rng,
) -> (bool, usize) {
    let budget = RowBudget::from_analysis(&result.bounds);
    let delta = sc.config.activation_margin;
    let (act, sel) = (result.pattern.act[0], result.pattern.sel[0]);
    let orig = sc.network.output(0);
    let out = repaired.output(0);
    let x = DVector::from_column_slice(&sc.x_ce);
    let v_act = out.row_value(act, &sc.x_ce);
    let above: Vec<usize> = orig.selectors()[sel].iter().copied().filter(|&i| i != act).collect();
    let below: Vec<usize> = result.iota[0]
        .iter()
        .filter(|(&j, _)| !orig.selectors()[j].contains(&act))
        .map(|(_, &i)| i)
        .collect();
    let movable: Vec<usize> = above.iter().chain(&below).copied().collect();
    let cost = |w: &DMatrix<f64>, b: &DVector<f64>| (w - orig.weights()).norm() + (b - orig.bias()).norm();
    let optimum = result.global_objective.unwrap();
    let (mut found, mut drawn, mut ok) = (0, 0, true);
    while found < 100 && drawn < 10_000 {
        drawn += 1;
        let r = 10f64.powf(rng.gen_range(-4.0..-1.0));
        let mut w = out.weights().clone();
        let mut b = out.bias().clone();
        for &i in &movable {
            for c in 0..3 {
                w[(i, c)] += rng.gen_range(-r..r);
            }
            b[i] += rng.gen_range(-r..r);
            let value = w.row(i).transpose().dot(&x) + b[i];
            if above.contains(&i) && value < v_act + delta {
                b[i] += v_act + delta - value;
            }
            if below.contains(&i) && value > v_act - delta {
                b[i] -= value - (v_act - delta);
            }
        }
        if movable.iter().all(|&i| budget.admits(w.row(i).norm(), b[i].abs(), 0.0)) {
            found += 1;
            ok &= optimum <= cost(&w, &b) + 1e-6;
        }
    }
    (ok && found == 100, drawn)
}

fn input_term_lipschitz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let model = car_model(0.3, 0.01).unwrap();
    let ws = demo::car_spec().unwrap().workspace;
    let sup_g = sampled_sups(&model, &ws, 5).unwrap().sup_g_norm;
    let mut worst_ratio = 0.0f64;
    let mut violations = 0;
    for _ in 0..50 {
        let k = DVector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
        let k0 = rng.gen_range(-5.0..5.0);
        let u = |x: &[f64]| k.dot(&DVector::from_column_slice(x)) + k0;
        // u is affine, so its sup over the box is attained at a corner
        let sup_u = ws.corners().iter().map(|c| u(c).abs()).fold(0.0, f64::max);
        let bound = model.l_g() * sup_u + k.norm() * sup_g;
        for _ in 0..200 {
            let (a, b) = (common::uniform_in(&mut rng, &ws), common::uniform_in(&mut rng, &ws));
            let ga = model.g(&a) * u(&a);
            let gb = model.g(&b) * u(&b);
            let dist = (DVector::from_column_slice(&a) - DVector::from_column_slice(&b)).norm();
            let q = (ga - gb).norm() / dist;
            worst_ratio = worst_ratio.max(q / bound);
            if q > bound + 1e-9 {
                violations += 1;
            }
        }
    }
    Outcome {
        pass: violations == 0,
        detail: format!(
            "10000 difference quotients, {violations} above the bound, max quotient/bound {worst_ratio:.4}"
        ),
    }
}

fn main() {
    let suite = random_suite();
    let results = [
        ("1 L_max reproduction", lmax_reproduction()),
        ("2 counterexample at step 2", counterexample_reproduction()),
        (
            "3 lattice/ReLU equivalence",
            timed(Duration::from_secs(30), || lattice_relu_equivalence(&suite)),
        ),
        ("4 activation soundness", activation_soundness(&suite)),
        (
            "5 reach-bound property",
            timed(Duration::from_secs(60), reach_bound_property),
        ),
        ("6 solver correctness", solver_correctness()),
        (
            "7 end-to-end car repair",
            timed(Duration::from_secs(120), end_to_end_repair),
        ),
        ("8 input-term Lipschitz bound", input_term_lipschitz()),
    ];
    let mut failed = Vec::new();
    for (name, o) in &results {
        println!(
            "criterion {name}: {} - {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}

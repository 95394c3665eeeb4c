//! One pipeline per subcommand.

use serde::Serialize;
use serde_json::{json, Value};

use rbsde_core::bsde::{select_basis, solve_backward_euler, solve_picard, stochastic_solution, stochastic_solution_on, BsdeSolution, BuiltinDriver, Driver};
use rbsde_core::compare::{compare, ProblemDescriptor};
use rbsde_core::diffusion::{quadratic_variation_report, simulate, PathBundle};
use rbsde_core::pde::{mass_check, resolvent_fd, solve_fd, GridSolution};
use rbsde_core::resolvent::{
    conditional_product_check, estimate_potential, potential_martingale_check, verify_composition, verify_product_formula,
};
use rbsde_core::{Error, InitialLaw};

use crate::config::{Command, ResolventCheck, Resolved, RunConfig, Solver};
use crate::output::{Product, Table};
use crate::Failure;

pub(crate) fn execute(command: Command, cfg: &RunConfig) -> Result<Product, Failure> {
    let resolved = cfg.resolve()?;
    match command {
        Command::Simulate => run_simulate(cfg, &resolved),
        Command::SolveBsde => run_bsde(cfg, &resolved),
        Command::SolvePdeStochastic => run_pde_stochastic(cfg, &resolved),
        Command::SolvePdeFd => run_pde_fd(cfg, &resolved),
        Command::VerifyResolvent => run_resolvent(cfg, &resolved),
        Command::Compare => run_compare(cfg, &resolved),
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, Failure> {
    serde_json::to_value(v).map_err(|e| Failure::Output(e.to_string()))
}

fn bundle_files(bundle: &PathBundle, product: &mut Product) -> Result<(), Failure> {
    let mut bytes = Vec::new();
    bundle.write_binary(&mut bytes)?;
    product.binaries.push(("bundle.rbdf".into(), bytes));
    let sidecar = json!({
        "config": bundle.config().echo(),
        "dim": bundle.dim(),
        "n_steps": bundle.n_steps(),
        "n_paths": bundle.n_paths(),
        "times": bundle.times(),
        "fingerprint": format!("{:016x}", bundle.fingerprint()),
    });
    product.sidecars.push(("bundle.json".into(), sidecar));
    Ok(())
}

fn run_simulate(cfg: &RunConfig, r: &Resolved) -> Result<Product, Failure> {
    let horizon = match (&r.problem, cfg.numerics.horizon) {
        (Some(p), _) => p.horizon,
        (None, Some(h)) => h,
        (None, None) => return Err(Error::Config("simulate needs problem.horizon or numerics.horizon".into()).into()),
    };
    let bundle = simulate(&r.simulation(cfg, horizon))?;
    let qv = quadratic_variation_report(&bundle, cfg.numerics.qv_tolerance)?;
    let (n, d, kk) = (bundle.n_paths(), bundle.dim(), bundle.n_steps());

    let mut columns = vec!["t".to_string()];
    columns.extend((1..=d).map(|i| format!("mean_x{i}")));
    columns.push("reflected_fraction".into());
    let mut summary = Table::new("paths", columns);
    let mut reflected_steps = 0usize;
    for k in 0..=kk {
        let mut row = vec![bundle.times()[k]];
        for i in 0..d {
            row.push((0..n).map(|p| bundle.state(p, k)[i]).sum::<f64>() / n as f64);
        }
        // fraction of paths projected on the step into t_k
        let hits = if k == 0 { 0 } else { (0..n).filter(|&p| bundle.reflected(p, k - 1)).count() };
        reflected_steps += hits;
        row.push(hits as f64 / n as f64);
        summary.rows.push(row);
    }
    let reflected_fraction = reflected_steps as f64 / (n * kk) as f64;
    let flagged = qv.pairs.iter().filter(|p| p.flagged).count();
    let report = json!({
        "command": "simulate",
        "fingerprint": format!("{:016x}", bundle.fingerprint()),
        "dim": d,
        "n_paths": n,
        "n_steps": kk,
        "horizon": horizon,
        "final_mean": summary.rows[kk][1..=d].to_vec(),
        "reflected_fraction": reflected_fraction,
        "quadratic_variation": qv,
    });
    let diagnostics = json!({
        "diffusion": { "reflected_fraction": reflected_fraction, "qv_flagged_pairs": flagged },
    });
    let mut product = Product::new(report, diagnostics);
    product.tables.push(summary);
    bundle_files(&bundle, &mut product)?;
    Ok(product)
}

/// Per-step and trace tables of a solution.
fn solution_tables(sol: &BsdeSolution) -> Vec<Table> {
    let m = sol.y0.len();
    let mut columns = vec!["t".to_string()];
    columns.extend((1..=m).map(|i| format!("mean_y{i}")));
    columns.push("mean_abs_z".into());
    let mut steps = Table::new("steps", columns);
    for s in &sol.steps {
        let mut row = vec![s.t];
        row.extend_from_slice(&s.mean_y);
        row.push(s.mean_abs_z);
        steps.rows.push(row);
    }
    let mut trace = Table::new("trace", vec!["iteration".into(), "delta".into()]);
    for (i, d) in sol.trace.iter().enumerate() {
        trace.rows.push(vec![(i + 1) as f64, *d]);
    }
    vec![steps, trace]
}

fn solver_diagnostics(sol: &BsdeSolution) -> Value {
    json!({
        "mode": sol.mode,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "final_delta": sol.trace.last(),
        "trace_nonincreasing": sol.trace_nonincreasing,
        "windows": sol.windows.len().saturating_sub(1),
    })
}

fn non_convergence(sol: &BsdeSolution, tol: f64) -> Option<String> {
    (!sol.converged).then(|| {
        format!(
            "Picard iteration stopped after {} iterations with delta {:e} above tol {tol:e}",
            sol.iterations,
            sol.trace.last().copied().unwrap_or(f64::NAN)
        )
    })
}

fn run_bsde(cfg: &RunConfig, r: &Resolved) -> Result<Product, Failure> {
    let problem = r.bsde(false)?;
    let bundle = simulate(&r.simulation(cfg, problem.horizon))?;
    let n = &cfg.numerics;
    let basis = select_basis(&r.basis(&n.basis)?, &problem, &bundle)?;
    let sol = match n.solver {
        Solver::Picard => solve_picard(&problem, &bundle, &basis, n.tol, n.max_iter)?,
        Solver::BackwardEuler => solve_backward_euler(&problem, &bundle, &basis)?,
    };
    let report = json!({
        "command": "solve-bsde",
        "driver": problem.driver.name(),
        "terminal": problem.terminal.name(),
        "horizon": problem.horizon,
        "basis": basis.label(),
        "y0": sol.y0,
        "y0_std_err": sol.y0_std_err,
        "solution": to_value(&sol)?,
    });
    let diagnostics = json!({
        "diffusion": { "fingerprint": format!("{:016x}", bundle.fingerprint()) },
        "bsde": solver_diagnostics(&sol),
    });
    let mut product = Product::new(report, diagnostics);
    product.tables = solution_tables(&sol);
    product.non_convergence = non_convergence(&sol, n.tol);
    if n.write_bundle {
        bundle_files(&bundle, &mut product)?;
    }
    Ok(product)
}

fn run_pde_stochastic(cfg: &RunConfig, r: &Resolved) -> Result<Product, Failure> {
    let problem = r.bsde(true)?;
    let bundle = simulate(&r.simulation(cfg, problem.horizon))?;
    let n = &cfg.numerics;
    let rep = stochastic_solution_on(&problem, &bundle, &r.basis(&n.basis)?, n.tol, n.max_iter)?;
    let report = json!({
        "command": "solve-pde-stochastic",
        "driver": r.problem()?.driver.name(),
        "terminal": problem.terminal.name(),
        "stochastic_solution": to_value(&rep)?,
    });
    let diagnostics = json!({
        "diffusion": { "fingerprint": format!("{:016x}", bundle.fingerprint()) },
        "bsde": solver_diagnostics(&rep.solution),
    });
    let mut product = Product::new(report, diagnostics);
    product.tables = solution_tables(&rep.solution);
    product.non_convergence = non_convergence(&rep.solution, n.tol);
    if n.write_bundle {
        bundle_files(&bundle, &mut product)?;
    }
    Ok(product)
}

fn fd_table(sol: &GridSolution) -> Table {
    let d = sol.grid.dim();
    let mut columns = vec!["t".to_string()];
    if d == 1 {
        columns.push("x".into());
    } else {
        columns.extend((1..=d).map(|i| format!("x{i}")));
    }
    columns.push("u".into());
    let mut table = Table::new("solution", columns);
    for (t, snap) in sol.times.iter().zip(&sol.snapshots) {
        for (p, u) in snap.iter().enumerate() {
            let mut row = vec![*t];
            row.extend(sol.grid.node(p));
            row.push(*u);
            table.rows.push(row);
        }
    }
    table
}

fn run_pde_fd(cfg: &RunConfig, r: &Resolved) -> Result<Product, Failure> {
    let p = r.problem()?;
    let phi = r.scalar_terminal()?;
    let fd = r.fd(&cfg.fd, cfg.fd.n_grid)?;
    let sol = solve_fd(&r.domain, &r.field, &p.driver, &phi, p.horizon, &fd)?;
    let mass = mass_check(&sol);
    let (phi_min, phi_max) = sol.snapshots[0].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    // only meaningful without a reaction term
    let max_principle_holds = (p.driver == BuiltinDriver::Zero).then(|| sol.min_value >= phi_min - 1e-12 && sol.max_value <= phi_max + 1e-12);
    let report = json!({
        "command": "solve-pde-fd",
        "driver": p.driver.name(),
        "initial": phi.name(),
        "horizon": p.horizon,
        "n_grid": fd.n_grid,
        "dt": sol.dt,
        "steps": sol.steps,
        "scheme": sol.scheme,
        "times": sol.times,
        "min_value": sol.min_value,
        "max_value": sol.max_value,
        "maximum_principle": max_principle_holds,
        "mass": mass,
    });
    let diagnostics = json!({
        "pde": { "steps": sol.steps, "dt": sol.dt, "max_relative_mass_drift": mass.max_relative_drift },
    });
    let mut product = Product::new(report, diagnostics);
    product.tables.push(fd_table(&sol));
    Ok(product)
}

fn run_resolvent(cfg: &RunConfig, r: &Resolved) -> Result<Product, Failure> {
    let rc = r.resolvent(cfg);
    let spec = r.potential_spec(cfg)?;
    let law = &cfg.initial_law;
    let single = || {
        if spec.order() == 1 {
            Ok((&spec.terms[0].f, spec.terms[0].alpha))
        } else {
            Err(Failure::from(Error::Config(format!("this check takes one function, got {}", spec.order()))))
        }
    };
    let (report, pass) = match cfg.resolvent.check {
        ResolventCheck::Potential => {
            let (f, alpha) = single()?;
            let est = estimate_potential(f, alpha, law, &rc)?;
            let fd_value = match law {
                InitialLaw::Point { x0 } if r.domain.is_box() && r.domain.dim() <= 2 => {
                    Some(resolvent_fd(&r.domain, &r.field, f, alpha, cfg.resolvent.fd_grid)?.interpolate(x0))
                }
                _ => None,
            };
            (json!({ "estimate": est, "fd_value": fd_value }), None)
        }
        ResolventCheck::Composition => {
            let rep = verify_composition(&spec, law, &rc)?;
            (to_value(&rep)?, Some(rep.pass))
        }
        ResolventCheck::Product => {
            let rep = verify_product_formula(&spec, law, &rc)?;
            (to_value(&rep)?, Some(rep.pass))
        }
        ResolventCheck::Martingale => {
            let (f, alpha) = single()?;
            let u = resolvent_fd(&r.domain, &r.field, f, alpha, cfg.resolvent.fd_grid)?;
            let rep = potential_martingale_check(f, alpha, &u, law, &rc)?;
            (to_value(&rep)?, Some(rep.pass))
        }
        ResolventCheck::ConditionalProduct => {
            let t = cfg.resolvent.t.ok_or_else(|| Failure::from(Error::Config("resolvent.t is required for conditional-product".into())))?;
            let rep = conditional_product_check(&spec, t, law, &rc)?;
            (to_value(&rep)?, Some(rep.pass))
        }
    };
    let report = json!({ "command": "verify-resolvent", "check": cfg.resolvent.check, "spec": spec.label(), "result": report });
    let diagnostics = json!({ "resolvent": { "check": cfg.resolvent.check, "pass": pass } });
    Ok(Product::new(report, diagnostics))
}

fn run_compare(cfg: &RunConfig, r: &Resolved) -> Result<Product, Failure> {
    let p = r.problem()?;
    let fd_horizon = cfg.compare.fd_horizon.unwrap_or(p.horizon);
    let descriptor = |t: f64| -> Result<ProblemDescriptor, Failure> {
        Ok(ProblemDescriptor {
            domain: serde_json::to_string(&r.domain.descriptor()).map_err(|e| Failure::Output(e.to_string()))?,
            field: r.field.name().to_string(),
            driver: p.driver.name(),
            terminal: p.terminal.name(),
            t,
        })
    };
    let (stoch_desc, fd_desc) = (descriptor(p.horizon)?, descriptor(fd_horizon)?);
    // reject before any simulation
    let diff = stoch_desc.diff(&fd_desc);
    if !diff.is_empty() {
        return Err(Error::Input(format!("problem descriptors differ: {}", diff.join("; "))).into());
    }

    let phi = r.scalar_terminal()?;
    let n = &cfg.numerics;
    let problem = r.bsde(true)?;
    let stochastic = stochastic_solution(&problem, &r.simulation(cfg, p.horizon), &r.basis(&n.basis)?, n.tol, n.max_iter)?;
    let fine_cfg = r.fd(&cfg.fd, cfg.fd.n_grid)?;
    let coarse_n = cfg.fd.coarse_n_grid.unwrap_or((cfg.fd.n_grid - 1) / 2 + 1);
    let coarse_cfg = r.fd(&cfg.fd, coarse_n)?;
    let fine = solve_fd(&r.domain, &r.field, &p.driver, &phi, fd_horizon, &fine_cfg)?;
    let coarse = solve_fd(&r.domain, &r.field, &p.driver, &phi, fd_horizon, &coarse_cfg)?;
    let cmp = compare(&stoch_desc, &stochastic, &fd_desc, &fine, Some(&coarse), &cfg.initial_law, &r.domain, cfg.compare.tolerance)?;
    let report = json!({
        "command": "compare",
        "comparison": cmp,
        "stochastic": {
            "u": stochastic.u,
            "std_err": stochastic.std_err,
            "discretization_error": stochastic.discretization_error,
            "total_error": stochastic.total_error,
            "basis": stochastic.basis,
            "n_paths": stochastic.n_paths,
            "iterations": stochastic.solution.iterations,
            "converged": stochastic.solution.converged,
        },
        "fd": { "n_grid": fine_cfg.n_grid, "dt": fine.dt, "coarse_n_grid": coarse_n, "coarse_dt": coarse.dt },
    });
    let diagnostics = json!({
        "bsde": solver_diagnostics(&stochastic.solution),
        "pde": { "fine_steps": fine.steps, "coarse_steps": coarse.steps },
        "compare": { "pass": cmp.pass, "difference": cmp.difference, "budget": cmp.budget },
    });
    let mut product = Product::new(report, diagnostics);
    product.tables = solution_tables(&stochastic.solution);
    product.non_convergence = non_convergence(&stochastic.solution, n.tol);
    Ok(product)
}

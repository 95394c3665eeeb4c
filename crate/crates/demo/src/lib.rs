//! Browser bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers and strings and returns a JSON string, so
//! the page needs nothing beyond `JSON.parse`. Errors come back as
//! `{"error": "..."}`.

use std::sync::Arc;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use rbsde_core::bsde::{solve_picard, BsdeProblem, BuiltinDriver};
use rbsde_core::basis::RegressionBasis;
use rbsde_core::diffusion::{simulate, SimulationConfig};
use rbsde_core::pde::{solve_fd, FdConfig};
use rbsde_core::{CoefficientField, DomainSpec, InitialLaw, StateFunction, TerminalFunction};

/// Demo runs are capped so the page stays responsive.
const MAX_PATHS: usize = 20_000;
const MAX_STEPS: usize = 5_000;

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn check_size(n_paths: usize, horizon: f64, dt: f64) -> Result<(), String> {
    if n_paths == 0 || n_paths > MAX_PATHS {
        return Err(format!("n_paths must be between 1 and {MAX_PATHS}"));
    }
    if !(dt > 0.0) || horizon / dt > MAX_STEPS as f64 {
        return Err(format!("at most {MAX_STEPS} time steps"));
    }
    Ok(())
}

/// Sample paths of the reflecting diffusion in the unit square, started at
/// `(x, y)`: the first `show` paths plus the ensemble fraction of projected steps.
#[wasm_bindgen]
pub fn sample_paths(field: &str, x: f64, y: f64, horizon: f64, dt: f64, n_paths: usize, show: usize, seed: u64) -> String {
    respond((|| {
        check_size(n_paths, horizon, dt)?;
        let domain = DomainSpec::unit_box(2).map_err(err)?;
        let field = CoefficientField::from_name(field, &domain).map_err(err)?;
        let cfg = SimulationConfig::new(domain, field, InitialLaw::point(vec![x, y]), horizon, dt, n_paths, seed);
        let bundle = simulate(&cfg).map_err(err)?;
        let (n, k) = (bundle.n_paths(), bundle.n_steps());
        let paths: Vec<Vec<[f64; 2]>> = (0..show.min(n))
            .map(|p| (0..=k).map(|s| { let st = bundle.state(p, s); [st[0], st[1]] }).collect())
            .collect();
        let reflected = (0..n).map(|p| (0..k).filter(|&s| bundle.reflected(p, s)).count()).sum::<usize>();
        Ok(json!({
            "paths": paths,
            "reflected_fraction": reflected as f64 / (n * k) as f64,
            "fingerprint": format!("{:016x}", bundle.fingerprint()),
        }))
    })())
}

/// `E cos(pi X_t)` from a point start on `[0, 1]`: Monte Carlo mean with its
/// standard error, the finite-difference oracle and the closed form, on a
/// grid of `points` times.
#[wasm_bindgen]
pub fn heat_curve(x0: f64, horizon: f64, dt: f64, n_paths: usize, points: usize, seed: u64) -> String {
    respond((|| {
        check_size(n_paths, horizon, dt)?;
        let domain = DomainSpec::unit_box(1).map_err(err)?;
        let field = CoefficientField::from_name("identity", &domain).map_err(err)?;
        let cfg = SimulationConfig::new(domain.clone(), field.clone(), InitialLaw::point(vec![x0]), horizon, dt, n_paths, seed);
        let bundle = simulate(&cfg).map_err(err)?;
        let phi = StateFunction::CosPi(0);
        let fd = solve_fd(&domain, &field, &BuiltinDriver::Zero, &phi, horizon, &FdConfig::explicit(81, 5e-5)).map_err(err)?;
        let k = bundle.n_steps();
        let n = bundle.n_paths() as f64;
        let mut rows = Vec::new();
        for i in 0..=points.max(1) {
            let s = (i * k) / points.max(1);
            let t = bundle.times()[s];
            let vals: Vec<f64> = (0..bundle.n_paths()).map(|p| phi.eval(bundle.state(p, s))).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let exact = (-std::f64::consts::PI.powi(2) * t / 2.0).exp() * (std::f64::consts::PI * x0).cos();
            // the oracle is stored at 0 and T only, so use the closed form in between
            let oracle = if s == k { fd.evaluate(horizon, &[x0]).map_err(err)? } else { exact };
            rows.push(json!({ "t": t, "mc": mean, "se": (var / n).sqrt(), "fd": oracle, "exact": exact }));
        }
        Ok(json!({ "rows": rows }))
    })())
}

/// Picard iteration for `u_t = u_xx / 2 - f(u)` on `[0, 1]` with a uniform
/// start: the successive-difference trace and `u(T, mu)`.
#[wasm_bindgen]
pub fn picard_trace(driver: &str, terminal: &str, horizon: f64, dt: f64, n_paths: usize, max_iter: usize, seed: u64) -> String {
    respond((|| {
        check_size(n_paths, horizon, dt)?;
        let domain = DomainSpec::unit_box(1).map_err(err)?;
        let field = CoefficientField::from_name("identity", &domain).map_err(err)?;
        let f = BuiltinDriver::parse(driver).map_err(err)?;
        let lipschitz = rbsde_core::bsde::Driver::lipschitz(&f).unwrap_or(0.0);
        let terminal = TerminalFunction::parse(terminal).map_err(err)?;
        let problem = BsdeProblem::from_pde(Arc::new(f), terminal, horizon, lipschitz, &domain).map_err(err)?;
        let cfg = SimulationConfig::new(domain.clone(), field, InitialLaw::Uniform, horizon, dt, n_paths, seed);
        let bundle = simulate(&cfg).map_err(err)?;
        let sol = solve_picard(&problem, &bundle, &RegressionBasis::polynomial(&domain, 3), 1e-8, max_iter.clamp(1, 100)).map_err(err)?;
        Ok(json!({
            "u": sol.y0,
            "std_err": sol.y0_std_err,
            "trace": sol.trace,
            "converged": sol.converged,
            "windows": sol.windows.len() - 1,
            "steps": sol.steps.iter().map(|s| json!({ "t": s.t, "mean_y": s.mean_y, "mean_abs_z": s.mean_abs_z })).collect::<Vec<_>>(),
        }))
    })())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn paths_stay_in_the_square() {
        let v = parse(&sample_paths("smooth-aniso", 0.5, 0.5, 0.2, 0.01, 200, 3, 1));
        let paths = v["paths"].as_array().unwrap();
        assert_eq!(paths.len(), 3);
        for p in paths {
            for xy in p.as_array().unwrap() {
                let (x, y) = (xy[0].as_f64().unwrap(), xy[1].as_f64().unwrap());
                assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
            }
        }
    }

    #[test]
    fn heat_curve_tracks_the_closed_form() {
        let v = parse(&heat_curve(0.5, 0.3, 0.005, 4000, 6, 2));
        for row in v["rows"].as_array().unwrap() {
            let (mc, se, exact) = (row["mc"].as_f64().unwrap(), row["se"].as_f64().unwrap(), row["exact"].as_f64().unwrap());
            // the midpoint is far from the walls, where the step scheme is unbiased
            assert!((mc - exact).abs() < 4.0 * se + 1e-9, "{row}");
        }
    }

    #[test]
    fn picard_trace_contracts() {
        let v = parse(&picard_trace("linear:1,0", "constant:1", 0.5, 0.01, 500, 30, 3));
        assert_eq!(v["converged"], true);
        let u = v["u"][0].as_f64().unwrap();
        assert!((u - (-0.5f64).exp()).abs() < 5e-3);
    }

    #[test]
    fn bad_inputs_come_back_as_errors() {
        assert!(parse(&picard_trace("cubic", "constant:1", 0.5, 0.01, 100, 5, 1))["error"].is_string());
        assert!(parse(&heat_curve(0.5, 1.0, 1e-6, 100, 5, 1))["error"].is_string());
        assert!(parse(&sample_paths("identity", 0.5, 0.5, 0.1, 0.01, 0, 1, 1))["error"].is_string());
    }
}

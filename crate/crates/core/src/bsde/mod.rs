//! BSDEs `dY = -f(t, Y, Z) dt + sum_j Z^j dM^j`, `Y_T = phi(X_T)`, driven by
//! the coordinate martingales of a simulated reflecting diffusion.
//!
//! The primary solver is the Picard iteration on the finite-variation part
//! `V_t = int_0^t f(s, Y_s, Z_s) ds`, where for a given `V` the pair
//! `(Y, Z)` comes from the martingale `N_t = E[xi + V_T | F_t]` via
//! `Y = N - V` and `dN = Z dM`. A regression-based backward-Euler recursion
//! serves as an independent cross-check.
//!
//! Sign convention: the semilinear problem `u_t = L u - f(t, u, grad u)`
//! corresponds to the generator `-f`; [`BsdeProblem::from_pde`] applies it.

mod chain;
mod driver;
mod engine;

use std::sync::Arc;

use serde::Serialize;

use crate::basis::RegressionBasis;
use crate::diffusion::{simulate, PathBundle, SimulationConfig};
use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::functions::TerminalFunction;
use crate::law::sample_uniform_in;
use crate::representation::{fit_conditional, ConditionalEstimate, RepresentationEstimate};
use crate::rng;

pub use chain::{ChainComparison, ChainSurrogate};
pub use driver::{BuiltinDriver, Driver, FnDriver, Negated};

use engine::{backward_euler, picard_iterate, picard_window, weighted_stats, BundleProjector, Projector};

/// Terminal-value problem on `[0, T]`.
#[derive(Clone)]
pub struct BsdeProblem {
    pub driver: Arc<dyn Driver>,
    pub terminal: TerminalFunction,
    pub horizon: f64,
    /// Declared Lipschitz constant `C_1` of the driver in `(y, z)`.
    pub lipschitz: f64,
}

impl std::fmt::Debug for BsdeProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BsdeProblem")
            .field("driver", &self.driver.name())
            .field("terminal", &self.terminal.name())
            .field("horizon", &self.horizon)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl BsdeProblem {
    /// Validates the problem and spot-checks the driver for finite output on
    /// 100 random `(t, x, y, z)` triples.
    pub fn new(driver: Arc<dyn Driver>, terminal: TerminalFunction, horizon: f64, lipschitz: f64, domain: &DomainSpec) -> Result<Self> {
        if !(lipschitz >= 0.0) || !lipschitz.is_finite() {
            return Err(Error::Input(format!("Lipschitz constant must be finite and nonnegative, got {lipschitz}")));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Input(format!("horizon must be positive, got {horizon}")));
        }
        if terminal.dim() == 0 {
            return Err(Error::Input("terminal function needs at least one component".into()));
        }
        for c in &terminal.components {
            c.validate(domain.dim())?;
        }
        let m = terminal.dim();
        let d = domain.dim();
        let mut r = rng::stream(0x5eed, "driver-check", 0);
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; m];
        let mut z = vec![0.0; m * d];
        let mut out = vec![0.0; m];
        let mut phi = vec![0.0; m];
        for _ in 0..100 {
            sample_uniform_in(domain, &mut r, &mut x);
            let t = horizon * crate::law::unit_uniform(&mut r);
            y.iter_mut().chain(z.iter_mut()).for_each(|v| *v = 20.0 * crate::law::unit_uniform(&mut r) - 10.0);
            driver.eval(t, &x, &y, &z, &mut out);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!(
                    "driver '{}' is not finite at t = {t}, x = {x:?}, y = {y:?}, z = {z:?}",
                    driver.name()
                )));
            }
            terminal.eval_into(&x, &mut phi);
            if phi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("terminal '{}' is not finite at {x:?}", terminal.name())));
            }
        }
        Ok(Self { driver, terminal, horizon, lipschitz })
    }

    /// Problem whose solution gives `u(T, .)` for `u_t = L u - f(t, u, grad u)`,
    /// `u(0, .) = phi`. The PDE nonlinearity is evaluated at PDE time `T - s`.
    pub fn from_pde(pde_f: Arc<dyn Driver>, terminal: TerminalFunction, horizon: f64, lipschitz: f64, domain: &DomainSpec) -> Result<Self> {
        let reversed: Arc<dyn Driver> = Arc::new(driver::TimeReversed { inner: pde_f, horizon });
        Self::new(Arc::new(Negated(reversed)), terminal, horizon, lipschitz, domain)
    }

    pub fn dim(&self) -> usize {
        self.terminal.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    Picard,
    BackwardEuler,
}

/// Per-step summary of a solution.
#[derive(Debug, Clone, Serialize)]
pub struct StepSummary {
    pub t: f64,
    pub mean_y: Vec<f64>,
    /// Ensemble mean of the Frobenius norm of `Z` (zero at the final time).
    pub mean_abs_z: f64,
    /// R^2 of the `Y` regression (absent at the final time).
    pub r2: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BsdeSolution {
    pub mode: SolverMode,
    pub y0: Vec<f64>,
    pub y0_std_err: Vec<f64>,
    /// Successive-difference norms `delta_k`; for split horizons the
    /// elementwise maximum over windows.
    pub trace: Vec<f64>,
    pub window_traces: Vec<Vec<f64>>,
    /// Window boundaries as stored-step indices.
    pub windows: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    /// False when the trace increases after the first iterate.
    pub trace_nonincreasing: bool,
    pub steps: Vec<StepSummary>,
    pub y_estimates: Vec<ConditionalEstimate>,
    pub z_estimate: Option<RepresentationEstimate>,
    pub bundle_fingerprint: u64,
    /// Per-path `Y` at each stored step (`(K + 1)` entries of `n x m`).
    #[serde(skip)]
    pub y_paths: Vec<Vec<f64>>,
    /// Per-path `Z` at each stored step (`K` entries of `n x m x d`).
    #[serde(skip)]
    pub z_paths: Vec<Vec<f64>>,
}

/// Iterate of the Picard map on a bundle (single window).
#[derive(Debug, Clone)]
pub struct PicardState {
    pub iteration: usize,
    /// `V` per path and stored step, path-major `n x (K + 1) x m`; zero at step 0.
    pub v: Vec<f64>,
    /// `Y(V)` of the previous `V` (empty for the initial state).
    pub y_paths: Vec<Vec<f64>>,
    pub z_paths: Vec<Vec<f64>>,
    pub y_estimates: Vec<ConditionalEstimate>,
    pub z_estimate: Option<RepresentationEstimate>,
    pub delta: f64,
}

impl PicardState {
    /// `V = 0`.
    pub fn initial(problem: &BsdeProblem, bundle: &PathBundle) -> Self {
        Self {
            iteration: 0,
            v: vec![0.0; bundle.n_paths() * (bundle.n_steps() + 1) * problem.dim()],
            y_paths: Vec::new(),
            z_paths: Vec::new(),
            y_estimates: Vec::new(),
            z_estimate: None,
            delta: f64::INFINITY,
        }
    }
}

fn check_inputs(problem: &BsdeProblem, bundle: &PathBundle, basis: &RegressionBasis) -> Result<()> {
    let t_end = *bundle.times().last().expect("nonempty grid");
    if (t_end - problem.horizon).abs() > 1e-12 * problem.horizon.max(1.0) {
        return Err(Error::Config(format!("problem horizon {} differs from bundle horizon {t_end}", problem.horizon)));
    }
    if basis.dim() != bundle.dim() {
        return Err(Error::Input("basis and bundle dimensions differ".into()));
    }
    for c in &problem.terminal.components {
        c.validate(bundle.dim())?;
    }
    Ok(())
}

fn terminal_values(problem: &BsdeProblem, bundle: &PathBundle) -> Result<Vec<f64>> {
    let m = problem.dim();
    let k = bundle.n_steps();
    let mut out = vec![0.0; bundle.n_paths() * m];
    for p in 0..bundle.n_paths() {
        problem.terminal.eval_into(bundle.state(p, k), &mut out[p * m..(p + 1) * m]);
    }
    if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("terminal function is not finite for path {}", bad / m)));
    }
    Ok(out)
}

fn assemble_estimates(basis: &RegressionBasis, d: usize, m: usize, z_est: Vec<Option<crate::representation::DensityStep>>) -> Option<RepresentationEstimate> {
    let steps: Option<Vec<_>> = z_est.into_iter().collect();
    steps.map(|steps| RepresentationEstimate { basis: basis.clone(), d, m, steps })
}

/// One Picard iteration over the whole horizon.
pub fn picard_step(problem: &BsdeProblem, bundle: &PathBundle, basis: &RegressionBasis, state: &PicardState) -> Result<PicardState> {
    check_inputs(problem, bundle, basis)?;
    let m = problem.dim();
    if state.v.len() != bundle.n_paths() * (bundle.n_steps() + 1) * m {
        return Err(Error::Input("Picard state does not match the bundle".into()));
    }
    let proj = BundleProjector { bundle, basis };
    let xi = terminal_values(problem, bundle)?;
    let it = picard_iterate(&proj, problem.driver.as_ref(), 0, bundle.n_steps(), &xi, m, &state.v)?;
    let y_estimates = it.y_est.into_iter().flatten().collect();
    Ok(PicardState {
        iteration: state.iteration + 1,
        v: it.v_new,
        y_paths: it.ys,
        z_paths: it.zs,
        y_estimates,
        z_estimate: assemble_estimates(basis, bundle.dim(), m, it.z_est),
        delta: it.delta,
    })
}

/// Window boundaries (stored-step indices) so that `C_1 * length <= 0.5`.
fn split_windows(times: &[f64], lipschitz: f64) -> Vec<usize> {
    let k = times.len() - 1;
    let horizon = times[k];
    if lipschitz * horizon <= 0.5 + 1e-12 {
        return vec![0, k];
    }
    let count = (lipschitz * horizon / 0.5 - 1e-12).ceil() as usize;
    let mut bounds = vec![0];
    for j in 1..count {
        let target = horizon * j as f64 / count as f64;
        let idx = times.partition_point(|t| *t < target).min(k);
        if idx > *bounds.last().expect("nonempty") && idx < k {
            bounds.push(idx);
        }
    }
    bounds.push(k);
    bounds
}

fn summaries<P: Projector>(proj: &P, m: usize, ys: &[Vec<f64>], zs: &[Vec<f64>], y_est: &[Option<ConditionalEstimate>]) -> Vec<StepSummary> {
    let d = proj.dim();
    let n = proj.n_paths();
    (0..ys.len())
        .map(|k| {
            let mut mean_y = vec![0.0; m];
            for p in 0..n {
                for c in 0..m {
                    mean_y[c] += proj.weight(p) * ys[k][p * m + c];
                }
            }
            let mean_abs_z = zs.get(k).map_or(0.0, |z| {
                (0..n).map(|p| proj.weight(p) * z[p * m * d..(p + 1) * m * d].iter().map(|v| v * v).sum::<f64>().sqrt()).sum()
            });
            let r2 = y_est.get(k).and_then(|e| e.as_ref().map(|e| e.r2.clone()));
            StepSummary { t: proj.time(k), mean_y, mean_abs_z, r2 }
        })
        .collect()
}

fn trace_nonincreasing(trace: &[f64]) -> bool {
    trace.windows(2).skip(1).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-300)
}

/// Picard solve, splitting `[0, T]` into windows of length at most
/// `0.5 / C_1` (chained backward) when `C_1 T > 0.5`.
pub(crate) fn solve_picard_generic<P: Projector>(proj: &P, problem: &BsdeProblem, xi: Vec<f64>, tol: f64, max_iter: usize) -> Result<PicardOutcome> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Input(format!("need tol > 0 and max_iter >= 1, got {tol} and {max_iter}")));
    }
    let m = problem.dim();
    let kk = proj.n_steps();
    let times: Vec<f64> = (0..=kk).map(|k| proj.time(k)).collect();
    let bounds = split_windows(&times, problem.lipschitz);
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); kk + 1];
    let mut zs: Vec<Vec<f64>> = vec![Vec::new(); kk];
    let mut y_est = vec![None; kk];
    let mut z_est = vec![None; kk];
    let mut window_traces = Vec::new();
    let mut converged = true;
    let mut terminal = xi;
    let mut targets0 = Vec::new();
    ys[kk] = terminal.clone();
    for w in (0..bounds.len() - 1).rev() {
        let (k0, k1) = (bounds[w], bounds[w + 1]);
        let sol = picard_window(proj, problem.driver.as_ref(), k0, k1, &terminal, m, tol, max_iter)?;
        converged &= sol.converged;
        window_traces.push(sol.trace);
        let it = sol.last;
        for (j, y) in it.ys.into_iter().enumerate().take(k1 - k0) {
            ys[k0 + j] = y;
        }
        for (j, z) in it.zs.into_iter().enumerate() {
            zs[k0 + j] = z;
        }
        for (j, e) in it.y_est.into_iter().enumerate() {
            y_est[k0 + j] = e;
        }
        for (j, e) in it.z_est.into_iter().enumerate() {
            z_est[k0 + j] = e;
        }
        terminal = ys[k0].clone();
        targets0 = it.targets0;
    }
    window_traces.reverse();
    let len = window_traces.iter().map(Vec::len).max().unwrap_or(0);
    let trace: Vec<f64> = (0..len)
        .map(|i| window_traces.iter().filter_map(|t| t.get(i)).cloned().fold(0.0, f64::max))
        .collect();
    let (y0, _) = weighted_stats(proj, &ys[0], m);
    let (_, y0_se) = weighted_stats(proj, &targets0, m);
    Ok(PicardOutcome { ys, zs, y_est, z_est, window_traces, trace, windows: bounds, converged, y0, y0_se })
}

pub(crate) struct PicardOutcome {
    pub ys: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
    pub y_est: Vec<Option<ConditionalEstimate>>,
    pub z_est: Vec<Option<crate::representation::DensityStep>>,
    pub window_traces: Vec<Vec<f64>>,
    pub trace: Vec<f64>,
    pub windows: Vec<usize>,
    pub converged: bool,
    pub y0: Vec<f64>,
    pub y0_se: Vec<f64>,
}

/// Solves by Picard iteration until `delta_k < tol` or `max_iter` rounds.
/// Non-convergence is reported in the result, not as an error.
pub fn solve_picard(problem: &BsdeProblem, bundle: &PathBundle, basis: &RegressionBasis, tol: f64, max_iter: usize) -> Result<BsdeSolution> {
    check_inputs(problem, bundle, basis)?;
    let proj = BundleProjector { bundle, basis };
    let xi = terminal_values(problem, bundle)?;
    let out = solve_picard_generic(&proj, problem, xi, tol, max_iter)?;
    let m = problem.dim();
    let steps = summaries(&proj, m, &out.ys, &out.zs, &out.y_est);
    Ok(BsdeSolution {
        mode: SolverMode::Picard,
        y0: out.y0,
        y0_std_err: out.y0_se,
        iterations: out.window_traces.iter().map(Vec::len).max().unwrap_or(0),
        trace_nonincreasing: out.window_traces.iter().all(|t| trace_nonincreasing(t)),
        trace: out.trace,
        window_traces: out.window_traces,
        windows: out.windows,
        converged: out.converged,
        steps,
        y_estimates: out.y_est.into_iter().flatten().collect(),
        z_estimate: assemble_estimates(basis, bundle.dim(), m, out.z_est),
        bundle_fingerprint: bundle.fingerprint(),
        y_paths: out.ys,
        z_paths: out.zs,
    })
}

/// Regression-based explicit backward recursion.
pub fn solve_backward_euler(problem: &BsdeProblem, bundle: &PathBundle, basis: &RegressionBasis) -> Result<BsdeSolution> {
    check_inputs(problem, bundle, basis)?;
    let proj = BundleProjector { bundle, basis };
    let xi = terminal_values(problem, bundle)?;
    let m = problem.dim();
    let sweep = backward_euler(&proj, problem.driver.as_ref(), &xi, m)?;
    let (y0, _) = weighted_stats(&proj, &sweep.ys[0], m);
    let (_, y0_se) = weighted_stats(&proj, &sweep.pathwise_total, m);
    let steps = summaries(&proj, m, &sweep.ys, &sweep.zs, &sweep.y_est);
    Ok(BsdeSolution {
        mode: SolverMode::BackwardEuler,
        y0,
        y0_std_err: y0_se,
        trace: Vec::new(),
        window_traces: Vec::new(),
        windows: vec![0, bundle.n_steps()],
        converged: true,
        iterations: 1,
        trace_nonincreasing: true,
        steps,
        y_estimates: sweep.y_est.into_iter().flatten().collect(),
        z_estimate: assemble_estimates(basis, bundle.dim(), m, sweep.z_est),
        bundle_fingerprint: bundle.fingerprint(),
        y_paths: sweep.ys,
        z_paths: sweep.zs,
    })
}

/// How the regression basis is chosen.
#[derive(Debug, Clone)]
pub enum BasisChoice {
    Fixed(RegressionBasis),
    /// Degree-3 polynomials, replaced by 8 cells per axis (d <= 2) when the
    /// polynomial fit of the terminal value at mid-horizon has R^2 < 0.5 and
    /// the piecewise-constant fit does better.
    Auto,
}

/// Resolves [`BasisChoice::Auto`] on a bundle.
pub fn select_basis(choice: &BasisChoice, problem: &BsdeProblem, bundle: &PathBundle) -> Result<RegressionBasis> {
    match choice {
        BasisChoice::Fixed(b) => Ok(b.clone()),
        BasisChoice::Auto => {
            let domain = &bundle.config().domain;
            let poly = RegressionBasis::polynomial(domain, 3);
            if domain.dim() > 2 {
                return Ok(poly);
            }
            let xi = terminal_values(problem, bundle)?;
            let m = problem.dim();
            let mid = bundle.n_steps() / 2;
            let first: Vec<f64> = (0..bundle.n_paths()).map(|p| xi[p * m]).collect();
            let rp = fit_conditional(bundle, mid, &first, &poly)?.r2[0];
            if rp >= 0.5 {
                return Ok(poly);
            }
            let pc = RegressionBasis::piecewise_constant(domain, 8)?;
            let rc = fit_conditional(bundle, mid, &first, &pc)?.r2[0];
            log::info!("polynomial fit R^2 = {rp:.3}, piecewise-constant R^2 = {rc:.3}");
            Ok(if rc > rp { pc } else { poly })
        }
    }
}

/// The stochastic solution `u(t, mu) = E[phi(X_t) + V_t]` of the
/// semilinear Neumann problem, with error diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct StochasticSolutionReport {
    pub t: f64,
    pub u: Vec<f64>,
    /// Monte Carlo standard error.
    pub std_err: Vec<f64>,
    /// Richardson estimate of the time-discretization error of the driver
    /// integral: the change in `u` when the stored step is doubled.
    pub discretization_error: Vec<f64>,
    /// `sqrt(std_err^2 + discretization_error^2)`.
    pub total_error: Vec<f64>,
    pub basis: String,
    pub n_paths: usize,
    /// Simulation step of the paths (before any recording stride).
    pub dt: f64,
    pub solution: BsdeSolution,
}

pub fn stochastic_solution(
    problem: &BsdeProblem,
    config: &SimulationConfig,
    basis: &BasisChoice,
    tol: f64,
    max_iter: usize,
) -> Result<StochasticSolutionReport> {
    if (problem.horizon - config.horizon).abs() > 1e-12 * config.horizon.max(1.0) {
        return Err(Error::Config(format!(
            "problem horizon {} differs from simulation horizon {}",
            problem.horizon, config.horizon
        )));
    }
    let bundle = simulate(config)?;
    stochastic_solution_on(problem, &bundle, basis, tol, max_iter)
}

/// As [`stochastic_solution`], on an existing bundle.
pub fn stochastic_solution_on(
    problem: &BsdeProblem,
    bundle: &PathBundle,
    basis: &BasisChoice,
    tol: f64,
    max_iter: usize,
) -> Result<StochasticSolutionReport> {
    let basis = select_basis(basis, problem, bundle)?;
    let solution = solve_picard(problem, bundle, &basis, tol, max_iter)?;
    let discretization_error = if problem.driver.is_state_free() && problem.driver.lipschitz() == Some(0.0) || bundle.n_steps() < 4 {
        // state-free drivers integrate identically on any grid
        vec![0.0; problem.dim()]
    } else {
        let coarse = bundle.coarsen(2)?;
        let c = solve_picard(problem, &coarse, &basis, tol, max_iter)?;
        solution.y0.iter().zip(&c.y0).map(|(a, b)| (a - b).abs()).collect()
    };
    let total_error = solution
        .y0_std_err
        .iter()
        .zip(&discretization_error)
        .map(|(s, e)| (s * s + e * e).sqrt())
        .collect();
    Ok(StochasticSolutionReport {
        t: problem.horizon,
        u: solution.y0.clone(),
        std_err: solution.y0_std_err.clone(),
        discretization_error,
        total_error,
        basis: basis.label(),
        n_paths: bundle.n_paths(),
        dt: bundle.config().dt,
        solution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_respect_the_contraction_bound() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.02).collect();
        assert_eq!(split_windows(&times, 0.25), vec![0, 100]);
        let w = split_windows(&times, 1.0);
        assert_eq!(w, vec![0, 25, 50, 75, 100]);
        for pair in w.windows(2) {
            assert!((times[pair[1]] - times[pair[0]]) * 1.0 <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn trace_monotonicity_flag() {
        assert!(trace_nonincreasing(&[0.1, 0.5, 0.2, 0.1]));
        assert!(!trace_nonincreasing(&[0.5, 0.2, 0.3]));
    }
}

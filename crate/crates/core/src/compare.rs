//! Pairs a stochastic solution `u(t, mu)` with the finite-difference oracle
//! integrated against the same initial law.

use serde::{Deserialize, Serialize};

use crate::bsde::StochasticSolutionReport;
use crate::error::{Error, Result};
use crate::law::InitialLaw;
use crate::pde::GridSolution;
use crate::DomainSpec;

/// Everything that must coincide for two solutions to be comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDescriptor {
    pub domain: String,
    pub field: String,
    pub driver: String,
    pub terminal: String,
    pub t: f64,
}

impl ProblemDescriptor {
    /// Human-readable list of differing fields (empty when they match).
    pub fn diff(&self, other: &ProblemDescriptor) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, a: &str, b: &str| {
            if a != b {
                out.push(format!("{name}: {a} vs {b}"));
            }
        };
        check("domain", &self.domain, &other.domain);
        check("field", &self.field, &other.field);
        check("driver", &self.driver, &other.driver);
        check("terminal", &self.terminal, &other.terminal);
        if (self.t - other.t).abs() > 1e-12 * self.t.abs().max(1.0) {
            out.push(format!("t: {} vs {}", self.t, other.t));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub problem: ProblemDescriptor,
    pub u_stochastic: f64,
    pub u_fd: f64,
    pub difference: f64,
    pub std_err: f64,
    pub discretization_error: f64,
    /// `|I_fine - I_coarse| / 3` from a second grid (0 without one).
    pub fd_error: f64,
    pub tolerance: f64,
    /// `max(3 * total stochastic error, tolerance) + fd_error`.
    pub budget: f64,
    pub dt_note: String,
    pub pass: bool,
}

/// `int u_fd(t, x) mu(dx)`: interpolation for point masses, trapezoid
/// quadrature against the normalized density otherwise.
pub fn integrate_against(solution: &GridSolution, t: f64, law: &InitialLaw, domain: &DomainSpec) -> Result<f64> {
    match law {
        InitialLaw::Point { x0 } => solution.evaluate(t, x0),
        _ => {
            let density = |x: &[f64]| law.density(domain, x).unwrap_or(0.0);
            let mass = solution.grid.trapezoid_weights().iter().enumerate().map(|(p, w)| w * density(&solution.grid.node(p))).sum::<f64>();
            if mass <= 0.0 {
                return Err(Error::Input("the initial law puts no mass on the grid".into()));
            }
            Ok(solution.integrate(t, Some(&density))? / mass)
        }
    }
}

/// Compares the first component of `stochastic` with the oracle. The
/// descriptors must agree; otherwise the differing fields are listed in an
/// input error.
#[allow(clippy::too_many_arguments)]
pub fn compare(
    stochastic_problem: &ProblemDescriptor,
    stochastic: &StochasticSolutionReport,
    fd_problem: &ProblemDescriptor,
    fd: &GridSolution,
    fd_coarse: Option<&GridSolution>,
    law: &InitialLaw,
    domain: &DomainSpec,
    tolerance: f64,
) -> Result<ComparisonReport> {
    let diff = stochastic_problem.diff(fd_problem);
    if !diff.is_empty() {
        return Err(Error::Input(format!("problem descriptors differ: {}", diff.join("; "))));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::Config(format!("tolerance must be non-negative, got {tolerance}")));
    }
    let t = fd_problem.t;
    let u_fd = integrate_against(fd, t, law, domain)?;
    let fd_error = match fd_coarse {
        Some(c) => (u_fd - integrate_against(c, t, law, domain)?).abs() / 3.0,
        None => 0.0,
    };
    let u_stochastic = stochastic.u[0];
    let difference = u_stochastic - u_fd;
    let budget = (3.0 * stochastic.total_error[0]).max(tolerance) + fd_error;
    let dt_note = format!(
        "paths use projected Euler steps of {}; the projection biases weak errors near the walls by O(sqrt(dt)), which is not part of the budget",
        stochastic.dt
    );
    Ok(ComparisonReport {
        problem: fd_problem.clone(),
        u_stochastic,
        u_fd,
        difference,
        std_err: stochastic.std_err[0],
        discretization_error: stochastic.discretization_error[0],
        fd_error,
        tolerance,
        budget,
        dt_note,
        pass: difference.abs() <= budget,
    })
}

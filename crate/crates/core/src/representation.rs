//! Least-squares Monte Carlo estimates of conditional expectations and of
//! martingale-representation densities.
//!
//! Conditional expectations given `F_t` are approximated by regressions on
//! basis functions of the current state `X_t`. Densities `F` in
//! `dN = sum_j F^j dM^j` are recovered step by step by regressing `dN_k` on
//! the products `phi_b(X_k) dM^j_k`.

use serde::Serialize;

use crate::basis::RegressionBasis;
use crate::diffusion::PathBundle;
use crate::error::{Error, Result};
use crate::linalg::{solve_normal_equations, NormalEquations};
use crate::par;

/// Regression of (possibly vector) targets on basis functions of `X_step`.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionalEstimate {
    pub step: usize,
    pub basis: RegressionBasis,
    /// Number of target components.
    pub m: usize,
    /// Row-major `size x m` coefficients.
    pub coef: Vec<f64>,
    /// In-sample R^2 per component (1 for zero-variance targets).
    pub r2: Vec<f64>,
    pub residual_variance: Vec<f64>,
    pub rank: usize,
    pub condition: f64,
    pub n: usize,
}

impl ConditionalEstimate {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut phi = vec![0.0; self.basis.size()];
        let mut out = vec![0.0; self.m];
        self.predict_into(x, &mut phi, &mut out);
        out
    }

    pub(crate) fn predict_into(&self, x: &[f64], phi: &mut [f64], out: &mut [f64]) {
        self.basis.eval_into(x, phi);
        combine(phi, &self.coef, self.m, out);
    }
}

fn combine(phi: &[f64], coef: &[f64], m: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (b, pb) in phi.iter().enumerate() {
        if *pb != 0.0 {
            for k in 0..m {
                out[k] += pb * coef[b * m + k];
            }
        }
    }
}

/// Fits targets (`n x m`, row-major) on the basis at the given states.
pub(crate) fn fit_states<'a, S>(
    n: usize,
    m: usize,
    basis: &RegressionBasis,
    step: usize,
    state: S,
    targets: &[f64],
) -> Result<ConditionalEstimate>
where
    S: Fn(usize) -> &'a [f64] + Sync + Send,
{
    let p = basis.size();
    if targets.len() != n * m {
        return Err(Error::Input(format!("expected {} targets, got {}", n * m, targets.len())));
    }
    if n < p {
        return Err(Error::IllPosed(format!(
            "{n} samples cannot determine {p} basis coefficients; use a larger ensemble or a smaller basis"
        )));
    }
    if let Some(bad) = targets.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite regression target for path {}", bad / m)));
    }
    let ne = NormalEquations::accumulate(n, p, m, |i, phi, y| {
        basis.eval_into(state(i), phi);
        y.copy_from_slice(&targets[i * m..(i + 1) * m]);
    });
    let ls = solve_normal_equations(&ne);
    if ls.rank < p {
        // a point-mass start makes step 0 rank one by construction
        let level = if step == 0 { log::Level::Debug } else { log::Level::Warn };
        log::log!(level, "regression at step {step} is rank deficient ({} of {p}); using the minimal-norm solution", ls.rank);
    }
    let means = par::sum_rows(n, m, |i, acc| {
        for k in 0..m {
            acc[k] += targets[i * m + k];
        }
    });
    let nf = n as f64;
    let means: Vec<f64> = means.iter().map(|s| s / nf).collect();
    let sums = par::sum_rows(n, 2 * m, |i, acc| {
        let mut phi = vec![0.0; p];
        let mut pred = vec![0.0; m];
        basis.eval_into(state(i), &mut phi);
        combine(&phi, &ls.coef, m, &mut pred);
        for k in 0..m {
            let y = targets[i * m + k];
            acc[k] += (y - pred[k]) * (y - pred[k]);
            acc[m + k] += (y - means[k]) * (y - means[k]);
        }
    });
    let mut r2 = vec![1.0; m];
    let mut residual_variance = vec![0.0; m];
    for k in 0..m {
        let (ssr, sst) = (sums[k], sums[m + k]);
        residual_variance[k] = ssr / nf;
        // zero-variance targets are fitted exactly by convention
        if sst > 1e-300 && sst > 1e-24 * means[k] * means[k] * nf {
            r2[k] = 1.0 - ssr / sst;
        }
    }
    Ok(ConditionalEstimate {
        step,
        basis: basis.clone(),
        m,
        coef: ls.coef,
        r2,
        residual_variance,
        rank: ls.rank,
        condition: ls.condition,
        n,
    })
}

/// Least-squares estimate of `E[target | X_step]`.
pub fn fit_conditional(bundle: &PathBundle, step: usize, targets: &[f64], basis: &RegressionBasis) -> Result<ConditionalEstimate> {
    fit_conditional_multi(bundle, step, targets, 1, basis)
}

/// Vector-target version of [`fit_conditional`]; `targets` is `n_paths x m`.
pub fn fit_conditional_multi(
    bundle: &PathBundle,
    step: usize,
    targets: &[f64],
    m: usize,
    basis: &RegressionBasis,
) -> Result<ConditionalEstimate> {
    if step > bundle.n_steps() {
        return Err(Error::Input(format!("step {step} outside [0, {}]", bundle.n_steps())));
    }
    check_basis(bundle, basis)?;
    fit_states(bundle.n_paths(), m, basis, step, |i| bundle.state(i, step), targets)
}

fn check_basis(bundle: &PathBundle, basis: &RegressionBasis) -> Result<()> {
    if basis.dim() != bundle.dim() {
        return Err(Error::Input(format!("basis dimension {} differs from bundle dimension {}", basis.dim(), bundle.dim())));
    }
    Ok(())
}

/// Densities fitted at one step.
#[derive(Debug, Clone, Serialize)]
pub struct DensityStep {
    pub step: usize,
    /// Coefficients, row `j * size + b` and column `k`: the weight of
    /// `phi_b` in `F^j` for target component `k`.
    pub coef: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Mean squared residual per target component.
    pub residual_variance: Vec<f64>,
    /// Sample variance of the target increments per component.
    pub target_variance: Vec<f64>,
    pub effective_samples: usize,
    pub condition: f64,
    pub rank: usize,
}

/// Per-step densities of a target martingale against the coordinate martingales.
#[derive(Debug, Clone, Serialize)]
pub struct RepresentationEstimate {
    pub basis: RegressionBasis,
    /// Dimension of the driving martingale.
    pub d: usize,
    /// Number of target components.
    pub m: usize,
    pub steps: Vec<DensityStep>,
}

impl RepresentationEstimate {
    /// `F(t_step, x)` as an `m x d` row-major matrix (a `d`-vector for scalar targets).
    pub fn evaluate(&self, step: usize, x: &[f64]) -> Result<Vec<f64>> {
        let s = self
            .steps
            .get(step)
            .ok_or_else(|| Error::Input(format!("step {step} outside [0, {})", self.steps.len())))?;
        let mut phi = vec![0.0; self.basis.size()];
        let mut out = vec![0.0; self.m * self.d];
        density_into(&self.basis, self.d, self.m, &s.coef, x, &mut phi, &mut out);
        Ok(out)
    }
}

pub fn evaluate_density(estimate: &RepresentationEstimate, step: usize, x: &[f64]) -> Result<Vec<f64>> {
    estimate.evaluate(step, x)
}

pub(crate) fn density_into(basis: &RegressionBasis, d: usize, m: usize, coef: &[f64], x: &[f64], phi: &mut [f64], out: &mut [f64]) {
    let p = basis.size();
    basis.eval_into(x, phi);
    out.fill(0.0);
    for k in 0..m {
        for j in 0..d {
            let mut s = 0.0;
            for b in 0..p {
                s += phi[b] * coef[(j * p + b) * m + k];
            }
            out[k * d + j] = s;
        }
    }
}

/// Regresses target increments (`n x m`) on `phi_b(state) dM^j`.
pub(crate) fn fit_density_step<'a, S, M>(
    n: usize,
    d: usize,
    m: usize,
    basis: &RegressionBasis,
    step: usize,
    state: S,
    mart: M,
    increments: &[f64],
) -> Result<DensityStep>
where
    S: Fn(usize) -> &'a [f64] + Sync + Send,
    M: Fn(usize) -> &'a [f64] + Sync + Send,
{
    let p = basis.size();
    let q = p * d;
    if increments.len() != n * m {
        return Err(Error::Input(format!("expected {} increments, got {}", n * m, increments.len())));
    }
    if n < q {
        return Err(Error::IllPosed(format!(
            "{n} samples cannot determine {q} density coefficients; use a larger ensemble or a smaller basis"
        )));
    }
    if increments.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite target increment at step {step}")));
    }
    // second moments of dM: singular only if a fails to be positive definite
    let mm = par::sum_rows(n, d * d, |i, acc| {
        let dm = mart(i);
        for a in 0..d {
            for b in 0..d {
                acc[a * d + b] += dm[a] * dm[b];
            }
        }
    });
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(d, d, &mm));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lmax > 0.0) || !(lmin > 1e-12 * lmax) {
        return Err(Error::IllPosed(format!(
            "martingale increments at step {step} have a singular second-moment matrix; \
             the coefficient matrix must be strictly positive definite for densities to be unique"
        )));
    }
    let ne = NormalEquations::accumulate(n, q, m, |i, row, y| {
        let dm = mart(i);
        let (phi, _) = row.split_at_mut(p);
        basis.eval_into(state(i), phi);
        for j in (1..d).rev() {
            for b in 0..p {
                row[j * p + b] = row[b] * dm[j];
            }
        }
        for b in 0..p {
            row[b] *= dm[0];
        }
        y.copy_from_slice(&increments[i * m..(i + 1) * m]);
    });
    let ls = solve_normal_equations(&ne);
    if ls.rank < q {
        let level = if step == 0 { log::Level::Debug } else { log::Level::Warn };
        log::log!(level, "density regression at step {step} is rank deficient ({} of {q}); using the minimal-norm solution", ls.rank);
    }
    let sums = par::sum_rows(n, 3 * m, |i, acc| {
        let dm = mart(i);
        let mut phi = vec![0.0; p];
        let mut f = vec![0.0; m * d];
        density_into(basis, d, m, &ls.coef, state(i), &mut phi, &mut f);
        for k in 0..m {
            let y = increments[i * m + k];
            let pred: f64 = (0..d).map(|j| f[k * d + j] * dm[j]).sum();
            acc[k] += (y - pred) * (y - pred);
            acc[m + k] += y;
            acc[2 * m + k] += y * y;
        }
    });
    let nf = n as f64;
    let residual_variance: Vec<f64> = (0..m).map(|k| sums[k] / nf).collect();
    let target_variance: Vec<f64> = (0..m)
        .map(|k| {
            let mean = sums[m + k] / nf;
            (sums[2 * m + k] / nf - mean * mean).max(0.0)
        })
        .collect();
    let dof = (n.saturating_sub(ls.rank)).max(1) as f64;
    let mut std_err = vec![0.0; q * m];
    for r in 0..q {
        for k in 0..m {
            let sigma2 = sums[k] / dof;
            std_err[r * m + k] = (sigma2 * ls.pinv[r * q + r]).max(0.0).sqrt();
        }
    }
    Ok(DensityStep {
        step,
        coef: ls.coef,
        std_err,
        residual_variance,
        target_variance,
        effective_samples: n,
        condition: ls.condition,
        rank: ls.rank,
    })
}

/// Recovers `F` from scalar target increments laid out `n_paths x K`.
pub fn extract_densities(bundle: &PathBundle, target_increments: &[f64], basis: &RegressionBasis) -> Result<RepresentationEstimate> {
    extract_densities_multi(bundle, target_increments, 1, basis)
}

/// Vector version of [`extract_densities`]; increments are `n_paths x K x m`.
pub fn extract_densities_multi(
    bundle: &PathBundle,
    target_increments: &[f64],
    m: usize,
    basis: &RegressionBasis,
) -> Result<RepresentationEstimate> {
    check_basis(bundle, basis)?;
    let n = bundle.n_paths();
    let k = bundle.n_steps();
    if target_increments.len() != n * k * m {
        return Err(Error::Input(format!(
            "expected {} target increments (n_paths x K x m), got {}",
            n * k * m,
            target_increments.len()
        )));
    }
    let steps = par::map_indexed(k, |s| {
        let inc: Vec<f64> = (0..n).flat_map(|p| target_increments[(p * k + s) * m..(p * k + s + 1) * m].iter().copied()).collect();
        fit_density_step(n, bundle.dim(), m, basis, s, |i| bundle.state(i, s), |i| bundle.mart_increment(i, s), &inc)
    });
    let steps = steps.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(RepresentationEstimate { basis: basis.clone(), d: bundle.dim(), m, steps })
}

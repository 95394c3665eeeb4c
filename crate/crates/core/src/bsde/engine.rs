//! Picard functional iteration and backward-Euler recursion, generic over
//! the conditional-expectation operator.

use crate::basis::RegressionBasis;
use crate::diffusion::PathBundle;
use crate::error::{Error, Result};
use crate::par;
use crate::representation::{density_into, fit_density_step, fit_states, ConditionalEstimate, DensityStep};

use super::driver::Driver;

/// Conditional expectations and density projections on a fixed ensemble.
pub(crate) trait Projector: Sync {
    fn n_paths(&self) -> usize;
    /// Dimension of the driving martingale.
    fn dim(&self) -> usize;
    fn n_steps(&self) -> usize;
    fn time(&self, k: usize) -> f64;
    fn state(&self, p: usize, k: usize) -> &[f64];
    /// Probability weight of path `p`; weights sum to one.
    fn weight(&self, p: usize) -> f64;
    /// True when conditional expectations are exact (no sampling error).
    fn exact(&self) -> bool;
    /// Per-path `E[target | F_step]` for `n x m` targets.
    fn conditional(&self, step: usize, targets: &[f64], m: usize) -> Result<(Vec<f64>, Option<ConditionalEstimate>)>;
    /// Per-path densities (`n x m x d`) of increments over `[t_step, t_step+1]`.
    fn densities(&self, step: usize, increments: &[f64], m: usize) -> Result<(Vec<f64>, Option<DensityStep>)>;
}

/// Least-squares projections on a simulated bundle.
pub(crate) struct BundleProjector<'a> {
    pub bundle: &'a PathBundle,
    pub basis: &'a RegressionBasis,
}

impl Projector for BundleProjector<'_> {
    fn n_paths(&self) -> usize {
        self.bundle.n_paths()
    }
    fn dim(&self) -> usize {
        self.bundle.dim()
    }
    fn n_steps(&self) -> usize {
        self.bundle.n_steps()
    }
    fn time(&self, k: usize) -> f64 {
        self.bundle.times()[k]
    }
    fn state(&self, p: usize, k: usize) -> &[f64] {
        self.bundle.state(p, k)
    }
    fn weight(&self, _p: usize) -> f64 {
        1.0 / self.bundle.n_paths() as f64
    }
    fn exact(&self) -> bool {
        false
    }

    fn conditional(&self, step: usize, targets: &[f64], m: usize) -> Result<(Vec<f64>, Option<ConditionalEstimate>)> {
        let b = self.bundle;
        let est = fit_states(b.n_paths(), m, self.basis, step, |i| b.state(i, step), targets)?;
        let fitted = per_path_blocks(b.n_paths(), m, |p, phi, out| est.predict_into(b.state(p, step), phi, out), self.basis.size());
        Ok((fitted, Some(est)))
    }

    fn densities(&self, step: usize, increments: &[f64], m: usize) -> Result<(Vec<f64>, Option<DensityStep>)> {
        let b = self.bundle;
        let d = b.dim();
        let ds = fit_density_step(b.n_paths(), d, m, self.basis, step, |i| b.state(i, step), |i| b.mart_increment(i, step), increments)?;
        let z = per_path_blocks(
            b.n_paths(),
            m * d,
            |p, phi, out| density_into(self.basis, d, m, &ds.coef, b.state(p, step), phi, out),
            self.basis.size(),
        );
        Ok((z, Some(ds)))
    }
}

/// Fills an `n x width` array path by path in parallel blocks.
fn per_path_blocks<F>(n: usize, width: usize, f: F, scratch: usize) -> Vec<f64>
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    let blocks = par::map_indexed(n.div_ceil(par::ROW_BLOCK), |b| {
        let lo = b * par::ROW_BLOCK;
        let hi = (lo + par::ROW_BLOCK).min(n);
        let mut out = vec![0.0; (hi - lo) * width];
        let mut phi = vec![0.0; scratch];
        for p in lo..hi {
            f(p, &mut phi, &mut out[(p - lo) * width..(p - lo + 1) * width]);
        }
        out
    });
    blocks.concat()
}

/// Result of one Picard iteration on the window `[k0, k1]`.
pub(crate) struct Iterate {
    /// `Y` per local step (`w + 1` entries of `n x m`).
    pub ys: Vec<Vec<f64>>,
    /// `Z` per local step (`w` entries of `n x m x d`).
    pub zs: Vec<Vec<f64>>,
    /// Updated finite-variation part, path-major `n x (w + 1) x m`.
    pub v_new: Vec<f64>,
    pub delta: f64,
    pub y_est: Vec<Option<ConditionalEstimate>>,
    pub z_est: Vec<Option<DensityStep>>,
    /// Step-0 regression targets `xi + V_w - V_0` (`n x m`).
    pub targets0: Vec<f64>,
}

/// One application of the Picard map: given `V`, computes
/// `N(V)_t = E[xi + V_T | F_t]`, `Y = N - V`, `Z` from the increments of `N`,
/// and the new `V_t = sum_{s < t} f(s, Y_s, Z_s) ds`.
///
/// `E[xi + V_T | F_t]` is computed as `V_t + E[xi + V_T - V_t | F_t]`; the
/// second term depends on the current state only, so a regression on the
/// state is consistent even though `V_t` itself is path-dependent.
pub(crate) fn picard_iterate<P: Projector>(
    proj: &P,
    driver: &dyn Driver,
    k0: usize,
    k1: usize,
    terminal: &[f64],
    m: usize,
    v_old: &[f64],
) -> Result<Iterate> {
    let n = proj.n_paths();
    let w = k1 - k0;
    let vidx = |p: usize, k: usize, c: usize| (p * (w + 1) + k) * m + c;

    let fits = par::map_indexed(w, |k| -> Result<(Vec<f64>, Option<ConditionalEstimate>, Vec<f64>)> {
        let mut targets = vec![0.0; n * m];
        for p in 0..n {
            for c in 0..m {
                targets[p * m + c] = terminal[p * m + c] + v_old[vidx(p, w, c)] - v_old[vidx(p, k, c)];
            }
        }
        let (y, est) = proj.conditional(k0 + k, &targets, m)?;
        Ok((y, est, if k == 0 { targets } else { Vec::new() }))
    });
    let mut ys = Vec::with_capacity(w + 1);
    let mut y_est = Vec::with_capacity(w);
    let mut targets0 = Vec::new();
    for (k, f) in fits.into_iter().enumerate() {
        let (y, est, t) = f?;
        if k == 0 {
            targets0 = t;
        }
        ys.push(y);
        y_est.push(est);
    }
    ys.push(terminal.to_vec());
    if w == 0 {
        targets0 = terminal.to_vec();
    }

    // N = Y + V; densities from the increments of N
    let zfits = par::map_indexed(w, |k| {
        let mut inc = vec![0.0; n * m];
        for p in 0..n {
            for c in 0..m {
                let n1 = ys[k + 1][p * m + c] + v_old[vidx(p, k + 1, c)];
                let n0 = ys[k][p * m + c] + v_old[vidx(p, k, c)];
                inc[p * m + c] = n1 - n0;
            }
        }
        proj.densities(k0 + k, &inc, m)
    });
    let mut zs = Vec::with_capacity(w);
    let mut z_est = Vec::with_capacity(w);
    for z in zfits {
        let (z, est) = z?;
        zs.push(z);
        z_est.push(est);
    }

    let v_new = accumulate_driver(proj, driver, k0, k1, m, &ys, &zs)?;
    let sq = par::sum_rows(n, w + 1, |p, acc| {
        let wp = proj.weight(p);
        for k in 0..=w {
            let mut s = 0.0;
            for c in 0..m {
                let diff = v_new[vidx(p, k, c)] - v_old[vidx(p, k, c)];
                s += diff * diff;
            }
            acc[k] += wp * s / m as f64;
        }
    });
    let delta = sq.iter().cloned().fold(0.0, f64::max).sqrt();
    Ok(Iterate { ys, zs, v_new, delta, y_est, z_est, targets0 })
}

/// `V_{k+1} = V_k + f(t_k, X_k, Y_k, Z_k) h_k` per path (left endpoint).
fn accumulate_driver<P: Projector>(
    proj: &P,
    driver: &dyn Driver,
    k0: usize,
    k1: usize,
    m: usize,
    ys: &[Vec<f64>],
    zs: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let n = proj.n_paths();
    let d = proj.dim();
    let w = k1 - k0;
    let width = (w + 1) * m;
    let blocks = par::map_indexed(n.div_ceil(par::ROW_BLOCK), |b| -> Result<Vec<f64>> {
        let lo = b * par::ROW_BLOCK;
        let hi = (lo + par::ROW_BLOCK).min(n);
        let mut out = vec![0.0; (hi - lo) * width];
        let mut f = vec![0.0; m];
        for p in lo..hi {
            let row = &mut out[(p - lo) * width..(p - lo + 1) * width];
            for k in 0..w {
                let t = proj.time(k0 + k);
                let h = proj.time(k0 + k + 1) - t;
                let y = &ys[k][p * m..(p + 1) * m];
                let z = &zs[k][p * m * d..(p + 1) * m * d];
                driver.eval(t, proj.state(p, k0 + k), y, z, &mut f);
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "driver returned a non-finite value at t = {t}, y = {y:?}, z = {z:?}"
                    )));
                }
                for c in 0..m {
                    row[(k + 1) * m + c] = row[k * m + c] + f[c] * h;
                }
            }
        }
        Ok(out)
    });
    let mut v = Vec::with_capacity(n * width);
    for b in blocks {
        v.extend(b?);
    }
    Ok(v)
}

/// Outcome of the Picard loop on one window.
pub(crate) struct WindowSolution {
    pub last: Iterate,
    pub trace: Vec<f64>,
    pub converged: bool,
}

pub(crate) fn picard_window<P: Projector>(
    proj: &P,
    driver: &dyn Driver,
    k0: usize,
    k1: usize,
    terminal: &[f64],
    m: usize,
    tol: f64,
    max_iter: usize,
) -> Result<WindowSolution> {
    let n = proj.n_paths();
    let mut v = vec![0.0; n * (k1 - k0 + 1) * m];
    let mut trace = Vec::new();
    let mut last = None;
    let mut converged = false;
    for _ in 0..max_iter {
        let it = picard_iterate(proj, driver, k0, k1, terminal, m, &v)?;
        trace.push(it.delta);
        let done = it.delta < tol;
        // keep the iterate whose V produced (Y, Z); the new V goes to the next round
        let mut it = it;
        std::mem::swap(&mut v, &mut it.v_new);
        last = Some(it);
        if done {
            converged = true;
            break;
        }
    }
    let mut last = last.expect("max_iter >= 1");
    last.v_new = v;
    Ok(WindowSolution { last, trace, converged })
}

/// Output of the explicit backward recursion.
pub(crate) struct BackwardSweep {
    pub ys: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
    pub y_est: Vec<Option<ConditionalEstimate>>,
    pub z_est: Vec<Option<DensityStep>>,
    /// `xi + sum_k f_k h_k` per path (`n x m`).
    pub pathwise_total: Vec<f64>,
}

/// `Y_K = xi`; `Yhat_k = E[Y_{k+1} | F_k]`, `Z_k` from `Y_{k+1} - Yhat_k`,
/// `Y_k = Yhat_k + f(t_k, X_k, Yhat_k, Z_k) h_k`.
pub(crate) fn backward_euler<P: Projector>(proj: &P, driver: &dyn Driver, terminal: &[f64], m: usize) -> Result<BackwardSweep> {
    let n = proj.n_paths();
    let d = proj.dim();
    let kk = proj.n_steps();
    let mut ys = vec![Vec::new(); kk + 1];
    let mut zs = vec![Vec::new(); kk];
    let mut y_est = vec![None; kk];
    let mut z_est = vec![None; kk];
    ys[kk] = terminal.to_vec();
    let mut total = terminal.to_vec();
    let mut f = vec![0.0; m];
    for k in (0..kk).rev() {
        let (yhat, est) = proj.conditional(k, &ys[k + 1], m)?;
        let inc: Vec<f64> = ys[k + 1].iter().zip(&yhat).map(|(a, b)| a - b).collect();
        let (z, zst) = proj.densities(k, &inc, m)?;
        let t = proj.time(k);
        let h = proj.time(k + 1) - t;
        let mut y = yhat.clone();
        for p in 0..n {
            let yp = &yhat[p * m..(p + 1) * m];
            let zp = &z[p * m * d..(p + 1) * m * d];
            driver.eval(t, proj.state(p, k), yp, zp, &mut f);
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("driver returned a non-finite value at t = {t}, y = {yp:?}, z = {zp:?}")));
            }
            for c in 0..m {
                y[p * m + c] += f[c] * h;
                total[p * m + c] += f[c] * h;
            }
        }
        ys[k] = y;
        zs[k] = z;
        y_est[k] = est;
        z_est[k] = zst;
    }
    Ok(BackwardSweep { ys, zs, y_est, z_est, pathwise_total: total })
}

/// Weighted mean and standard error of `n x m` per-path values.
pub(crate) fn weighted_stats<P: Projector>(proj: &P, values: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let n = proj.n_paths();
    let mut mean = vec![0.0; m];
    for p in 0..n {
        for c in 0..m {
            mean[c] += proj.weight(p) * values[p * m + c];
        }
    }
    if proj.exact() || n < 2 {
        return (mean, vec![0.0; m]);
    }
    let mut var = vec![0.0; m];
    for p in 0..n {
        for c in 0..m {
            let e = values[p * m + c] - mean[c];
            var[c] += e * e;
        }
    }
    let mut se: Vec<f64> = var.iter().map(|v| (v / (n as f64 - 1.0) / n as f64).sqrt()).collect();
    // identical targets carry no sampling error, whatever the rounding in the mean
    for c in 0..m {
        if (1..n).all(|p| values[p * m + c].to_bits() == values[c].to_bits()) {
            mean[c] = values[c];
            se[c] = 0.0;
        }
    }
    (mean, se)
}

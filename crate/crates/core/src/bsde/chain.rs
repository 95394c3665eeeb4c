//! Exact small-instance check: a three-state continuous-time Markov chain
//! observed on a uniform grid, with every path enumerated and weighted by
//! its probability. Conditional expectations are exact prefix averages, so
//! the Picard iteration can be compared with a brute-force backward
//! recursion on the transition matrix without any regression error.

use nalgebra::Matrix3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::representation::{ConditionalEstimate, DensityStep};

use super::engine::Projector;
use super::{solve_picard_generic, BsdeProblem};

/// Largest supported number of steps (`3^(K+1)` paths are enumerated).
pub const MAX_CHAIN_STEPS: usize = 11;

#[derive(Debug, Clone)]
pub struct ChainSurrogate {
    /// Generator rows sum to zero, off-diagonal entries are nonnegative.
    pub generator: [[f64; 3]; 3],
    /// Position of each state (the scalar "state" seen by drivers and terminals).
    pub values: [f64; 3],
    pub initial: [f64; 3],
    pub horizon: f64,
    pub steps: usize,
    transition: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainComparison {
    pub y0_picard: Vec<f64>,
    pub y0_brute_force: Vec<f64>,
    /// Largest deviation over all steps and reachable paths.
    pub max_abs_diff: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

impl ChainSurrogate {
    pub fn new(generator: [[f64; 3]; 3], values: [f64; 3], initial: [f64; 3], horizon: f64, steps: usize) -> Result<Self> {
        for (i, row) in generator.iter().enumerate() {
            if row.iter().any(|q| !q.is_finite()) || row.iter().sum::<f64>().abs() > 1e-12 {
                return Err(Error::Input(format!("generator row {i} must be finite and sum to zero")));
            }
            if (0..3).any(|j| j != i && row[j] < 0.0) {
                return Err(Error::Input(format!("generator row {i} has a negative off-diagonal rate")));
            }
        }
        if initial.iter().any(|p| !(*p >= 0.0)) || (initial.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Input("initial law must be a probability vector".into()));
        }
        if steps == 0 || steps > MAX_CHAIN_STEPS {
            return Err(Error::Input(format!("chain surrogate supports 1..={MAX_CHAIN_STEPS} steps, got {steps}")));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Input(format!("horizon must be positive, got {horizon}")));
        }
        let q = Matrix3::from_fn(|i, j| generator[i][j]);
        let p = (q * (horizon / steps as f64)).exp();
        let transition = std::array::from_fn(|i| std::array::from_fn(|j| p[(i, j)].max(0.0)));
        Ok(Self { generator, values, initial, horizon, steps, transition })
    }

    /// A fixed irreducible example on positions `0, 0.5, 1`.
    pub fn example(horizon: f64, steps: usize) -> Result<Self> {
        Self::new(
            [[-1.0, 0.7, 0.3], [0.5, -1.2, 0.7], [0.4, 0.8, -1.2]],
            [0.0, 0.5, 1.0],
            [0.2, 0.5, 0.3],
            horizon,
            steps,
        )
    }

    /// One-step transition matrix `exp(Q dt)`.
    pub fn transition(&self) -> [[f64; 3]; 3] {
        self.transition
    }

    fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Martingale increment `v(j) - E[v(X_{k+1}) | X_k = i]`.
    fn increment(&self, i: usize, j: usize) -> f64 {
        let mean: f64 = (0..3).map(|l| self.transition[i][l] * self.values[l]).sum();
        self.values[j] - mean
    }

    fn check_problem(&self, problem: &BsdeProblem) -> Result<()> {
        if (problem.horizon - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(Error::Config(format!("problem horizon {} differs from chain horizon {}", problem.horizon, self.horizon)));
        }
        for c in &problem.terminal.components {
            c.validate(1)?;
        }
        Ok(())
    }

    /// Markov backward recursion: `Y_k(i)` solves
    /// `y = sum_j P_ij Y_{k+1}(j) + f(t_k, v_i, y, z_i) dt` with
    /// `z_i = sum_j P_ij Y_{k+1}(j) dM(i, j) / sum_j P_ij dM(i, j)^2`.
    /// Returns `Y` per step as `3 x m` arrays.
    pub fn brute_force(&self, problem: &BsdeProblem) -> Result<Vec<Vec<f64>>> {
        self.check_problem(problem)?;
        let m = problem.dim();
        let dt = self.dt();
        let mut ys = vec![vec![0.0; 3 * m]; self.steps + 1];
        for i in 0..3 {
            problem.terminal.eval_into(&[self.values[i]], &mut ys[self.steps][i * m..(i + 1) * m]);
        }
        let mut f = vec![0.0; m];
        for k in (0..self.steps).rev() {
            let t = k as f64 * dt;
            for i in 0..3 {
                let p = &self.transition[i];
                let m2: f64 = (0..3).map(|j| p[j] * self.increment(i, j).powi(2)).sum();
                let mut yhat = vec![0.0; m];
                let mut z = vec![0.0; m];
                for c in 0..m {
                    yhat[c] = (0..3).map(|j| p[j] * ys[k + 1][j * m + c]).sum();
                    if m2 > 0.0 {
                        z[c] = (0..3).map(|j| p[j] * ys[k + 1][j * m + c] * self.increment(i, j)).sum::<f64>() / m2;
                    }
                }
                let x = [self.values[i]];
                let mut y = yhat.clone();
                let mut converged = false;
                for _ in 0..10_000 {
                    problem.driver.eval(t, &x, &y, &z, &mut f);
                    let mut change: f64 = 0.0;
                    for c in 0..m {
                        let next = yhat[c] + f[c] * dt;
                        change = change.max((next - y[c]).abs());
                        y[c] = next;
                    }
                    if !change.is_finite() {
                        return Err(Error::Numerical(format!("implicit step diverged at step {k}, state {i}")));
                    }
                    if change <= 1e-15 * (1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(Error::Numerical(format!("implicit step did not converge at step {k}, state {i}")));
                }
                ys[k][i * m..(i + 1) * m].copy_from_slice(&y);
            }
        }
        Ok(ys)
    }

    /// Runs the Picard solver on the enumerated paths and compares with
    /// [`ChainSurrogate::brute_force`].
    pub fn compare(&self, problem: &BsdeProblem, tol: f64, max_iter: usize) -> Result<ChainComparison> {
        let brute = self.brute_force(problem)?;
        let proj = ChainProjector::new(self);
        let m = problem.dim();
        let mut xi = vec![0.0; proj.n * m];
        for p in 0..proj.n {
            problem.terminal.eval_into(proj.state(p, self.steps), &mut xi[p * m..(p + 1) * m]);
        }
        let out = solve_picard_generic(&proj, problem, xi, tol, max_iter)?;
        let mut max_abs_diff: f64 = 0.0;
        for k in 0..=self.steps {
            for p in 0..proj.n {
                if proj.weights[p] == 0.0 {
                    continue;
                }
                let s = proj.state_index(p, k);
                for c in 0..m {
                    max_abs_diff = max_abs_diff.max((out.ys[k][p * m + c] - brute[k][s * m + c]).abs());
                }
            }
        }
        let y0_brute_force = (0..m).map(|c| (0..3).map(|i| self.initial[i] * brute[0][i * m + c]).sum()).collect();
        Ok(ChainComparison {
            y0_picard: out.y0,
            y0_brute_force,
            max_abs_diff,
            iterations: out.window_traces.iter().map(Vec::len).max().unwrap_or(0),
            converged: out.converged,
            trace: out.trace,
        })
    }
}

/// All `3^(K+1)` paths in lexicographic order, so paths sharing the first
/// `k + 1` states form contiguous blocks of length `3^(K-k)`.
struct ChainProjector<'a> {
    chain: &'a ChainSurrogate,
    n: usize,
    positions: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> ChainProjector<'a> {
    fn new(chain: &'a ChainSurrogate) -> Self {
        let kk = chain.steps;
        let n = 3usize.pow(kk as u32 + 1);
        let mut positions = vec![0.0; n * (kk + 1)];
        let mut weights = vec![0.0; n];
        for p in 0..n {
            let mut w = 1.0;
            let mut prev = 0;
            for k in 0..=kk {
                let s = (p / 3usize.pow((kk - k) as u32)) % 3;
                positions[p * (kk + 1) + k] = chain.values[s];
                w *= if k == 0 { chain.initial[s] } else { chain.transition[prev][s] };
                prev = s;
            }
            weights[p] = w;
        }
        // renormalize away rounding in the transition rows
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { chain, n, positions, weights }
    }

    fn state_index(&self, p: usize, k: usize) -> usize {
        (p / 3usize.pow((self.chain.steps - k) as u32)) % 3
    }

    fn block(&self, k: usize) -> usize {
        3usize.pow((self.chain.steps - k) as u32)
    }
}

impl Projector for ChainProjector<'_> {
    fn n_paths(&self) -> usize {
        self.n
    }
    fn dim(&self) -> usize {
        1
    }
    fn n_steps(&self) -> usize {
        self.chain.steps
    }
    fn time(&self, k: usize) -> f64 {
        if k == self.chain.steps {
            self.chain.horizon
        } else {
            k as f64 * self.chain.dt()
        }
    }
    fn state(&self, p: usize, k: usize) -> &[f64] {
        let i = p * (self.chain.steps + 1) + k;
        &self.positions[i..i + 1]
    }
    fn weight(&self, p: usize) -> f64 {
        self.weights[p]
    }
    fn exact(&self) -> bool {
        true
    }

    fn conditional(&self, step: usize, targets: &[f64], m: usize) -> Result<(Vec<f64>, Option<ConditionalEstimate>)> {
        let b = self.block(step);
        let mut out = vec![0.0; self.n * m];
        for g in (0..self.n).step_by(b) {
            let mass: f64 = self.weights[g..g + b].iter().sum();
            for c in 0..m {
                let mean = if mass > 0.0 {
                    (g..g + b).map(|p| self.weights[p] * targets[p * m + c]).sum::<f64>() / mass
                } else {
                    0.0
                };
                for p in g..g + b {
                    out[p * m + c] = mean;
                }
            }
        }
        Ok((out, None))
    }

    fn densities(&self, step: usize, increments: &[f64], m: usize) -> Result<(Vec<f64>, Option<DensityStep>)> {
        let b = self.block(step);
        let sub = self.block(step + 1);
        let mut out = vec![0.0; self.n * m];
        for g in (0..self.n).step_by(b) {
            let i = self.state_index(g, step);
            let mut m2 = 0.0;
            let mut cross = vec![0.0; m];
            for p in g..g + b {
                let dm = self.chain.increment(i, (p / sub) % 3);
                m2 += self.weights[p] * dm * dm;
                for c in 0..m {
                    cross[c] += self.weights[p] * increments[p * m + c] * dm;
                }
            }
            for c in 0..m {
                let z = if m2 > 0.0 { cross[c] / m2 } else { 0.0 };
                for p in g..g + b {
                    out[p * m + c] = z;
                }
            }
        }
        Ok((out, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_rows_are_stochastic() {
        let c = ChainSurrogate::example(1.0, 4).unwrap();
        for row in c.transition() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let proj = ChainProjector::new(&c);
        assert_eq!(proj.n, 243);
        assert!((proj.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_generators() {
        assert!(ChainSurrogate::new([[-1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [0.0; 3], [1.0, 0.0, 0.0], 1.0, 3).is_err());
        assert!(ChainSurrogate::new([[1.0, -1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], [0.0; 3], [1.0, 0.0, 0.0], 1.0, 3).is_err());
        assert!(ChainSurrogate::example(1.0, 0).is_err());
    }
}

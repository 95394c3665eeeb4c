//! Small dense kernels: Cholesky factorization and least squares through
//! accumulated normal equations.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::par;

/// In-place lower Cholesky factor of the row-major `d x d` matrix `a`.
///
/// On failure returns the order of the first leading minor that is not
/// positive definite (1-based).
pub(crate) fn cholesky_in_place(a: &mut [f64], d: usize) -> Result<(), usize> {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 0.0) {
            return Err(j + 1);
        }
        let ljj = s.sqrt();
        a[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut t = a[i * d + j];
            for k in 0..j {
                t -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = t / ljj;
        }
        for k in (j + 1)..d {
            a[j * d + k] = 0.0;
        }
    }
    Ok(())
}

/// Accumulated `Phi^T Phi` and `Phi^T Y` for a design with `p` columns and `m` targets.
#[derive(Debug, Clone)]
pub(crate) struct NormalEquations {
    pub p: usize,
    pub m: usize,
    pub n: usize,
    pub gram: Vec<f64>,
    pub cross: Vec<f64>,
}

impl NormalEquations {
    fn zeros(p: usize, m: usize) -> Self {
        Self { p, m, n: 0, gram: vec![0.0; p * p], cross: vec![0.0; p * m] }
    }

    fn add(&mut self, other: &NormalEquations) {
        self.n += other.n;
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            *a += b;
        }
    }

    /// Builds the normal equations row by row; `row(i, phi, y)` fills the
    /// design row and targets of observation `i`.
    pub fn accumulate<F>(n_rows: usize, p: usize, m: usize, row: F) -> Self
    where
        F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
    {
        let n_blocks = n_rows.div_ceil(par::ROW_BLOCK);
        let parts = par::map_indexed(n_blocks, |b| {
            let mut ne = NormalEquations::zeros(p, m);
            let mut phi = vec![0.0; p];
            let mut y = vec![0.0; m];
            let start = b * par::ROW_BLOCK;
            let end = (start + par::ROW_BLOCK).min(n_rows);
            for i in start..end {
                row(i, &mut phi, &mut y);
                for r in 0..p {
                    let pr = phi[r];
                    if pr == 0.0 {
                        continue;
                    }
                    let g = &mut ne.gram[r * p..(r + 1) * p];
                    for c in r..p {
                        g[c] += pr * phi[c];
                    }
                    let cr = &mut ne.cross[r * m..(r + 1) * m];
                    for (k, yk) in y.iter().enumerate() {
                        cr[k] += pr * yk;
                    }
                }
            }
            ne.n = end - start;
            ne
        });
        let mut total = NormalEquations::zeros(p, m);
        for part in &parts {
            total.add(part);
        }
        for r in 0..p {
            for c in 0..r {
                total.gram[r * p + c] = total.gram[c * p + r];
            }
        }
        total
    }
}

/// Minimal-norm least-squares solution (in Jacobi-scaled coordinates).
#[derive(Debug, Clone)]
pub(crate) struct LeastSquares {
    /// Row-major `p x m` coefficients.
    pub coef: Vec<f64>,
    /// Pseudo-inverse of the Gram matrix, used for coefficient standard errors.
    pub pinv: Vec<f64>,
    pub rank: usize,
    /// Eigenvalue ratio of the equilibrated Gram matrix (infinite when singular).
    pub condition: f64,
}

const RANK_CUTOFF: f64 = 1e-13;

pub(crate) fn solve_normal_equations(ne: &NormalEquations) -> LeastSquares {
    let p = ne.p;
    let m = ne.m;
    let scale: Vec<f64> = (0..p)
        .map(|i| {
            let g = ne.gram[i * p + i];
            if g > 0.0 { 1.0 / g.sqrt() } else { 0.0 }
        })
        .collect();
    let scaled = DMatrix::from_fn(p, p, |r, c| ne.gram[r * p + c] * scale[r] * scale[c]);
    let eig = SymmetricEigen::new(scaled);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut pinv_scaled = DMatrix::<f64>::zeros(p, p);
    let mut rank = 0;
    if lmax > 0.0 {
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > lmax * RANK_CUTOFF {
                rank += 1;
                let v = eig.eigenvectors.column(k);
                pinv_scaled += (v * v.transpose()) / lambda;
            }
        }
    }
    let condition = if lmin > 0.0 && lmax > 0.0 { lmax / lmin } else { f64::INFINITY };
    let mut pinv = vec![0.0; p * p];
    for r in 0..p {
        for c in 0..p {
            pinv[r * p + c] = pinv_scaled[(r, c)] * scale[r] * scale[c];
        }
    }
    let mut coef = vec![0.0; p * m];
    for r in 0..p {
        for k in 0..m {
            let mut s = 0.0;
            for c in 0..p {
                s += pinv[r * p + c] * ne.cross[c * m + k];
            }
            coef[r * m + k] = s;
        }
    }
    LeastSquares { coef, pinv, rank, condition }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_closed_form_2x2() {
        let mut a = vec![2.0, 1.0, 1.0, 2.0];
        cholesky_in_place(&mut a, 2).unwrap();
        let expected = [2f64.sqrt(), 0.0, 1.0 / 2f64.sqrt(), (1.5f64).sqrt()];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_reports_failing_minor() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        assert_eq!(cholesky_in_place(&mut a, 2), Err(2));
        let mut b = vec![-1.0, 0.0, 0.0, 1.0];
        assert_eq!(cholesky_in_place(&mut b, 2), Err(1));
    }

    #[test]
    fn least_squares_recovers_exact_line() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let ne = NormalEquations::accumulate(xs.len(), 2, 1, |i, phi, y| {
            phi[0] = 1.0;
            phi[1] = xs[i];
            y[0] = 3.0 - 2.0 * xs[i];
        });
        let ls = solve_normal_equations(&ne);
        assert_eq!(ls.rank, 2);
        assert!((ls.coef[0] - 3.0).abs() < 1e-12);
        assert!((ls.coef[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_design_predicts_mean() {
        let ys = [1.0, 2.0, 6.0];
        let ne = NormalEquations::accumulate(3, 2, 1, |i, phi, y| {
            phi[0] = 1.0;
            phi[1] = 0.5;
            y[0] = ys[i];
        });
        let ls = solve_normal_equations(&ne);
        assert_eq!(ls.rank, 1);
        let pred = ls.coef[0] + 0.5 * ls.coef[1];
        assert!((pred - 3.0).abs() < 1e-12);
    }
}

//! Uniform tensor grids over a box with multilinear interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid with `points[i]` nodes along axis `i`, boundary nodes included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != points.len() || lower.is_empty() {
            return Err(Error::Input("grid bounds and point counts must have equal, positive length".into()));
        }
        if points.iter().any(|n| *n < 2) {
            return Err(Error::Input("grids need at least two points per axis".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::Input("grid axis with lower >= upper".into()));
        }
        Ok(Self { lower, upper, points })
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.points[axis] - 1) as f64
    }

    /// Coordinate of node `i` along `axis`; the last node is exactly `upper`.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.points[axis] {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.spacing(axis)
        }
    }

    /// Multi-index of a flat node index (axis 0 varies slowest).
    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for axis in (0..self.dim()).rev() {
            out[axis] = flat % self.points[axis];
            flat /= self.points[axis];
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.points).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        self.multi_index(flat, &mut idx);
        idx.iter().enumerate().map(|(a, i)| self.coord(a, *i)).collect()
    }

    /// Calls `visit(flat_node, weight)` for the `2^d` multilinear weights of `x`.
    /// Coordinates outside the grid are clamped to it.
    pub fn for_each_weight(&self, x: &[f64], mut visit: impl FnMut(usize, f64)) {
        let d = self.dim();
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        debug_assert!(d <= 8);
        for a in 0..d {
            let n = self.points[a];
            let mut s = ((x[a] - self.lower[a]) / self.spacing(a)).clamp(0.0, (n - 1) as f64);
            // node-aligned points (up to rounding) reproduce node values exactly
            if (s - s.round()).abs() < 1e-10 {
                s = s.round();
            }
            let i = (s.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        let mut idx = [0usize; 8];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for a in 0..d {
                let up = (corner >> a) & 1 == 1;
                idx[a] = base[a] + usize::from(up);
                w *= if up { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                visit(self.flat_index(&idx[..d]), w);
            }
        }
    }

    /// Trapezoid-rule quadrature weights of the nodes.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut idx = vec![0; self.dim()];
        (0..self.len())
            .map(|flat| {
                self.multi_index(flat, &mut idx);
                idx.iter()
                    .enumerate()
                    .map(|(a, i)| {
                        let h = self.spacing(a);
                        if *i == 0 || *i + 1 == self.points[a] { 0.5 * h } else { h }
                    })
                    .product()
            })
            .collect()
    }
}

/// Node values on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Input(format!("grid has {} nodes but {} values were given", grid.len(), values.len())));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        let n = grid.len();
        Self { grid, values: vec![c; n] }
    }

    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        self.grid.for_each_weight(x, |i, w| s += w * self.values[i]);
        s
    }
}

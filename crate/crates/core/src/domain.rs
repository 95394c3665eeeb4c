//! Bounded convex domains and nearest-point projection onto their closure.
//!
//! Reflection at the boundary is discretized by projection: a proposal that
//! leaves the closed domain is replaced by the Euclidean-nearest point of it.
//! Boxes project by clamping; polytopes by Dykstra's alternating projection.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Iteration cap for polytope projection.
pub const PROJECTION_MAX_ITER: usize = 10_000;
/// Stopping tolerance for polytope projection.
pub const PROJECTION_TOL: f64 = 1e-12;

/// A half-space `{x : normal . x <= offset}` with unit outward normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Box,
    Polytope { halfspaces: Vec<HalfSpace>, center: Vec<f64> },
}

/// Serializable form of a domain, as read from and echoed to config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainDescriptor {
    Box { bounds: Vec<[f64; 2]> },
    Polytope { halfspaces: Vec<HalfSpace> },
}

impl DomainDescriptor {
    pub fn build(&self) -> Result<DomainSpec> {
        match self {
            DomainDescriptor::Box { bounds } => DomainSpec::new_box(
                bounds.iter().map(|b| b[0]).collect(),
                bounds.iter().map(|b| b[1]).collect(),
            ),
            DomainDescriptor::Polytope { halfspaces } => DomainSpec::polytope(halfspaces.clone()),
        }
    }
}

/// Closed bounded convex domain: an axis-aligned box or a convex polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    shape: Shape,
    /// Bounding box; equals the domain itself for boxes.
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl DomainSpec {
    pub fn new_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::Input("domain dimension must be at least 1".into()));
        }
        if lower.len() != upper.len() {
            return Err(Error::Input(format!(
                "box bounds have mismatched lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Input(format!("box axis {i}: need finite lower < upper, got [{lo}, {hi}]")));
            }
        }
        Ok(Self { shape: Shape::Box, lower, upper })
    }

    /// The unit cube `[0, 1]^d`.
    pub fn unit_box(dim: usize) -> Result<Self> {
        Self::new_box(vec![0.0; dim], vec![1.0; dim])
    }

    /// Intersection of half-spaces. Normals are rescaled to unit length.
    ///
    /// Boundedness is checked by maximizing `+-x_i` over the polytope and a
    /// nonempty interior by computing a Chebyshev center with positive radius.
    pub fn polytope(halfspaces: Vec<HalfSpace>) -> Result<Self> {
        let dim = halfspaces.first().map(|h| h.normal.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::Input("polytope needs at least one half-space of dimension >= 1".into()));
        }
        let mut unit = Vec::with_capacity(halfspaces.len());
        for (k, h) in halfspaces.into_iter().enumerate() {
            if h.normal.len() != dim {
                return Err(Error::Input(format!("half-space {k} has dimension {} (expected {dim})", h.normal.len())));
            }
            let norm = h.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() || !h.offset.is_finite() {
                return Err(Error::Input(format!("half-space {k} has a degenerate normal or offset")));
            }
            unit.push(HalfSpace { normal: h.normal.iter().map(|v| v / norm).collect(), offset: h.offset / norm });
        }

        let mut lower = vec![0.0; dim];
        let mut upper = vec![0.0; dim];
        for axis in 0..dim {
            for sign in [1.0, -1.0] {
                let mut lp = Problem::new(OptimizationDirection::Maximize);
                let vars: Vec<_> = (0..dim)
                    .map(|i| lp.add_var(if i == axis { sign } else { 0.0 }, (f64::NEG_INFINITY, f64::INFINITY)))
                    .collect();
                for h in &unit {
                    let expr: Vec<_> = vars.iter().copied().zip(h.normal.iter().copied()).collect();
                    lp.add_constraint(expr.as_slice(), ComparisonOp::Le, h.offset);
                }
                let value = match lp.solve() {
                    Ok(sol) => sol.objective(),
                    Err(minilp::Error::Unbounded) => {
                        return Err(Error::Input(format!(
                            "polytope is unbounded along {}e_{axis}",
                            if sign > 0.0 { "+" } else { "-" }
                        )))
                    }
                    Err(minilp::Error::Infeasible) => return Err(Error::Input("polytope is empty".into())),
                };
                if sign > 0.0 {
                    upper[axis] = value;
                } else {
                    lower[axis] = -value;
                }
            }
        }

        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let vars: Vec<_> = (0..dim).map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
        let radius = lp.add_var(1.0, (0.0, f64::INFINITY));
        for h in &unit {
            let mut expr: Vec<_> = vars.iter().copied().zip(h.normal.iter().copied()).collect();
            expr.push((radius, 1.0));
            lp.add_constraint(expr.as_slice(), ComparisonOp::Le, h.offset);
        }
        let sol = lp.solve().map_err(|e| Error::Input(format!("polytope interior check failed: {e}")))?;
        let r = *sol.var_value(radius);
        let scale = upper.iter().zip(&lower).map(|(u, l)| u - l).fold(0.0, f64::max);
        if !(r > 1e-12 * scale.max(1.0)) {
            return Err(Error::Input("polytope has empty interior".into()));
        }
        let center: Vec<f64> = vars.iter().map(|v| *sol.var_value(*v)).collect();
        let domain = Self { shape: Shape::Polytope { halfspaces: unit, center }, lower, upper };
        if let Shape::Polytope { center, .. } = &domain.shape {
            if !domain.contains_unchecked(center) {
                return Err(Error::Numerical("Chebyshev center of polytope is not contained".into()));
            }
        }
        Ok(domain)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_box(&self) -> bool {
        matches!(self.shape, Shape::Box)
    }

    pub fn bounding_box(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    /// Length of the bounding-box diagonal.
    pub fn diameter(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l) * (u - l)).sum::<f64>().sqrt()
    }

    /// A point strictly inside the domain.
    pub fn interior_point(&self) -> Vec<f64> {
        match &self.shape {
            Shape::Box => self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect(),
            Shape::Polytope { center, .. } => center.clone(),
        }
    }

    pub fn descriptor(&self) -> DomainDescriptor {
        match &self.shape {
            Shape::Box => DomainDescriptor::Box {
                bounds: self.lower.iter().zip(&self.upper).map(|(l, u)| [*l, *u]).collect(),
            },
            Shape::Polytope { halfspaces, .. } => DomainDescriptor::Polytope { halfspaces: halfspaces.clone() },
        }
    }

    fn check_dim(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.dim() {
            return Err(Error::Input(format!(
                "point has dimension {} but domain has dimension {}",
                point.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Closed-set membership with exact inequality checks.
    pub fn contains(&self, point: &[f64]) -> Result<bool> {
        self.check_dim(point)?;
        Ok(self.contains_unchecked(point))
    }

    pub(crate) fn contains_unchecked(&self, point: &[f64]) -> bool {
        match &self.shape {
            Shape::Box => point.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (l, u))| *l <= *x && *x <= *u),
            Shape::Polytope { halfspaces, .. } => halfspaces.iter().all(|h| dot(&h.normal, point) <= h.offset),
        }
    }

    /// Strict interior membership (every constraint slack).
    pub fn is_interior(&self, point: &[f64]) -> Result<bool> {
        self.check_dim(point)?;
        Ok(match &self.shape {
            Shape::Box => point.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (l, u))| *l < *x && *x < *u),
            Shape::Polytope { halfspaces, .. } => halfspaces.iter().all(|h| dot(&h.normal, point) < h.offset),
        })
    }

    /// Euclidean-nearest point of the closed domain.
    pub fn project(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(point)?;
        let mut out = point.to_vec();
        self.project_in_place(&mut out)?;
        Ok(out)
    }

    /// In-place projection; returns whether the point was moved.
    pub(crate) fn project_in_place(&self, x: &mut [f64]) -> Result<bool> {
        match &self.shape {
            Shape::Box => {
                let mut moved = false;
                for ((xi, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
                    if *xi < *l {
                        *xi = *l;
                        moved = true;
                    } else if *xi > *u {
                        *xi = *u;
                        moved = true;
                    } else if xi.is_nan() {
                        return Err(Error::Numerical("cannot project a NaN coordinate".into()));
                    }
                }
                Ok(moved)
            }
            Shape::Polytope { halfspaces, center } => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical("cannot project a non-finite point".into()));
                }
                if self.contains_unchecked(x) {
                    return Ok(false);
                }
                let projected = project_polytope(halfspaces, x)?;
                x.copy_from_slice(&projected);
                self.pull_inside(x, center);
                Ok(true)
            }
        }
    }

    /// Moves a point that violates the constraints by rounding error toward
    /// the interior center until it is contained exactly.
    fn pull_inside(&self, x: &mut [f64], center: &[f64]) {
        if self.contains_unchecked(x) {
            return;
        }
        let base = x.to_vec();
        let mut t = f64::EPSILON;
        while t < 1.0 {
            for i in 0..x.len() {
                x[i] = base[i] + t * (center[i] - base[i]);
            }
            if self.contains_unchecked(x) {
                return;
            }
            t *= 2.0;
        }
        x.copy_from_slice(center);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_violation(halfspaces: &[HalfSpace], x: &[f64]) -> f64 {
    halfspaces.iter().map(|h| dot(&h.normal, x) - h.offset).fold(0.0, f64::max)
}

fn project_polytope(halfspaces: &[HalfSpace], p: &[f64]) -> Result<Vec<f64>> {
    let d = p.len();
    let scale = 1.0 + p.iter().map(|v| v.abs()).fold(0.0, f64::max);

    // A single violated face whose projection lands inside is the answer.
    let mut best: Option<(f64, Vec<f64>)> = None;
    for h in halfspaces {
        let v = dot(&h.normal, p) - h.offset;
        if v > 0.0 {
            let y: Vec<f64> = p.iter().zip(&h.normal).map(|(pi, ni)| pi - v * ni).collect();
            if max_violation(halfspaces, &y) <= PROJECTION_TOL * scale && best.as_ref().map_or(true, |(bv, _)| v < *bv) {
                best = Some((v, y));
            }
        }
    }
    if let Some((_, y)) = best {
        return Ok(y);
    }

    // Dykstra's algorithm: alternating projections with correction terms.
    let m = halfspaces.len();
    let mut x = p.to_vec();
    let mut q = vec![0.0; m * d];
    let mut y = vec![0.0; d];
    let mut last_change = f64::INFINITY;
    for _ in 0..PROJECTION_MAX_ITER {
        let prev = x.clone();
        for (k, h) in halfspaces.iter().enumerate() {
            let qk = &mut q[k * d..(k + 1) * d];
            for i in 0..d {
                y[i] = x[i] + qk[i];
            }
            let v = dot(&h.normal, &y) - h.offset;
            for i in 0..d {
                let proj = if v > 0.0 { y[i] - v * h.normal[i] } else { y[i] };
                qk[i] = y[i] - proj;
                x[i] = proj;
            }
        }
        last_change = x.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if last_change < PROJECTION_TOL * scale && max_violation(halfspaces, &x) <= PROJECTION_TOL * scale {
            return Ok(x);
        }
    }
    Err(Error::Numerical(format!(
        "polytope projection did not converge in {PROJECTION_MAX_ITER} iterations \
         (last step {last_change:.3e}, max violation {:.3e}, point {p:?})",
        max_violation(halfspaces, &x)
    )))
}

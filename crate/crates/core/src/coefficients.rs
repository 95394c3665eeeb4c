//! Diffusion coefficient fields `a(x)`: evaluation, ellipticity checks,
//! Cholesky factors and the finite-difference divergence drift
//! `b^i = 1/2 sum_j d_j a^{ij}`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::law::sample_uniform_in;
use crate::linalg::cholesky_in_place;
use crate::rng;

/// A symmetric-matrix-valued function on the domain.
///
/// Implementations are called concurrently from simulation workers and must
/// be thread-safe.
pub trait CoefficientModel: Send + Sync {
    /// Writes `a(x)` into `out` as a row-major `d x d` matrix.
    fn eval_into(&self, x: &[f64], out: &mut [f64]);
}

impl<F> CoefficientModel for F
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self(x, out)
    }
}

/// Coefficient field with its declared ellipticity constant and
/// finite-difference step.
#[derive(Clone)]
pub struct CoefficientField {
    name: String,
    dim: usize,
    model: Arc<dyn CoefficientModel>,
    lambda: f64,
    derivative_step: f64,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("lambda", &self.lambda)
            .field("derivative_step", &self.derivative_step)
            .finish()
    }
}

impl CoefficientField {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        model: Arc<dyn CoefficientModel>,
        lambda: f64,
        derivative_step: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("coefficient field dimension must be >= 1".into()));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Input(format!("ellipticity constant must lie in (0, 1], got {lambda}")));
        }
        if !(derivative_step > 0.0) || !derivative_step.is_finite() {
            return Err(Error::Input(format!("derivative step must be positive, got {derivative_step}")));
        }
        Ok(Self { name: name.into(), dim, model, lambda, derivative_step })
    }

    /// Builds a built-in field by registry name: `identity`, `diag:<c1,...,cd>`,
    /// `smooth-aniso` or `checkerboard:<lambda>`. The derivative step defaults
    /// to `1e-4` times the domain diameter.
    pub fn from_name(name: &str, domain: &DomainSpec) -> Result<Self> {
        let d = domain.dim();
        let step = 1e-4 * domain.diameter();
        let (kind, arg) = match name.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (name.trim(), None),
        };
        match (kind, arg) {
            ("identity", None) => Self::identity(d, step),
            ("diag", Some(list)) => {
                let diag = list
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Input(format!("bad diag field '{name}': {e}")))?;
                if diag.len() != d {
                    return Err(Error::Input(format!("diag field has {} entries for dimension {d}", diag.len())));
                }
                Self::diagonal(diag, step)
            }
            ("smooth-aniso", None) => Self::smooth_aniso(d, step),
            ("checkerboard", Some(l)) => {
                let lambda = l.parse::<f64>().map_err(|e| Error::Input(format!("bad checkerboard '{name}': {e}")))?;
                Self::checkerboard(d, lambda, step)
            }
            _ => Err(Error::Input(format!(
                "unknown coefficient field '{name}' (expected identity, diag:<c1,...>, smooth-aniso, checkerboard:<lambda>)"
            ))),
        }
    }

    pub fn identity(dim: usize, step: f64) -> Result<Self> {
        let model = move |_x: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = 1.0;
            }
        };
        Self::new("identity", dim, Arc::new(model), 1.0, step)
    }

    /// Constant diagonal field; the declared constant is the tightest admissible one.
    pub fn diagonal(diag: Vec<f64>, step: f64) -> Result<Self> {
        if diag.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Input(format!("diag entries must be positive, got {diag:?}")));
        }
        let dim = diag.len();
        let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = diag.iter().cloned().fold(0.0, f64::max);
        let lambda = lo.min(1.0 / hi).min(1.0);
        let name = format!("diag:{}", diag.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        let model = move |_x: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = diag[i];
            }
        };
        Self::new(name, dim, Arc::new(model), lambda, step)
    }

    /// `a(x) = (1 + sin(2 pi x_1) / 2) I`.
    pub fn smooth_aniso(dim: usize, step: f64) -> Result<Self> {
        let model = move |x: &[f64], out: &mut [f64]| {
            let c = 1.0 + 0.5 * (2.0 * PI * x[0]).sin();
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = c;
            }
        };
        Self::new("smooth-aniso", dim, Arc::new(model), 0.5, step)
    }

    /// Piecewise-constant `lambda I` / `lambda^-1 I` on a checkerboard of
    /// 0.25-wide cells.
    pub fn checkerboard(dim: usize, lambda: f64, step: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Input(format!("checkerboard lambda must lie in (0, 1], got {lambda}")));
        }
        let model = move |x: &[f64], out: &mut [f64]| {
            let parity: i64 = x.iter().map(|v| (v * 4.0).floor() as i64).sum();
            let c = if parity.rem_euclid(2) == 0 { lambda } else { 1.0 / lambda };
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = c;
            }
        };
        Self::new(format!("checkerboard:{lambda}"), dim, Arc::new(model), lambda, step)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn derivative_step(&self) -> f64 {
        self.derivative_step
    }

    pub fn with_derivative_step(mut self, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::Input(format!("derivative step must be positive, got {step}")));
        }
        self.derivative_step = step;
        Ok(self)
    }

    /// Symmetrized `a(x)`, row-major.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Input(format!("point has dimension {}, field has {}", x.len(), self.dim)));
        }
        let mut out = vec![0.0; self.dim * self.dim];
        self.evaluate_into(x, &mut out)?;
        Ok(out)
    }

    pub(crate) fn evaluate_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        self.model.eval_into(x, out);
        for i in 0..d {
            for j in (i + 1)..d {
                let s = 0.5 * (out[i * d + j] + out[j * d + i]);
                out[i * d + j] = s;
                out[j * d + i] = s;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("coefficient field '{}' is not finite at {x:?}", self.name)));
        }
        Ok(())
    }

    /// Finite-difference approximation of `1/2 sum_j d_j a^{ij}(x)`.
    pub fn divergence_drift(&self, domain: &DomainSpec, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim || domain.dim() != self.dim {
            return Err(Error::Input("dimension mismatch between point, field and domain".into()));
        }
        let mut ws = DriftWorkspace::new(self.dim);
        let mut out = vec![0.0; self.dim];
        self.drift_into(domain, x, &mut ws, &mut out)?;
        Ok(out)
    }

    pub(crate) fn drift_into(
        &self,
        domain: &DomainSpec,
        x: &[f64],
        ws: &mut DriftWorkspace,
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.dim;
        out.fill(0.0);
        for j in 0..d {
            let mut h = self.derivative_step;
            let (mut lo, mut hi);
            let mut tries = 0;
            loop {
                ws.fwd.copy_from_slice(x);
                ws.bwd.copy_from_slice(x);
                ws.fwd[j] = x[j] + h;
                ws.bwd[j] = x[j] - h;
                hi = x[j] + h;
                lo = x[j] - h;
                if !domain.contains_unchecked(&ws.fwd) {
                    ws.fwd[j] = x[j];
                    hi = x[j];
                }
                if !domain.contains_unchecked(&ws.bwd) {
                    ws.bwd[j] = x[j];
                    lo = x[j];
                }
                if hi > lo || tries > 60 {
                    break;
                }
                h *= 0.5;
                tries += 1;
            }
            if !(hi > lo) {
                return Err(Error::Numerical(format!("no finite-difference stencil fits the domain at {x:?}")));
            }
            self.evaluate_into(&ws.fwd, &mut ws.a_fwd)?;
            self.evaluate_into(&ws.bwd, &mut ws.a_bwd)?;
            let width = hi - lo;
            for i in 0..d {
                out[i] += 0.5 * (ws.a_fwd[i * d + j] - ws.a_bwd[i * d + j]) / width;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("divergence drift is not finite at {x:?}")));
        }
        Ok(())
    }
}

pub(crate) struct DriftWorkspace {
    fwd: Vec<f64>,
    bwd: Vec<f64>,
    a_fwd: Vec<f64>,
    a_bwd: Vec<f64>,
}

impl DriftWorkspace {
    pub(crate) fn new(d: usize) -> Self {
        Self { fwd: vec![0.0; d], bwd: vec![0.0; d], a_fwd: vec![0.0; d * d], a_bwd: vec![0.0; d * d] }
    }
}

/// Lower-triangular `L` with `L L^T = matrix` (row-major, `d x d`).
pub fn factor(matrix: &[f64], dim: usize) -> Result<Vec<f64>> {
    if matrix.len() != dim * dim {
        return Err(Error::Input(format!("matrix has {} entries, expected {}", matrix.len(), dim * dim)));
    }
    let mut l = matrix.to_vec();
    cholesky_in_place(&mut l, dim).map_err(|k| {
        Error::Ellipticity(format!("leading minor of order {k} is not positive definite in {matrix:?}"))
    })?;
    Ok(l)
}

/// Worst sampled point of an ellipticity check.
#[derive(Debug, Clone, Serialize)]
pub struct EllipticityWitness {
    pub point: Vec<f64>,
    pub direction: Vec<f64>,
    pub ratio: f64,
}

/// Sampled bounds of `xi^T a(x) xi / |xi|^2` against the declared constant.
#[derive(Debug, Clone, Serialize)]
pub struct EllipticityReport {
    pub n_samples: usize,
    pub lambda: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub pass: bool,
    /// The sample that violates the bounds the most, or the minimizing sample
    /// when the check passes.
    pub witness: EllipticityWitness,
}

pub fn check_ellipticity(
    field: &CoefficientField,
    domain: &DomainSpec,
    n_samples: usize,
    seed: u64,
) -> Result<EllipticityReport> {
    if n_samples == 0 {
        return Err(Error::Input("n_samples must be at least 1".into()));
    }
    let d = field.dim();
    if domain.dim() != d {
        return Err(Error::Input("field and domain dimensions differ".into()));
    }
    let mut rng: ChaCha8Rng = rng::stream(seed, "ellipticity", 0);
    let mut x = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut a = vec![0.0; d * d];
    let lambda = field.lambda();
    let (mut min_ratio, mut max_ratio) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut worst: Option<(f64, EllipticityWitness)> = None;
    let mut argmin: Option<EllipticityWitness> = None;
    for _ in 0..n_samples {
        sample_uniform_in(domain, &mut rng, &mut x);
        let mut norm2 = 0.0;
        while norm2 == 0.0 {
            for v in xi.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            norm2 = xi.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = norm2.sqrt();
        xi.iter_mut().for_each(|v| *v /= norm);
        field.evaluate_into(&x, &mut a)?;
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += xi[i] * a[i * d + j] * xi[j];
            }
        }
        let witness = || EllipticityWitness { point: x.clone(), direction: xi.clone(), ratio: q };
        if q < min_ratio {
            min_ratio = q;
            argmin = Some(witness());
        }
        max_ratio = max_ratio.max(q);
        // relative slack of a few ulps so exact bounds are not failed by rounding
        let excess = (lambda * (1.0 - 1e-12) - q).max(q - (1.0 + 1e-12) / lambda);
        if excess > 0.0 && worst.as_ref().map_or(true, |(e, _)| excess > *e) {
            worst = Some((excess, witness()));
        }
    }
    let pass = worst.is_none();
    let witness = match worst {
        Some((_, w)) => w,
        None => argmin.expect("at least one sample"),
    };
    Ok(EllipticityReport { n_samples, lambda, min_ratio, max_ratio, pass, witness })
}

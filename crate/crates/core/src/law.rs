//! Initial laws for simulated paths: interior point masses, the uniform law
//! and products of piecewise-linear coordinate densities.

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::domain::DomainSpec;
use crate::error::{Error, Result};

/// Tolerance on the trapezoid-rule mass of a density table.
pub const DENSITY_MASS_TOL: f64 = 1e-8;

/// Uniform draw from `[0, 1)` with 53 random bits.
pub(crate) fn unit_uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform sample from the domain by rejection from its bounding box.
pub(crate) fn sample_uniform_in<R: RngCore + ?Sized>(domain: &DomainSpec, rng: &mut R, out: &mut [f64]) {
    let (lo, hi) = domain.bounding_box();
    loop {
        for i in 0..out.len() {
            out[i] = lo[i] + (hi[i] - lo[i]) * unit_uniform(rng);
        }
        if domain.contains_unchecked(out) {
            return;
        }
    }
}

/// Piecewise-linear density of one coordinate on the nodes `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTable {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl DensityTable {
    fn validate(&self, axis: usize, lo: f64, hi: f64) -> Result<()> {
        let n = self.x.len();
        if n < 2 || self.density.len() != n {
            return Err(Error::Input(format!(
                "density table {axis} needs at least two nodes and matching lengths"
            )));
        }
        if self.x.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Input(format!("density table {axis}: nodes must be strictly increasing")));
        }
        if self.x[0] < lo || self.x[n - 1] > hi {
            return Err(Error::Input(format!(
                "density table {axis}: support [{}, {}] leaves the domain range [{lo}, {hi}]",
                self.x[0],
                self.x[n - 1]
            )));
        }
        if self.density.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Input(format!("density table {axis}: values must be finite and nonnegative")));
        }
        let mass = self.mass();
        if (mass - 1.0).abs() > DENSITY_MASS_TOL {
            return Err(Error::Input(format!("density table {axis} integrates to {mass}, expected 1")));
        }
        Ok(())
    }

    fn mass(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, p)| 0.5 * (p[0] + p[1]) * (x[1] - x[0]))
            .sum()
    }

    /// Linear interpolation of the density, zero outside the support.
    pub fn value(&self, v: f64) -> f64 {
        let n = self.x.len();
        if v < self.x[0] || v > self.x[n - 1] {
            return 0.0;
        }
        let k = self.x.partition_point(|node| *node <= v).clamp(1, n - 1);
        let (x0, x1) = (self.x[k - 1], self.x[k]);
        let s = (v - x0) / (x1 - x0);
        self.density[k - 1] * (1.0 - s) + self.density[k] * s
    }

    /// Inverse-CDF sample.
    fn sample(&self, u: f64) -> f64 {
        let masses: Vec<f64> = self
            .x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, p)| 0.5 * (p[0] + p[1]) * (x[1] - x[0]))
            .collect();
        let total: f64 = masses.iter().sum();
        let mut r = u * total;
        let mut seg = masses.len() - 1;
        for (k, m) in masses.iter().enumerate() {
            if r < *m {
                seg = k;
                break;
            }
            r -= m;
        }
        while masses[seg] == 0.0 && seg > 0 {
            seg -= 1;
        }
        let (x0, x1) = (self.x[seg], self.x[seg + 1]);
        let (p0, p1) = (self.density[seg], self.density[seg + 1]);
        let w = x1 - x0;
        // solve p0 s + (p1 - p0) s^2 / (2 w) = r on [0, w]
        let k = (p1 - p0) / w;
        let disc = (p0 * p0 + 2.0 * k * r).max(0.0);
        let denom = p0 + disc.sqrt();
        let s = if denom > 0.0 { 2.0 * r / denom } else { 0.0 };
        (x0 + s.clamp(0.0, w)).min(x1)
    }
}

/// Law of the starting point `X_0`.
///
/// Point masses must sit strictly inside the domain; boundary starts are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Point { x0: Vec<f64> },
    Uniform,
    /// Independent coordinates; on non-box domains the product law is
    /// conditioned on the domain by rejection.
    Product { tables: Vec<DensityTable> },
}

impl InitialLaw {
    pub fn point(x0: Vec<f64>) -> Self {
        InitialLaw::Point { x0 }
    }

    pub fn validate(&self, domain: &DomainSpec) -> Result<()> {
        match self {
            InitialLaw::Point { x0 } => {
                if !domain.contains(x0)? {
                    return Err(Error::Input(format!("point mass {x0:?} lies outside the domain")));
                }
                if !domain.is_interior(x0)? {
                    return Err(Error::Input(format!(
                        "point mass {x0:?} lies on the boundary; only interior starting points are admitted"
                    )));
                }
                Ok(())
            }
            InitialLaw::Uniform => Ok(()),
            InitialLaw::Product { tables } => {
                if tables.len() != domain.dim() {
                    return Err(Error::Input(format!(
                        "product law has {} tables for dimension {}",
                        tables.len(),
                        domain.dim()
                    )));
                }
                let (lo, hi) = domain.bounding_box();
                for (i, t) in tables.iter().enumerate() {
                    t.validate(i, lo[i], hi[i])?;
                }
                Ok(())
            }
        }
    }

    pub fn is_point(&self) -> bool {
        matches!(self, InitialLaw::Point { .. })
    }

    /// Writes a sample into `out`. The law must have been validated.
    pub(crate) fn sample<R: RngCore + ?Sized>(&self, domain: &DomainSpec, rng: &mut R, out: &mut [f64]) {
        match self {
            InitialLaw::Point { x0 } => out.copy_from_slice(x0),
            InitialLaw::Uniform => sample_uniform_in(domain, rng, out),
            InitialLaw::Product { tables } => loop {
                for (o, t) in out.iter_mut().zip(tables) {
                    *o = t.sample(unit_uniform(rng));
                }
                if domain.contains_unchecked(out) {
                    return;
                }
            },
        }
    }

    /// Unnormalized Lebesgue density at `x` (None for point masses).
    pub fn density(&self, domain: &DomainSpec, x: &[f64]) -> Option<f64> {
        match self {
            InitialLaw::Point { .. } => None,
            InitialLaw::Uniform => Some(if domain.contains_unchecked(x) { 1.0 } else { 0.0 }),
            InitialLaw::Product { tables } => Some(if domain.contains_unchecked(x) {
                tables.iter().zip(x).map(|(t, v)| t.value(*v)).product()
            } else {
                0.0
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn point_mass_must_be_interior() {
        let d = DomainSpec::unit_box(1).unwrap();
        assert!(InitialLaw::point(vec![0.5]).validate(&d).is_ok());
        assert!(InitialLaw::point(vec![1.0]).validate(&d).is_err());
        assert!(InitialLaw::point(vec![1.5]).validate(&d).is_err());
    }

    #[test]
    fn density_tables_must_integrate_to_one() {
        let d = DomainSpec::unit_box(1).unwrap();
        let good = InitialLaw::Product { tables: vec![DensityTable { x: vec![0.0, 1.0], density: vec![0.0, 2.0] }] };
        assert!(good.validate(&d).is_ok());
        let bad = InitialLaw::Product { tables: vec![DensityTable { x: vec![0.0, 1.0], density: vec![1.0, 2.0] }] };
        assert!(bad.validate(&d).is_err());
        let neg = InitialLaw::Product { tables: vec![DensityTable { x: vec![0.0, 0.5, 1.0], density: vec![2.0, -0.5, 1.0] }] };
        assert!(neg.validate(&d).is_err());
    }

    #[test]
    fn inverse_cdf_of_triangular_density() {
        // density 2x on [0,1]: CDF x^2, so the sample of u is sqrt(u)
        let t = DensityTable { x: vec![0.0, 1.0], density: vec![0.0, 2.0] };
        for u in [0.0, 0.01, 0.25, 0.5, 0.81, 0.999] {
            assert!((t.sample(u) - f64::sqrt(u)).abs() < 1e-12, "u = {u}");
        }
        assert_eq!(t.value(0.25), 0.5);
    }

    #[test]
    fn uniform_samples_stay_inside_polytope() {
        use crate::domain::HalfSpace;
        let hs = |n: [f64; 2], b: f64| HalfSpace { normal: n.to_vec(), offset: b };
        let d = DomainSpec::polytope(vec![hs([-1.0, 0.0], 0.0), hs([0.0, -1.0], 0.0), hs([1.0, 1.0], 1.0)]).unwrap();
        let mut r = rng::stream(1, "t", 0);
        let mut x = [0.0; 2];
        let mut mean = [0.0; 2];
        for _ in 0..20_000 {
            InitialLaw::Uniform.sample(&d, &mut r, &mut x);
            assert!(d.contains(&x).unwrap());
            mean[0] += x[0] / 20_000.0;
            mean[1] += x[1] / 20_000.0;
        }
        // centroid of the triangle is (1/3, 1/3)
        assert!((mean[0] - 1.0 / 3.0).abs() < 0.01 && (mean[1] - 1.0 / 3.0).abs() < 0.01);
    }
}

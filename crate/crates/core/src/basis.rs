//! Regression bases on the domain's bounding box.
//!
//! Polynomial bases use tensor Legendre polynomials of total degree at most
//! `p` in coordinates rescaled to `[-1, 1]`, listed by increasing total
//! degree so lower-degree families are prefixes of higher ones.

use serde::{Deserialize, Serialize};

use crate::domain::DomainSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    Polynomial { degree: usize },
    PiecewiseConstant { cells: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(skip)]
    exponents: Vec<Vec<usize>>,
}

fn graded_exponents(d: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == d - 1 {
            let mut e = prefix.clone();
            e.push(left);
            out.push(e);
            return;
        }
        for k in (0..=left).rev() {
            prefix.push(k);
            rec(d, left - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree {
        rec(d, total, &mut Vec::new(), &mut out);
    }
    out
}

impl RegressionBasis {
    pub fn polynomial(domain: &DomainSpec, degree: usize) -> Self {
        let (lo, hi) = domain.bounding_box();
        Self {
            kind: BasisKind::Polynomial { degree },
            lower: lo.to_vec(),
            upper: hi.to_vec(),
            exponents: graded_exponents(lo.len(), degree),
        }
    }

    pub fn piecewise_constant(domain: &DomainSpec, cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::Input("piecewise-constant basis needs at least one cell per axis".into()));
        }
        let (lo, hi) = domain.bounding_box();
        Ok(Self { kind: BasisKind::PiecewiseConstant { cells }, lower: lo.to_vec(), upper: hi.to_vec(), exponents: Vec::new() })
    }

    /// Parses `poly:<degree>` or `pc:<cells>`.
    pub fn parse(spec: &str, domain: &DomainSpec) -> Result<Self> {
        let bad = || Error::Input(format!("unknown basis '{spec}' (expected poly:<degree> or pc:<cells>)"));
        let (kind, arg) = spec.split_once(':').ok_or_else(bad)?;
        let n: usize = arg.trim().parse().map_err(|_| bad())?;
        match kind.trim() {
            "poly" => Ok(Self::polynomial(domain, n)),
            "pc" => Self::piecewise_constant(domain, n),
            _ => Err(bad()),
        }
    }

    pub fn from_kind(kind: BasisKind, domain: &DomainSpec) -> Result<Self> {
        match kind {
            BasisKind::Polynomial { degree } => Ok(Self::polynomial(domain, degree)),
            BasisKind::PiecewiseConstant { cells } => Self::piecewise_constant(domain, cells),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            BasisKind::Polynomial { degree } => format!("poly:{degree}"),
            BasisKind::PiecewiseConstant { cells } => format!("pc:{cells}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn size(&self) -> usize {
        match self.kind {
            BasisKind::Polynomial { .. } => self.exponents.len(),
            BasisKind::PiecewiseConstant { cells } => cells.pow(self.dim() as u32),
        }
    }

    /// Writes the basis values at `x` into `out` (length `size()`).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            BasisKind::Polynomial { degree } => {
                let d = self.dim();
                let np = degree + 1;
                let mut table = [0.0f64; 64];
                let mut heap;
                let leg: &mut [f64] = if d * np <= 64 {
                    &mut table[..d * np]
                } else {
                    heap = vec![0.0; d * np];
                    &mut heap
                };
                for a in 0..d {
                    let s = 2.0 * (x[a] - self.lower[a]) / (self.upper[a] - self.lower[a]) - 1.0;
                    let row = &mut leg[a * np..(a + 1) * np];
                    row[0] = 1.0;
                    if np > 1 {
                        row[1] = s;
                    }
                    for n in 1..degree {
                        let nf = n as f64;
                        row[n + 1] = ((2.0 * nf + 1.0) * s * row[n] - nf * row[n - 1]) / (nf + 1.0);
                    }
                }
                for (o, e) in out.iter_mut().zip(&self.exponents) {
                    let mut v = 1.0;
                    for (a, k) in e.iter().enumerate() {
                        v *= leg[a * np + k];
                    }
                    *o = v;
                }
            }
            BasisKind::PiecewiseConstant { cells } => {
                out.fill(0.0);
                let mut flat = 0;
                for a in 0..self.dim() {
                    let s = (x[a] - self.lower[a]) / (self.upper[a] - self.lower[a]) * cells as f64;
                    let c = (s.floor().max(0.0) as usize).min(cells - 1);
                    flat = flat * cells + c;
                }
                out[flat] = 1.0;
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size()];
        self.eval_into(x, &mut out);
        out
    }
}

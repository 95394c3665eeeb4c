//! Driver functions `f(t, x, y, z)` and the name registry.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Generator of a BSDE.
///
/// `z` is the `m x d` row-major matrix of densities against the coordinate
/// martingales (the gradient of the solution in the smooth case). Drivers
/// are called concurrently and must be thread-safe.
pub trait Driver: Send + Sync {
    fn name(&self) -> String;
    fn eval(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);
    /// Lipschitz constant in `(y, z)` when known.
    fn lipschitz(&self) -> Option<f64> {
        None
    }
    /// True when `f` does not depend on `(y, z)`.
    fn is_state_free(&self) -> bool {
        false
    }
}

/// Built-in componentwise drivers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuiltinDriver {
    Zero,
    Constant(f64),
    /// `a y + b`.
    Linear { a: f64, b: f64 },
    /// `sin(y)`.
    Sin,
}

impl Driver for BuiltinDriver {
    fn name(&self) -> String {
        match self {
            BuiltinDriver::Zero => "zero".into(),
            BuiltinDriver::Constant(c) => format!("constant:{c}"),
            BuiltinDriver::Linear { a, b } => format!("linear:{a},{b}"),
            BuiltinDriver::Sin => "sin".into(),
        }
    }

    fn eval(&self, _t: f64, _x: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) {
        for (o, yi) in out.iter_mut().zip(y) {
            *o = match self {
                BuiltinDriver::Zero => 0.0,
                BuiltinDriver::Constant(c) => *c,
                BuiltinDriver::Linear { a, b } => a * yi + b,
                BuiltinDriver::Sin => yi.sin(),
            };
        }
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(match self {
            BuiltinDriver::Zero | BuiltinDriver::Constant(_) => 0.0,
            BuiltinDriver::Linear { a, .. } => a.abs(),
            BuiltinDriver::Sin => 1.0,
        })
    }

    fn is_state_free(&self) -> bool {
        matches!(self, BuiltinDriver::Zero | BuiltinDriver::Constant(_) | BuiltinDriver::Linear { a: 0.0, .. })
    }
}

impl BuiltinDriver {
    /// Parses `zero`, `constant:<c>`, `linear:<a>,<b>` or `sin`.
    pub fn parse(name: &str) -> Result<Self> {
        let bad = || Error::Input(format!("unknown driver '{name}' (expected zero, constant:<c>, linear:<a>,<b>, sin)"));
        let (kind, arg) = match name.split_once(':') {
            Some((k, a)) => (k.trim(), a.trim()),
            None => (name.trim(), ""),
        };
        let num = |s: &str| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
        match (kind, arg) {
            ("zero", "") => Ok(BuiltinDriver::Zero),
            ("sin", "") => Ok(BuiltinDriver::Sin),
            ("constant", c) => Ok(BuiltinDriver::Constant(num(c)?)),
            ("linear", ab) => {
                let (a, b) = ab.split_once(',').ok_or_else(bad)?;
                Ok(BuiltinDriver::Linear { a: num(a)?, b: num(b)? })
            }
            _ => Err(bad()),
        }
    }
}

/// User-supplied driver closure (the plugin hook). May depend on `x`.
pub struct FnDriver<F> {
    name: String,
    lipschitz: Option<f64>,
    f: F,
}

impl<F> FnDriver<F>
where
    F: Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(name: impl Into<String>, lipschitz: Option<f64>, f: F) -> Self {
        Self { name: name.into(), lipschitz, f }
    }
}

impl<F> Driver for FnDriver<F>
where
    F: Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }
    fn eval(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        (self.f)(t, x, y, z, out)
    }
    fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// `-f`: turns the nonlinearity of `u_t = L u - f(t, u, grad u)` into the
/// generator of the BSDE `dY = -g dt + Z dM` solved by `Y_s = u(T - s, X_s)`.
pub struct Negated(pub Arc<dyn Driver>);

impl Driver for Negated {
    fn name(&self) -> String {
        format!("-({})", self.0.name())
    }
    fn eval(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        self.0.eval(t, x, y, z, out);
        out.iter_mut().for_each(|v| *v = -*v);
    }
    fn lipschitz(&self) -> Option<f64> {
        self.0.lipschitz()
    }
    fn is_state_free(&self) -> bool {
        self.0.is_state_free()
    }
}

/// Evaluates a PDE nonlinearity at PDE time `t` through the BSDE time `T - t`.
pub(crate) struct TimeReversed {
    pub inner: Arc<dyn Driver>,
    pub horizon: f64,
}

impl Driver for TimeReversed {
    fn name(&self) -> String {
        self.inner.name()
    }
    fn eval(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        self.inner.eval(self.horizon - t, x, y, z, out)
    }
    fn lipschitz(&self) -> Option<f64> {
        self.inner.lipschitz()
    }
    fn is_state_free(&self) -> bool {
        self.inner.is_state_free()
    }
}

impl fmt::Debug for dyn Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Driver({})", self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry() {
        assert_eq!(BuiltinDriver::parse("zero").unwrap(), BuiltinDriver::Zero);
        assert_eq!(BuiltinDriver::parse("constant:0.7").unwrap(), BuiltinDriver::Constant(0.7));
        assert_eq!(BuiltinDriver::parse("linear:-1,0.5").unwrap(), BuiltinDriver::Linear { a: -1.0, b: 0.5 });
        assert!(BuiltinDriver::parse("cubic").is_err());
        assert!(BuiltinDriver::parse("linear:1").is_err());
        for name in ["zero", "constant:0.7", "linear:-1,0.5", "sin"] {
            assert_eq!(BuiltinDriver::parse(name).unwrap().name(), name);
        }
    }

    #[test]
    fn negation() {
        let f = Negated(Arc::new(BuiltinDriver::Linear { a: 1.0, b: 0.0 }));
        let mut out = [0.0];
        f.eval(0.0, &[0.5], &[2.0], &[0.0], &mut out);
        assert_eq!(out, [-2.0]);
    }
}

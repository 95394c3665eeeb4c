//! Registry of bounded state functions used as terminal values and as
//! resolvent integrands.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::domain::DomainSpec;
use crate::error::{Error, Result};

type Custom = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A bounded scalar function on the domain.
///
/// Coordinate indices in registry names are 1-based (`coordinate:1` is `x_1`).
#[derive(Clone)]
pub enum StateFunction {
    Constant(f64),
    /// `x_i` (0-based index internally).
    Coordinate(usize),
    /// `cos(pi x_i)`.
    CosPi(usize),
    Custom { name: String, sup_norm: f64, f: Custom },
}

impl fmt::Debug for StateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl PartialEq for StateFunction {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

impl StateFunction {
    pub fn parse(name: &str) -> Result<Self> {
        let (kind, arg) = match name.split_once(':') {
            Some((k, a)) => (k.trim(), a.trim()),
            None => (name.trim(), ""),
        };
        let index = |a: &str| -> Result<usize> {
            match a.parse::<usize>() {
                Ok(i) if i >= 1 => Ok(i - 1),
                _ => Err(Error::Input(format!("bad coordinate index in '{name}' (indices start at 1)"))),
            }
        };
        match kind {
            "zero" if arg.is_empty() => Ok(StateFunction::Constant(0.0)),
            "constant" => arg
                .parse::<f64>()
                .ok()
                .filter(|c| c.is_finite())
                .map(StateFunction::Constant)
                .ok_or_else(|| Error::Input(format!("bad constant in '{name}'"))),
            "coordinate" => Ok(StateFunction::Coordinate(index(arg)?)),
            "cospi" => Ok(StateFunction::CosPi(index(arg)?)),
            _ => Err(Error::Input(format!(
                "unknown function '{name}' (expected constant:<c>, coordinate:<i>, cospi:<i>)"
            ))),
        }
    }

    /// Wraps a user closure; `sup_norm` must bound `|f|` on the domain.
    pub fn custom<F>(name: impl Into<String>, sup_norm: f64, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        StateFunction::Custom { name: name.into(), sup_norm, f: Arc::new(f) }
    }

    pub fn name(&self) -> String {
        match self {
            StateFunction::Constant(c) => format!("constant:{c}"),
            StateFunction::Coordinate(i) => format!("coordinate:{}", i + 1),
            StateFunction::CosPi(i) => format!("cospi:{}", i + 1),
            StateFunction::Custom { name, .. } => name.clone(),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            StateFunction::Constant(c) => *c,
            StateFunction::Coordinate(i) => x[*i],
            StateFunction::CosPi(i) => (PI * x[*i]).cos(),
            StateFunction::Custom { f, .. } => f(x),
        }
    }

    pub fn is_constant(&self) -> Option<f64> {
        match self {
            StateFunction::Constant(c) => Some(*c),
            _ => None,
        }
    }

    /// Checks that the function can be evaluated in the given dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            StateFunction::Coordinate(i) | StateFunction::CosPi(i) if *i >= dim => Err(Error::Input(format!(
                "function '{}' refers to coordinate {} but the dimension is {dim}",
                self.name(),
                i + 1
            ))),
            _ => Ok(()),
        }
    }

    /// An upper bound for `sup |f|` over the domain.
    pub fn sup_norm(&self, domain: &DomainSpec) -> f64 {
        match self {
            StateFunction::Constant(c) => c.abs(),
            StateFunction::Coordinate(i) => {
                let (lo, hi) = domain.bounding_box();
                lo[*i].abs().max(hi[*i].abs())
            }
            StateFunction::CosPi(_) => 1.0,
            StateFunction::Custom { sup_norm, .. } => *sup_norm,
        }
    }
}

/// Vector-valued terminal function `phi: D -> R^{d'}`, one component per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalFunction {
    pub components: Vec<StateFunction>,
}

impl TerminalFunction {
    pub fn scalar(f: StateFunction) -> Self {
        Self { components: vec![f] }
    }

    /// Parses a comma-free list of registry names separated by `;`.
    pub fn parse(spec: &str) -> Result<Self> {
        let components = spec.split(';').map(StateFunction::parse).collect::<Result<Vec<_>>>()?;
        Ok(Self { components })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn name(&self) -> String {
        self.components.iter().map(|c| c.name()).collect::<Vec<_>>().join(";")
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(x);
        }
    }

    /// Constant shift of every component.
    pub fn shifted(&self, c: f64) -> Self {
        let components = self
            .components
            .iter()
            .map(|f| match f {
                StateFunction::Constant(v) => StateFunction::Constant(v + c),
                other => {
                    let inner = other.clone();
                    let sup = match other {
                        StateFunction::Custom { sup_norm, .. } => *sup_norm + c.abs(),
                        _ => f64::INFINITY,
                    };
                    StateFunction::custom(format!("{}+{c}", other.name()), sup, move |x| inner.eval(x) + c)
                }
            })
            .collect();
        Self { components }
    }
}

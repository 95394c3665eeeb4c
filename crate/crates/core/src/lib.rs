//! Reflecting diffusions in bounded convex domains, least-squares Monte Carlo
//! martingale representation, a Picard solver for BSDEs driven by the
//! diffusion's martingale part, and deterministic oracles (finite differences,
//! resolvent identities) for checking the stochastic solutions.

pub mod basis;
pub mod bsde;
pub mod coefficients;
pub mod compare;
pub mod diffusion;
pub mod domain;
pub mod error;
pub mod functions;
pub mod grid;
pub mod law;
pub mod pde;
pub mod representation;
pub mod resolvent;
pub mod rng;

mod linalg;
mod par;

pub use coefficients::{CoefficientField, CoefficientModel};
pub use domain::{DomainDescriptor, DomainSpec, HalfSpace};
pub use error::{Error, Result};
pub use functions::{StateFunction, TerminalFunction};
pub use grid::{Grid, GridFunction};
pub use law::{DensityTable, InitialLaw};

//! Run configuration read from a TOML file.
//!
//! ```toml
//! seed = 7
//! out = "runs/heat"
//!
//! [domain.box]
//! bounds = [[0.0, 1.0]]
//!
//! [field]
//! name = "identity"
//!
//! [initial_law]
//! kind = "point"
//! x0 = [0.3]
//!
//! [problem]
//! driver = "zero"
//! terminal = "cospi:1"
//! horizon = 0.5
//!
//! [numerics]
//! dt = 1e-3
//! n_paths = 20000
//! ```
//!
//! Every section except `[domain]` has defaults; see the field docs below.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use rbsde_core::basis::RegressionBasis;
use rbsde_core::bsde::{BasisChoice, BsdeProblem, BuiltinDriver, Driver};
use rbsde_core::diffusion::{DriftMode, SimulationConfig};
use rbsde_core::pde::{explicit_step_limit, FdConfig, TimeScheme};
use rbsde_core::resolvent::{NestedPotentialSpec, PotentialTerm, ResolventConfig};
use rbsde_core::{CoefficientField, DomainDescriptor, DomainSpec, Error, Grid, InitialLaw, StateFunction, TerminalFunction};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    SolveBsde,
    SolvePdeStochastic,
    SolvePdeFd,
    VerifyResolvent,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveBsde => "solve-bsde",
            Command::SolvePdeStochastic => "solve-pde-stochastic",
            Command::SolvePdeFd => "solve-pde-fd",
            Command::VerifyResolvent => "verify-resolvent",
            Command::Compare => "compare",
        }
    }
}

/// Layout of tabular outputs: `csv` writes them as separate CSV files,
/// `json` embeds them in `report.json`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Json,
    #[default]
    Csv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Set from the subcommand; a value in the file is overridden.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub domain: DomainDescriptor,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default = "uniform")]
    pub initial_law: InitialLaw,
    #[serde(default)]
    pub problem: Option<ProblemSection>,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default)]
    pub fd: FdSection,
    #[serde(default)]
    pub resolvent: ResolventSection,
    #[serde(default)]
    pub compare: CompareSection,
}

fn uniform() -> InitialLaw {
    InitialLaw::Uniform
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    /// Registry name: `identity`, `diag:c1,..`, `smooth-aniso`, `checkerboard:lambda`.
    pub name: String,
    /// Finite-difference step of the divergence drift.
    pub derivative_step: Option<f64>,
    #[serde(default)]
    pub drift_mode: DriftMode,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self { name: "identity".into(), derivative_step: None, drift_mode: DriftMode::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// `zero`, `constant:c`, `linear:a,b` (`a y + b`) or `sin`. For the PDE
    /// commands this is `f` in `u_t = L u - f(u)`; for `solve-bsde` it is the
    /// generator of `dY = -g dt + Z dM`.
    #[serde(default = "zero")]
    pub driver: String,
    /// `constant:c`, `coordinate:i` or `cospi:i` (1-based), `;`-separated for systems.
    pub terminal: String,
    pub horizon: f64,
    /// Overrides the driver's own Lipschitz constant.
    pub lipschitz: Option<f64>,
}

fn zero() -> String {
    "zero".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    Picard,
    BackwardEuler,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSection {
    pub dt: f64,
    pub n_paths: usize,
    /// `auto`, `poly:p` or `pc:n`.
    pub basis: String,
    pub tol: f64,
    pub max_iter: usize,
    pub solver: Solver,
    pub record_every: usize,
    /// Also write the path bundle (always written by `simulate`).
    pub write_bundle: bool,
    /// Horizon for `simulate` when there is no `[problem]`.
    pub horizon: Option<f64>,
    /// Relative tolerance of the quadratic-variation report.
    pub qv_tolerance: f64,
}

impl Default for NumericsSection {
    fn default() -> Self {
        Self {
            dt: 0.01,
            n_paths: 10_000,
            basis: "auto".into(),
            tol: 1e-6,
            max_iter: 50,
            solver: Solver::Picard,
            record_every: 1,
            write_bundle: false,
            horizon: None,
            qv_tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdSection {
    pub n_grid: usize,
    /// Defaults to 0.9 of the explicit stability limit.
    pub dt: Option<f64>,
    pub scheme: TimeScheme,
    pub snapshots: Vec<f64>,
    /// Second grid for the oracle's own error estimate; defaults to half the
    /// resolution in `compare`.
    pub coarse_n_grid: Option<usize>,
}

impl Default for FdSection {
    fn default() -> Self {
        Self { n_grid: 101, dt: None, scheme: TimeScheme::Explicit, snapshots: Vec::new(), coarse_n_grid: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResolventCheck {
    Potential,
    Composition,
    #[default]
    Product,
    Martingale,
    ConditionalProduct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventSection {
    pub check: ResolventCheck,
    /// Integrands `f_1, .., f_k`.
    pub functions: Vec<String>,
    /// Rates `alpha_1, .., alpha_k`.
    pub alphas: Vec<f64>,
    pub dt: f64,
    pub n_paths: usize,
    pub truncation: Option<f64>,
    pub bias_tol: f64,
    pub grid_points: usize,
    pub grid_paths: usize,
    /// Conditioning time of the conditional product check.
    pub t: Option<f64>,
    /// Grid of the finite-difference potential used by the martingale check.
    pub fd_grid: usize,
}

impl Default for ResolventSection {
    fn default() -> Self {
        Self {
            check: ResolventCheck::Product,
            functions: vec!["coordinate:1".into(), "cospi:1".into()],
            alphas: vec![1.0, 2.0],
            dt: 0.01,
            n_paths: 20_000,
            truncation: None,
            bias_tol: 1e-4,
            grid_points: 33,
            grid_paths: 4000,
            t: None,
            fd_grid: 201,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub tolerance: f64,
    /// Horizon of the oracle side; defaults to the problem horizon.
    pub fd_horizon: Option<f64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self { tolerance: 0.01, fd_horizon: None }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Config(msg.into()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| invalid(format!("cannot parse config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks that names resolve and numbers are in range, returning the
    /// resolved objects.
    pub fn resolve(&self) -> Result<Resolved, Failure> {
        let n = &self.numerics;
        positive("numerics.dt", n.dt)?;
        positive("numerics.tol", n.tol)?;
        positive("numerics.qv_tolerance", n.qv_tolerance)?;
        at_least_one("numerics.n_paths", n.n_paths)?;
        at_least_one("numerics.max_iter", n.max_iter)?;
        at_least_one("numerics.record_every", n.record_every)?;
        at_least_one("fd.n_grid", self.fd.n_grid)?;
        if let Some(dt) = self.fd.dt {
            positive("fd.dt", dt)?;
        }
        let r = &self.resolvent;
        positive("resolvent.dt", r.dt)?;
        positive("resolvent.bias_tol", r.bias_tol)?;
        at_least_one("resolvent.n_paths", r.n_paths)?;
        at_least_one("resolvent.grid_paths", r.grid_paths)?;
        if !(self.compare.tolerance >= 0.0) {
            return Err(invalid(format!("compare.tolerance must be non-negative, got {}", self.compare.tolerance)));
        }

        let domain = self.domain.build()?;
        let mut field = CoefficientField::from_name(&self.field.name, &domain)?;
        if let Some(step) = self.field.derivative_step {
            field = field.with_derivative_step(step)?;
        }
        self.initial_law.validate(&domain)?;
        let problem = match &self.problem {
            Some(p) => {
                positive("problem.horizon", p.horizon)?;
                let driver = BuiltinDriver::parse(&p.driver)?;
                let terminal = TerminalFunction::parse(&p.terminal)?;
                let lipschitz = p.lipschitz.or(driver.lipschitz()).unwrap_or(0.0);
                Some(ResolvedProblem { driver, terminal, horizon: p.horizon, lipschitz })
            }
            None => None,
        };
        Ok(Resolved { domain, field, problem })
    }
}

fn positive(name: &str, v: f64) -> Result<(), Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive, got {v}")))
    }
}

fn at_least_one(name: &str, v: usize) -> Result<(), Failure> {
    if v >= 1 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be at least 1")))
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedProblem {
    pub driver: BuiltinDriver,
    pub terminal: TerminalFunction,
    pub horizon: f64,
    pub lipschitz: f64,
}

/// Core objects built from a validated config.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub domain: DomainSpec,
    pub field: CoefficientField,
    pub problem: Option<ResolvedProblem>,
}

impl Resolved {
    pub fn problem(&self) -> Result<&ResolvedProblem, Failure> {
        self.problem.as_ref().ok_or_else(|| invalid("this command needs a [problem] section"))
    }

    pub fn simulation(&self, cfg: &RunConfig, horizon: f64) -> SimulationConfig {
        let n = &cfg.numerics;
        let mut sim = SimulationConfig::new(
            self.domain.clone(),
            self.field.clone(),
            cfg.initial_law.clone(),
            horizon,
            n.dt,
            n.n_paths,
            cfg.seed,
        );
        sim.drift_mode = cfg.field.drift_mode;
        sim.record_every = n.record_every;
        sim
    }

    /// Problem in BSDE form (`solve-bsde`) or from the PDE driver.
    pub fn bsde(&self, pde_form: bool) -> Result<BsdeProblem, Failure> {
        let p = self.problem()?;
        let driver: Arc<dyn Driver> = Arc::new(p.driver);
        let problem = if pde_form {
            BsdeProblem::from_pde(driver, p.terminal.clone(), p.horizon, p.lipschitz, &self.domain)?
        } else {
            BsdeProblem::new(driver, p.terminal.clone(), p.horizon, p.lipschitz, &self.domain)?
        };
        Ok(problem)
    }

    pub fn basis(&self, spec: &str) -> Result<BasisChoice, Failure> {
        if spec == "auto" {
            Ok(BasisChoice::Auto)
        } else {
            Ok(BasisChoice::Fixed(RegressionBasis::parse(spec, &self.domain)?))
        }
    }

    /// The scalar initial condition of the oracle.
    pub fn scalar_terminal(&self) -> Result<StateFunction, Failure> {
        let p = self.problem()?;
        match p.terminal.components.as_slice() {
            [phi] => Ok(phi.clone()),
            _ => Err(invalid(format!("the finite-difference oracle needs a scalar terminal, got {}", p.terminal.name()))),
        }
    }

    pub fn fd(&self, section: &FdSection, n_grid: usize) -> Result<FdConfig, Failure> {
        let dt = match section.dt {
            Some(dt) => dt,
            None => {
                let (lo, hi) = self.domain.bounding_box();
                let grid = Grid::new(lo.to_vec(), hi.to_vec(), vec![n_grid.max(2); self.domain.dim()])?;
                0.9 * explicit_step_limit(&self.field, &grid)
            }
        };
        Ok(FdConfig { n_grid, dt, scheme: section.scheme, snapshots: section.snapshots.clone() })
    }

    pub fn resolvent(&self, cfg: &RunConfig) -> ResolventConfig {
        let r = &cfg.resolvent;
        let mut rc = ResolventConfig::new(self.domain.clone(), self.field.clone(), r.dt, r.n_paths, cfg.seed);
        rc.drift_mode = cfg.field.drift_mode;
        rc.truncation = r.truncation;
        rc.bias_tol = r.bias_tol;
        rc.grid_points = r.grid_points;
        rc.grid_paths = r.grid_paths;
        rc
    }

    pub fn potential_spec(&self, cfg: &RunConfig) -> Result<NestedPotentialSpec, Failure> {
        let r = &cfg.resolvent;
        if r.functions.len() != r.alphas.len() {
            return Err(invalid(format!("{} functions but {} rates", r.functions.len(), r.alphas.len())));
        }
        let terms = r
            .functions
            .iter()
            .zip(&r.alphas)
            .map(|(f, a)| Ok(PotentialTerm::new(StateFunction::parse(f)?, *a)))
            .collect::<Result<Vec<_>, Error>>()?;
        let spec = NestedPotentialSpec::new(terms)?;
        Ok(spec)
    }
}

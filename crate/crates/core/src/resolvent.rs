//! Monte Carlo resolvents `U^a f(x) = E^x int_0^inf e^{-a t} f(X_t) dt`,
//! nested potentials, the permutation-sum product formula, and the
//! martingale `int_0^t e^{-a s} f(X_s) ds + e^{-a t} U^a f(X_t)`.
//!
//! Time integrals are left-endpoint sums `sum_k h e^{-a t_k} g(X_k)` on the
//! simulation grid, truncated at `T_trunc`. Because `h e^{-a t_k}` factorizes
//! over sums of rates, the nested and product identities hold exactly for
//! the simulated chain when inner levels give half weight to the lag-zero
//! term (the diagonal of a time-ordered double sum). Comparisons therefore
//! see Monte Carlo noise and truncation only.
//!
//! Inner potentials are tabulated on a uniform grid over the bounding box
//! and interpolated multilinearly. Standard errors of nested estimates
//! include the propagated grid noise (delta method).

use serde::Serialize;

use crate::basis::RegressionBasis;
use crate::coefficients::CoefficientField;
use crate::diffusion::{run_paths, DriftMode, SimulationConfig};
use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::functions::StateFunction;
use crate::grid::{Grid, GridFunction};
use crate::law::InitialLaw;
use crate::linalg::{solve_normal_equations, NormalEquations};
use crate::rng;

/// Largest supported order of a nested potential.
pub const MAX_ORDER: usize = 4;

/// One factor `(f_j, a_j)`.
#[derive(Debug, Clone)]
pub struct PotentialTerm {
    pub f: StateFunction,
    pub alpha: f64,
}

impl PotentialTerm {
    pub fn new(f: StateFunction, alpha: f64) -> Self {
        Self { f, alpha }
    }

    fn key(&self) -> String {
        format!("{}@{:016x}", self.f.name(), self.alpha.to_bits())
    }
}

/// `U^{a_1+..+a_k}(f_1 U^{a_2+..+a_k}(f_2 ... U^{a_k} f_k))`.
#[derive(Debug, Clone)]
pub struct NestedPotentialSpec {
    pub terms: Vec<PotentialTerm>,
}

impl NestedPotentialSpec {
    pub fn new(terms: Vec<PotentialTerm>) -> Result<Self> {
        if terms.is_empty() || terms.len() > MAX_ORDER {
            return Err(Error::Input(format!("nested potentials need 1 to {MAX_ORDER} terms, got {}", terms.len())));
        }
        for t in &terms {
            if !(t.alpha > 0.0) || !t.alpha.is_finite() {
                return Err(Error::Input(format!("rates must be positive, got {}", t.alpha)));
            }
        }
        Ok(Self { terms })
    }

    pub fn order(&self) -> usize {
        self.terms.len()
    }

    /// Rate of level `l` (0-based): `a_l + ... + a_k`.
    fn rate(&self, l: usize) -> f64 {
        self.terms[l..].iter().map(|t| t.alpha).sum()
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        for l in 0..self.order() {
            s.push_str(&format!("U^{}({}", self.rate(l), self.terms[l].f.name()));
            if l + 1 < self.order() {
                s.push_str(" * ");
            }
        }
        s.push_str(&")".repeat(self.order()));
        s
    }

    fn validate(&self, domain: &DomainSpec) -> Result<()> {
        for t in &self.terms {
            t.f.validate(domain.dim())?;
        }
        Ok(())
    }

    fn permuted(&self, order: &[usize]) -> Self {
        Self { terms: order.iter().map(|&i| self.terms[i].clone()).collect() }
    }

    fn key(&self) -> String {
        self.terms.iter().map(PotentialTerm::key).collect::<Vec<_>>().join("|")
    }
}

/// Simulation settings shared by the resolvent estimators.
#[derive(Debug, Clone)]
pub struct ResolventConfig {
    pub domain: DomainSpec,
    pub field: CoefficientField,
    pub dt: f64,
    /// Paths for estimates started from the initial law.
    pub n_paths: usize,
    pub seed: u64,
    pub drift_mode: DriftMode,
    /// Truncation horizon; chosen from `bias_tol` when absent.
    pub truncation: Option<f64>,
    /// Upper limit for the reported truncation-bias bound.
    pub bias_tol: f64,
    /// Grid nodes per axis for tabulated potentials.
    pub grid_points: usize,
    /// Paths per grid node.
    pub grid_paths: usize,
}

impl ResolventConfig {
    pub fn new(domain: DomainSpec, field: CoefficientField, dt: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            domain,
            field,
            dt,
            n_paths,
            seed,
            drift_mode: DriftMode::FiniteDifference,
            truncation: None,
            bias_tol: 1e-4,
            grid_points: 33,
            grid_paths: 4000,
        }
    }

    fn sim(&self, law: InitialLaw, horizon: f64, n_paths: usize, seed: u64) -> SimulationConfig {
        let mut cfg = SimulationConfig::new(self.domain.clone(), self.field.clone(), law, horizon, self.dt, n_paths, seed);
        cfg.drift_mode = self.drift_mode;
        cfg
    }

    pub fn grid(&self) -> Result<Grid> {
        if self.grid_points < 2 {
            return Err(Error::Config("grid_points must be at least 2".into()));
        }
        let (lo, hi) = self.domain.bounding_box();
        Grid::new(lo.to_vec(), hi.to_vec(), vec![self.grid_points; self.domain.dim()])
    }

    /// Smallest multiple of `dt` whose bias bound is within tolerance, or
    /// the configured horizon after checking it.
    fn resolve_horizon(&self, bias: impl Fn(f64) -> f64) -> Result<f64> {
        if !(self.bias_tol > 0.0) {
            return Err(Error::Config(format!("bias_tol must be positive, got {}", self.bias_tol)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let needed = || -> Result<f64> {
            let mut hi = 2.0 * self.dt;
            while bias(hi) > self.bias_tol {
                hi *= 2.0;
                if hi > 1e7 {
                    return Err(Error::Config(format!("no truncation horizon reaches bias tolerance {:.1e}", self.bias_tol)));
                }
            }
            let mut lo = 0.0;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if bias(mid) > self.bias_tol {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(((hi / self.dt - 1e-9).ceil().max(2.0)) * self.dt)
        };
        match self.truncation {
            None => needed(),
            Some(t) => {
                let b = bias(t);
                if b > self.bias_tol {
                    Err(Error::Config(format!(
                        "truncation horizon {t} leaves a bias bound of {b:.3e} above the tolerance {:.1e}; use T_trunc >= {}",
                        self.bias_tol,
                        needed()?
                    )))
                } else {
                    Ok(t)
                }
            }
        }
    }
}

/// `sum_{k >= 0} h e^{-a k h}`.
fn geometric(alpha: f64, h: f64) -> f64 {
    h / (1.0 - (-alpha * h).exp())
}

/// Tail of the left-endpoint sum beyond `T`.
pub fn truncation_bias(sup: f64, alpha: f64, horizon: f64, h: f64) -> f64 {
    sup * (-alpha * horizon).exp() * geometric(alpha, h)
}

fn nested_bias(spec: &NestedPotentialSpec, domain: &DomainSpec, horizon: f64, h: f64) -> f64 {
    let mut sup_inner = 1.0;
    let mut bias_inner = 0.0;
    for l in (0..spec.order()).rev() {
        let rate = spec.rate(l);
        let sup_f = spec.terms[l].f.sup_norm(domain);
        bias_inner = sup_f * sup_inner * truncation_bias(1.0, rate, horizon, h) + sup_f * bias_inner * geometric(rate, h);
        sup_inner *= sup_f * geometric(rate, h);
    }
    bias_inner
}

fn product_bias(spec: &NestedPotentialSpec, domain: &DomainSpec, horizon: f64, h: f64) -> f64 {
    let sizes: Vec<f64> = spec.terms.iter().map(|t| t.f.sup_norm(domain) * geometric(t.alpha, h)).collect();
    let tails: Vec<f64> = spec.terms.iter().map(|t| truncation_bias(t.f.sup_norm(domain), t.alpha, horizon, h)).collect();
    (0..spec.order())
        .map(|j| tails[j] * (0..spec.order()).filter(|&i| i != j).map(|i| sizes[i]).product::<f64>())
        .sum()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Scalar estimate with its error budget.
#[derive(Debug, Clone, Serialize)]
pub struct ResolventEstimate {
    pub estimand: String,
    pub value: f64,
    pub std_err: f64,
    pub truncation: f64,
    pub bias_bound: f64,
    pub n_paths: usize,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 || values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
        return (values.first().copied().unwrap_or(mean), 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// A tabulated level `G(node) = E^node sum_k c_k h e^{-r t_k} f(X_k) G_inner(X_k)`.
struct Level {
    table: GridFunction,
    std_err: Vec<f64>,
    /// `d G(node) / d G_inner(node')`, row-major `n x n` (absent for the innermost level).
    coupling: Option<Vec<f64>>,
}

/// Output of one Monte Carlo pass over `sum_k c_k h e^{-r t_k} f(X_k) G(X_k)`.
struct PassResult {
    value: f64,
    std_err: f64,
    /// Derivative of the value with respect to the nodes of `G`.
    sensitivity: Option<Vec<f64>>,
}

/// Runs `cfg.n_paths` paths (from `start` or the initial law) and averages
/// the discounted sum of `f * inner`.
fn discounted_pass(
    cfg: &SimulationConfig,
    start: Option<&[f64]>,
    stream: &str,
    rate: f64,
    f: &StateFunction,
    inner: Option<&GridFunction>,
    half_first: bool,
) -> Result<PassResult> {
    let ts = cfg.recorded_times();
    let n_nodes = inner.map_or(0, |g| g.grid.len());
    let per_path = run_paths(cfg, start, stream, |_, rec| {
        let mut v = 0.0;
        let mut sens = vec![0.0; n_nodes];
        for k in 0..ts.len() - 1 {
            let c = if k == 0 && half_first { 0.5 } else { 1.0 };
            let x = rec.state(k);
            let w = c * (ts[k + 1] - ts[k]) * (-rate * ts[k]).exp() * f.eval(x);
            match inner {
                None => v += w,
                Some(g) => g.grid.for_each_weight(x, |i, wt| {
                    v += w * wt * g.values[i];
                    sens[i] += w * wt;
                }),
            }
        }
        (v, sens)
    })?;
    let values: Vec<f64> = per_path.iter().map(|p| p.0).collect();
    if let Some(p) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite discounted integral on path {p}")));
    }
    let (value, std_err) = mean_se(&values);
    let sensitivity = inner.map(|_| {
        let mut s = vec![0.0; n_nodes];
        for (_, row) in &per_path {
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = per_path.len() as f64;
        s.iter_mut().for_each(|a| *a /= n);
        s
    });
    Ok(PassResult { value, std_err, sensitivity })
}

fn tabulate_level(
    config: &ResolventConfig,
    grid: &Grid,
    horizon: f64,
    rate: f64,
    f: &StateFunction,
    inner: Option<&GridFunction>,
    half_first: bool,
    seed: u64,
) -> Result<Level> {
    let cfg = config.sim(InitialLaw::Uniform, horizon, config.grid_paths, seed);
    cfg.validate()?;
    let n = grid.len();
    let mut values = Vec::with_capacity(n);
    let mut std_err = Vec::with_capacity(n);
    let mut coupling = inner.map(|_| Vec::with_capacity(n * n));
    for node in 0..n {
        let start = config.domain.project(&grid.node(node))?;
        let r = discounted_pass(&cfg, Some(&start), &format!("node-{node}"), rate, f, inner, half_first)?;
        values.push(r.value);
        std_err.push(r.std_err);
        if let (Some(c), Some(s)) = (coupling.as_mut(), r.sensitivity) {
            c.extend(s);
        }
    }
    Ok(Level { table: GridFunction::new(grid.clone(), values)?, std_err, coupling })
}

/// Tabulates levels `from..k` (0-based) of `spec`, returned outermost first.
fn build_levels(spec: &NestedPotentialSpec, config: &ResolventConfig, grid: &Grid, horizon: f64, seed: u64, from: usize) -> Result<Vec<Level>> {
    let mut levels: Vec<Level> = Vec::new();
    for l in (from..spec.order()).rev() {
        let inner = levels.last().map(|lv| &lv.table);
        let level = tabulate_level(
            config,
            grid,
            horizon,
            spec.rate(l),
            &spec.terms[l].f,
            inner,
            l > 0,
            rng::derive_indexed(seed, "grid", l as u64),
        )?;
        levels.push(level);
    }
    levels.reverse();
    Ok(levels)
}

/// Variance induced by the grid noise of `levels` on a functional with
/// sensitivity `s` to the first level's nodes.
fn propagated_variance(mut s: Vec<f64>, levels: &[Level]) -> f64 {
    let mut var = 0.0;
    for lv in levels {
        var += s.iter().zip(&lv.std_err).map(|(a, e)| a * a * e * e).sum::<f64>();
        if let Some(c) = &lv.coupling {
            let n = lv.std_err.len();
            let mut next = vec![0.0; n];
            for (i, si) in s.iter().enumerate() {
                if *si != 0.0 {
                    for (nj, cij) in next.iter_mut().zip(&c[i * n..(i + 1) * n]) {
                        *nj += si * cij;
                    }
                }
            }
            s = next;
        }
    }
    var
}

fn check_rate(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Input(format!("rate must be positive, got {alpha}")));
    }
    Ok(())
}

/// `U^a f` averaged over the start law.
pub fn estimate_potential(f: &StateFunction, alpha: f64, start: &InitialLaw, config: &ResolventConfig) -> Result<ResolventEstimate> {
    check_rate(alpha)?;
    f.validate(config.domain.dim())?;
    let sup = f.sup_norm(&config.domain);
    let horizon = config.resolve_horizon(|t| truncation_bias(sup, alpha, t, config.dt))?;
    let cfg = config.sim(start.clone(), horizon, config.n_paths, config.seed);
    cfg.validate()?;
    let r = discounted_pass(&cfg, None, "paths", alpha, f, None, false)?;
    Ok(ResolventEstimate {
        estimand: format!("U^{alpha}({})", f.name()),
        value: r.value,
        std_err: r.std_err,
        truncation: horizon,
        bias_bound: truncation_bias(sup, alpha, horizon, config.dt),
        n_paths: config.n_paths,
    })
}

/// `U^a f` on the grid of `config` with per-node standard errors.
#[derive(Debug, Clone)]
pub struct TabulatedPotential {
    pub function: GridFunction,
    pub std_err: Vec<f64>,
    pub truncation: f64,
    pub bias_bound: f64,
}

pub fn tabulate_potential(f: &StateFunction, alpha: f64, config: &ResolventConfig) -> Result<TabulatedPotential> {
    check_rate(alpha)?;
    f.validate(config.domain.dim())?;
    let sup = f.sup_norm(&config.domain);
    let horizon = config.resolve_horizon(|t| truncation_bias(sup, alpha, t, config.dt))?;
    let grid = config.grid()?;
    let level = tabulate_level(config, &grid, horizon, alpha, f, None, false, rng::derive_seed(config.seed, "table"))?;
    Ok(TabulatedPotential {
        function: level.table,
        std_err: level.std_err,
        truncation: horizon,
        bias_bound: truncation_bias(sup, alpha, horizon, config.dt),
    })
}

fn require_grid_dim(config: &ResolventConfig) -> Result<()> {
    if config.domain.dim() > 2 {
        return Err(Error::Input(format!(
            "nested potentials are tabulated on grids in dimension 1 or 2, got {}",
            config.domain.dim()
        )));
    }
    Ok(())
}

/// Nested potential averaged over the start law; inner levels are
/// tabulated on the grid and interpolated.
pub fn nested_potential(spec: &NestedPotentialSpec, start: &InitialLaw, config: &ResolventConfig) -> Result<ResolventEstimate> {
    spec.validate(&config.domain)?;
    if spec.order() == 1 {
        let t = &spec.terms[0];
        return estimate_potential(&t.f, t.alpha, start, config);
    }
    require_grid_dim(config)?;
    let horizon = config.resolve_horizon(|t| nested_bias(spec, &config.domain, t, config.dt))?;
    let grid = config.grid()?;
    let levels = build_levels(spec, config, &grid, horizon, config.seed, 1)?;
    let cfg = config.sim(start.clone(), horizon, config.n_paths, config.seed);
    cfg.validate()?;
    let outer = discounted_pass(&cfg, None, "paths", spec.rate(0), &spec.terms[0].f, Some(&levels[0].table), false)?;
    let grid_var = propagated_variance(outer.sensitivity.expect("inner table present"), &levels);
    Ok(ResolventEstimate {
        estimand: spec.label(),
        value: outer.value,
        std_err: (outer.std_err * outer.std_err + grid_var).sqrt(),
        truncation: horizon,
        bias_bound: nested_bias(spec, &config.domain, horizon, config.dt),
        n_paths: config.n_paths,
    })
}

/// Per-path discounted sums `S_j = sum_k h e^{-a_j t_k} f_j(X_k)` for each term.
fn term_sums(ts: &[f64], spec: &NestedPotentialSpec, rec: &crate::diffusion::PathRecord, out: &mut [Vec<f64>]) {
    for (j, t) in spec.terms.iter().enumerate() {
        for k in 0..ts.len() - 1 {
            out[j][k] = (ts[k + 1] - ts[k]) * (-t.alpha * ts[k]).exp() * t.f.eval(rec.state(k));
        }
    }
}

/// Direct estimate of `E int_{s_1 < .. < s_k} prod_j e^{-a_j s_j} f_j(X_{s_j}) ds`
/// (ties between consecutive times get half weight).
pub fn time_ordered_integral(spec: &NestedPotentialSpec, start: &InitialLaw, config: &ResolventConfig) -> Result<ResolventEstimate> {
    spec.validate(&config.domain)?;
    let horizon = config.resolve_horizon(|t| product_bias(spec, &config.domain, t, config.dt))?;
    let cfg = config.sim(start.clone(), horizon, config.n_paths, config.seed);
    cfg.validate()?;
    let ts = cfg.recorded_times();
    let k = spec.order();
    let steps = ts.len() - 1;
    let values = run_paths(&cfg, None, "paths", |_, rec| {
        let mut a = vec![vec![0.0; steps]; k];
        term_sums(&ts, spec, rec, &mut a);
        // E_l(j) = a_l(j) (R_{l-1}(j) + E_{l-1}(j) / 2), R_{l-1}(j) = sum_{i<j} E_{l-1}(i)
        let mut e = a[0].clone();
        for al in a.iter().skip(1) {
            let mut running = 0.0;
            let mut next = vec![0.0; steps];
            for j in 0..steps {
                next[j] = al[j] * (running + 0.5 * e[j]);
                running += e[j];
            }
            e = next;
        }
        e.iter().sum::<f64>()
    })?;
    let (value, std_err) = mean_se(&values);
    Ok(ResolventEstimate {
        estimand: format!("time-ordered[{}]", spec.key()),
        value,
        std_err,
        truncation: horizon,
        bias_bound: product_bias(spec, &config.domain, horizon, config.dt),
        n_paths: config.n_paths,
    })
}

/// Direct estimate of `E prod_j int_0^inf e^{-a_j s} f_j(X_s) ds`.
pub fn product_integral(spec: &NestedPotentialSpec, start: &InitialLaw, config: &ResolventConfig) -> Result<ResolventEstimate> {
    spec.validate(&config.domain)?;
    let horizon = config.resolve_horizon(|t| product_bias(spec, &config.domain, t, config.dt))?;
    let cfg = config.sim(start.clone(), horizon, config.n_paths, config.seed);
    cfg.validate()?;
    let ts = cfg.recorded_times();
    let steps = ts.len() - 1;
    let values = run_paths(&cfg, None, "paths", |_, rec| {
        let mut a = vec![vec![0.0; steps]; spec.order()];
        term_sums(&ts, spec, rec, &mut a);
        a.iter().map(|row| row.iter().sum::<f64>()).product::<f64>()
    })?;
    let (value, std_err) = mean_se(&values);
    Ok(ResolventEstimate {
        estimand: format!("product[{}]", spec.key()),
        value,
        std_err,
        truncation: horizon,
        bias_bound: product_bias(spec, &config.domain, horizon, config.dt),
        n_paths: config.n_paths,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TermEstimate {
    pub label: String,
    pub value: f64,
    pub std_err: f64,
}

/// Two independent estimates of the same quantity.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub lemma: String,
    pub k: usize,
    pub spec: String,
    pub lhs: f64,
    pub rhs: f64,
    pub se_lhs: f64,
    pub se_rhs: f64,
    pub combined_se: f64,
    /// Sum of the truncation-bias bounds of both sides.
    pub bias_bound: f64,
    pub difference: f64,
    /// `|lhs - rhs| <= 3 * combined_se + bias_bound`.
    pub pass: bool,
    pub truncation: f64,
    pub terms: Vec<TermEstimate>,
}

fn report(lemma: &str, spec: &NestedPotentialSpec, lhs: &ResolventEstimate, rhs: (f64, f64, f64), terms: Vec<TermEstimate>) -> VerificationReport {
    let (rhs_value, se_rhs, bias_rhs) = rhs;
    let combined_se = (lhs.std_err * lhs.std_err + se_rhs * se_rhs).sqrt();
    let difference = lhs.value - rhs_value;
    let bias_bound = lhs.bias_bound + bias_rhs;
    VerificationReport {
        lemma: lemma.into(),
        k: spec.order(),
        spec: spec.key(),
        lhs: lhs.value,
        rhs: rhs_value,
        se_lhs: lhs.std_err,
        se_rhs,
        combined_se,
        bias_bound,
        difference,
        pass: difference.abs() <= 3.0 * combined_se + bias_bound,
        truncation: lhs.truncation,
        terms,
    }
}

fn with_seed(config: &ResolventConfig, seed: u64, horizon: f64) -> ResolventConfig {
    ResolventConfig { seed, truncation: Some(horizon), ..config.clone() }
}

/// Time-ordered integral (direct) against the nested potential, on
/// independent seed streams.
pub fn verify_composition(spec: &NestedPotentialSpec, start: &InitialLaw, config: &ResolventConfig) -> Result<VerificationReport> {
    spec.validate(&config.domain)?;
    let horizon = config.resolve_horizon(|t| {
        product_bias(spec, &config.domain, t, config.dt).max(nested_bias(spec, &config.domain, t, config.dt))
    })?;
    let lhs = time_ordered_integral(spec, start, &with_seed(config, rng::derive_seed(config.seed, "lhs"), horizon))?;
    let rhs = nested_potential(spec, start, &with_seed(config, rng::derive_seed(config.seed, "rhs"), horizon))?;
    let terms = vec![TermEstimate { label: rhs.estimand.clone(), value: rhs.value, std_err: rhs.std_err }];
    Ok(report("composition", spec, &lhs, (rhs.value, rhs.std_err, rhs.bias_bound), terms))
}

/// Product of potentials (direct) against the sum of nested potentials
/// over all orderings. For `k = 1` both sides use the configured seed and
/// coincide with [`estimate_potential`].
pub fn verify_product_formula(spec: &NestedPotentialSpec, start: &InitialLaw, config: &ResolventConfig) -> Result<VerificationReport> {
    spec.validate(&config.domain)?;
    if spec.order() == 1 {
        let lhs = estimate_potential(&spec.terms[0].f, spec.terms[0].alpha, start, config)?;
        let rhs = nested_potential(spec, start, config)?;
        let terms = vec![TermEstimate { label: rhs.estimand.clone(), value: rhs.value, std_err: rhs.std_err }];
        return Ok(report("product", spec, &lhs, (rhs.value, rhs.std_err, rhs.bias_bound), terms));
    }
    let perms = permutations(spec.order());
    let horizon = config.resolve_horizon(|t| {
        let rhs: f64 = perms.iter().map(|p| nested_bias(&spec.permuted(p), &config.domain, t, config.dt)).sum();
        product_bias(spec, &config.domain, t, config.dt).max(rhs)
    })?;
    let lhs = product_integral(spec, start, &with_seed(config, rng::derive_seed(config.seed, "lhs"), horizon))?;
    let rhs_seed = rng::derive_seed(config.seed, "rhs");
    // canonical order: terms keyed by their ordered (f, a) list, so the
    // result does not depend on how the input list is ordered
    let mut keyed: Vec<(String, NestedPotentialSpec)> = perms
        .iter()
        .map(|p| {
            let s = spec.permuted(p);
            (s.key(), s)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let mut terms: Vec<TermEstimate> = Vec::new();
    let (mut value, mut var, mut bias) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < keyed.len() {
        // identical orderings (repeated terms) share a seed and are fully correlated
        let mut j = i;
        while j < keyed.len() && keyed[j].0 == keyed[i].0 {
            j += 1;
        }
        let count = (j - i) as f64;
        let term_cfg = with_seed(config, rng::derive_seed(rhs_seed, &keyed[i].0), horizon);
        let est = nested_potential(&keyed[i].1, start, &term_cfg)?;
        value += count * est.value;
        var += (count * est.std_err).powi(2);
        bias += count * est.bias_bound;
        for _ in i..j {
            terms.push(TermEstimate { label: est.estimand.clone(), value: est.value, std_err: est.std_err });
        }
        i = j;
    }
    Ok(report("product", spec, &lhs, (value, var.sqrt(), bias), terms))
}

/// Regression t-statistics of a residual on a polynomial basis of the state.
struct ResidualFit {
    t_stats: Vec<f64>,
}

/// Regresses `r` on `basis(x)`; `extra_var(pinv, gram_rows)` adds the
/// variance of each coefficient that does not come from the residuals.
fn residual_t_stats(xs: &[f64], d: usize, r: &[f64], basis: &RegressionBasis, extra_var: impl Fn(&[f64]) -> Vec<f64>) -> Result<ResidualFit> {
    let n = r.len();
    let p = basis.size();
    if n <= p {
        return Err(Error::IllPosed(format!("{n} samples cannot determine {p} coefficients")));
    }
    let ne = NormalEquations::accumulate(n, p, 1, |i, phi, y| {
        basis.eval_into(&xs[i * d..(i + 1) * d], phi);
        y[0] = r[i];
    });
    let ls = solve_normal_equations(&ne);
    let mut phi = vec![0.0; p];
    let mut ssr = 0.0;
    for i in 0..n {
        basis.eval_into(&xs[i * d..(i + 1) * d], &mut phi);
        let pred: f64 = phi.iter().zip(&ls.coef).map(|(a, b)| a * b).sum();
        ssr += (r[i] - pred).powi(2);
    }
    let sigma2 = ssr / (n - p) as f64;
    let extra = extra_var(&ls.pinv);
    let t_stats = (0..p)
        .map(|b| {
            let var = sigma2 * ls.pinv[b * p + b] + extra[b];
            if ls.coef[b] == 0.0 {
                0.0
            } else if var > 0.0 {
                ls.coef[b] / var.sqrt()
            } else {
                f64::INFINITY
            }
        })
        .collect();
    Ok(ResidualFit { t_stats })
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleProbe {
    pub t: f64,
    pub gap: f64,
    pub t_stats: Vec<f64>,
    pub max_abs_t: f64,
    /// Mean increment over the gap with its standard error, reported beside
    /// the t-statistics: the step scheme and grid interpolation leave a small
    /// systematic drift that dominates at large path counts.
    pub mean_increment: f64,
    pub mean_increment_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    pub function: String,
    pub alpha: f64,
    pub n_paths: usize,
    pub probes: Vec<MartingaleProbe>,
    pub max_abs_t: f64,
    /// `max_abs_t < 4`.
    pub pass: bool,
}

/// Number of probe times of [`potential_martingale_check`].
pub const MARTINGALE_PROBES: usize = 5;

/// Tests `E[M_{t+D} - M_t | X_t] = 0` for
/// `M_t = int_0^t e^{-a s} f(X_s) ds + e^{-a t} U(X_t)` at five probe times
/// (`D ~ 0.05`), regressing increments on cubic polynomials of `X_t`. The
/// time integral uses exact exponential weights per step so that constant
/// `f` with `U = c / a` gives a constant `M`.
pub fn potential_martingale_check(
    f: &StateFunction,
    alpha: f64,
    potential: &GridFunction,
    start: &InitialLaw,
    config: &ResolventConfig,
) -> Result<MartingaleReport> {
    check_rate(alpha)?;
    f.validate(config.domain.dim())?;
    let horizon = config.truncation.unwrap_or(1.0);
    let cfg = config.sim(start.clone(), horizon, config.n_paths, config.seed);
    cfg.validate()?;
    let ts = cfg.recorded_times();
    let steps = ts.len() - 1;
    let gap = ((0.05 / config.dt).round() as usize).clamp(1, steps.saturating_sub(1).max(1));
    if steps < gap + MARTINGALE_PROBES {
        return Err(Error::Config(format!("horizon {horizon} is too short for {MARTINGALE_PROBES} probes with dt = {}", config.dt)));
    }
    let probes: Vec<usize> = (1..=MARTINGALE_PROBES).map(|i| i * (steps - gap) / MARTINGALE_PROBES).collect();
    let d = config.domain.dim();
    let per_path = run_paths(&cfg, None, "paths", |_, rec| {
        let mut integral = 0.0;
        let mut m = vec![0.0; steps + 1];
        for k in 0..=steps {
            m[k] = integral + (-alpha * ts[k]).exp() * potential.interpolate(rec.state(k));
            if k < steps {
                let w = ((-alpha * ts[k]).exp() - (-alpha * ts[k + 1]).exp()) / alpha;
                integral += w * f.eval(rec.state(k));
            }
        }
        let mut out = Vec::with_capacity(probes.len() * (d + 1));
        for &k in &probes {
            out.extend_from_slice(rec.state(k));
            let inc = m[k + gap] - m[k];
            // rounding-level increments are zero
            let scale = 1.0 + m[k].abs() + m[k + gap].abs();
            out.push(if inc.abs() <= 1e-12 * scale { 0.0 } else { inc });
        }
        out
    })?;
    let basis = RegressionBasis::polynomial(&config.domain, 3);
    let mut reports = Vec::new();
    for (pi, &k) in probes.iter().enumerate() {
        let mut xs = Vec::with_capacity(per_path.len() * d);
        let mut r = Vec::with_capacity(per_path.len());
        for row in &per_path {
            let off = pi * (d + 1);
            xs.extend_from_slice(&row[off..off + d]);
            r.push(row[off + d]);
        }
        let fit = residual_t_stats(&xs, d, &r, &basis, |_| vec![0.0; basis.size()])?;
        let max_abs_t = fit.t_stats.iter().map(|t| t.abs()).fold(0.0, f64::max);
        let (mean_increment, mean_increment_se) = mean_se(&r);
        reports.push(MartingaleProbe { t: ts[k], gap: ts[k + gap] - ts[k], t_stats: fit.t_stats, max_abs_t, mean_increment, mean_increment_se });
    }
    let max_abs_t = reports.iter().map(|p| p.max_abs_t).fold(0.0, f64::max);
    Ok(MartingaleReport {
        function: f.name(),
        alpha,
        n_paths: config.n_paths,
        probes: reports,
        max_abs_t,
        pass: max_abs_t < 4.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionalProductReport {
    pub t: f64,
    pub spec: String,
    pub n_paths: usize,
    /// Mean of the future product `prod_j int_t^T e^{-a_j s} f_j(X_s) ds`.
    pub mean_direct: f64,
    /// Mean of `e^{-(a_1 + a_2) t} sum_perms F(X_t)`.
    pub mean_assembled: f64,
    /// t-statistics of the residual regression on cubic polynomials of `X_t`.
    pub t_stats: Vec<f64>,
    pub max_abs_t: f64,
    pub truncation: f64,
    pub pass: bool,
}

/// Checks `E[prod_j int_t^inf e^{-a_j s} f_j(X_s) ds | F_t]
/// = e^{-(a_1 + a_2) t} sum_perms F_perm(X_t)` for `k = 2`, where `F_perm`
/// are nested potentials tabulated on the grid: the residual between the
/// per-path product and the assembled function of `X_t` is regressed on a
/// cubic basis and its coefficients must be insignificant (`|t| < 4`).
pub fn conditional_product_check(spec: &NestedPotentialSpec, t: f64, start: &InitialLaw, config: &ResolventConfig) -> Result<ConditionalProductReport> {
    spec.validate(&config.domain)?;
    if spec.order() != 2 {
        return Err(Error::Input(format!("the conditional product check takes two terms, got {}", spec.order())));
    }
    require_grid_dim(config)?;
    let kt = (t / config.dt).round() as usize;
    if !(t > 0.0) || (kt as f64 * config.dt - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::Input(format!("check time {t} must be a positive multiple of dt = {}", config.dt)));
    }
    let rate = spec.rate(0);
    let perms = permutations(2);
    let disc = (-rate * t).exp();
    let horizon = config.resolve_horizon(|h| {
        if h <= t + config.dt {
            return f64::INFINITY;
        }
        let table: f64 = perms.iter().map(|p| nested_bias(&spec.permuted(p), &config.domain, h, config.dt)).sum();
        disc * (product_bias(spec, &config.domain, h - t, config.dt) + table)
    })?;
    let grid = config.grid()?;
    let rhs_seed = rng::derive_seed(config.seed, "rhs");
    let mut stacks = Vec::new();
    for p in &perms {
        let s = spec.permuted(p);
        stacks.push(build_levels(&s, config, &grid, horizon, rng::derive_seed(rhs_seed, &s.key()), 0)?);
    }
    let assembled = |x: &[f64]| -> f64 { disc * stacks.iter().map(|st| st[0].table.interpolate(x)).sum::<f64>() };

    let cfg = config.sim(start.clone(), horizon, config.n_paths, rng::derive_seed(config.seed, "lhs"));
    cfg.validate()?;
    let ts = cfg.recorded_times();
    let steps = ts.len() - 1;
    let d = config.domain.dim();
    let rows = run_paths(&cfg, None, "paths", |_, rec| {
        let mut prod = 1.0;
        for term in &spec.terms {
            let mut s = 0.0;
            for k in kt..steps {
                s += (ts[k + 1] - ts[k]) * (-term.alpha * ts[k]).exp() * term.f.eval(rec.state(k));
            }
            prod *= s;
        }
        let x = rec.state(kt).to_vec();
        (x, prod)
    })?;
    let n = rows.len();
    let mut xs = Vec::with_capacity(n * d);
    let mut r = Vec::with_capacity(n);
    let (mut mean_direct, mut mean_assembled) = (0.0, 0.0);
    for (x, prod) in &rows {
        let a = assembled(x);
        mean_direct += prod;
        mean_assembled += a;
        xs.extend_from_slice(x);
        r.push(prod - a);
    }
    mean_direct /= n as f64;
    mean_assembled /= n as f64;

    let basis = RegressionBasis::polynomial(&config.domain, 3);
    let p = basis.size();
    let n_nodes = grid.len();
    // q[b][node] = sum_paths phi_b(X_t) w_node(X_t)
    let mut q = vec![0.0; p * n_nodes];
    let mut phi = vec![0.0; p];
    for i in 0..n {
        let x = &xs[i * d..(i + 1) * d];
        basis.eval_into(x, &mut phi);
        grid.for_each_weight(x, |node, w| {
            for b in 0..p {
                q[b * n_nodes + node] += phi[b] * w;
            }
        });
    }
    let fit = residual_t_stats(&xs, d, &r, &basis, |pinv| {
        (0..p)
            .map(|b| {
                // sensitivity of coefficient b to the tabulated nodes
                let s: Vec<f64> = (0..n_nodes)
                    .map(|node| -disc * (0..p).map(|c| pinv[b * p + c] * q[c * n_nodes + node]).sum::<f64>())
                    .collect();
                stacks.iter().map(|st| propagated_variance(s.clone(), st)).sum()
            })
            .collect()
    })?;
    let max_abs_t = fit.t_stats.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(ConditionalProductReport {
        t,
        spec: spec.key(),
        n_paths: n,
        mean_direct,
        mean_assembled,
        t_stats: fit.t_stats,
        max_abs_t,
        truncation: horizon,
        pass: max_abs_t < 4.0,
    })
}

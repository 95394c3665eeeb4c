//! Projected Euler-Maruyama simulation of reflecting diffusions.
//!
//! Each step draws `dW ~ N(0, h I)`, sets `dM = sigma(X) dW` with
//! `sigma sigma^T = a(X)`, adds the divergence drift `dA = b(X) h`, and
//! projects the proposal back onto the closed domain. The projection
//! correction is kept on the finite-variation side so the stored `dM` is an
//! exact discrete martingale increment.

use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, DriftWorkspace};
use crate::domain::{DomainDescriptor, DomainSpec};
use crate::error::{Error, Result};
use crate::law::InitialLaw;
use crate::linalg::cholesky_in_place;
use crate::{par, rng};

/// Paths simulated per random stream.
pub const PATH_BLOCK: usize = 256;

/// Magic bytes of the binary bundle format.
pub const BUNDLE_MAGIC: [u8; 8] = *b"RBDF1\0\0\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DriftMode {
    #[default]
    FiniteDifference,
    /// Drop the divergence drift (for discontinuous fields); biased.
    ZeroOverride,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub domain: DomainSpec,
    pub field: CoefficientField,
    pub initial_law: InitialLaw,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub drift_mode: DriftMode,
    /// Keep every `record_every`-th simulated step; increments in between are
    /// summed and reflection flags OR-ed.
    pub record_every: usize,
}

/// Serializable echo of a simulation config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub domain: DomainDescriptor,
    pub field: String,
    pub lambda: f64,
    pub derivative_step: f64,
    pub initial_law: InitialLaw,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub drift_mode: DriftMode,
    pub record_every: usize,
}

impl SimulationConfig {
    pub fn new(
        domain: DomainSpec,
        field: CoefficientField,
        initial_law: InitialLaw,
        horizon: f64,
        dt: f64,
        n_paths: usize,
        seed: u64,
    ) -> Self {
        Self {
            domain,
            field,
            initial_law,
            horizon,
            dt,
            n_paths,
            seed,
            drift_mode: DriftMode::FiniteDifference,
            record_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.dt > 0.0) || !(self.dt < self.horizon) {
            return Err(Error::Config(format!("need 0 < dt < T, got dt = {} and T = {}", self.dt, self.horizon)));
        }
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if self.field.dim() != self.domain.dim() {
            return Err(Error::Config(format!(
                "field dimension {} differs from domain dimension {}",
                self.field.dim(),
                self.domain.dim()
            )));
        }
        self.initial_law.validate(&self.domain)
    }

    /// Number of simulated steps, `ceil(T / dt)` with a shorter final step.
    pub fn n_fine_steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    fn fine_time(&self, k: usize, n_fine: usize) -> f64 {
        if k >= n_fine {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// Fine-step indices that are stored, always including 0 and the last.
    fn recorded_indices(&self) -> Vec<usize> {
        let n = self.n_fine_steps();
        let mut idx: Vec<usize> = (0..n).step_by(self.record_every).collect();
        idx.push(n);
        idx
    }

    /// Times of the stored grid.
    pub fn recorded_times(&self) -> Vec<f64> {
        let n = self.n_fine_steps();
        self.recorded_indices().into_iter().map(|k| self.fine_time(k, n)).collect()
    }

    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            domain: self.domain.descriptor(),
            field: self.field.name().to_string(),
            lambda: self.field.lambda(),
            derivative_step: self.field.derivative_step(),
            initial_law: self.initial_law.clone(),
            horizon: self.horizon,
            dt: self.dt,
            n_paths: self.n_paths,
            seed: self.seed,
            drift_mode: self.drift_mode,
            record_every: self.record_every,
        }
    }
}

/// One simulated path at stored resolution.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub dim: usize,
    /// `(K + 1) x d`.
    pub states: Vec<f64>,
    /// `K x d`.
    pub mart: Vec<f64>,
    /// `K x d`.
    pub fv: Vec<f64>,
    /// `K`.
    pub reflected: Vec<bool>,
}

impl PathRecord {
    fn new(dim: usize, k: usize) -> Self {
        Self {
            dim,
            states: vec![0.0; (k + 1) * dim],
            mart: vec![0.0; k * dim],
            fv: vec![0.0; k * dim],
            reflected: vec![false; k],
        }
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }
}

struct Stepper<'a> {
    cfg: &'a SimulationConfig,
    d: usize,
    a: Vec<f64>,
    dw: Vec<f64>,
    dm: Vec<f64>,
    drift: Vec<f64>,
    ws: DriftWorkspace,
}

impl<'a> Stepper<'a> {
    fn new(cfg: &'a SimulationConfig) -> Self {
        let d = cfg.domain.dim();
        Self {
            cfg,
            d,
            a: vec![0.0; d * d],
            dw: vec![0.0; d],
            dm: vec![0.0; d],
            drift: vec![0.0; d],
            ws: DriftWorkspace::new(d),
        }
    }

    /// Advances `x` by one step of length `h`, accumulating increments.
    fn step(&mut self, x: &mut [f64], h: f64, rng: &mut ChaCha8Rng, dm_acc: &mut [f64], da_acc: &mut [f64]) -> Result<bool> {
        let d = self.d;
        self.cfg.field.evaluate_into(x, &mut self.a)?;
        cholesky_in_place(&mut self.a, d).map_err(|k| {
            Error::Ellipticity(format!(
                "coefficient matrix at x = {x:?} fails positive definiteness at leading minor of order {k}"
            ))
        })?;
        let sq = h.sqrt();
        for w in self.dw.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w = z * sq;
        }
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..=i {
                s += self.a[i * d + j] * self.dw[j];
            }
            self.dm[i] = s;
        }
        match self.cfg.drift_mode {
            DriftMode::FiniteDifference => {
                self.cfg.field.drift_into(&self.cfg.domain, x, &mut self.ws, &mut self.drift)?;
            }
            DriftMode::ZeroOverride => self.drift.fill(0.0),
        }
        for i in 0..d {
            let da = self.drift[i] * h;
            dm_acc[i] += self.dm[i];
            da_acc[i] += da;
            x[i] = x[i] + self.dm[i] + da;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state {x:?} during simulation")));
        }
        self.cfg.domain.project_in_place(x)
    }
}

/// Simulates one path into `rec`, drawing from `rng`.
fn simulate_path(
    cfg: &SimulationConfig,
    start: Option<&[f64]>,
    recorded: &[usize],
    stepper: &mut Stepper<'_>,
    rng: &mut ChaCha8Rng,
    rec: &mut PathRecord,
) -> Result<()> {
    let d = cfg.domain.dim();
    let n_fine = *recorded.last().expect("nonempty grid");
    let mut x = vec![0.0; d];
    match start {
        Some(p) => x.copy_from_slice(p),
        None => cfg.initial_law.sample(&cfg.domain, rng, &mut x),
    }
    rec.states[..d].copy_from_slice(&x);
    for k in 0..recorded.len() - 1 {
        let dm = &mut rec.mart[k * d..(k + 1) * d];
        let da = &mut rec.fv[k * d..(k + 1) * d];
        dm.fill(0.0);
        da.fill(0.0);
        let mut flag = false;
        for j in recorded[k]..recorded[k + 1] {
            let h = cfg.fine_time(j + 1, n_fine) - cfg.fine_time(j, n_fine);
            flag |= stepper.step(&mut x, h, rng, dm, da)?;
        }
        rec.reflected[k] = flag;
        rec.states[(k + 1) * d..(k + 2) * d].copy_from_slice(&x);
    }
    Ok(())
}

/// Runs every path of `cfg` and hands each record to `per_path` without
/// storing the ensemble. Results are returned in path order.
pub fn simulate_each<T, F>(cfg: &SimulationConfig, per_path: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &PathRecord) -> T + Sync + Send,
{
    cfg.validate()?;
    run_paths(cfg, None, "paths", per_path)
}

/// As [`simulate_each`], but every path starts at `start` (which may lie on
/// the boundary) and randomness comes from the named stream family.
pub(crate) fn run_paths<T, F>(cfg: &SimulationConfig, start: Option<&[f64]>, stream: &str, per_path: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &PathRecord) -> T + Sync + Send,
{
    let recorded = cfg.recorded_indices();
    let k = recorded.len() - 1;
    let d = cfg.domain.dim();
    let n_blocks = cfg.n_paths.div_ceil(PATH_BLOCK);
    let blocks = par::map_indexed(n_blocks, |b| -> Result<Vec<T>> {
        let mut rng = rng::stream(cfg.seed, stream, b as u64);
        let mut stepper = Stepper::new(cfg);
        let mut rec = PathRecord::new(d, k);
        let lo = b * PATH_BLOCK;
        let hi = (lo + PATH_BLOCK).min(cfg.n_paths);
        let mut out = Vec::with_capacity(hi - lo);
        for p in lo..hi {
            simulate_path(cfg, start, &recorded, &mut stepper, &mut rng, &mut rec)?;
            out.push(per_path(p, &rec));
        }
        Ok(out)
    });
    let mut all = Vec::with_capacity(cfg.n_paths);
    for b in blocks {
        all.extend(b?);
    }
    Ok(all)
}

/// Stored ensemble of reflected paths with their increment decomposition.
#[derive(Debug, Clone)]
pub struct PathBundle {
    config: SimulationConfig,
    times: Vec<f64>,
    dim: usize,
    n_paths: usize,
    n_steps: usize,
    states: Vec<f64>,
    mart: Vec<f64>,
    fv: Vec<f64>,
    reflected: Vec<bool>,
    fingerprint: u64,
}

/// Simulates and stores a full ensemble.
pub fn simulate(cfg: &SimulationConfig) -> Result<PathBundle> {
    cfg.validate()?;
    let recorded = cfg.recorded_indices();
    let k = recorded.len() - 1;
    let d = cfg.domain.dim();
    let n = cfg.n_paths;
    let mut states = vec![0.0; n * (k + 1) * d];
    let mut mart = vec![0.0; n * k * d];
    let mut fv = vec![0.0; n * k * d];
    let mut reflected = vec![false; n * k];

    let fill = |b: usize, st: &mut [f64], mt: &mut [f64], f: &mut [f64], fl: &mut [bool]| -> Result<()> {
        let mut rng = rng::stream(cfg.seed, "paths", b as u64);
        let mut stepper = Stepper::new(cfg);
        let mut rec = PathRecord::new(d, k);
        let count = fl.len() / k.max(1);
        for p in 0..count {
            simulate_path(cfg, None, &recorded, &mut stepper, &mut rng, &mut rec)?;
            st[p * (k + 1) * d..(p + 1) * (k + 1) * d].copy_from_slice(&rec.states);
            mt[p * k * d..(p + 1) * k * d].copy_from_slice(&rec.mart);
            f[p * k * d..(p + 1) * k * d].copy_from_slice(&rec.fv);
            fl[p * k..(p + 1) * k].copy_from_slice(&rec.reflected);
        }
        Ok(())
    };
    let results: Vec<Result<()>> = {
        let sc = PATH_BLOCK * (k + 1) * d;
        let mc = PATH_BLOCK * k * d;
        let fc = PATH_BLOCK * k;
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            states
                .par_chunks_mut(sc)
                .zip(mart.par_chunks_mut(mc))
                .zip(fv.par_chunks_mut(mc))
                .zip(reflected.par_chunks_mut(fc))
                .enumerate()
                .map(|(b, (((st, mt), f), fl))| fill(b, st, mt, f, fl))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            states
                .chunks_mut(sc)
                .zip(mart.chunks_mut(mc))
                .zip(fv.chunks_mut(mc))
                .zip(reflected.chunks_mut(fc))
                .enumerate()
                .map(|(b, (((st, mt), f), fl))| fill(b, st, mt, f, fl))
                .collect()
        }
    };
    for r in results {
        r?;
    }
    let times = cfg.recorded_times();
    Ok(PathBundle::from_parts(cfg.clone(), times, states, mart, fv, reflected))
}

impl PathBundle {
    fn from_parts(
        config: SimulationConfig,
        times: Vec<f64>,
        states: Vec<f64>,
        mart: Vec<f64>,
        fv: Vec<f64>,
        reflected: Vec<bool>,
    ) -> Self {
        let dim = config.domain.dim();
        let n_steps = times.len() - 1;
        let n_paths = config.n_paths;
        let fingerprint = rng::fingerprint_f64(rng::fingerprint_f64(config.seed, &states), &mart);
        Self { config, times, dim, n_paths, n_steps, states, mart, fv, reflected, fingerprint }
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Number of stored steps `K` (the grid has `K + 1` times).
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn step_length(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Hash of the stored states and martingale increments.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    #[inline]
    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * (self.n_steps + 1) + k) * self.dim;
        &self.states[o..o + self.dim]
    }

    #[inline]
    pub fn mart_increment(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * self.n_steps + k) * self.dim;
        &self.mart[o..o + self.dim]
    }

    #[inline]
    pub fn fv_increment(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * self.n_steps + k) * self.dim;
        &self.fv[o..o + self.dim]
    }

    pub fn reflected(&self, path: usize, k: usize) -> bool {
        self.reflected[path * self.n_steps + k]
    }

    /// Projected minus unprojected proposal, `X_{k+1} - (X_k + dM + dA)`;
    /// exactly zero on steps without projection.
    pub fn reflection_correction(&self, path: usize, k: usize) -> Vec<f64> {
        if !self.reflected(path, k) {
            return vec![0.0; self.dim];
        }
        let (x0, x1) = (self.state(path, k), self.state(path, k + 1));
        let (dm, da) = (self.mart_increment(path, k), self.fv_increment(path, k));
        (0..self.dim).map(|i| x1[i] - (x0[i] + dm[i] + da[i])).collect()
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Aggregates `factor` consecutive stored steps into one.
    pub fn coarsen(&self, factor: usize) -> Result<PathBundle> {
        if factor == 0 {
            return Err(Error::Input("coarsening factor must be at least 1".into()));
        }
        let idx: Vec<usize> = (0..self.n_steps).step_by(factor).chain(std::iter::once(self.n_steps)).collect();
        let k = idx.len() - 1;
        let d = self.dim;
        let n = self.n_paths;
        let mut states = Vec::with_capacity(n * (k + 1) * d);
        let mut mart = vec![0.0; n * k * d];
        let mut fv = vec![0.0; n * k * d];
        let mut reflected = vec![false; n * k];
        for p in 0..n {
            for &j in &idx {
                states.extend_from_slice(self.state(p, j));
            }
            for c in 0..k {
                for j in idx[c]..idx[c + 1] {
                    for i in 0..d {
                        mart[(p * k + c) * d + i] += self.mart_increment(p, j)[i];
                        fv[(p * k + c) * d + i] += self.fv_increment(p, j)[i];
                    }
                    reflected[p * k + c] |= self.reflected(p, j);
                }
            }
        }
        let mut config = self.config.clone();
        config.record_every *= factor;
        let times = idx.iter().map(|j| self.times[*j]).collect();
        Ok(PathBundle::from_parts(config, times, states, mart, fv, reflected))
    }

    /// Writes the little-endian binary form: magic, `d`, `K`, `n_paths`, the
    /// stored step length, the seed, then states, martingale and
    /// finite-variation arrays in row-major order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&BUNDLE_MAGIC)?;
        for v in [self.dim as u64, self.n_steps as u64, self.n_paths as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        let step = self.config.dt * self.config.record_every as f64;
        w.write_all(&step.to_le_bytes())?;
        w.write_all(&self.config.seed.to_le_bytes())?;
        for arr in [&self.states, &self.mart, &self.fv] {
            let mut buf = Vec::with_capacity(arr.len() * 8);
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }
}

/// Contents of a binary bundle file.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleData {
    pub dim: usize,
    pub n_steps: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub states: Vec<f64>,
    pub mart: Vec<f64>,
    pub fv: Vec<f64>,
}

pub fn read_bundle_binary<R: Read>(mut r: R) -> Result<BundleData> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != BUNDLE_MAGIC {
        return Err(Error::Input("not a bundle file (bad magic)".into()));
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word)?;
        Ok(word)
    };
    let dim = u64::from_le_bytes(next(&mut r)?) as usize;
    let n_steps = u64::from_le_bytes(next(&mut r)?) as usize;
    let n_paths = u64::from_le_bytes(next(&mut r)?) as usize;
    let dt = f64::from_le_bytes(next(&mut r)?);
    let seed = u64::from_le_bytes(next(&mut r)?);
    let mut read_array = |len: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let states = read_array(n_paths * (n_steps + 1) * dim)?;
    let mart = read_array(n_paths * n_steps * dim)?;
    let fv = read_array(n_paths * n_steps * dim)?;
    Ok(BundleData { dim, n_steps, n_paths, dt, seed, states, mart, fv })
}

/// Realized versus predicted covariation of one coordinate pair.
#[derive(Debug, Clone, Serialize)]
pub struct QvPair {
    pub i: usize,
    pub j: usize,
    /// Ensemble mean of `sum dM^i dM^j`.
    pub mean_realized: f64,
    /// Ensemble mean of `sum a^{ij}(X_k) h_k`.
    pub mean_expected: f64,
    /// Mean over paths of `|realized - expected|`.
    pub mean_abs_diff: f64,
    /// `mean_abs_diff` divided by the pair's scale.
    pub pathwise_ratio: f64,
    /// `|mean_realized - mean_expected|` divided by the pair's scale.
    pub ensemble_ratio: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct QvReport {
    pub tolerance: f64,
    pub pairs: Vec<QvPair>,
}

/// Compares realized quadratic covariation of the stored martingale
/// increments against the integrated coefficient field.
///
/// Diagonal pairs are scaled by the mean of `|sum a^{ii} h|`; off-diagonal
/// pairs by the geometric mean of the two diagonal scales. A pair is flagged
/// when its ensemble ratio exceeds `tolerance`.
pub fn quadratic_variation_report(bundle: &PathBundle, tolerance: f64) -> Result<QvReport> {
    let d = bundle.dim();
    let n = bundle.n_paths();
    let k = bundle.n_steps();
    if n == 0 || k == 0 {
        return Err(Error::Input("empty bundle".into()));
    }
    let field = &bundle.config().field;
    let per_path = par::map_indexed(n, |p| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut realized = vec![0.0; d * d];
        let mut expected = vec![0.0; d * d];
        let mut a = vec![0.0; d * d];
        for s in 0..k {
            let dm = bundle.mart_increment(p, s);
            field.evaluate_into(bundle.state(p, s), &mut a)?;
            let h = bundle.step_length(s);
            for i in 0..d {
                for j in 0..d {
                    realized[i * d + j] += dm[i] * dm[j];
                    expected[i * d + j] += a[i * d + j] * h;
                }
            }
        }
        Ok((realized, expected))
    });
    let mut sum_r = vec![0.0; d * d];
    let mut sum_e = vec![0.0; d * d];
    let mut sum_abs_diff = vec![0.0; d * d];
    let mut sum_abs_e = vec![0.0; d * d];
    for item in per_path {
        let (r, e) = item?;
        for m in 0..d * d {
            sum_r[m] += r[m];
            sum_e[m] += e[m];
            sum_abs_diff[m] += (r[m] - e[m]).abs();
            sum_abs_e[m] += e[m].abs();
        }
    }
    let nf = n as f64;
    let scale = |i: usize, j: usize| -> f64 {
        if i == j {
            sum_abs_e[i * d + i] / nf
        } else {
            (sum_abs_e[i * d + i] / nf * sum_abs_e[j * d + j] / nf).sqrt()
        }
    };
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in i..d {
            let m = i * d + j;
            let s = scale(i, j);
            let mean_realized = sum_r[m] / nf;
            let mean_expected = sum_e[m] / nf;
            let mean_abs_diff = sum_abs_diff[m] / nf;
            let pathwise_ratio = mean_abs_diff / s;
            let ensemble_ratio = (mean_realized - mean_expected).abs() / s;
            pairs.push(QvPair {
                i,
                j,
                mean_realized,
                mean_expected,
                mean_abs_diff,
                pathwise_ratio,
                ensemble_ratio,
                flagged: !(ensemble_ratio <= tolerance),
            });
        }
    }
    Ok(QvReport { tolerance, pairs })
}

/// Per-path left-endpoint quadrature of `int_0^T e^{-alpha s} g(X_s) ds`.
pub fn functional_integral<G>(bundle: &PathBundle, g: G, alpha: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> f64 + Sync + Send,
{
    if !(alpha >= 0.0) {
        return Err(Error::Input(format!("alpha must be nonnegative, got {alpha}")));
    }
    let k = bundle.n_steps();
    let weights: Vec<f64> = (0..k).map(|s| (-alpha * bundle.times()[s]).exp() * bundle.step_length(s)).collect();
    let out = par::map_indexed(bundle.n_paths(), |p| {
        let mut acc = 0.0;
        for (s, w) in weights.iter().enumerate() {
            let v = g(bundle.state(p, s));
            if !v.is_finite() {
                return Err(Error::Numerical(format!("integrand is not finite at {:?}", bundle.state(p, s))));
            }
            acc += w * v;
        }
        Ok(acc)
    });
    out.into_iter().collect()
}

//! Data generator and coverage experiments.
//!
//! Each study draws person-years for both arms from `U(low, high)`, a latent
//! control log-rate `ξ ~ N(μ, σ²)`, a treated log-rate
//! `η = β₀ + β₁ξ + N(0, τ²)`, and Poisson event counts. Replicate `i` of a
//! run with seed `s` uses its own ChaCha stream `(s, i)`, so results do not
//! depend on how replicates are spread over threads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::data::{DataError, Dataset, StudyCounts};
use crate::estimation::{wls_fit, OptimizerConfig};
use crate::skovgaard::{critical_value, Analysis};

/// Mixes the cell index into the run seed; cell 0 keeps the seed itself.
const CELL_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

pub const CSV_HEADER: &str = "scenario,n,tau,sigma,method,coverage,mc_se,failures,replicates";

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown scenario preset {0} (use 1 to 4)")]
    UnknownPreset(u32),
    #[error("failed to start worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub beta0: f64,
    pub beta1: f64,
    pub mu: f64,
    /// Standard deviation of the regression error.
    pub tau: f64,
    /// Standard deviation of the latent control log-rate.
    pub sigma: f64,
}

impl Scenario {
    /// The four event-rate settings, from highest to lowest rate.
    pub fn preset(id: u32, tau: f64, sigma: f64) -> Result<Self, SimulationError> {
        let (beta0, beta1, mu) = match id {
            1 => (0.0, 1.0, 1.0),
            2 => (-1.5, 1.0, -0.5),
            3 => (-1.5, 1.0, -2.5),
            4 => (-3.0, 1.0, -2.0),
            other => return Err(SimulationError::UnknownPreset(other)),
        };
        let s = Scenario {
            beta0,
            beta1,
            mu,
            tau,
            sigma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        for (name, v) in [("beta0", self.beta0), ("beta1", self.beta1), ("mu", self.mu)] {
            if !v.is_finite() {
                return Err(SimulationError::InvalidScenario(format!("{name} must be finite")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SimulationError::InvalidScenario("tau must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(SimulationError::InvalidScenario("sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub person_years: (f64, f64),
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub optimizer: OptimizerConfig,
}

impl SimulationConfig {
    pub fn new(scenario: Scenario, n: usize, replicates: usize, seed: u64) -> Self {
        SimulationConfig {
            scenario,
            n,
            replicates,
            level: 0.95,
            seed,
            person_years: (100.0, 5000.0),
            workers: 0,
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        self.scenario.validate()?;
        if self.replicates < 1 {
            return Err(SimulationError::InvalidConfig("replicates must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(SimulationError::InvalidConfig("need at least 2 studies".into()));
        }
        let (lo, hi) = self.person_years;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(SimulationError::InvalidConfig(
                "person-years range must satisfy 0 < low < high".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(SimulationError::InvalidConfig("level must lie in (0, 1)".into()));
        }
        self.optimizer
            .validate()
            .map_err(|e| SimulationError::InvalidConfig(e.to_string()))
    }
}

/// Random stream for replicate `index` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one meta-analysis; returns it with the true slope.
pub fn simulate_dataset<R: Rng + ?Sized>(
    scenario: &Scenario,
    n: usize,
    person_years: (f64, f64),
    rng: &mut R,
) -> Result<(Dataset, f64), SimulationError> {
    scenario.validate()?;
    let latent = Normal::new(scenario.mu, scenario.sigma)
        .map_err(|e| SimulationError::InvalidScenario(e.to_string()))?;
    let error = Normal::new(0.0, scenario.tau)
        .map_err(|e| SimulationError::InvalidScenario(e.to_string()))?;
    let counts = (0..n)
        .map(|_| {
            let py_t = rng.random_range(person_years.0..person_years.1);
            let py_c = rng.random_range(person_years.0..person_years.1);
            let xi: f64 = latent.sample(rng);
            let eta = scenario.beta0 + scenario.beta1 * xi + error.sample(rng);
            let d_t = poisson(py_t * eta.exp(), rng)?;
            let d_c = poisson(py_c * xi.exp(), rng)?;
            Ok(StudyCounts::new(d_t, py_t, d_c, py_c))
        })
        .collect::<Result<Vec<_>, SimulationError>>()?;
    Ok((Dataset::from_counts(&counts)?, scenario.beta1))
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<f64, SimulationError> {
    if mean == 0.0 {
        return Ok(0.0);
    }
    let d = Poisson::new(mean)
        .map_err(|e| SimulationError::InvalidScenario(format!("Poisson mean {mean}: {e}")))?;
    Ok(d.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    WlsWald,
    RP,
    RBar,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::WlsWald, Method::RP, Method::RBar];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::WlsWald => "wls_wald",
            Method::RP => "r_p",
            Method::RBar => "r_bar",
        }
    }
}

/// Per-method outcome of one replicate: covered, missed, or failed.
type ReplicateOutcome = [Option<bool>; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodCoverage {
    pub method: Method,
    pub covered: usize,
    pub not_covered: usize,
    pub failed: usize,
}

impl MethodCoverage {
    pub fn replicates(&self) -> usize {
        self.covered + self.not_covered + self.failed
    }

    /// Coverage among replicates that did not fail; NaN if all failed.
    pub fn coverage(&self) -> f64 {
        let m = self.covered + self.not_covered;
        if m == 0 {
            f64::NAN
        } else {
            self.covered as f64 / m as f64
        }
    }

    /// Binomial Monte Carlo standard error of [`Self::coverage`].
    pub fn mc_se(&self) -> f64 {
        let m = (self.covered + self.not_covered) as f64;
        let p = self.coverage();
        (p * (1.0 - p) / m).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    pub methods: [MethodCoverage; 3],
}

impl CoverageResult {
    pub fn get(&self, method: Method) -> &MethodCoverage {
        &self.methods[Method::ALL.iter().position(|m| *m == method).expect("known method")]
    }
}

/// Whether each method's interval at `level` contains the true slope.
///
/// An interval obtained by inverting a statistic contains `β₁` exactly when
/// the test of `β₁` at that level does not reject, so the likelihood methods
/// need only one constrained fit per replicate.
pub fn replicate_outcome(
    data: &Dataset,
    beta1: f64,
    level: f64,
    optimizer: &OptimizerConfig,
) -> ReplicateOutcome {
    let z = critical_value(level);
    let wls = wls_fit(data).ok().and_then(|w| {
        w.se_beta1
            .filter(|se| se.is_finite() && *se > 0.0)
            .map(|se| ((w.beta1 - beta1) / se).abs() < z)
    });
    let likelihood = Analysis::new(data, optimizer)
        .and_then(|a| a.profile_point(beta1))
        .map(|p| (p.r_p.abs() < z, p.r_bar.abs() < z));
    match likelihood {
        Ok((rp, rbar)) => [wls, Some(rp), Some(rbar)],
        Err(e) => {
            log::debug!("replicate failed: {e}");
            [wls, None, None]
        }
    }
}

fn run_replicate(config: &SimulationConfig, index: usize) -> ReplicateOutcome {
    let mut rng = replicate_rng(config.seed, index as u64);
    match simulate_dataset(&config.scenario, config.n, config.person_years, &mut rng) {
        Ok((data, beta1)) => replicate_outcome(&data, beta1, config.level, &config.optimizer),
        Err(e) => {
            log::debug!("replicate {index} could not be generated: {e}");
            [None; 3]
        }
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, SimulationError> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SimulationError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs `config.replicates` replicates and tallies coverage per method.
pub fn coverage_study(config: &SimulationConfig) -> Result<CoverageResult, SimulationError> {
    config.validate()?;
    let outcomes: Vec<ReplicateOutcome> = with_pool(config.workers, || {
        (0..config.replicates)
            .into_par_iter()
            .map(|i| run_replicate(config, i))
            .collect()
    })?;
    let mut methods = Method::ALL.map(|method| MethodCoverage {
        method,
        covered: 0,
        not_covered: 0,
        failed: 0,
    });
    for o in &outcomes {
        for (m, r) in methods.iter_mut().zip(o) {
            match r {
                Some(true) => m.covered += 1,
                Some(false) => m.not_covered += 1,
                None => m.failed += 1,
            }
        }
    }
    Ok(CoverageResult { methods })
}

/// Which heterogeneity parameter a grid varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GridAxis {
    Tau(Vec<f64>),
    Sigma(Vec<f64>),
}

impl GridAxis {
    fn values(&self) -> &[f64] {
        match self {
            GridAxis::Tau(v) | GridAxis::Sigma(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub scenario: String,
    pub n: usize,
    pub tau: f64,
    pub sigma: f64,
    pub result: CoverageResult,
}

/// Seed of cell `index` in a grid run.
pub fn cell_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(CELL_SEED_MIX)
}

/// Runs every `(scenario, n, axis value)` cell, in that nesting order.
///
/// `base` supplies everything but the scenario, `n` and seed. Cells are
/// independent; a cell whose configuration is invalid is an error, while
/// failing replicates are only counted.
pub fn grid_runner(
    scenarios: &[(String, Scenario)],
    n_values: &[usize],
    axis: &GridAxis,
    base: &SimulationConfig,
) -> Result<Vec<GridRow>, SimulationError> {
    grid_runner_with_progress(scenarios, n_values, axis, base, |_| {})
}

/// [`grid_runner`] calling `progress` after each finished cell.
pub fn grid_runner_with_progress(
    scenarios: &[(String, Scenario)],
    n_values: &[usize],
    axis: &GridAxis,
    base: &SimulationConfig,
    mut progress: impl FnMut(&GridRow),
) -> Result<Vec<GridRow>, SimulationError> {
    if scenarios.is_empty() || n_values.is_empty() || axis.values().is_empty() {
        return Err(SimulationError::InvalidConfig("grids must be nonempty".into()));
    }
    let mut rows = Vec::new();
    let mut index = 0;
    for (label, scenario) in scenarios {
        for &n in n_values {
            for &v in axis.values() {
                let scenario = match axis {
                    GridAxis::Tau(_) => scenario.with_tau(v),
                    GridAxis::Sigma(_) => scenario.with_sigma(v),
                };
                let config = SimulationConfig {
                    scenario,
                    n,
                    seed: cell_seed(base.seed, index),
                    ..base.clone()
                };
                log::info!("cell {index}: scenario {label}, n = {n}, tau = {}, sigma = {}", scenario.tau, scenario.sigma);
                let result = coverage_study(&config)?;
                rows.push(GridRow {
                    scenario: label.clone(),
                    n,
                    tau: scenario.tau,
                    sigma: scenario.sigma,
                    result,
                });
                progress(rows.last().expect("row just pushed"));
                index += 1;
            }
        }
    }
    Ok(rows)
}

/// Writes one line per `(cell, method)` under [`CSV_HEADER`].
pub fn write_grid_csv<W: Write>(rows: &[GridRow], mut out: W) -> Result<(), SimulationError> {
    writeln!(out, "{CSV_HEADER}")?;
    for row in rows {
        for m in &row.result.methods {
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{},{}",
                row.scenario,
                row.n,
                row.tau,
                row.sigma,
                m.method.as_str(),
                m.coverage(),
                m.mc_se(),
                m.failed,
                m.replicates()
            )?;
        }
    }
    Ok(())
}

//! Starting values, the simplex optimizer, and the unconstrained and
//! constrained maximum likelihood fits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::likelihood::{
    expected_info, loglik, score, LikelihoodError, Theta, BETA1, N_PARAMS, SIGMA2, TAU2,
};
use crate::linalg::SmallMatrix;

/// Value substituted for a non-finite objective inside the simplex.
const BIG: f64 = 1.0e35;

/// Score norm below which a fit is called stationary.
pub const STATIONARY_TOL: f64 = 1e-3;

/// Variance components below this are treated as sitting on the boundary
/// when projecting the score.
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("degenerate design: weighted variance of the control measure is zero")]
    DegenerateDesign,
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("constrained value must be finite, got {0}")]
    NonFiniteConstraint(f64),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Budget in objective evaluations per simplex run.
    pub max_iterations: usize,
    /// Stop once the simplex value spread is below
    /// `relative_tolerance * (|f(start)| + relative_tolerance)`.
    pub relative_tolerance: f64,
    pub reflection: f64,
    pub contraction: f64,
    pub expansion: f64,
    /// Extra runs started from the incumbent after the first one stops.
    pub restarts: usize,
    /// Coordinates the simplex uses for `τ²` and `σ²`.
    pub variance_scale: VarianceScale,
}

/// How variance components enter the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceScale {
    /// Raw variances; non-positive values are rejected as `-∞`.
    Raw,
    /// Square roots of the variances. A variance optimum on the zero
    /// boundary becomes an interior point, where the simplex does not stall.
    Root,
}

impl Default for OptimizerConfig {
    /// Settings of the widely used reference implementation of the simplex
    /// method (`1000` evaluations, tolerance `√ε`, no restarts). The reported
    /// estimates for the worked example depend on stopping where it stops.
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 1000,
            relative_tolerance: f64::EPSILON.sqrt(),
            reflection: 1.0,
            contraction: 0.5,
            expansion: 2.0,
            restarts: 0,
            variance_scale: VarianceScale::Raw,
        }
    }
}

impl OptimizerConfig {
    /// Tighter settings that drive the simplex much closer to the optimum.
    pub fn thorough() -> Self {
        OptimizerConfig {
            max_iterations: 10_000,
            relative_tolerance: 1e-12,
            restarts: 30,
            variance_scale: VarianceScale::Root,
            ..OptimizerConfig::default()
        }
    }

    pub fn with_max_iterations(mut self, k: usize) -> Self {
        self.max_iterations = k;
        self
    }

    pub fn validate(&self) -> Result<(), EstimationError> {
        if self.max_iterations < 1 {
            return Err(EstimationError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        for (name, v) in [
            ("reflection", self.reflection),
            ("contraction", self.contraction),
            ("expansion", self.expansion),
            ("relative_tolerance", self.relative_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EstimationError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.contraction >= 1.0 {
            return Err(EstimationError::InvalidConfig("contraction must be below 1".into()));
        }
        Ok(())
    }
}

/// Why a simplex run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Value spread fell below tolerance.
    Tolerance,
    /// Evaluation budget exhausted.
    Budget,
    /// A shrink step failed to reduce the simplex.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadOutcome {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub stop: StopReason,
    pub runs: usize,
}

struct RunResult {
    x: Vec<f64>,
    fmin: f64,
    evaluations: usize,
    stop: StopReason,
}

/// One simplex minimization, step for step the classic Nash algorithm:
/// initial steps of `0.1·max|xᵢ|`, best-vertex tracking by first index, and
/// the budget counted in function evaluations.
fn nm_minimize<F: FnMut(&[f64]) -> f64>(
    fmin: &mut F,
    start: &[f64],
    cfg: &OptimizerConfig,
) -> Result<RunResult, EstimationError> {
    let n = start.len();
    let mut b = start.to_vec();
    let f0 = fmin(&b);
    if !f0.is_finite() {
        return Err(EstimationError::NonFiniteStart);
    }
    let mut eval = |x: &[f64]| {
        let v = fmin(x);
        if v.is_finite() {
            v
        } else {
            BIG
        }
    };
    let (alpha, bet, gamm) = (cfg.reflection, cfg.contraction, cfg.expansion);
    let intol = cfg.relative_tolerance;
    let maxit = cfg.max_iterations;
    let mut funcount = 1usize;
    let convtol = intol * (f0.abs() + intol);
    let n1 = n + 1;
    // columns 0..n1 are vertices, column n1 is the centroid; row n holds values
    let mut p = vec![vec![0.0; n1 + 1]; n1];
    p[n][0] = f0;
    for i in 0..n {
        p[i][0] = b[i];
    }
    let mut l = 0usize;
    let mut size = 0.0;
    let mut step = 0.0f64;
    for &x in &b {
        if 0.1 * x.abs() > step {
            step = 0.1 * x.abs();
        }
    }
    if step == 0.0 {
        step = 0.1;
    }
    for j in 1..n1 {
        for i in 0..n {
            p[i][j] = b[i];
        }
        let mut trystep = step;
        while p[j - 1][j] == b[j - 1] {
            p[j - 1][j] = b[j - 1] + trystep;
            trystep *= 10.0;
        }
        size += trystep;
    }
    let mut oldsize = size;
    let mut calcvert = true;
    let mut stop = StopReason::Budget;
    let c = n1;
    loop {
        if calcvert {
            for j in 0..n1 {
                if j != l {
                    for i in 0..n {
                        b[i] = p[i][j];
                    }
                    p[n][j] = eval(&b);
                    funcount += 1;
                }
            }
            calcvert = false;
        }

        let mut vl = p[n][l];
        let mut vh = vl;
        let mut h = l;
        for j in 0..n1 {
            if j != l {
                let f = p[n][j];
                if f < vl {
                    l = j;
                    vl = f;
                }
                if f > vh {
                    h = j;
                    vh = f;
                }
            }
        }
        if vh <= vl + convtol {
            stop = StopReason::Tolerance;
            break;
        }

        for i in 0..n {
            let mut temp = -p[i][h];
            for j in 0..n1 {
                temp += p[i][j];
            }
            p[i][c] = temp / n as f64;
        }
        for i in 0..n {
            b[i] = (1.0 + alpha) * p[i][c] - alpha * p[i][h];
        }
        let vr = eval(&b);
        funcount += 1;
        if vr < vl {
            p[n][c] = vr;
            for i in 0..n {
                let f = gamm * b[i] + (1.0 - gamm) * p[i][c];
                p[i][c] = b[i];
                b[i] = f;
            }
            let f = eval(&b);
            funcount += 1;
            if f < vr {
                for i in 0..n {
                    p[i][h] = b[i];
                }
                p[n][h] = f;
            } else {
                for i in 0..n {
                    p[i][h] = p[i][c];
                }
                p[n][h] = vr;
            }
        } else {
            if vr < vh {
                for i in 0..n {
                    p[i][h] = b[i];
                }
                p[n][h] = vr;
            }
            for i in 0..n {
                b[i] = (1.0 - bet) * p[i][h] + bet * p[i][c];
            }
            let f = eval(&b);
            funcount += 1;
            if f < p[n][h] {
                for i in 0..n {
                    p[i][h] = b[i];
                }
                p[n][h] = f;
            } else if vr >= vh {
                calcvert = true;
                size = 0.0;
                for j in 0..n1 {
                    if j != l {
                        for i in 0..n {
                            p[i][j] = bet * (p[i][j] - p[i][l]) + p[i][l];
                            size += (p[i][j] - p[i][l]).abs();
                        }
                    }
                }
                if size < oldsize {
                    oldsize = size;
                } else {
                    stop = StopReason::Degenerate;
                    break;
                }
            }
        }
        if funcount > maxit {
            break;
        }
    }
    Ok(RunResult {
        x: (0..n).map(|i| p[i][l]).collect(),
        fmin: p[n][l],
        evaluations: funcount,
        stop,
    })
}

/// Maximizes `objective` by the downhill simplex method.
///
/// Points where the objective is `-∞` or NaN are never accepted as the best
/// vertex, so a region can be excluded by returning `-∞` there. With
/// `config.restarts > 0` the simplex is rebuilt around the incumbent after
/// each run, stopping early once a restart brings no improvement.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut objective: F,
    start: &[f64],
    config: &OptimizerConfig,
) -> Result<NelderMeadOutcome, EstimationError> {
    config.validate()?;
    if start.is_empty() {
        return Err(EstimationError::InvalidConfig("empty starting vector".into()));
    }
    let mut neg = |x: &[f64]| -objective(x);
    let mut run = nm_minimize(&mut neg, start, config)?;
    let mut evaluations = run.evaluations;
    let mut runs = 1;
    for _ in 0..config.restarts {
        let next = nm_minimize(&mut neg, &run.x, config)?;
        evaluations += next.evaluations;
        runs += 1;
        let gain = run.fmin - next.fmin;
        let improved = next.fmin <= run.fmin;
        if improved {
            run = next;
        }
        if !(gain > config.relative_tolerance * (run.fmin.abs() + config.relative_tolerance)) {
            break;
        }
    }
    Ok(NelderMeadOutcome {
        argmax: run.x,
        value: -run.fmin,
        evaluations,
        converged: run.stop == StopReason::Tolerance,
        stop: run.stop,
        runs,
    })
}

/// Weighted least squares regression of `η̂` on `ξ̂` with weights `1/Γ₁₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WlsFit {
    pub beta0: f64,
    pub beta1: f64,
    /// Classical standard errors; absent with two studies (no residual
    /// degrees of freedom).
    pub se_beta0: Option<f64>,
    pub se_beta1: Option<f64>,
    pub residuals: Vec<f64>,
}

pub fn wls_fit(data: &Dataset) -> Result<WlsFit, EstimationError> {
    let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in data {
        let w = 1.0 / s.gamma.m[0][0];
        if !(w.is_finite() && w > 0.0) {
            return Err(EstimationError::DegenerateDesign);
        }
        sw += w;
        swx += w * s.xi_hat;
        swy += w * s.eta_hat;
        swxx += w * s.xi_hat * s.xi_hat;
        swxy += w * s.xi_hat * s.eta_hat;
    }
    let xbar = swx / sw;
    let ybar = swy / sw;
    let sxx = swxx - sw * xbar * xbar;
    let sxy = swxy - sw * xbar * ybar;
    if !(sxx > 1e-12 * swxx.abs().max(f64::MIN_POSITIVE)) {
        return Err(EstimationError::DegenerateDesign);
    }
    let beta1 = sxy / sxx;
    let beta0 = ybar - beta1 * xbar;
    let residuals: Vec<f64> = data
        .iter()
        .map(|s| s.eta_hat - beta0 - beta1 * s.xi_hat)
        .collect();
    let df = data.len() as f64 - 2.0;
    let (se_beta0, se_beta1) = if df > 0.0 {
        let rss: f64 = data
            .iter()
            .zip(&residuals)
            .map(|(s, r)| r * r / s.gamma.m[0][0])
            .sum();
        let s2 = rss / df;
        // (XᵀWX)⁻¹ in closed form
        let det = sw * swxx - swx * swx;
        (Some((s2 * swxx / det).sqrt()), Some((s2 * sw / det).sqrt()))
    } else {
        (None, None)
    };
    Ok(WlsFit {
        beta0,
        beta1,
        se_beta0,
        se_beta1,
        residuals,
    })
}

/// Starting point for the likelihood fits: WLS coefficients, the sample mean
/// and variance of `ξ̂`, and the mean squared WLS residual for `τ²`.
pub fn starting_values(data: &Dataset, wls: &WlsFit) -> Theta {
    let n = data.len() as f64;
    let mean = data.iter().map(|s| s.xi_hat).sum::<f64>() / n;
    let var = data.iter().map(|s| (s.xi_hat - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let tau2 = wls.residuals.iter().map(|r| r * r).sum::<f64>() / n;
    Theta::new(wls.beta0, wls.beta1, mean, tau2, var)
}

// The simplex works in the reference vector order (β₀, β₁, μ, σ², τ²). The
// order matters because the initial simplex steps one coordinate per vertex.
fn var_in(v: f64, scale: VarianceScale) -> f64 {
    match scale {
        VarianceScale::Raw => v,
        VarianceScale::Root => v.max(0.0).sqrt(),
    }
}

fn var_out(x: f64, scale: VarianceScale) -> f64 {
    match scale {
        VarianceScale::Raw => x,
        VarianceScale::Root => x * x,
    }
}

fn to_simplex(t: &Theta, sc: VarianceScale) -> [f64; 5] {
    [t.beta0, t.beta1, t.mu, var_in(t.sigma2, sc), var_in(t.tau2, sc)]
}

fn from_simplex(x: &[f64], sc: VarianceScale) -> Theta {
    Theta::new(x[0], x[1], x[2], var_out(x[4], sc), var_out(x[3], sc))
}

fn to_simplex_constrained(t: &Theta, sc: VarianceScale) -> [f64; 4] {
    [t.beta0, t.mu, var_in(t.sigma2, sc), var_in(t.tau2, sc)]
}

fn from_simplex_constrained(x: &[f64], beta1: f64, sc: VarianceScale) -> Theta {
    Theta::new(x[0], beta1, x[1], var_out(x[3], sc), var_out(x[2], sc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitKind {
    Unconstrained,
    Constrained { beta1: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Theta,
    /// From the inverse expected information; absent for constrained fits
    /// and when the information is singular.
    pub std_errs: Option<[f64; N_PARAMS]>,
    pub loglik_value: f64,
    /// The simplex met its tolerance before the budget ran out.
    pub converged: bool,
    /// Objective evaluations used.
    pub iterations: usize,
    pub kind: FitKind,
    /// Norm of the free score components, with components pushing a variance
    /// below [`BOUNDARY_TOL`] zeroed.
    pub score_norm: f64,
    /// `score_norm < STATIONARY_TOL`.
    pub stationary: bool,
    pub diagnostics: Vec<String>,
}

fn projected_score_norm(theta: &Theta, data: &Dataset, free: &[usize]) -> f64 {
    let Ok(s) = score(theta, data) else {
        return f64::NAN;
    };
    let arr = theta.to_array();
    free.iter()
        .map(|&k| {
            let at_bound = (k == TAU2 || k == SIGMA2) && arr[k] < BOUNDARY_TOL && s[k] < 0.0;
            if at_bound {
                0.0
            } else {
                s[k] * s[k]
            }
        })
        .sum::<f64>()
        .sqrt()
}

fn standard_errors(theta: &Theta, data: &Dataset) -> Option<[f64; N_PARAMS]> {
    let info = expected_info(theta, data).ok()?;
    let inv = info.inverse().ok()?;
    let mut se = [0.0; N_PARAMS];
    for (k, v) in se.iter_mut().enumerate() {
        let d = inv[(k, k)];
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        *v = d.sqrt();
    }
    Some(se)
}

/// Maximum likelihood fit from an explicit starting point.
pub fn fit_mle_from(
    data: &Dataset,
    start: &Theta,
    config: &OptimizerConfig,
) -> Result<FitResult, EstimationError> {
    let sc = config.variance_scale;
    let out = nelder_mead(
        |x| loglik(&from_simplex(x, sc), data),
        &to_simplex(start, sc),
        config,
    )?;
    let theta = from_simplex(&out.argmax, sc);
    let mut diagnostics = Vec::new();
    if !out.converged {
        diagnostics.push(format!("optimizer stopped early ({:?})", out.stop));
    }
    let std_errs = standard_errors(&theta, data);
    if std_errs.is_none() {
        diagnostics.push("expected information singular at the optimum; standard errors unavailable".into());
        log::warn!("expected information singular at the unconstrained optimum");
    }
    let score_norm = projected_score_norm(&theta, data, &[0, 1, 2, 3, 4]);
    Ok(FitResult {
        theta,
        std_errs,
        loglik_value: out.value,
        converged: out.converged,
        iterations: out.evaluations,
        kind: FitKind::Unconstrained,
        score_norm,
        stationary: score_norm < STATIONARY_TOL,
        diagnostics,
    })
}

/// Unconstrained maximum likelihood fit started from the WLS solution.
pub fn fit_mle(data: &Dataset, config: &OptimizerConfig) -> Result<FitResult, EstimationError> {
    let wls = wls_fit(data)?;
    fit_mle_from(data, &starting_values(data, &wls), config)
}

/// Maximum likelihood with `β₁` fixed, from the nuisance values of `start`.
pub fn fit_constrained_from(
    data: &Dataset,
    beta1_0: f64,
    start: &Theta,
    config: &OptimizerConfig,
) -> Result<FitResult, EstimationError> {
    if !beta1_0.is_finite() {
        return Err(EstimationError::NonFiniteConstraint(beta1_0));
    }
    let sc = config.variance_scale;
    let out = nelder_mead(
        |x| loglik(&from_simplex_constrained(x, beta1_0, sc), data),
        &to_simplex_constrained(start, sc),
        config,
    )?;
    let theta = from_simplex_constrained(&out.argmax, beta1_0, sc);
    let mut diagnostics = Vec::new();
    if !out.converged {
        diagnostics.push(format!("optimizer stopped early ({:?})", out.stop));
    }
    let free: Vec<usize> = (0..N_PARAMS).filter(|&k| k != BETA1).collect();
    let score_norm = projected_score_norm(&theta, data, &free);
    Ok(FitResult {
        theta,
        std_errs: None,
        loglik_value: out.value,
        converged: out.converged,
        iterations: out.evaluations,
        kind: FitKind::Constrained { beta1: beta1_0 },
        score_norm,
        stationary: score_norm < STATIONARY_TOL,
        diagnostics,
    })
}

/// Constrained maximum likelihood fit started from the WLS solution with
/// the `β₁` slot dropped.
pub fn fit_constrained(
    data: &Dataset,
    beta1_0: f64,
    config: &OptimizerConfig,
) -> Result<FitResult, EstimationError> {
    let wls = wls_fit(data)?;
    fit_constrained_from(data, beta1_0, &starting_values(data, &wls), config)
}

/// Inverse of the expected information at `theta`, if it exists.
pub fn expected_covariance(theta: &Theta, data: &Dataset) -> Option<SmallMatrix> {
    expected_info(theta, data).ok()?.inverse().ok()
}

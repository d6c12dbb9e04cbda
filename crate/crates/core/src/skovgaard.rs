//! Second-order corrected signed likelihood root for `β₁`.
//!
//! `S` and `q` are the covariances, under `θ̂`, of the score at `θ̂` with the
//! score at `θ̃` and with `ℓ(θ̂) − ℓ(θ̃)`. For a Gaussian observation with
//! `r = y − f̂ ~ N(0, V̂)` they follow from
//! `cov(rᵀAr, rᵀBr) = 2 tr(AV̂BV̂)` and `cov(aᵀr, bᵀr) = aᵀV̂b`.

use rayon::join;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::data::Dataset;
use crate::estimation::{
    fit_constrained, fit_constrained_from, fit_mle, wls_fit, EstimationError, FitResult,
    OptimizerConfig, WlsFit,
};
use crate::likelihood::{
    dataset_derivs, expected_info, loglik, observed_info, LikelihoodError, Theta, BETA1, N_PARAMS,
};
use crate::linalg::{dot2, sub2, LinalgError, Mat2, SmallMatrix};

/// Below this `|r_P|` the correction `log(u/r)/r` is not evaluated.
pub const NEAR_ZERO_R: f64 = 1e-4;

/// Half-width, in standard errors, of the neighbourhood of `β̂₁` skipped when
/// bracketing interval endpoints.
pub const CI_EXCLUSION_SE: f64 = 1e-3;

/// Farthest bracket probe, in standard errors.
pub const CI_CAP_SE: f64 = 50.0;

/// Bisection stops when the bracket is narrower than this.
pub const CI_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SkovgaardError {
    #[error("{which} fit failed: {source}")]
    Fit {
        which: &'static str,
        #[source]
        source: EstimationError,
    },
    #[error("S matrix is singular (determinant {0:e})")]
    SingularS(f64),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("null value must be finite, got {0}")]
    NonFiniteNull(f64),
    #[error("WLS standard error unavailable (needs at least 3 studies)")]
    MissingStdErr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    Less,
    Greater,
}

impl Alternative {
    /// Tail probability of a standard normal statistic.
    pub fn p_value(&self, stat: f64) -> f64 {
        let n = standard_normal();
        match self {
            Alternative::TwoSided => (2.0 * n.cdf(-stat.abs())).min(1.0),
            Alternative::Less => n.cdf(stat),
            Alternative::Greater => n.cdf(-stat),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Alternative::TwoSided => "two.sided",
            Alternative::Less => "less",
            Alternative::Greater => "greater",
        }
    }
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Alternative {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "two.sided" | "two_sided" | "two-sided" => Ok(Alternative::TwoSided),
            "less" => Ok(Alternative::Less),
            "greater" => Ok(Alternative::Greater),
            other => Err(format!("unknown alternative '{other}' (use two.sided, less or greater)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    Wald,
    RP,
    RBar,
}

impl StatisticKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StatisticKind::Wald => "wald",
            StatisticKind::RP => "rp",
            StatisticKind::RBar => "rbar",
        }
    }
}

impl FromStr for StatisticKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "wald" => Ok(StatisticKind::Wald),
            "rp" => Ok(StatisticKind::RP),
            "rbar" => Ok(StatisticKind::RBar),
            other => Err(format!("unknown statistic '{other}' (use wald, rp or rbar)")),
        }
    }
}

/// Non-fatal conditions met while computing a statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// Observed information at `θ̂` had non-positive determinant; expected
    /// information used instead.
    InfoFallbackHat,
    /// Same for the nuisance block at `θ̃`.
    InfoFallbackTilde,
    /// `u/r_P ≤ 0`; the corrected root was replaced by `r_P`.
    USignGuard,
    /// `|r_P|` too small for the correction; `r_P` reported.
    NearZeroR,
    /// The constrained fit scored above the unconstrained one; the drop was
    /// set to zero.
    NegativeDrop,
    MleNotConverged,
    ConstrainedNotConverged,
    /// The statistic moved the wrong way while bracketing an endpoint.
    NonMonotone,
    UnboundedLower,
    UnboundedUpper,
}

impl Flag {
    pub fn message(&self) -> &'static str {
        match self {
            Flag::InfoFallbackHat => "observed information at the MLE is not positive definite; expected information substituted, check the MLEs",
            Flag::InfoFallbackTilde => "observed nuisance information at the constrained MLE is not positive definite; expected information substituted",
            Flag::USignGuard => "correction term has the wrong sign; corrected statistic replaced by the signed root",
            Flag::NearZeroR => "signed root is near zero; correction not applied",
            Flag::NegativeDrop => "constrained fit exceeded the unconstrained maximum; likelihood drop set to zero",
            Flag::MleNotConverged => "unconstrained optimizer did not converge",
            Flag::ConstrainedNotConverged => "constrained optimizer did not converge",
            Flag::NonMonotone => "statistic is not monotone in beta1 along the search path",
            Flag::UnboundedLower => "no lower endpoint within the search range",
            Flag::UnboundedUpper => "no upper endpoint within the search range",
        }
    }
}

fn push_flag(flags: &mut Vec<Flag>, f: Flag) {
    if !flags.contains(&f) {
        flags.push(f);
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Two-sided critical value `z_{1-(1-level)/2}`.
pub fn critical_value(level: f64) -> f64 {
    standard_normal().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// `S(θ̂, θ̃)`: row `j` pairs with the score at `θ̂`, column `k` with the score
/// at `θ̃`.
pub fn s_matrix(
    theta_hat: &Theta,
    theta_tilde: &Theta,
    data: &Dataset,
) -> Result<SmallMatrix, SkovgaardError> {
    Ok(s_and_q(theta_hat, theta_tilde, data)?.0)
}

/// `q(θ̂, θ̃)`, the covariance of the score at `θ̂` with `ℓ(θ̂) − ℓ(θ̃)`.
pub fn q_vector(
    theta_hat: &Theta,
    theta_tilde: &Theta,
    data: &Dataset,
) -> Result<[f64; N_PARAMS], SkovgaardError> {
    Ok(s_and_q(theta_hat, theta_tilde, data)?.1)
}

pub fn s_and_q(
    theta_hat: &Theta,
    theta_tilde: &Theta,
    data: &Dataset,
) -> Result<(SmallMatrix, [f64; N_PARAMS]), SkovgaardError> {
    let hat = dataset_derivs(theta_hat, data)?;
    let tilde = dataset_derivs(theta_tilde, data)?;
    let mut s = SmallMatrix::square(N_PARAMS);
    let mut q = [0.0; N_PARAMS];
    for (h, t) in hat.iter().zip(&tilde) {
        let vh = h.v;
        let delta = sub2(h.f, t.f);
        let inv_diff = h.v_inv - t.v_inv;
        // Âⱼ V̂ is reused across k
        let ah_vh: [Mat2; N_PARAMS] = h.v_inv_grad.map(|a| a * vh);
        let at_vh: [Mat2; N_PARAMS] = t.v_inv_grad.map(|a| a * vh);
        let vt_inv_ft: [[f64; 2]; N_PARAMS] = t.f_grad.map(|g| t.v_inv.mul_vec(g));
        let at_delta: [[f64; 2]; N_PARAMS] = t.v_inv_grad.map(|a| a.mul_vec(delta));
        let vt_inv_delta = t.v_inv.mul_vec(delta);
        for j in 0..N_PARAMS {
            for k in 0..N_PARAMS {
                let quad = 0.5 * ah_vh[j].trace_mul(&at_vh[k]);
                let lin = dot2(h.f_grad[j], vt_inv_ft[k]) - dot2(h.f_grad[j], at_delta[k]);
                s[(j, k)] += quad + lin;
            }
            q[j] += 0.5 * (ah_vh[j] * inv_diff * vh).trace() + dot2(h.f_grad[j], vt_inv_delta);
        }
    }
    Ok((s, q))
}

/// `u` together with the factors it was assembled from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UCorrection {
    pub u: f64,
    /// `[S⁻¹q]_ψ`.
    pub s_inv_q: f64,
    pub det_s: f64,
    pub det_j_hat: f64,
    pub det_i_hat: f64,
    pub det_j_nuisance: f64,
    pub flags: Vec<Flag>,
}

/// `u = [S⁻¹q]_ψ |ĵ|^{1/2} |î|^{-1} |S| |j̃_λλ|^{-1/2}` for any dimension.
///
/// `j_hat`/`i_hat` are the observed and expected information at `θ̂`,
/// `j_nuisance`/`i_nuisance` the same at `θ̃` with the `ψ` row and column
/// removed. Expected information stands in for an observed one whose
/// determinant is not positive.
pub fn assemble_u(
    s: &SmallMatrix,
    q: &[f64],
    psi: usize,
    j_hat: &SmallMatrix,
    i_hat: &SmallMatrix,
    j_nuisance: &SmallMatrix,
    i_nuisance: &SmallMatrix,
) -> Result<UCorrection, SkovgaardError> {
    let mut flags = Vec::new();
    let det_s = s.det()?;
    if det_s == 0.0 || !det_s.is_finite() {
        return Err(SkovgaardError::SingularS(det_s));
    }
    let s_inv_q = s.solve(q).map_err(|_| SkovgaardError::SingularS(det_s))?[psi];
    let det_i_hat = i_hat.det()?;
    let mut det_j_hat = j_hat.det()?;
    if !(det_j_hat > 0.0) {
        det_j_hat = det_i_hat;
        push_flag(&mut flags, Flag::InfoFallbackHat);
    }
    let mut det_j_nuisance = j_nuisance.det()?;
    if !(det_j_nuisance > 0.0) {
        det_j_nuisance = i_nuisance.det()?;
        push_flag(&mut flags, Flag::InfoFallbackTilde);
    }
    let u = s_inv_q * det_j_hat.sqrt() / det_i_hat * det_s / det_j_nuisance.sqrt();
    Ok(UCorrection {
        u,
        s_inv_q,
        det_s,
        det_j_hat,
        det_i_hat,
        det_j_nuisance,
        flags,
    })
}

/// `u` for the full model at `(θ̂, θ̃)`, computing every ingredient.
pub fn u_correction(
    theta_hat: &Theta,
    theta_tilde: &Theta,
    data: &Dataset,
) -> Result<UCorrection, SkovgaardError> {
    let j_hat = observed_info(theta_hat, data)?;
    let i_hat = expected_info(theta_hat, data)?;
    u_with_hat_info(theta_hat, theta_tilde, data, &j_hat, &i_hat)
}

fn u_with_hat_info(
    theta_hat: &Theta,
    theta_tilde: &Theta,
    data: &Dataset,
    j_hat: &SmallMatrix,
    i_hat: &SmallMatrix,
) -> Result<UCorrection, SkovgaardError> {
    let (s, q) = s_and_q(theta_hat, theta_tilde, data)?;
    let j_nuis = observed_info(theta_tilde, data)?.without(BETA1);
    let i_nuis = expected_info(theta_tilde, data)?.without(BETA1);
    assemble_u(&s, &q, BETA1, j_hat, i_hat, &j_nuis, &i_nuis)
}

/// `r̄ = r + log(u/r)/r`, falling back to `r` with a flag when `|r|` is
/// tiny or `u/r ≤ 0`.
pub fn corrected_root(r: f64, u: f64) -> (f64, Option<Flag>) {
    if !(r.abs() >= NEAR_ZERO_R) {
        return (r, Some(Flag::NearZeroR));
    }
    let ratio = u / r;
    if !(ratio > 0.0) || !ratio.is_finite() {
        return (r, Some(Flag::USignGuard));
    }
    (r + ratio.ln() / r, None)
}

/// Statistics at one value of `β₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub beta1_null: f64,
    pub constrained: FitResult,
    /// `ℓ(θ̂) − ℓ(θ̃)`, never negative.
    pub loglik_drop: f64,
    pub r_p: f64,
    pub r_bar: f64,
    pub u: f64,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub beta1_null: f64,
    pub alternative: Alternative,
    pub wls: WlsFit,
    pub mle: FitResult,
    /// Against the WLS standard error; absent with two studies.
    pub wald: Option<f64>,
    pub r_p: f64,
    pub r_bar: f64,
    pub u: f64,
    pub p_wald: Option<f64>,
    pub p_r: f64,
    pub p_rbar: f64,
    /// Wald statistic from the MLE and its expected-information SE.
    pub mle_wald: Option<f64>,
    pub constrained: FitResult,
    pub flags: Vec<Flag>,
}

impl TestReport {
    pub fn converged(&self) -> bool {
        self.mle.converged && self.constrained.converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub kind: StatisticKind,
    pub flags: Vec<Flag>,
}

/// Everything about a dataset that does not depend on the null value:
/// the WLS and unconstrained fits and the information matrices at `θ̂`.
#[derive(Debug, Clone)]
pub struct Analysis<'a> {
    data: &'a Dataset,
    config: OptimizerConfig,
    wls: WlsFit,
    mle: FitResult,
    j_hat: SmallMatrix,
    i_hat: SmallMatrix,
}

impl<'a> Analysis<'a> {
    pub fn new(data: &'a Dataset, config: &OptimizerConfig) -> Result<Self, SkovgaardError> {
        let wls = wls_fit(data).map_err(|source| SkovgaardError::Fit {
            which: "weighted least squares",
            source,
        })?;
        let mle = fit_mle(data, config).map_err(|source| SkovgaardError::Fit {
            which: "unconstrained",
            source,
        })?;
        let j_hat = observed_info(&mle.theta, data)?;
        let i_hat = expected_info(&mle.theta, data)?;
        Ok(Analysis {
            data,
            config: *config,
            wls,
            mle,
            j_hat,
            i_hat,
        })
    }

    pub fn wls(&self) -> &WlsFit {
        &self.wls
    }

    pub fn mle(&self) -> &FitResult {
        &self.mle
    }

    pub fn observed_info_hat(&self) -> &SmallMatrix {
        &self.j_hat
    }

    pub fn expected_info_hat(&self) -> &SmallMatrix {
        &self.i_hat
    }

    /// WLS standard error of the slope, the unit of the interval search.
    fn search_unit(&self) -> f64 {
        self.wls
            .se_beta1
            .or(self.mle.std_errs.map(|s| s[BETA1]))
            .unwrap_or(1.0)
    }

    /// Constrained fit from the WLS start. If plugging `β₁₀` into `θ̂` already
    /// beats that fit, the search is repeated from the plug-in point, since
    /// the constrained maximum can be no lower than it.
    fn constrained(&self, beta1_0: f64) -> Result<FitResult, SkovgaardError> {
        let fit = fit_constrained(self.data, beta1_0, &self.config).map_err(|source| {
            SkovgaardError::Fit {
                which: "constrained",
                source,
            }
        })?;
        let plug_in = self.mle.theta.with(BETA1, beta1_0);
        if loglik(&plug_in, self.data) > fit.loglik_value {
            let warm = fit_constrained_from(self.data, beta1_0, &plug_in, &self.config)
                .map_err(|source| SkovgaardError::Fit {
                    which: "constrained",
                    source,
                })?;
            if warm.loglik_value > fit.loglik_value {
                return Ok(warm);
            }
        }
        Ok(fit)
    }

    /// `r_P`, `u` and `r̄_P` at `β₁ = beta1_null`.
    pub fn profile_point(&self, beta1_null: f64) -> Result<ProfilePoint, SkovgaardError> {
        if !beta1_null.is_finite() {
            return Err(SkovgaardError::NonFiniteNull(beta1_null));
        }
        let mut flags = Vec::new();
        let constrained = self.constrained(beta1_null)?;
        if !constrained.converged {
            push_flag(&mut flags, Flag::ConstrainedNotConverged);
        }
        let mut drop = self.mle.loglik_value - constrained.loglik_value;
        if drop < 0.0 {
            drop = 0.0;
            push_flag(&mut flags, Flag::NegativeDrop);
        }
        let diff = self.mle.theta.beta1 - beta1_null;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        let r_p = sign * (2.0 * drop).sqrt();
        let near_zero = !(r_p.abs() >= NEAR_ZERO_R);
        let u = match u_with_hat_info(
            &self.mle.theta,
            &constrained.theta,
            self.data,
            &self.j_hat,
            &self.i_hat,
        ) {
            Ok(c) => {
                for f in c.flags {
                    push_flag(&mut flags, f);
                }
                c.u
            }
            // the correction is not used at all in this case
            Err(_) if near_zero => 0.0,
            Err(e) => return Err(e),
        };
        let (r_bar, guard) = corrected_root(r_p, u);
        if let Some(g) = guard {
            push_flag(&mut flags, g);
        }
        Ok(ProfilePoint {
            beta1_null,
            constrained,
            loglik_drop: drop,
            r_p,
            r_bar,
            u,
            flags,
        })
    }

    pub fn test(
        &self,
        beta1_null: f64,
        alternative: Alternative,
    ) -> Result<TestReport, SkovgaardError> {
        let point = self.profile_point(beta1_null)?;
        let mut flags = Vec::new();
        if !self.mle.converged {
            flags.push(Flag::MleNotConverged);
        }
        for f in &point.flags {
            push_flag(&mut flags, *f);
        }
        for f in &flags {
            log::warn!("{}", f.message());
        }
        let wald = self
            .wls
            .se_beta1
            .map(|se| (self.wls.beta1 - beta1_null) / se);
        let mle_wald = self
            .mle
            .std_errs
            .map(|se| (self.mle.theta.beta1 - beta1_null) / se[BETA1]);
        Ok(TestReport {
            beta1_null,
            alternative,
            wls: self.wls.clone(),
            mle: self.mle.clone(),
            wald,
            r_p: point.r_p,
            r_bar: point.r_bar,
            u: point.u,
            p_wald: wald.map(|w| alternative.p_value(w)),
            p_r: alternative.p_value(point.r_p),
            p_rbar: alternative.p_value(point.r_bar),
            mle_wald,
            constrained: point.constrained,
            flags,
        })
    }

    fn statistic(&self, kind: StatisticKind, beta1: f64) -> Result<f64, SkovgaardError> {
        let p = self.profile_point(beta1)?;
        Ok(match kind {
            StatisticKind::RP => p.r_p,
            _ => p.r_bar,
        })
    }

    /// Confidence interval for `β₁` at `level`.
    ///
    /// The Wald interval is `β̂₁ᵂᴸˢ ± z·SE`. The likelihood intervals invert the
    /// statistic: each endpoint is bracketed by probes at
    /// `β̂₁ ± {10⁻³, ½, 1, 2, 4, …, 50}·SE` and refined by bisection.
    pub fn confint(
        &self,
        level: f64,
        kind: StatisticKind,
    ) -> Result<ConfidenceInterval, SkovgaardError> {
        if !(level > 0.0 && level < 1.0) {
            return Err(SkovgaardError::InvalidLevel(level));
        }
        let z = critical_value(level);
        if kind == StatisticKind::Wald {
            let se = self.wls.se_beta1.ok_or(SkovgaardError::MissingStdErr)?;
            return Ok(ConfidenceInterval {
                lower: self.wls.beta1 - z * se,
                upper: self.wls.beta1 + z * se,
                level,
                kind,
                flags: Vec::new(),
            });
        }
        let (lower, upper) = join(
            || self.endpoint(kind, z, -1.0),
            || self.endpoint(kind, z, 1.0),
        );
        let (lower, mut flags) = lower?;
        let (upper, upper_flags) = upper?;
        for f in upper_flags {
            push_flag(&mut flags, f);
        }
        for f in &flags {
            log::warn!("{} ({} interval)", f.message(), kind.as_str());
        }
        Ok(ConfidenceInterval {
            lower,
            upper,
            level,
            kind,
            flags,
        })
    }

    /// One endpoint; `side = -1` searches below `β̂₁`, `+1` above. The
    /// statistic decreases in `β₁`, so the target is `-side·z`.
    fn endpoint(
        &self,
        kind: StatisticKind,
        z: f64,
        side: f64,
    ) -> Result<(f64, Vec<Flag>), SkovgaardError> {
        let mut flags = Vec::new();
        let centre = self.mle.theta.beta1;
        let unit = self.search_unit();
        let target = -side * z;
        // g > 0 inside the acceptance region on this side
        let g = |b: f64| -> Result<f64, SkovgaardError> {
            Ok(side * (self.statistic(kind, b)? - target))
        };
        let mut offsets = vec![CI_EXCLUSION_SE, 0.5];
        let mut k = 1.0;
        while k < CI_CAP_SE {
            offsets.push(k);
            k *= 2.0;
        }
        offsets.push(CI_CAP_SE);

        let mut inner = centre + side * offsets[0] * unit;
        let mut g_inner = g(inner)?;
        let mut found = None;
        for &off in &offsets[1..] {
            let b = centre + side * off * unit;
            let gb = g(b)?;
            if gb > g_inner {
                push_flag(&mut flags, Flag::NonMonotone);
            }
            if gb <= 0.0 && g_inner > 0.0 {
                found = Some((inner, b));
                break;
            }
            inner = b;
            g_inner = gb;
        }
        let Some((mut a, mut b)) = found else {
            push_flag(
                &mut flags,
                if side < 0.0 {
                    Flag::UnboundedLower
                } else {
                    Flag::UnboundedUpper
                },
            );
            return Ok((side * f64::INFINITY, flags));
        };
        while (b - a).abs() > CI_TOLERANCE {
            let m = 0.5 * (a + b);
            if g(m)? > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        Ok((0.5 * (a + b), flags))
    }
}

/// Fits the model and tests `β₁ = beta1_null`.
pub fn test_beta1(
    data: &Dataset,
    beta1_null: f64,
    alternative: Alternative,
    config: &OptimizerConfig,
) -> Result<TestReport, SkovgaardError> {
    Analysis::new(data, config)?.test(beta1_null, alternative)
}

pub fn confint_beta1(
    data: &Dataset,
    level: f64,
    kind: StatisticKind,
    config: &OptimizerConfig,
) -> Result<ConfidenceInterval, SkovgaardError> {
    Analysis::new(data, config)?.confint(level, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{hoes_dataset, StudyObservation};
    use crate::likelihood::{marginal_moments, model_derivs, MU, SIGMA2, TAU2};

    fn hoes_points() -> (Dataset, Theta, Theta) {
        let d = hoes_dataset();
        let cfg = OptimizerConfig::default();
        let hat = fit_mle(&d, &cfg).unwrap().theta;
        let tilde = fit_constrained(&d, 1.0, &cfg).unwrap().theta;
        (d, hat, tilde)
    }

    #[test]
    fn s_at_equal_points_is_expected_information() {
        let (d, hat, _) = hoes_points();
        let s = s_matrix(&hat, &hat, &d).unwrap();
        let i = expected_info(&hat, &d).unwrap();
        for j in 0..N_PARAMS {
            for k in 0..N_PARAMS {
                assert!((s[(j, k)] - i[(j, k)]).abs() < 1e-8, "({j},{k})");
            }
        }
        assert_eq!(q_vector(&hat, &hat, &d).unwrap(), [0.0; N_PARAMS]);
    }

    #[test]
    fn variance_rows_have_no_mu_column() {
        let (d, hat, tilde) = hoes_points();
        let s = s_matrix(&hat, &tilde, &d).unwrap();
        assert_eq!(s[(TAU2, MU)], 0.0);
        assert_eq!(s[(SIGMA2, MU)], 0.0);
    }

    #[test]
    fn q_tau2_single_study_formula() {
        // f does not depend on τ², and V̂ cancels from the trace: q = ½((Ṽ⁻¹)₁₁ − (V̂⁻¹)₁₁)
        let g = Mat2::diag(0.1, 0.05);
        let s = StudyObservation::new(0.0, 0.0, g).unwrap();
        let d = Dataset::new(vec![s, s]).unwrap();
        let hat = Theta::new(-1.0, 0.7, -2.0, 0.2, 0.5);
        let tilde = hat.with(BETA1, 1.1);
        let vh = marginal_moments(&hat, &g).unwrap().v;
        let vt = marginal_moments(&tilde, &g).unwrap().v;
        let want = 0.5 * (vt.inverse().unwrap().m[0][0] - vh.inverse().unwrap().m[0][0]);
        let q = q_vector(&hat, &tilde, &d).unwrap();
        assert!((q[TAU2] / 2.0 - want).abs() < 1e-12);
    }

    #[test]
    fn hoes_statistics() {
        let r = test_beta1(&hoes_dataset(), 1.0, Alternative::TwoSided, &OptimizerConfig::default())
            .unwrap();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!((r.wald.unwrap() - -3.5830787).abs() < 1e-5);
        assert!((r.p_wald.unwrap() - 0.0003396).abs() < 1e-5);
        assert!(rel(r.r_p, -2.3447177) < 5e-3);
        assert!(rel(r.p_r, 0.0190415) < 5e-3);
        assert!(rel(r.r_bar, -1.2709290) < 5e-3, "r_bar {}", r.r_bar);
        assert!(rel(r.p_rbar, 0.2037539) < 5e-3);
        assert!(r.r_bar.abs() < r.r_p.abs());
        assert!(r.r_bar.signum() == r.r_p.signum());
        assert!(r.flags.is_empty(), "{:?}", r.flags);
    }

    #[test]
    fn null_at_mle_gives_zero_root() {
        let d = hoes_dataset();
        let a = Analysis::new(&d, &OptimizerConfig::default()).unwrap();
        let r = a.test(a.mle().theta.beta1, Alternative::TwoSided).unwrap();
        assert!(r.r_p.abs() < 1e-6);
        assert!((r.p_r - 1.0).abs() < 1e-6);
        assert!(r.flags.contains(&Flag::NearZeroR));
        let less = a.test(a.mle().theta.beta1, Alternative::Less).unwrap();
        assert!((less.p_r - 0.5).abs() < 1e-6);
    }

    #[test]
    fn signed_root_decreases_across_grid() {
        let d = hoes_dataset();
        let a = Analysis::new(&d, &OptimizerConfig::default()).unwrap();
        let b = a.mle().theta.beta1;
        let se = a.mle().std_errs.unwrap()[BETA1];
        let roots: Vec<f64> = (-5..=5)
            .map(|k| a.profile_point(b + 0.6 * se * k as f64).unwrap().r_p)
            .collect();
        for w in roots.windows(2) {
            assert!(w[1] < w[0], "{roots:?}");
        }
        assert!(roots[5].abs() < 1e-6);
    }

    #[test]
    fn corrected_root_guards() {
        assert_eq!(corrected_root(1e-5, 3.0), (1e-5, Some(Flag::NearZeroR)));
        assert_eq!(corrected_root(-2.0, 0.5), (-2.0, Some(Flag::USignGuard)));
        let (v, f) = corrected_root(-2.0, -1.0);
        assert!(f.is_none());
        assert!((v - (-2.0 + (0.5f64).ln() / -2.0)).abs() < 1e-15);
    }

    #[test]
    fn u_falls_back_to_expected_information() {
        let s = SmallMatrix::from_rows(&[[2.0, 0.3], [0.3, 1.0]]).unwrap();
        let q = [0.4, -0.1];
        let i_hat = SmallMatrix::from_rows(&[[2.0, 0.1], [0.1, 1.5]]).unwrap();
        // indefinite observed information
        let j_bad = SmallMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        let j_nuis = SmallMatrix::from_rows(&[[0.8]]).unwrap();
        let i_nuis = SmallMatrix::from_rows(&[[0.9]]).unwrap();
        let c = assemble_u(&s, &q, 0, &j_bad, &i_hat, &j_nuis, &i_nuis).unwrap();
        assert_eq!(c.flags, vec![Flag::InfoFallbackHat]);
        let direct = assemble_u(&s, &q, 0, &i_hat, &i_hat, &j_nuis, &i_nuis).unwrap();
        assert_eq!(c.u, direct.u);
        assert!(direct.flags.is_empty());
        let neg_nuis = SmallMatrix::from_rows(&[[-0.2]]).unwrap();
        let c = assemble_u(&s, &q, 0, &i_hat, &i_hat, &neg_nuis, &i_nuis).unwrap();
        assert_eq!(c.flags, vec![Flag::InfoFallbackTilde]);
        assert_eq!(c.det_j_nuisance, 0.9);
    }

    #[test]
    fn u_by_hand_two_dimensions() {
        let s = SmallMatrix::from_rows(&[[2.0, 0.0], [0.0, 4.0]]).unwrap();
        let q = [1.0, 2.0];
        let j = SmallMatrix::from_rows(&[[4.0, 0.0], [0.0, 1.0]]).unwrap();
        let i = SmallMatrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        let jn = SmallMatrix::from_rows(&[[9.0]]).unwrap();
        // [S⁻¹q]₀ = 0.5, |j|^½ = 2, |i|⁻¹ = 0.5, |S| = 8, |jn|^-½ = 1/3
        let c = assemble_u(&s, &q, 0, &j, &i, &jn, &jn).unwrap();
        assert!((c.u - 0.5 * 2.0 * 0.5 * 8.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn singular_s_is_an_error() {
        let s = SmallMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let i = SmallMatrix::identity(2);
        let n = SmallMatrix::identity(1);
        assert!(matches!(
            assemble_u(&s, &[1.0, 0.0], 0, &i, &i, &n, &n),
            Err(SkovgaardError::SingularS(_))
        ));
    }

    #[test]
    fn u_vanishes_as_tilde_approaches_hat() {
        let (d, hat, _) = hoes_points();
        let c = u_correction(&hat, &hat.with(BETA1, hat.beta1 + 1e-7), &d).unwrap();
        assert!(c.u.abs() < 1e-5);
    }

    #[test]
    fn wald_interval_closed_form() {
        let d = hoes_dataset();
        let a = Analysis::new(&d, &OptimizerConfig::default()).unwrap();
        let ci = a.confint(0.95, StatisticKind::Wald).unwrap();
        let w = a.wls();
        let se = w.se_beta1.unwrap();
        assert!((ci.lower - (w.beta1 - 1.959964 * se)).abs() < 1e-6);
        assert!((ci.upper - (w.beta1 + 1.959964 * se)).abs() < 1e-6);
        assert!(a.confint(1.5, StatisticKind::Wald).is_err());
    }

    #[test]
    fn signed_root_interval_hoes() {
        let d = hoes_dataset();
        let a = Analysis::new(&d, &OptimizerConfig::default()).unwrap();
        let ci = a.confint(0.95, StatisticKind::RP).unwrap();
        assert!((ci.lower - 0.45).abs() < 0.01, "{ci:?}");
        assert!((ci.upper - 0.93).abs() < 0.01, "{ci:?}");
        let b = a.mle().theta.beta1;
        assert!(ci.lower < b && b < ci.upper);
        // endpoints solve the defining equation
        let z = critical_value(0.95);
        assert!((a.profile_point(ci.upper).unwrap().r_p + z).abs() < 1e-4);
    }

    #[test]
    fn p_values_by_tail() {
        let alt = Alternative::TwoSided;
        let p = alt.p_value(1.959963984540054);
        assert!((p - 0.05).abs() < 1e-10, "{p}");
        assert!((Alternative::Less.p_value(0.0) - 0.5).abs() < 1e-15);
        assert!((Alternative::Greater.p_value(-1.0) - Alternative::Less.p_value(1.0)).abs() < 1e-15);
        assert_eq!("two.sided".parse::<Alternative>().unwrap(), Alternative::TwoSided);
        assert!("both".parse::<Alternative>().is_err());
    }

    #[test]
    fn generic_s_matches_three_moment_expansion() {
        // Direct per-study evaluation of cov(score at θ̂, score at θ̃) by
        // expanding both scores as quadratic + linear forms in r = y − f̂.
        let (d, hat, tilde) = hoes_points();
        let s = s_matrix(&hat, &tilde, &d).unwrap();
        let mut want = SmallMatrix::square(N_PARAMS);
        for o in &d {
            let h = model_derivs(&hat, &o.gamma).unwrap();
            let t = model_derivs(&tilde, &o.gamma).unwrap();
            let delta = sub2(h.f, t.f);
            for j in 0..N_PARAMS {
                for k in 0..N_PARAMS {
                    // score_j(θ̂) = −½ rᵀÂⱼr + âⱼᵀr + c, score_k(θ̃) = −½ rᵀÃₖr + ãₖᵀr + c'
                    let a_h = h.v_inv.mul_vec(h.f_grad[j]);
                    let t_lin = sub2(
                        t.v_inv.mul_vec(t.f_grad[k]),
                        t.v_inv_grad[k].mul_vec(delta),
                    );
                    let quad = 0.25 * 2.0 * (h.v_inv_grad[j] * h.v * t.v_inv_grad[k] * h.v).trace();
                    want[(j, k)] += quad + h.v.bilinear(a_h, t_lin);
                }
            }
        }
        for j in 0..N_PARAMS {
            for k in 0..N_PARAMS {
                assert!((s[(j, k)] - want[(j, k)]).abs() < 1e-10 * want[(j, k)].abs().max(1.0));
            }
        }
    }
}

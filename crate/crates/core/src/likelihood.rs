//! Marginal bivariate normal model for `(η̂ᵢ, ξ̂ᵢ)` and its derivatives.
//!
//! Integrating the latent control risk `ξᵢ ~ N(μ, σ²)` and the regression
//! error out of the measurement model gives
//!
//! ```text
//! (η̂ᵢ, ξ̂ᵢ) ~ N₂( (β₀ + β₁μ, μ),  Γᵢ + [[τ² + β₁²σ², β₁σ²], [β₁σ², σ²]] )
//! ```
//!
//! Everything here works in the canonical parameter order
//! `(β₀, β₁, μ, τ², σ²)`; see the index constants.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::data::Dataset;
use crate::linalg::{dot2, sub2, Mat2, SmallMatrix, Vec2};

pub const N_PARAMS: usize = 5;
pub const BETA0: usize = 0;
pub const BETA1: usize = 1;
pub const MU: usize = 2;
pub const TAU2: usize = 3;
pub const SIGMA2: usize = 4;

pub const PARAM_NAMES: [&str; N_PARAMS] = ["beta0", "beta1", "mu", "tau2", "sigma2"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("variance components must be positive (tau2={tau2}, sigma2={sigma2})")]
    Domain { tau2: f64, sigma2: f64 },
    #[error("marginal covariance of study {study} is not invertible (determinant {det:e})")]
    SingularStudy { study: usize, det: f64 },
    #[error("non-finite parameter value")]
    NonFinite,
}

/// Full parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta0: f64,
    /// Slope of the control rate regression; the parameter of interest.
    pub beta1: f64,
    pub mu: f64,
    pub tau2: f64,
    pub sigma2: f64,
}

impl Theta {
    pub fn new(beta0: f64, beta1: f64, mu: f64, tau2: f64, sigma2: f64) -> Self {
        Theta {
            beta0,
            beta1,
            mu,
            tau2,
            sigma2,
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [self.beta0, self.beta1, self.mu, self.tau2, self.sigma2]
    }

    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        Theta::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Theta::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    /// Whether the likelihood is defined here.
    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.tau2 > 0.0 && self.sigma2 > 0.0
    }

    fn check(&self) -> Result<(), LikelihoodError> {
        if !self.is_finite() {
            return Err(LikelihoodError::NonFinite);
        }
        if !(self.tau2 > 0.0 && self.sigma2 > 0.0) {
            return Err(LikelihoodError::Domain {
                tau2: self.tau2,
                sigma2: self.sigma2,
            });
        }
        Ok(())
    }

    pub fn with(&self, idx: usize, value: f64) -> Theta {
        let mut a = self.to_array();
        a[idx] = value;
        Theta::from_array(a)
    }
}

/// Marginal mean `f` and covariance `v` of one study's observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalMoments {
    pub f: Vec2,
    pub v: Mat2,
}

#[inline]
fn moments_unchecked(theta: &Theta, gamma: &Mat2) -> MarginalMoments {
    let b1 = theta.beta1;
    let s2 = theta.sigma2;
    let latent = Mat2::sym(theta.tau2 + b1 * b1 * s2, b1 * s2, s2);
    MarginalMoments {
        f: [theta.beta0 + b1 * theta.mu, theta.mu],
        v: *gamma + latent,
    }
}

pub fn marginal_moments(theta: &Theta, gamma: &Mat2) -> Result<MarginalMoments, LikelihoodError> {
    theta.check()?;
    Ok(moments_unchecked(theta, gamma))
}

/// Moments of one study with first derivatives in every parameter, plus the
/// (few) nonzero second derivatives on demand.
///
/// `v_inv_grad[k]` is the derivative of the inverse, `-V⁻¹ V_{,k} V⁻¹`.
#[derive(Debug, Clone, Copy)]
pub struct StudyDerivs {
    pub f: Vec2,
    pub v: Mat2,
    pub v_inv: Mat2,
    pub f_grad: [Vec2; N_PARAMS],
    pub v_grad: [Mat2; N_PARAMS],
    pub v_inv_grad: [Mat2; N_PARAMS],
    beta1: f64,
    sigma2: f64,
}

impl StudyDerivs {
    /// Second derivative of the mean; only the `(β₁, μ)` pair is nonzero.
    pub fn f_hess(&self, j: usize, k: usize) -> Vec2 {
        match (j.min(k), j.max(k)) {
            (BETA1, MU) => [1.0, 0.0],
            _ => [0.0, 0.0],
        }
    }

    /// Second derivative of the covariance; nonzero for `(β₁, β₁)` and `(β₁, σ²)`.
    pub fn v_hess(&self, j: usize, k: usize) -> Mat2 {
        match (j.min(k), j.max(k)) {
            (BETA1, BETA1) => Mat2::diag(2.0 * self.sigma2, 0.0),
            (BETA1, SIGMA2) => Mat2::sym(2.0 * self.beta1, 1.0, 0.0),
            _ => Mat2::ZERO,
        }
    }

    /// Second derivative of `V⁻¹`.
    pub fn v_inv_hess(&self, j: usize, k: usize) -> Mat2 {
        let vi = self.v_inv;
        let a = vi * self.v_grad[j] * vi * self.v_grad[k] * vi;
        let b = vi * self.v_grad[k] * vi * self.v_grad[j] * vi;
        a + b - vi * self.v_hess(j, k) * vi
    }
}

fn derivs_unchecked(theta: &Theta, gamma: &Mat2) -> Option<StudyDerivs> {
    let MarginalMoments { f, v } = moments_unchecked(theta, gamma);
    let v_inv = v.inverse().ok()?;
    let b1 = theta.beta1;
    let s2 = theta.sigma2;
    let f_grad = [
        [1.0, 0.0],
        [theta.mu, 0.0],
        [b1, 1.0],
        [0.0, 0.0],
        [0.0, 0.0],
    ];
    let v_grad = [
        Mat2::ZERO,
        Mat2::sym(2.0 * b1 * s2, s2, 0.0),
        Mat2::ZERO,
        Mat2::diag(1.0, 0.0),
        Mat2::sym(b1 * b1, b1, 1.0),
    ];
    let v_inv_grad = v_grad.map(|g| -(v_inv * g * v_inv));
    Some(StudyDerivs {
        f,
        v,
        v_inv,
        f_grad,
        v_grad,
        v_inv_grad,
        beta1: b1,
        sigma2: s2,
    })
}

/// Analytic first and second derivatives of one study's moments.
pub fn model_derivs(theta: &Theta, gamma: &Mat2) -> Result<StudyDerivs, LikelihoodError> {
    theta.check()?;
    derivs_unchecked(theta, gamma).ok_or_else(|| LikelihoodError::SingularStudy {
        study: 0,
        det: moments_unchecked(theta, gamma).v.det(),
    })
}

pub(crate) fn dataset_derivs(
    theta: &Theta,
    data: &Dataset,
) -> Result<Vec<StudyDerivs>, LikelihoodError> {
    theta.check()?;
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            derivs_unchecked(theta, &s.gamma).ok_or_else(|| LikelihoodError::SingularStudy {
                study: i,
                det: moments_unchecked(theta, &s.gamma).v.det(),
            })
        })
        .collect()
}

/// Log-density of one study at `y`, or `None` if `V` is not positive definite.
#[inline]
fn study_loglik(theta: &Theta, gamma: &Mat2, y: Vec2) -> Option<f64> {
    let MarginalMoments { f, v } = moments_unchecked(theta, gamma);
    let det = v.det();
    if !(det > 0.0) || !(v.m[0][0] > 0.0) {
        return None;
    }
    let r = sub2(y, f);
    // rᵀ V⁻¹ r with the closed-form inverse
    let quad = (v.m[1][1] * r[0] * r[0] - 2.0 * v.m[0][1] * r[0] * r[1] + v.m[0][0] * r[1] * r[1])
        / det;
    Some(-0.5 * det.ln() - 0.5 * quad - (2.0 * PI).ln())
}

/// Log-likelihood, including the bivariate-normal normalizing constant.
///
/// Returns `-∞` when `τ² ≤ 0`, `σ² ≤ 0`, or any parameter is non-finite, so
/// that a simplex search can reject the point.
pub fn loglik(theta: &Theta, data: &Dataset) -> f64 {
    if !theta.is_valid() {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for s in data {
        match study_loglik(theta, &s.gamma, s.y()) {
            Some(l) => total += l,
            None => return f64::NEG_INFINITY,
        }
    }
    total
}

fn accumulate_score(d: &StudyDerivs, y: Vec2, out: &mut [f64; N_PARAMS]) {
    let r = sub2(y, d.f);
    let vir = d.v_inv.mul_vec(r);
    for k in 0..N_PARAMS {
        let tr = d.v_inv.trace_mul(&d.v_grad[k]);
        let quad = d.v_inv_grad[k].bilinear(r, r);
        out[k] += -0.5 * tr - 0.5 * quad + dot2(d.f_grad[k], vir);
    }
}

/// Score evaluated wherever every `Vᵢ` is invertible, including points just
/// outside the variance-component boundary. Used for numerical Hessians.
pub(crate) fn score_raw(theta: &Theta, data: &Dataset) -> Result<[f64; N_PARAMS], LikelihoodError> {
    if !theta.is_finite() {
        return Err(LikelihoodError::NonFinite);
    }
    let mut out = [0.0; N_PARAMS];
    for (i, s) in data.iter().enumerate() {
        let d = derivs_unchecked(theta, &s.gamma).ok_or_else(|| LikelihoodError::SingularStudy {
            study: i,
            det: moments_unchecked(theta, &s.gamma).v.det(),
        })?;
        accumulate_score(&d, s.y(), &mut out);
    }
    Ok(out)
}

/// Gradient of [`loglik`].
pub fn score(theta: &Theta, data: &Dataset) -> Result<[f64; N_PARAMS], LikelihoodError> {
    theta.check()?;
    score_raw(theta, data)
}

/// Contribution of one study to the score, evaluated at `y`.
pub fn study_score(d: &StudyDerivs, y: Vec2) -> [f64; N_PARAMS] {
    let mut out = [0.0; N_PARAMS];
    accumulate_score(d, y, &mut out);
    out
}

/// Contribution of one study to the log-likelihood at `y`, from precomputed
/// moments.
pub fn study_loglik_at(d: &StudyDerivs, y: Vec2) -> f64 {
    let r = sub2(y, d.f);
    -0.5 * d.v.det().ln() - 0.5 * d.v_inv.bilinear(r, r) - (2.0 * PI).ln()
}

/// Expected (Fisher) information,
/// `Σᵢ ½ tr(Vᵢ⁻¹ Vᵢ,ⱼ Vᵢ⁻¹ Vᵢ,ₖ) + fᵢ,ⱼᵀ Vᵢ⁻¹ fᵢ,ₖ`.
pub fn expected_info(theta: &Theta, data: &Dataset) -> Result<SmallMatrix, LikelihoodError> {
    let derivs = dataset_derivs(theta, data)?;
    Ok(expected_info_from(&derivs))
}

pub(crate) fn expected_info_from(derivs: &[StudyDerivs]) -> SmallMatrix {
    let mut info = SmallMatrix::square(N_PARAMS);
    for d in derivs {
        let a: [Mat2; N_PARAMS] = d.v_grad.map(|g| d.v_inv * g);
        for j in 0..N_PARAMS {
            for k in j..N_PARAMS {
                let value =
                    0.5 * a[j].trace_mul(&a[k]) + d.v_inv.bilinear(d.f_grad[j], d.f_grad[k]);
                info[(j, k)] += value;
            }
        }
    }
    for j in 0..N_PARAMS {
        for k in 0..j {
            info[(j, k)] = info[(k, j)];
        }
    }
    info
}

/// Relative step for the central differences in [`observed_info`].
pub const OBSERVED_INFO_STEP: f64 = 1e-5;

/// Observed information `-∂²ℓ/∂θ∂θᵀ` by central differences of the analytic
/// score, symmetrized.
///
/// The difference stencil may straddle `τ² = 0` or `σ² = 0` when the point
/// sits on the boundary; the score is still well defined there as long as
/// every `Vᵢ` stays positive definite, so only `θ` itself must be valid.
pub fn observed_info(theta: &Theta, data: &Dataset) -> Result<SmallMatrix, LikelihoodError> {
    theta.check()?;
    let base = theta.to_array();
    let mut j = SmallMatrix::square(N_PARAMS);
    for k in 0..N_PARAMS {
        let h = OBSERVED_INFO_STEP * base[k].abs().max(1.0);
        let mut up = base;
        let mut down = base;
        up[k] += h;
        down[k] -= h;
        let su = score_raw(&Theta::from_array(up), data)?;
        let sd = score_raw(&Theta::from_array(down), data)?;
        for row in 0..N_PARAMS {
            j[(row, k)] = -(su[row] - sd[row]) / (2.0 * h);
        }
    }
    Ok(j.symmetrize())
}

//! Homogeneous random-effects meta-analysis, `Yᵢ ~ N(υ, ω)` with
//! `ω = σ² + τ²` and known common `σ²`, where every ingredient of the
//! corrected root has a closed form. Serves as an analytic testbed for the
//! assembly in [`crate::skovgaard`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::SmallMatrix;
use crate::skovgaard::{assemble_u, corrected_root, Flag, SkovgaardError};

/// Gap kept between `ω` and `σ²` so that `τ²` stays positive.
pub const OMEGA_FLOOR_GAP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ReError {
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("within-study variance must be positive and finite, got {0}")]
    InvalidSigma2(f64),
    #[error("observation {0} is not finite")]
    NonFinite(usize),
    #[error("null value must be finite, got {0}")]
    NonFiniteNull(f64),
    #[error(transparent)]
    Skovgaard(#[from] SkovgaardError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReData {
    y: Vec<f64>,
    sigma2: f64,
}

impl ReData {
    pub fn new(y: Vec<f64>, sigma2: f64) -> Result<Self, ReError> {
        if y.len() < 2 {
            return Err(ReError::TooFew(y.len()));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(ReError::InvalidSigma2(sigma2));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(ReError::NonFinite(i));
        }
        Ok(ReData { y, sigma2 })
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn floor(&self) -> f64 {
        self.sigma2 + OMEGA_FLOOR_GAP
    }

    fn mean_sq(&self, upsilon: f64) -> f64 {
        self.y.iter().map(|v| (v - upsilon).powi(2)).sum::<f64>() / self.y.len() as f64
    }

    /// Log-likelihood without the `−(n/2)log 2π` constant.
    pub fn loglik(&self, upsilon: f64, omega: f64) -> f64 {
        let n = self.y.len() as f64;
        -0.5 * n * omega.ln() - 0.5 * n * self.mean_sq(upsilon) / omega
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReFit {
    pub upsilon_hat: f64,
    pub omega_hat: f64,
    /// `ω̂_υ`, the constrained estimate at `υ₀`.
    pub omega_tilde: f64,
    /// `ω̂` or `ω̂_υ` was raised to the floor `σ²`.
    pub floored: bool,
}

/// Closed-form unconstrained and constrained estimates.
pub fn re_fit(data: &ReData, upsilon_0: f64) -> Result<ReFit, ReError> {
    if !upsilon_0.is_finite() {
        return Err(ReError::NonFiniteNull(upsilon_0));
    }
    let n = data.y.len() as f64;
    let upsilon_hat = data.y.iter().sum::<f64>() / n;
    let floor = data.floor();
    let raw_hat = data.mean_sq(upsilon_hat);
    let raw_tilde = data.mean_sq(upsilon_0);
    let floored = raw_hat < floor || raw_tilde < floor;
    if floored {
        log::warn!("variance estimate raised to the within-study variance");
    }
    Ok(ReFit {
        upsilon_hat,
        omega_hat: raw_hat.max(floor),
        omega_tilde: raw_tilde.max(floor),
        floored,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReResult {
    pub fit: ReFit,
    pub r: f64,
    pub r_bar: f64,
    /// Ordered `(υ, ω)`.
    pub s: [[f64; 2]; 2],
    pub q: [f64; 2],
    pub u: f64,
    pub flags: Vec<Flag>,
}

/// Closed-form `S`.
pub fn re_s(n: f64, upsilon_hat: f64, upsilon_0: f64, omega_tilde: f64) -> [[f64; 2]; 2] {
    let d = upsilon_hat - upsilon_0;
    [
        [n / omega_tilde, n * d / (omega_tilde * omega_tilde)],
        [0.0, n / (2.0 * omega_tilde * omega_tilde)],
    ]
}

/// Closed-form `q`.
pub fn re_q(n: f64, upsilon_hat: f64, upsilon_0: f64, omega_hat: f64, omega_tilde: f64) -> [f64; 2] {
    [
        n * (upsilon_hat - upsilon_0) / omega_tilde,
        -0.5 * n * (1.0 / omega_hat - 1.0 / omega_tilde),
    ]
}

/// Observed information at `(υ, ω)`.
pub fn re_observed_info(data: &ReData, upsilon: f64, omega: f64) -> [[f64; 2]; 2] {
    let n = data.y.len() as f64;
    let s1: f64 = data.y.iter().map(|v| v - upsilon).sum();
    let s2 = n * data.mean_sq(upsilon);
    let off = s1 / (omega * omega);
    [
        [n / omega, off],
        [off, s2 / omega.powi(3) - n / (2.0 * omega * omega)],
    ]
}

pub fn re_expected_info(n: f64, omega: f64) -> [[f64; 2]; 2] {
    [[n / omega, 0.0], [0.0, n / (2.0 * omega * omega)]]
}

fn mat(a: [[f64; 2]; 2]) -> SmallMatrix {
    SmallMatrix::from_rows(&a).expect("2x2")
}

/// Signed root, its corrected version, and the pieces of the correction
/// for testing `υ = upsilon_0`.
pub fn re_skovgaard(data: &ReData, upsilon_0: f64) -> Result<ReResult, ReError> {
    let fit = re_fit(data, upsilon_0)?;
    let n = data.y.len() as f64;
    let (uh, oh, ot) = (fit.upsilon_hat, fit.omega_hat, fit.omega_tilde);
    let drop = (data.loglik(uh, oh) - data.loglik(upsilon_0, ot)).max(0.0);
    let d = uh - upsilon_0;
    let r = if d == 0.0 { 0.0 } else { d.signum() * (2.0 * drop).sqrt() };
    let s = re_s(n, uh, upsilon_0, ot);
    let q = re_q(n, uh, upsilon_0, oh, ot);
    let j_hat = re_observed_info(data, uh, oh);
    let i_hat = re_expected_info(n, oh);
    let j_tilde = re_observed_info(data, upsilon_0, ot);
    let i_tilde = re_expected_info(n, ot);
    let corr = assemble_u(
        &mat(s),
        &q,
        0,
        &mat(j_hat),
        &mat(i_hat),
        &SmallMatrix::from_rows(&[[j_tilde[1][1]]]).expect("1x1"),
        &SmallMatrix::from_rows(&[[i_tilde[1][1]]]).expect("1x1"),
    )?;
    let mut flags = corr.flags.clone();
    let (r_bar, guard) = corrected_root(r, corr.u);
    if let Some(g) = guard {
        flags.push(g);
    }
    Ok(ReResult {
        fit,
        r,
        r_bar,
        s,
        q,
        u: corr.u,
        flags,
    })
}

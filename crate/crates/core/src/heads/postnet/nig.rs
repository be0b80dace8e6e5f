//! Normal-Inverse-Gamma posterior update, canonical map and entropies.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use super::super::{HeadError, NigCanonical};

/// Expected sufficient statistics `(χ₁, χ₂) = (E[y], E[y²])` with evidence `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub chi1: f64,
    pub chi2: f64,
    pub n: f64,
}

impl NigParams {
    /// The fixed high-entropy prior `χ = (0, 100)`, `n = 1`.
    pub fn default_prior() -> Self {
        Self {
            chi1: 0.0,
            chi2: 100.0,
            n: 1.0,
        }
    }
}

/// `χ_post = (n_prior χ_prior + n χ) / (n_prior + n)`, `n_post = n_prior + n`.
pub fn posterior_update(chi1: f64, chi2: f64, n: f64, prior: &NigParams) -> NigParams {
    let n_post = prior.n + n;
    let w = n / n_post;
    NigParams {
        chi1: prior.chi1 + w * (chi1 - prior.chi1),
        chi2: prior.chi2 + w * (chi2 - prior.chi2),
        n: n_post,
    }
}

/// Variance floor applied when `χ₂ − χ₁²` is not positive.
pub const VAR_EPS: f64 = 1e-6;

/// Canonical parameters in log form so huge evidence stays finite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NigLog {
    pub mu0: f64,
    pub ln_lambda: f64,
    pub alpha: f64,
    pub ln_beta: f64,
    /// Implied posterior variance `β/(α−1)`.
    pub var: f64,
    pub clamped: bool,
}

impl NigLog {
    /// From posterior statistics given as `χ_post` and `ln n_post`:
    /// `μ₀ = χ₁`, `λ = n`, `α = n/2 + 1`, `β = n(χ₂ − χ₁²)/2`.
    pub fn from_posterior(chi1: f64, chi2: f64, ln_n_post: f64) -> Self {
        let raw = chi2 - chi1 * chi1;
        let clamped = !(raw > VAR_EPS);
        let var = if clamped { VAR_EPS } else { raw };
        let n = ln_n_post.exp();
        Self {
            mu0: chi1,
            ln_lambda: ln_n_post,
            alpha: n / 2.0 + 1.0,
            ln_beta: ln_n_post + var.ln() - 2f64.ln(),
            var,
            clamped,
        }
    }

    pub fn canonical(&self) -> NigCanonical {
        NigCanonical {
            mu0: self.mu0,
            lambda: self.ln_lambda.exp(),
            alpha: self.alpha,
            beta: self.ln_beta.exp(),
        }
    }

    pub fn aleatoric_entropy(&self) -> f64 {
        0.5 * (2.0 * PI * E * self.var).ln()
    }

    pub fn epistemic_entropy(&self) -> f64 {
        0.5 + 0.5 * (2.0 * PI).ln() - 0.5 * self.ln_lambda + 1.5 * self.ln_beta + gamma_terms(self.alpha)
    }
}

/// `α + lnΓ(α) − (α + 1.5) ψ(α)`, with the Stirling expansion for large `α`
/// where the direct form cancels catastrophically.
fn gamma_terms(alpha: f64) -> f64 {
    if alpha < 1e5 {
        alpha + ln_gamma(alpha) - (alpha + 1.5) * digamma(alpha)
    } else {
        let inv = 1.0 / alpha;
        -2.0 * alpha.ln() + 0.5 * (2.0 * PI).ln() + 0.5 + inv * 11.0 / 12.0 + inv * inv / 8.0
    }
}

/// `0.5·ln(2πe·β/(α−1))`; undefined for `α ≤ 1`.
pub fn aleatoric_entropy(p: &NigCanonical) -> Result<f64, HeadError> {
    if p.alpha <= 1.0 {
        return Err(HeadError::Numerical(format!("alpha {} <= 1 has no finite mean variance", p.alpha)));
    }
    Ok(0.5 * (2.0 * PI * E * p.beta / (p.alpha - 1.0)).ln())
}

/// Differential entropy of `NIG(μ₀, λ, α, β)`: the Inverse-Gamma entropy plus
/// the expected entropy of `N(μ₀, σ²/λ)`.
pub fn nig_entropy(p: &NigCanonical) -> Result<f64, HeadError> {
    if !(p.alpha > 0.0 && p.beta > 0.0 && p.lambda > 0.0) {
        return Err(HeadError::Numerical(format!("invalid NIG {p:?}")));
    }
    Ok(0.5 + 0.5 * (2.0 * PI).ln() - 0.5 * p.lambda.ln() + 1.5 * p.beta.ln() + gamma_terms(p.alpha))
}

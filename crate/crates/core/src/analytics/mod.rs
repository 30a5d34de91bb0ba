//! Closed-form successful offloading probability (SOP) of a probabilistically
//! cached, randomly bandwidth-split small-cell network, and its analytic
//! gradients with respect to the caching probabilities and the bandwidth
//! allocation factor.
//!
//! The SIR of a user does not depend on the transmit power (it scales both
//! the signal and every interferer), so [`NetworkConfig::tx_power_dbm`] is
//! carried for bookkeeping only.

mod gamma;
pub mod quadrature;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gamma::gamma_fn;

/// Tolerance on Σp = 1 for a popularity vector.
pub const POPULARITY_SUM_TOL: f64 = 1e-9;
/// Slack allowed on Σq ≤ C when checking feasibility.
pub const CAPACITY_SLACK: f64 = 1e-9;
/// Default absolute error target for the Z integral.
pub const Z_ABS_TOL: f64 = 1e-10;
const Z_MAX_SUBINTERVALS: usize = 4000;

/// Scenario constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// BS density (m⁻²).
    pub lambda_b: f64,
    /// User density (m⁻²).
    pub lambda_u: f64,
    /// Total bandwidth (Hz).
    pub bandwidth_w: f64,
    /// Rate threshold (bit/s).
    pub rate_threshold_r0: f64,
    /// Path-loss exponent, > 2.
    pub alpha: f64,
    /// Transmit power (dBm). Cancels out of the SIR.
    pub tx_power_dbm: f64,
    pub num_files_f: usize,
    pub cache_size_c: usize,
    pub window_tau: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let density = 5.0 / (250.0_f64.powi(2) * std::f64::consts::PI);
        Self {
            lambda_b: density,
            lambda_u: density,
            bandwidth_w: 20e6,
            rate_threshold_r0: 2e6,
            alpha: 3.7,
            tx_power_dbm: 30.0,
            num_files_f: 20,
            cache_size_c: 2,
            window_tau: 5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_b", self.lambda_b),
            ("lambda_u", self.lambda_u),
            ("bandwidth_w", self.bandwidth_w),
            ("rate_threshold_r0", self.rate_threshold_r0),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 2.0) {
            return Err(Error::invalid(format!("alpha must be > 2, got {}", self.alpha)));
        }
        if self.cache_size_c < 1 || self.cache_size_c > self.num_files_f {
            return Err(Error::invalid(format!(
                "cache_size_c must lie in [1, num_files_f = {}], got {}",
                self.num_files_f, self.cache_size_c
            )));
        }
        if self.window_tau < 1 {
            return Err(Error::invalid("window_tau must be >= 1"));
        }
        Ok(())
    }

    pub fn load_ratio(&self) -> f64 {
        self.lambda_u / self.lambda_b
    }

    pub fn capacity(&self) -> f64 {
        self.cache_size_c as f64
    }

    /// Exponent `(R₀/(βW))(1 + 1.28 λ_u/λ_b)` of the SIR threshold.
    fn rate_exponent(&self, beta: f64) -> f64 {
        self.rate_threshold_r0 / (beta * self.bandwidth_w) * (1.0 + 1.28 * self.load_ratio())
    }
}

/// Per-period file request probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PopularityVector(Vec<f64>);

impl PopularityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, POPULARITY_SUM_TOL)
    }

    pub fn with_tolerance(probs: Vec<f64>, sum_tol: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("popularity vector is empty"));
        }
        if let Some((i, v)) = probs
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::invalid(format!("popularity[{i}] = {v} not in [0,1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > sum_tol {
            return Err(Error::invalid(format!("popularity sums to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights; an all-zero input becomes uniform.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Self::uniform(weights.len());
        }
        Self::new(weights.iter().map(|w| (w / total).min(1.0)).collect())
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("popularity vector is empty"));
        }
        Ok(Self(vec![1.0 / len as f64; len]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for PopularityVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PopularityVector> for Vec<f64> {
    fn from(p: PopularityVector) -> Self {
        p.0
    }
}

/// Caching probabilities and bandwidth allocation factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub q: Vec<f64>,
    pub beta: f64,
}

impl Policy {
    /// Builds a policy satisfying the box constraints `q ∈ [0,1]^F`,
    /// `β ∈ (0,1]`. The capacity constraint is checked separately.
    pub fn new(q: Vec<f64>, beta: f64) -> Result<Self> {
        let p = Self { q, beta };
        p.check_box()?;
        Ok(p)
    }

    pub fn check_box(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("beta = {} not in (0,1]", self.beta)));
        }
        if let Some((i, v)) = self
            .q
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::invalid(format!("q[{i}] = {v} not in [0,1]")));
        }
        Ok(())
    }

    pub fn cached_mass(&self) -> f64 {
        self.q.iter().sum()
    }

    pub fn is_feasible(&self, capacity: f64) -> bool {
        self.check_box().is_ok() && self.cached_mass() <= capacity + CAPACITY_SLACK
    }
}

/// Auxiliary quantities of the closed form at one value of β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SopTerms {
    pub beta: f64,
    /// BS activity probability p_a.
    pub p_active: f64,
    /// SIR threshold γ₀,β.
    pub gamma0: f64,
    /// Z_{1,γ₀,β}.
    pub z_value: f64,
    /// Absolute error estimate of `z_value`.
    pub z_error: f64,
    /// K = Γ(1−2/α)Γ(1+2/α).
    pub k_const: f64,
    /// 2/α.
    pub delta: f64,
    /// γ₀^{2/α}.
    pub gamma_pow: f64,
    /// ∫_{γ₀^{-2/α}}^∞ (1 + x^{α/2})⁻¹ dx.
    pub tail_integral: f64,
    /// dγ₀/dβ.
    pub dgamma_dbeta: f64,
}

impl SopTerms {
    /// dZ/dβ by the chain rule through γ₀.
    pub fn dz_dbeta(&self) -> f64 {
        let g = self.gamma0;
        self.delta * self.dgamma_dbeta * (g.powf(self.delta - 1.0) * self.tail_integral + 1.0 / (1.0 + g))
    }

    /// Denominator κ_f of one summand.
    fn kappa(&self, q: f64) -> f64 {
        q + self.p_active * self.beta * (q * self.z_value + self.k_const * (1.0 - q) * self.gamma_pow)
    }
}

/// BS activity probability `1 − (1 + λ_u/(3.5 λ_b))^{−3.5}`.
pub fn active_probability(load_ratio: f64) -> f64 {
    1.0 - (1.0 + load_ratio / 3.5).powf(-3.5)
}

/// `K = Γ(1−2/α) Γ(1+2/α) / Γ(1)`.
pub fn k_constant(alpha: f64) -> Result<f64> {
    if !(alpha > 2.0) {
        return Err(Error::Domain(format!("alpha must be > 2, got {alpha}")));
    }
    let d = 2.0 / alpha;
    Ok(gamma_fn(1.0 - d)? * gamma_fn(1.0 + d)? / gamma_fn(1.0)?)
}

/// `∫_{lower}^∞ (1 + x^{α/2})⁻¹ dx`, mapped onto `(lower/(1+lower), 1)` by
/// `x = u/(1−u)`.
pub fn tail_integral(lower: f64, alpha: f64, abs_tol: f64) -> Result<quadrature::Integral> {
    if !(lower >= 0.0 && lower.is_finite()) {
        return Err(Error::Domain(format!("tail integral lower limit {lower}")));
    }
    let s = 0.5 * alpha;
    let u_low = lower / (1.0 + lower);
    // 1/(1+x^s) · dx/du with x = u/(1-u), rearranged to stay finite as u → 1.
    let integrand = |u: f64| {
        let w = 1.0 - u;
        if w <= 0.0 {
            // Node rounded onto the endpoint.
            return 0.0;
        }
        1.0 / (w * w + u.powf(s) * w.powf(2.0 - s))
    };
    quadrature::integrate(integrand, u_low, 1.0, abs_tol, Z_MAX_SUBINTERVALS)
}

/// Evaluates p_a, γ₀,β, Z and K at bandwidth factor `beta`.
pub fn compute_terms(cfg: &NetworkConfig, beta: f64) -> Result<SopTerms> {
    compute_terms_with_tol(cfg, beta, Z_ABS_TOL)
}

/// As [`compute_terms`] with an explicit absolute error target for Z.
pub fn compute_terms_with_tol(cfg: &NetworkConfig, beta: f64, z_abs_tol: f64) -> Result<SopTerms> {
    cfg.validate()?;
    if !(beta.is_finite() && beta > 0.0 && beta <= 1.0) {
        return Err(Error::Domain(format!("beta = {beta} not in (0,1]")));
    }
    terms_unchecked(cfg, beta, z_abs_tol)
}

/// No range check on β (finite-difference probes step past 1).
pub(crate) fn terms_unchecked(cfg: &NetworkConfig, beta: f64, z_abs_tol: f64) -> Result<SopTerms> {
    let exponent = cfg.rate_exponent(beta);
    let pow2 = exponent.exp2();
    if !pow2.is_finite() {
        return Err(Error::Overflow(format!(
            "SIR threshold 2^{exponent:.3} overflows at beta = {beta:e}; \
             increase beta or reduce R0/W"
        )));
    }
    let gamma0 = (exponent * std::f64::consts::LN_2).exp_m1();
    let delta = 2.0 / cfg.alpha;
    let gamma_pow = gamma0.powf(delta);
    let lower = gamma0.powf(-delta);
    let k_const = k_constant(cfg.alpha)?;
    // The tail integral never exceeds K; when γ₀ is huge an absolute target
    // on Z would ask for more digits than f64 holds, so cap it relatively.
    let tail_tol = (z_abs_tol / gamma_pow).max(1e-13 * k_const);
    let tail = tail_integral(lower, cfg.alpha, tail_tol)?;
    let dgamma_dbeta = -(exponent / beta) * pow2 * std::f64::consts::LN_2;
    Ok(SopTerms {
        beta,
        p_active: active_probability(cfg.load_ratio()),
        gamma0,
        z_value: gamma_pow * tail.value,
        z_error: gamma_pow * tail.abs_error,
        k_const,
        delta,
        gamma_pow,
        tail_integral: tail.value,
        dgamma_dbeta,
    })
}

/// Closed-form SOP for raw caching probabilities (q ≥ 0, not necessarily ≤ 1).
pub(crate) fn sop_with_terms(p: &[f64], q: &[f64], t: &SopTerms) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pf, &qf)| if qf == 0.0 { 0.0 } else { pf * qf / t.kappa(qf) })
        .sum()
}

pub(crate) fn grad_q_with_terms(p: &[f64], q: &[f64], t: &SopTerms) -> Vec<f64> {
    let numer = t.k_const * t.p_active * t.beta * t.gamma_pow;
    p.iter()
        .zip(q)
        .map(|(&pf, &qf)| {
            let k = t.kappa(qf);
            numer * pf / (k * k)
        })
        .collect()
}

pub(crate) fn grad_beta_with_terms(p: &[f64], q: &[f64], t: &SopTerms) -> f64 {
    let z_slope = t.z_value + t.beta * t.dz_dbeta();
    let interf_slope = t.k_const * t.gamma_pow * (1.0 + t.delta * t.beta / t.gamma0 * t.dgamma_dbeta);
    -p.iter()
        .zip(q)
        .map(|(&pf, &qf)| {
            let k = t.kappa(qf);
            t.p_active * pf * qf / (k * k) * (qf * z_slope + (1.0 - qf) * interf_slope)
        })
        .sum::<f64>()
}

fn check_inputs(p: &PopularityVector, policy: &Policy, cfg: &NetworkConfig) -> Result<()> {
    cfg.validate()?;
    if p.len() != policy.q.len() {
        return Err(Error::dim(p.len(), policy.q.len(), "policy.q vs popularity"));
    }
    policy.check_box()
}

/// Closed-form SOP. Capacity feasibility is not required.
pub fn sop(p: &PopularityVector, policy: &Policy, cfg: &NetworkConfig) -> Result<f64> {
    check_inputs(p, policy, cfg)?;
    let t = compute_terms(cfg, policy.beta)?;
    Ok(sop_with_terms(p.as_slice(), &policy.q, &t))
}

/// ∂SOP/∂q_f = K p_a p_f β γ₀^{2/α} / κ_f².
pub fn sop_grad_q(p: &PopularityVector, policy: &Policy, cfg: &NetworkConfig) -> Result<Vec<f64>> {
    check_inputs(p, policy, cfg)?;
    let t = compute_terms(cfg, policy.beta)?;
    Ok(grad_q_with_terms(p.as_slice(), &policy.q, &t))
}

/// ∂SOP/∂β, including the dependence of Z and γ₀ on β.
pub fn sop_grad_beta(p: &PopularityVector, policy: &Policy, cfg: &NetworkConfig) -> Result<f64> {
    check_inputs(p, policy, cfg)?;
    let t = compute_terms(cfg, policy.beta)?;
    Ok(grad_beta_with_terms(p.as_slice(), &policy.q, &t))
}

/// Value and both gradients, sharing one quadrature. `q` may exceed 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SopEval {
    pub value: f64,
    pub grad_q: Vec<f64>,
    pub grad_beta: f64,
}

pub fn sop_eval_raw(p: &[f64], q: &[f64], beta: f64, cfg: &NetworkConfig) -> Result<SopEval> {
    if p.len() != q.len() {
        return Err(Error::dim(p.len(), q.len(), "q vs popularity"));
    }
    if q.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("raw caching probabilities must be finite and >= 0"));
    }
    let t = compute_terms(cfg, beta)?;
    Ok(SopEval {
        value: sop_with_terms(p, q, &t),
        grad_q: grad_q_with_terms(p, q, &t),
        grad_beta: grad_beta_with_terms(p, q, &t),
    })
}

//! Closed-form loss and security bounds for the reconciliation strategies.
//!
//! Every strategy runs a corrector idealized at the Shannon limit: a block
//! whose realized error rate is covered by the design rate (estimate plus
//! buffer) is corrected while leaking `N h(design rate)` bits, and otherwise
//! it lands on a wrong codeword at least `d_min = 2 N * design rate` bits away.
//!
//! Analytic evaluation uses the mean error rate in place of the running
//! estimate. Sample and verification sizes are continuous inside the
//! objectives the optimizer sees and rounded up in every [`LossReport`].

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::special::{entropy, erfc, erfcinv, normal_cdf, Probability};

/// Largest admissible error rate; entropy and the min-distance base both
/// degenerate at one half.
pub const MAX_RATE: f64 = 0.5 - 1e-9;

/// Below this many expected errors in the sample the normal approximation
/// to the sampling distribution is flagged in reports.
const NORMAL_APPROX_MIN_ERRORS: f64 = 10.0;

/// System-level parameters shared by all strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Bits per block, `N`.
    pub block_size: u64,
    /// Mean block error rate, `delta`.
    pub mean_rate: f64,
    /// Security parameter, `epsilon`: bound on undetected failure.
    pub security: f64,
    /// Standard deviation of the block error rate. `None` means all
    /// variance comes from the binomial randomness of the bits.
    pub block_sigma: Option<f64>,
}

impl SystemParams {
    pub fn new(block_size: u64, mean_rate: f64, security: f64) -> Result<Self> {
        let params = Self {
            block_size,
            mean_rate,
            security,
            block_sigma: None,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        self.block_sigma = Some(sigma);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return domain("block size must be at least 1");
        }
        if !(0.0..=MAX_RATE).contains(&self.mean_rate) {
            return domain(format!("mean error rate {} outside [0, 0.5)", self.mean_rate));
        }
        if !(self.security > 0.0 && self.security < 1.0) {
            return domain(format!("security parameter {} outside (0, 1)", self.security));
        }
        if let Some(s) = self.block_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return domain(format!("block sigma {s} must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> f64 {
        self.block_size as f64
    }

    /// Block-rate standard deviation, defaulting to `sqrt(delta (1 - delta) / N)`.
    pub fn sigma(&self) -> f64 {
        self.block_sigma
            .unwrap_or_else(|| (self.mean_rate * (1.0 - self.mean_rate) / self.n()).sqrt())
    }
}

/// Post-correction verification variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verification {
    /// Disclose random bit pairs; relies on the code's minimum distance.
    #[serde(rename = "verify-mindist")]
    MinDistance,
    /// Exchange random parities.
    #[serde(rename = "verify-parity")]
    Parity,
}

/// Reconciliation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Error estimation by random sampling before correction.
    #[serde(rename = "eers")]
    Eers,
    #[serde(rename = "verify-mindist")]
    VerifyMinDist,
    #[serde(rename = "verify-parity")]
    VerifyParity,
    /// Sampling followed by parity verification.
    #[serde(rename = "combo")]
    Combination,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Eers,
        Method::VerifyMinDist,
        Method::VerifyParity,
        Method::Combination,
    ];

    pub fn verification(self) -> Option<Verification> {
        match self {
            Method::VerifyMinDist => Some(Verification::MinDistance),
            Method::VerifyParity => Some(Verification::Parity),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Eers => "eers",
            Method::VerifyMinDist => "verify-mindist",
            Method::VerifyParity => "verify-parity",
            Method::Combination => "combo",
        }
    }
}

impl From<Verification> for Method {
    fn from(v: Verification) -> Self {
        match v {
            Verification::MinDistance => Method::VerifyMinDist,
            Verification::Parity => Method::VerifyParity,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eers" => Ok(Method::Eers),
            "verify-mindist" => Ok(Method::VerifyMinDist),
            "verify-parity" => Ok(Method::VerifyParity),
            "combo" | "combination" => Ok(Method::Combination),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// A strategy with its tunables. Unset sizes are derived from the bounds
/// that make the undetected-failure probability at most `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub method: Method,
    pub buffer: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sample_size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verify_bits: Option<u64>,
}

impl StrategyConfig {
    pub fn new(method: Method, buffer: f64) -> Self {
        Self {
            method,
            buffer,
            sample_size: None,
            verify_bits: None,
        }
    }

    pub fn with_sample_size(mut self, s: u64) -> Self {
        self.sample_size = Some(s);
        self
    }

    pub fn with_verify_bits(mut self, v: u64) -> Self {
        self.verify_bits = Some(v);
        self
    }
}

/// Expected cost and security figures of one strategy on one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub method: Method,
    pub buffer: f64,
    /// Expected bits lost per block.
    pub loss: f64,
    /// `loss / N - h(delta)`.
    pub excess_loss: f64,
    /// Probability the corrector lands on a wrong codeword. Not modeled for
    /// sampling alone, where every such failure goes undetected.
    pub p_error: Option<Probability>,
    /// Bound on the probability of an undetected failure.
    pub p_undetected: Probability,
    pub sample_size: u64,
    pub verify_bits: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

fn prob(x: f64) -> Probability {
    Probability::new(x.clamp(0.0, 1.0)).expect("clamped")
}

fn check_design(mean_rate: f64, buffer: f64) -> Result<f64> {
    if !(buffer >= 0.0 && buffer.is_finite()) {
        return domain(format!("buffer {buffer} must be finite and nonnegative"));
    }
    let design = mean_rate + buffer;
    if design >= 0.5 {
        return domain(format!(
            "design rate {mean_rate} + {buffer} = {design} must stay below 0.5"
        ));
    }
    Ok(design)
}

/// Leakage of a corrector at the Shannon limit, `N h(delta)`.
pub fn shannon_loss(block_size: u64, rate: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&rate) {
        return domain(format!("error rate {rate} outside [0, 0.5)"));
    }
    Ok(block_size as f64 * entropy(rate))
}

/// Lower bound on the minimum distance of a code working at the Shannon
/// limit for `design_rate`: `ceil(2 N design_rate)`.
pub fn min_distance(block_size: u64, design_rate: f64) -> Result<u64> {
    if !(0.0..0.5).contains(&design_rate) {
        return domain(format!("design rate {design_rate} outside [0, 0.5)"));
    }
    let d = 2.0 * block_size as f64 * design_rate;
    // absorb representation error of the product before rounding up
    Ok((d - d * 1e-12).ceil() as u64)
}

/// Probability that a wrong codeword survives `verify_bits` checks.
///
/// The min-distance variant uses the outer bound `(1 - 2 design_rate)^V`.
pub fn p_undetected_given_error(
    variant: Verification,
    design_rate: f64,
    verify_bits: f64,
) -> Result<f64> {
    if !(verify_bits >= 0.0) {
        return domain(format!("verification size {verify_bits} must be nonnegative"));
    }
    match variant {
        Verification::Parity => Ok(0.5f64.powf(verify_bits)),
        Verification::MinDistance => {
            if !(0.0..0.5).contains(&design_rate) {
                return domain(format!("design rate {design_rate} outside [0, 0.5)"));
            }
            Ok((1.0 - 2.0 * design_rate).powf(verify_bits))
        }
    }
}

/// `(1 - d_min / N)^V` for a known minimum distance.
pub fn p_undetected_min_distance_exact(block_size: u64, d_min: u64, verify_bits: f64) -> f64 {
    (1.0 - d_min as f64 / block_size as f64).max(0.0).powf(verify_bits)
}

/// Continuous sample size making the worst-case sampling failure exactly
/// `epsilon`: `(erfinv(1 - 2 epsilon) / buffer)^2 / 2`.
pub fn eers_sample_size(security: f64, buffer: f64) -> Result<f64> {
    if !(buffer > 0.0) {
        return domain(format!("sampling buffer {buffer} must be positive"));
    }
    if !(security > 0.0 && security < 0.5) {
        return domain(format!("security parameter {security} outside (0, 0.5)"));
    }
    // erfinv(1 - 2 eps) == erfcinv(2 eps), without rounding 1 - 2 eps
    let z = erfcinv(2.0 * security)?;
    Ok(0.5 * (z / buffer).powi(2))
}

/// Smallest integer sample size meeting the sampling bound.
pub fn eers_sample_lower_bound(security: f64, buffer: f64) -> Result<u64> {
    Ok(eers_sample_size(security, buffer)?.ceil() as u64)
}

/// Worst case over the true rate of `P(estimate + buffer < true rate)` for a
/// normal-approximated sample of size `S`: `erfc(buffer sqrt(2 S)) / 2`.
pub fn eers_pu_bound(sample_size: f64, buffer: f64) -> f64 {
    0.5 * erfc(buffer * (2.0 * sample_size).sqrt())
}

fn normal_approx_warning(sample_size: f64, design: f64) -> Option<String> {
    (sample_size * design < NORMAL_APPROX_MIN_ERRORS).then(|| {
        format!(
            "normal approximation questionable: S * (delta + Delta) = {:.3} < {NORMAL_APPROX_MIN_ERRORS}",
            sample_size * design
        )
    })
}

/// `S + (N - S) h(design)` for a continuous `S`.
pub(crate) fn eers_loss_bits(params: &SystemParams, design: f64, sample_size: f64) -> f64 {
    sample_size + (params.n() - sample_size) * entropy(design)
}

/// Excess loss of sampling with a continuous sample size; optimizer objective.
pub(crate) fn eers_objective(params: &SystemParams, buffer: f64) -> Result<f64> {
    let design = check_design(params.mean_rate, buffer)?;
    let s = eers_sample_size(params.security, buffer)?.min(params.n());
    Ok(excessive_loss(eers_loss_bits(params, design, s), params.block_size, params.mean_rate))
}

/// Expected loss of error estimation by random sampling with the bound-sized sample.
pub fn eers_loss(params: &SystemParams, buffer: f64) -> Result<LossReport> {
    eers_report(params, buffer, None)
}

fn eers_report(params: &SystemParams, buffer: f64, sample_size: Option<u64>) -> Result<LossReport> {
    params.validate()?;
    let design = check_design(params.mean_rate, buffer)?;
    let s = match sample_size {
        Some(s) => s,
        None => eers_sample_lower_bound(params.security, buffer)?,
    };
    if s >= params.block_size {
        return domain(format!(
            "sample size {s} must be below the block size {}",
            params.block_size
        ));
    }
    let loss = eers_loss_bits(params, design, s as f64);
    let p_u = eers_pu_bound(s as f64, buffer);
    let mut warnings: Vec<String> = normal_approx_warning(s as f64, design).into_iter().collect();
    if p_u > params.security {
        warnings.push(format!("undetected-failure bound {p_u:.3e} exceeds epsilon"));
    }
    Ok(LossReport {
        method: Method::Eers,
        buffer,
        loss,
        excess_loss: excessive_loss(loss, params.block_size, params.mean_rate),
        p_error: None,
        p_undetected: prob(p_u),
        sample_size: s,
        verify_bits: 0,
        warnings,
    })
}

/// Continuous verification size making `p_{U|E}` exactly `epsilon`.
pub fn verification_bits(variant: Verification, security: f64, design_rate: f64) -> Result<f64> {
    if !(security > 0.0 && security < 1.0) {
        return domain(format!("security parameter {security} outside (0, 1)"));
    }
    match variant {
        Verification::Parity => Ok(security.ln() / 0.5f64.ln()),
        Verification::MinDistance => {
            if !(design_rate > 0.0 && design_rate < 0.5) {
                return domain(format!(
                    "min-distance verification needs a design rate in (0, 0.5), got {design_rate}"
                ));
            }
            Ok(security.ln() / (-2.0 * design_rate).ln_1p())
        }
    }
}

/// Smallest integer number of verification bits with `p_{U|E} <= epsilon`.
pub fn verification_v_bound(variant: Verification, security: f64, design_rate: f64) -> Result<u64> {
    let v = verification_bits(variant, security, design_rate)?;
    // guard against 19.999999999 style rounding of exact ratios
    Ok((v - v.abs() * 1e-12).ceil() as u64)
}

/// Probability that the previous block's rate plus `buffer` falls short of
/// the current block's, both drawn independently from `N(delta, sigma^2)`.
pub fn p_error_prev_block(buffer: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if buffer > 0.0 { 0.0 } else { 0.5 };
    }
    normal_cdf(-buffer / (std::f64::consts::SQRT_2 * sigma))
}

/// `(p_E - eps) N + (1 - p_E + eps) payload`: discarded blocks cost the whole
/// block, kept blocks cost the payload.
fn discard_weighted(params: &SystemParams, p_error: f64, payload: f64) -> f64 {
    let eps = params.security;
    (p_error - eps) * params.n() + (1.0 - p_error + eps) * payload
}

pub(crate) fn verification_objective(
    params: &SystemParams,
    variant: Verification,
    buffer: f64,
) -> Result<f64> {
    let design = check_design(params.mean_rate, buffer)?;
    let v = verification_bits(variant, params.security, design)?;
    let p_e = p_error_prev_block(buffer, params.sigma());
    let loss = discard_weighted(params, p_e, v + params.n() * entropy(design));
    Ok(excessive_loss(loss, params.block_size, params.mean_rate))
}

/// Expected loss of verification with the previous block's rate as estimate.
pub fn verification_loss(
    params: &SystemParams,
    variant: Verification,
    buffer: f64,
) -> Result<LossReport> {
    verification_report(params, variant, buffer, None)
}

fn verification_report(
    params: &SystemParams,
    variant: Verification,
    buffer: f64,
    verify_bits: Option<u64>,
) -> Result<LossReport> {
    params.validate()?;
    let design = check_design(params.mean_rate, buffer)?;
    let v = match verify_bits {
        Some(v) => v,
        None => verification_v_bound(variant, params.security, design)?,
    };
    let p_e = p_error_prev_block(buffer, params.sigma());
    let loss = discard_weighted(params, p_e, v as f64 + params.n() * entropy(design));
    let p_u = p_undetected_given_error(variant, design, v as f64)?;
    let mut warnings = Vec::new();
    if p_u > params.security {
        warnings.push(format!("undetected-failure bound {p_u:.3e} exceeds epsilon"));
    }
    Ok(LossReport {
        method: variant.into(),
        buffer,
        loss,
        excess_loss: excessive_loss(loss, params.block_size, params.mean_rate),
        p_error: Some(prob(p_e)),
        p_undetected: prob(p_u),
        sample_size: 0,
        verify_bits: v,
        warnings,
    })
}

/// Verification loss with the kept-block payload averaged over the
/// previous block's rate, `N(delta, sigma^2)` truncated to the valid
/// design range, instead of evaluated at the mean.
pub fn verification_loss_expected(
    params: &SystemParams,
    variant: Verification,
    buffer: f64,
) -> Result<LossReport> {
    let mut report = verification_loss(params, variant, buffer)?;
    let sigma = params.sigma();
    if sigma == 0.0 {
        return Ok(report);
    }
    let lo = (params.mean_rate - 8.0 * sigma).max(0.0);
    let hi = (params.mean_rate + 8.0 * sigma).min(MAX_RATE - buffer);
    if hi <= lo {
        return domain("truncated estimate distribution is empty");
    }
    // composite Simpson over the truncated normal
    let intervals = 800;
    let step = (hi - lo) / intervals as f64;
    let mut mass = 0.0;
    let mut payload = 0.0;
    let mut bits = 0.0;
    for i in 0..=intervals {
        let x = lo + step * i as f64;
        let w = match i {
            0 => 1.0,
            i if i == intervals => 1.0,
            i if i % 2 == 1 => 4.0,
            _ => 2.0,
        };
        let z = (x - params.mean_rate) / sigma;
        let pdf = (-0.5 * z * z).exp();
        let design = x + buffer;
        let v = match verification_v_bound(variant, params.security, design) {
            Ok(v) => v as f64,
            // zero design rate: min-distance checks cannot detect anything
            Err(_) => params.n(),
        };
        mass += w * pdf;
        payload += w * pdf * (v + params.n() * entropy(design));
        bits += w * pdf * v;
    }
    let payload = payload / mass;
    let p_e = p_error_prev_block(buffer, sigma);
    report.loss = discard_weighted(params, p_e, payload);
    report.excess_loss = excessive_loss(report.loss, params.block_size, params.mean_rate);
    report.verify_bits = (bits / mass).ceil() as u64;
    Ok(report)
}

/// Continuous verification size for the combination: the `V` with
/// `(1/2)^(V+1) erfc(buffer sqrt(2 S)) = epsilon`, floored at zero.
pub(crate) fn combination_bits(security: f64, buffer: f64, sample_size: f64) -> f64 {
    let tail = erfc(buffer * (2.0 * sample_size).sqrt());
    if tail <= 0.0 {
        return 0.0;
    }
    (tail.log2() - security.log2() - 1.0).max(0.0)
}

/// Parity bits needed after sampling `S` bits with buffer `Delta_C`.
pub fn combination_v_of_s(security: f64, buffer: f64, sample_size: u64) -> Result<u64> {
    if !(security > 0.0 && security < 1.0) {
        return domain(format!("security parameter {security} outside (0, 1)"));
    }
    if !(buffer >= 0.0) {
        return domain(format!("buffer {buffer} must be nonnegative"));
    }
    if sample_size == 0 {
        return domain("combination needs a nonempty sample");
    }
    let v = combination_bits(security, buffer, sample_size as f64);
    Ok((v - v * 1e-12).ceil() as u64)
}

pub(crate) fn combination_objective(params: &SystemParams, buffer: f64, sample_size: f64) -> Result<f64> {
    let design = check_design(params.mean_rate, buffer)?;
    let p_e = eers_pu_bound(sample_size, buffer);
    let v = combination_bits(params.security, buffer, sample_size);
    let payload = sample_size + v + (params.n() - sample_size) * entropy(design);
    let loss = discard_weighted(params, p_e, payload);
    Ok(excessive_loss(loss, params.block_size, params.mean_rate))
}

/// Expected loss of sampling followed by parity verification.
pub fn combination_loss(params: &SystemParams, buffer: f64, sample_size: u64) -> Result<LossReport> {
    combination_report(params, buffer, sample_size, None)
}

fn combination_report(
    params: &SystemParams,
    buffer: f64,
    sample_size: u64,
    verify_bits: Option<u64>,
) -> Result<LossReport> {
    params.validate()?;
    let design = check_design(params.mean_rate, buffer)?;
    if sample_size == 0 || sample_size >= params.block_size {
        return domain(format!(
            "sample size {sample_size} must lie in [1, {})",
            params.block_size
        ));
    }
    let s = sample_size as f64;
    let v = match verify_bits {
        Some(v) => v,
        None => combination_v_of_s(params.security, buffer, sample_size)?,
    };
    let p_e = eers_pu_bound(s, buffer);
    let payload = s + v as f64 + (params.n() - s) * entropy(design);
    let loss = discard_weighted(params, p_e, payload);
    let p_u = 0.5f64.powi(v as i32) * p_e;
    let mut warnings: Vec<String> = normal_approx_warning(s, design).into_iter().collect();
    if p_u > params.security {
        warnings.push(format!("undetected-failure bound {p_u:.3e} exceeds epsilon"));
    }
    Ok(LossReport {
        method: Method::Combination,
        buffer,
        loss,
        excess_loss: excessive_loss(loss, params.block_size, params.mean_rate),
        p_error: Some(prob(p_e)),
        p_undetected: prob(p_u),
        sample_size,
        verify_bits: v,
        warnings,
    })
}

/// Per-bit loss above the Shannon limit, `L / N - h(delta)`.
pub fn excessive_loss(loss: f64, block_size: u64, rate: f64) -> f64 {
    loss / block_size as f64 - entropy(rate)
}

/// Evaluates an explicit strategy configuration. Sizes left unset are
/// taken from the corresponding bounds.
pub fn evaluate(params: &SystemParams, config: &StrategyConfig) -> Result<LossReport> {
    match config.method {
        Method::Eers => eers_report(params, config.buffer, config.sample_size),
        Method::VerifyMinDist | Method::VerifyParity => {
            let variant = config.method.verification().expect("verification method");
            verification_report(params, variant, config.buffer, config.verify_bits)
        }
        Method::Combination => {
            let s = config.sample_size.ok_or_else(|| {
                Error::Config("combination requires an explicit sample size".into())
            })?;
            combination_report(params, config.buffer, s, config.verify_bits)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(n: u64, delta: f64, eps: f64) -> SystemParams {
        SystemParams::new(n, delta, eps).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(SystemParams::new(0, 0.05, 1e-6).is_err());
        assert!(SystemParams::new(10, 0.5, 1e-6).is_err());
        assert!(SystemParams::new(10, 0.05, 0.0).is_err());
        assert!(SystemParams::new(10, 0.05, 1.0).is_err());
        assert!(params(10, 0.05, 1e-6).with_sigma(-1.0).is_err());
        let p = params(1_000_000, 0.05, 1e-6);
        assert!((p.sigma() - 2.179_449_471_770_336_8e-4).abs() < 1e-15);
        assert_eq!(p.with_sigma(0.01).unwrap().sigma(), 0.01);
    }

    #[test]
    fn shannon_loss_examples() {
        assert_eq!(shannon_loss(1_000_000, 0.0).unwrap(), 0.0);
        assert!((shannon_loss(1_000_000, 0.5 - 1e-12).unwrap() - 1e6).abs() < 1e-3);
        assert!((shannon_loss(1_000_000, 0.05).unwrap() - 286_396.957_115_956).abs() < 1e-6);
        assert!(shannon_loss(10, 0.5).is_err());
    }

    #[test]
    fn min_distance_examples() {
        assert_eq!(min_distance(1_000_000, 0.05).unwrap(), 100_000);
        assert_eq!(min_distance(1_000_000, 0.0).unwrap(), 0);
        assert_eq!(min_distance(2_600_000, 0.016).unwrap(), 83_200);
        assert_eq!(min_distance(10, 0.03).unwrap(), 1);
        assert!(min_distance(10, 0.5).is_err());
    }

    #[test]
    fn undetected_given_error_examples() {
        let p = p_undetected_given_error(Verification::Parity, 0.0, 20.0).unwrap();
        assert!((p - 9.536_743_164_062_5e-7).abs() < 1e-20);
        let p = p_undetected_given_error(Verification::MinDistance, 0.05, 132.0).unwrap();
        // 0.9^132, mpmath
        assert!((p / 9.120_344_560_464_466e-7 - 1.0).abs() < 1e-12);
        for variant in [Verification::Parity, Verification::MinDistance] {
            assert_eq!(p_undetected_given_error(variant, 0.1, 0.0).unwrap(), 1.0);
        }
        assert!(p_undetected_given_error(Verification::MinDistance, 0.5, 3.0).is_err());
    }

    #[test]
    fn sample_bound_examples() {
        // 0.5 (erfcinv(2e-6) / Delta)^2 with erfcinv from mpmath
        let s = eers_sample_lower_bound(1e-6, 0.0126).unwrap();
        assert_eq!(s, 35_581);
        assert!((s as f64 / 35_700.0 - 1.0).abs() < 0.01);
        let s = eers_sample_lower_bound(1e-6, 0.01).unwrap();
        assert_eq!(s, 56_488);
        assert!(eers_sample_lower_bound(0.5 - 1e-12, 0.01).unwrap() <= 1);
        assert!(eers_sample_lower_bound(1e-6, 0.0).is_err());
        assert!(eers_sample_lower_bound(0.6, 0.01).is_err());
    }

    #[test]
    fn sampling_bound_examples() {
        assert_eq!(eers_pu_bound(1000.0, 0.0), 0.5);
        // mpmath: erfc(0.0126 sqrt(72000)) / 2
        let p = eers_pu_bound(36_000.0, 0.0126);
        assert!((p / 8.705_496_429_469_339e-7 - 1.0).abs() < 1e-10);
        assert!(eers_pu_bound(1e12, 0.01) < 1e-300);
    }

    #[test]
    fn eers_loss_table_points() {
        // mpmath evaluation with the same rounded sample size
        let r = eers_loss(&params(1_000_000, 0.05, 1e-6), 0.0126).unwrap();
        assert_eq!(r.sample_size, 35_581);
        assert!((r.excess_loss - 0.074_849_660_922_343_16).abs() < 1e-12);
        assert!((r.excess_loss - 0.075).abs() < 0.002);
        assert!(r.p_undetected.get() <= 1e-6);
        assert!(r.p_error.is_none());
        let r = eers_loss(&params(1_000_000, 0.01, 1e-6), 0.0122).unwrap();
        assert!((r.excess_loss - 0.104_949_489_088_476_32).abs() < 1e-12);
        assert!((r.excess_loss - 0.105).abs() < 0.003);
    }

    #[test]
    fn eers_loss_saturates() {
        let p = params(1_000_000, 0.05, 1e-6);
        let r = eers_loss(&p, 0.45 - 1e-9).unwrap();
        assert!((r.loss / 1e6 - 1.0).abs() < 1e-6);
        assert!(eers_loss(&p, 0.45).is_err());
    }

    #[test]
    fn eers_small_sample_warns() {
        let p = params(1_000_000, 0.01, 0.2);
        let r = eers_loss(&p, 0.2).unwrap();
        assert!(r.sample_size < 40);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn verification_bound_examples() {
        assert_eq!(verification_v_bound(Verification::Parity, 1e-6, 0.0).unwrap(), 20);
        assert_eq!(verification_v_bound(Verification::MinDistance, 1e-6, 0.05).unwrap(), 132);
        assert_eq!(verification_v_bound(Verification::MinDistance, 1e-6, 0.25).unwrap(), 20);
        assert!(verification_v_bound(Verification::MinDistance, 1e-6, 0.0).is_err());
        assert!(verification_v_bound(Verification::MinDistance, 1e-6, 0.5).is_err());
        assert!(verification_v_bound(Verification::Parity, 0.0, 0.1).is_err());
    }

    #[test]
    fn prev_block_error_examples() {
        assert_eq!(p_error_prev_block(0.0, 1e-3), 0.5);
        assert_eq!(p_error_prev_block(0.0, 0.0), 0.5);
        assert_eq!(p_error_prev_block(0.001, 0.0), 0.0);
        let sigma = (0.05f64 * 0.95 / 1e6).sqrt();
        // mpmath ncdf
        let p = p_error_prev_block(0.0004, sigma);
        assert!((p - 0.097_182_955_401_554_55).abs() < 1e-12);
        assert!((p - 0.0972).abs() < 1e-4);
        assert!(p_error_prev_block(0.004, 7.78e-5) < 1e-100);
    }

    #[test]
    fn verification_loss_examples() {
        let p = params(1_000_000, 0.05, 1e-6);
        // mpmath, Delta_V = 0.001 with the default sigma
        let r = verification_loss(&p, Verification::MinDistance, 0.001).unwrap();
        assert_eq!(r.verify_bits, 129);
        assert!((r.loss - 291_175.424_986_572_3).abs() < 1e-6);
        assert!((r.excess_loss - 0.004_778_467_870_616_174).abs() < 1e-12);
        let r = verification_loss(&p, Verification::Parity, 0.001).unwrap();
        assert_eq!(r.verify_bits, 20);
        assert!((r.excess_loss - 0.004_669_531_900_808_303).abs() < 1e-12);
        assert!(r.p_undetected.get() <= 1e-6);

        // sigma = 0: p_E = 0 so L = V + N h - eps (N - V - N h)
        let p0 = p.with_sigma(0.0).unwrap();
        let r = verification_loss(&p0, Verification::MinDistance, 0.001).unwrap();
        let payload = 129.0 + 1e6 * entropy(0.051);
        let expected = payload - 1e-6 * (1e6 - payload);
        assert!((r.loss - expected).abs() < 1e-8);
        assert!((r.loss - 290_758.084_087_301_3).abs() < 1e-6);

        // zero buffer: half the blocks are thrown away
        let r = verification_loss(&p, Verification::Parity, 0.0).unwrap();
        assert!(r.loss >= 0.5 * (1.0 - 2e-6) * 1e6);
    }

    #[test]
    fn expected_mode_close_to_point_mode() {
        let p = params(1_000_000, 0.05, 1e-6);
        let a = verification_loss(&p, Verification::Parity, 0.001).unwrap();
        let b = verification_loss_expected(&p, Verification::Parity, 0.001).unwrap();
        // concavity of h: the average sits slightly below the point value
        assert!(b.loss <= a.loss);
        assert!((a.excess_loss - b.excess_loss).abs() < 1e-4);
        let p0 = p.with_sigma(0.0).unwrap();
        assert_eq!(
            verification_loss(&p0, Verification::Parity, 0.001).unwrap(),
            verification_loss_expected(&p0, Verification::Parity, 0.001).unwrap()
        );
    }

    #[test]
    fn combination_v_examples() {
        assert_eq!(combination_v_of_s(1e-6, 0.0081, 23_000).unwrap(), 13);
        assert_eq!(combination_v_of_s(1e-6, 0.0, 500).unwrap(), 19);
        assert_eq!(combination_v_of_s(1e-6, 0.5, 100_000).unwrap(), 0);
        assert!(combination_v_of_s(1e-6, 0.01, 0).is_err());
    }

    #[test]
    fn combination_loss_examples() {
        let p = params(1_000_000, 0.05, 1e-6);
        let r = combination_loss(&p, 0.0081, 23_000).unwrap();
        // mpmath
        assert_eq!(r.verify_bits, 13);
        assert!((r.p_error.unwrap().get() - 0.007_008_027_740_803_419).abs() < 1e-12);
        assert!((r.excess_loss - 0.053_771_432_802_184_75).abs() < 1e-12);
        assert!(r.p_undetected.get() <= 1e-6);
        let r = combination_loss(&params(1_000_000, 0.01, 1e-6), 0.0077, 25_000).unwrap();
        assert!((r.excess_loss - 0.075_664_021_696_073_2).abs() < 1e-12);

        // a full sampling bound leaves nothing for verification
        let s = eers_sample_lower_bound(1e-6, 0.0126).unwrap();
        let c = combination_loss(&p, 0.0126, s).unwrap();
        let e = eers_loss(&p, 0.0126).unwrap();
        assert_eq!(c.verify_bits, 0);
        let factor = 1.0 - c.p_error.unwrap().get() + 1e-6;
        assert!((c.loss - (c.p_error.unwrap().get() - 1e-6) * 1e6 - factor * e.loss).abs() < 1e-6);

        assert!(combination_loss(&p, 0.01, 0).is_err());
        assert!(combination_loss(&p, 0.01, 1_000_000).is_err());
    }

    #[test]
    fn excessive_loss_examples() {
        let h = entropy(0.05);
        assert_eq!(excessive_loss(1e6 * h, 1_000_000, 0.05), 0.0);
        assert!((excessive_loss(1e6, 1_000_000, 0.05) - 0.713_603_042_884_043_9).abs() < 1e-12);
        assert!((excessive_loss(286_400.0 + 75_000.0, 1_000_000, 0.05) - 0.075).abs() < 1e-5);
    }

    #[test]
    fn evaluate_dispatches_and_honors_explicit_sizes() {
        let p = params(1_000_000, 0.05, 1e-6).with_sigma(0.0).unwrap();
        let r = evaluate(&p, &StrategyConfig::new(Method::VerifyParity, 0.01)).unwrap();
        assert_eq!(r.verify_bits, 20);
        let r = evaluate(&p, &StrategyConfig::new(Method::VerifyParity, 0.01).with_verify_bits(5))
            .unwrap();
        assert_eq!(r.verify_bits, 5);
        assert!((r.p_undetected.get() - 1.0 / 32.0).abs() < 1e-15);
        assert!(!r.warnings.is_empty());
        assert!(evaluate(&p, &StrategyConfig::new(Method::Combination, 0.01)).is_err());
        let r = evaluate(
            &p,
            &StrategyConfig::new(Method::Combination, 0.0081).with_sample_size(23_000),
        )
        .unwrap();
        assert_eq!(r.verify_bits, 13);
        let r = evaluate(&p, &StrategyConfig::new(Method::Eers, 0.01).with_sample_size(1000)).unwrap();
        assert_eq!(r.sample_size, 1000);
    }

    #[test]
    fn min_distance_outer_bound_dominates_exact_form() {
        for i in 1..100 {
            let design = 0.005 * i as f64;
            let n = 1_000_003;
            let d = min_distance(n, design).unwrap();
            let v = verification_v_bound(Verification::MinDistance, 1e-6, design).unwrap() as f64;
            let outer = p_undetected_given_error(Verification::MinDistance, design, v).unwrap();
            let exact = p_undetected_min_distance_exact(n, d, v);
            assert!(outer >= exact);
            // ceiling slack is at most one bit in d_min
            let slack = p_undetected_min_distance_exact(n, d.saturating_sub(1), v);
            assert!(outer <= slack * (1.0 + 1e-9));
        }
    }

    #[test]
    fn mindist_needs_more_bits_than_parity() {
        for i in 0..100 {
            let design = 0.001 + (0.25 - 0.001) * i as f64 / 100.0;
            for eps in [1e-3, 1e-6, 1e-9] {
                let m = verification_v_bound(Verification::MinDistance, eps, design).unwrap();
                let p = verification_v_bound(Verification::Parity, eps, design).unwrap();
                assert!(m >= p, "design {design}, eps {eps}");
            }
        }
    }

    #[test]
    fn sigma_dependence() {
        let base = params(1_000_000, 0.05, 1e-6);
        let mut prev = f64::NEG_INFINITY;
        for sigma in [0.0, 1e-5, 1e-4, 1e-3, 3e-3, 1e-2] {
            let p = base.with_sigma(sigma).unwrap();
            assert_eq!(eers_loss(&p, 0.0126).unwrap(), eers_loss(&base, 0.0126).unwrap());
            assert_eq!(
                combination_loss(&p, 0.0081, 23_000).unwrap(),
                combination_loss(&base, 0.0081, 23_000).unwrap()
            );
            let v = verification_loss(&p, Verification::MinDistance, 0.002).unwrap().loss;
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn eers_objective_unimodal() {
        for (n, delta, eps) in [
            (1_000_000, 0.05, 1e-6),
            (1_000_000, 0.01, 1e-6),
            (100_000, 0.03, 1e-3),
            (2_600_000, 0.016, 1e-6),
        ] {
            let p = params(n, delta, eps);
            let grid: Vec<f64> = (1..2000)
                .map(|i| 0.0005 + i as f64 * 1e-4)
                .filter(|d| delta + d < 0.45)
                .filter(|d| eers_sample_size(eps, *d).unwrap() < n as f64)
                .map(|d| eers_objective(&p, d).unwrap())
                .collect();
            let argmin = grid
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert!(argmin > 0 && argmin < grid.len() - 1);
            assert!(grid[..=argmin].windows(2).all(|w| w[1] < w[0]));
            assert!(grid[argmin..].windows(2).all(|w| w[1] > w[0]));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn sample_bound_meets_epsilon(log_eps in -9.0f64..-2.0, buffer in 1e-3f64..0.1) {
            let eps = 10f64.powf(log_eps);
            let s = eers_sample_lower_bound(eps, buffer).unwrap();
            prop_assert!(eers_pu_bound(s as f64, buffer) <= eps);
        }

        #[test]
        fn loss_between_shannon_and_block(
            delta in 0.001f64..0.2,
            buffer in 1e-4f64..0.1,
            log_eps in -12.0f64..-2.0,
            sigma in 0.0f64..0.01,
            method_idx in 0usize..4,
        ) {
            let n = 1_000_000;
            let p = params(n, delta, 10f64.powf(log_eps)).with_sigma(sigma).unwrap();
            let report = match Method::ALL[method_idx] {
                Method::Eers => eers_loss(&p, buffer),
                Method::VerifyMinDist => verification_loss(&p, Verification::MinDistance, buffer),
                Method::VerifyParity => verification_loss(&p, Verification::Parity, buffer),
                Method::Combination => combination_loss(&p, buffer, 20_000),
            };
            let Ok(r) = report else { return Ok(()); };
            let floor = n as f64 * entropy(delta);
            prop_assert!(r.loss >= floor - 1.0, "{} < {}", r.loss, floor);
            prop_assert!(r.loss <= n as f64 + 1e-6);
            prop_assert!(r.p_undetected.get() <= p.security * (1.0 + 1e-12));
        }
    }
}

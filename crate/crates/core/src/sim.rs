//! Seeded Monte Carlo model of the reconciliation pipeline.
//!
//! Each block draws its error rate from a [`RateProcess`], then its error
//! count from `Binomial(N, rate)`. The corrector is idealized at the Shannon
//! limit: it succeeds iff the design rate covers the realized error rate of
//! the bits it corrects, and leaks `N h(design rate)` bits. A failed
//! correction leaves exactly `d_min` mismatched positions, which the
//! verification step then has to find by explicit random checks.
//!
//! Randomness comes from ChaCha8 with one stream per `(purpose, block)`, so
//! results do not depend on evaluation order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Hypergeometric, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{
    combination_v_of_s, eers_sample_lower_bound, min_distance, p_undetected_min_distance_exact,
    verification_v_bound, Method, StrategyConfig, SystemParams, Verification,
};
use crate::error::{Error, Result};
use crate::special::{entropy, normal_cdf};

/// Upper clip for generated block rates.
pub const MAX_BLOCK_RATE: f64 = 0.5 - 1e-6;
/// Largest mass of a normal rate process allowed outside `[0, 0.5)`.
const MAX_CLIPPED_MASS: f64 = 0.01;
/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy)]
pub(crate) enum Purpose {
    Generate = 1,
    Protocol = 2,
    ForcedFailure = 3,
    Synthetic = 4,
}

/// Counter-based substream for `(seed, purpose, index)`.
pub(crate) fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}

/// How per-block error rates are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RateProcess {
    /// Every block has the same rate; spread comes from the bits alone.
    IidBinomial { rate: f64 },
    /// Rates drawn from `N(mean, sigma^2)`, clipped to `[0, 0.5)`.
    Normal { mean: f64, sigma: f64 },
    /// Rates taken in order from a recorded trace.
    Trace { rates: Vec<f64> },
}

impl RateProcess {
    pub fn mean(&self) -> f64 {
        match self {
            RateProcess::IidBinomial { rate } => *rate,
            RateProcess::Normal { mean, .. } => *mean,
            RateProcess::Trace { rates } => rates.iter().sum::<f64>() / rates.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockModel {
    pub block_size: u64,
    pub process: RateProcess,
    pub seed: u64,
}

impl BlockModel {
    pub fn new(block_size: u64, process: RateProcess, seed: u64) -> Self {
        Self {
            block_size,
            process,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        let in_range = |r: f64| (0.0..0.5).contains(&r);
        match &self.process {
            RateProcess::IidBinomial { rate } if !in_range(*rate) => {
                Err(Error::Config(format!("block rate {rate} outside [0, 0.5)")))
            }
            RateProcess::Normal { mean, sigma } => {
                if !in_range(*mean) || !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!(
                        "normal rate process needs mean in [0, 0.5) and sigma >= 0, got ({mean}, {sigma})"
                    )));
                }
                if *sigma > 0.0 {
                    let outside = normal_cdf(-mean / sigma) + normal_cdf((mean - 0.5) / sigma);
                    if outside > MAX_CLIPPED_MASS {
                        return Err(Error::Config(format!(
                            "normal rate process puts {:.2}% of its mass outside [0, 0.5)",
                            100.0 * outside
                        )));
                    }
                }
                Ok(())
            }
            RateProcess::Trace { rates } => {
                if rates.is_empty() {
                    return Err(Error::Config("trace-driven process needs at least one rate".into()));
                }
                match rates.iter().position(|r| !in_range(*r)) {
                    Some(i) => Err(Error::Config(format!(
                        "trace rate {} at block {i} outside [0, 0.5)",
                        rates[i]
                    ))),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

/// One generated block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    /// Rate drawn from the process.
    pub rate: f64,
    /// Number of erroneous bits.
    pub errors: u64,
}

impl Block {
    pub fn realized_rate(&self, block_size: u64) -> f64 {
        self.errors as f64 / block_size as f64
    }
}

fn generate_block(model: &BlockModel, index: u64) -> Result<Block> {
    let mut rng = substream(model.seed, Purpose::Generate, index);
    let rate = match &model.process {
        RateProcess::IidBinomial { rate } => *rate,
        RateProcess::Normal { mean, sigma } => {
            let normal = Normal::new(*mean, *sigma).map_err(|e| Error::Config(e.to_string()))?;
            normal.sample(&mut rng).clamp(0.0, MAX_BLOCK_RATE)
        }
        RateProcess::Trace { rates } => rates[index as usize],
    };
    let errors = Binomial::new(model.block_size, rate)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(&mut rng);
    Ok(Block {
        index,
        rate,
        errors,
    })
}

/// Draws blocks `0..count` of the model.
pub fn generate_blocks(model: &BlockModel, count: u64) -> Result<Vec<Block>> {
    generate_range(model, 0, count)
}

fn generate_range(model: &BlockModel, start: u64, count: u64) -> Result<Vec<Block>> {
    if count == 0 {
        return Err(Error::Config("block count must be at least 1".into()));
    }
    model.validate()?;
    if let RateProcess::Trace { rates } = &model.process {
        if start + count > rates.len() as u64 {
            return Err(Error::Config(format!(
                "trace has {} blocks, {} requested",
                rates.len(),
                start + count
            )));
        }
    }
    (start..start + count)
        .into_par_iter()
        .map(|i| generate_block(model, i))
        .collect()
}

/// What happened to one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockStatus {
    Corrected,
    /// Verification caught the failure; the block is thrown away.
    Discarded,
    /// The keys differ and nobody noticed.
    Undetected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockOutcome {
    pub status: BlockStatus,
    pub bits_lost: u64,
    pub design_rate: f64,
}

fn leak(bits: f64, n: u64) -> u64 {
    (bits.ceil() as u64).min(n)
}

fn entropy_capped(rate: f64) -> f64 {
    if rate >= 0.5 {
        1.0
    } else {
        entropy(rate)
    }
}

/// Samples `sample` positions without replacement; returns errors found.
fn sample_errors<R: Rng>(n: u64, errors: u64, sample: u64, rng: &mut R) -> Result<u64> {
    Ok(Hypergeometric::new(n, errors, sample)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(rng))
}

/// Runs `checks` verification checks against `mismatched` differing
/// positions among `n`; true if any check exposes the mismatch.
fn verification_detects<R: Rng>(
    variant: Verification,
    n: u64,
    mismatched: u64,
    checks: u64,
    rng: &mut R,
) -> Result<bool> {
    match variant {
        // a random parity over a nonempty mismatch set is a fair coin
        Verification::Parity => Ok((0..checks).any(|_| rng.random::<bool>())),
        Verification::MinDistance => Ok(sample_errors(n, mismatched, checks.min(n), rng)? > 0),
    }
}

/// Plays one block through the strategy. `prev_rate` is the realized error
/// rate of the previous block, the estimate used by verification.
pub fn run_block<R: Rng>(
    config: &StrategyConfig,
    params: &SystemParams,
    block: &Block,
    prev_rate: f64,
    rng: &mut R,
) -> Result<BlockOutcome> {
    let n = params.block_size;
    let nf = params.n();
    let buffer = config.buffer;
    if !(buffer >= 0.0) {
        return Err(Error::Config(format!("buffer {buffer} must be nonnegative")));
    }
    match config.method {
        Method::Eers => {
            let s = match config.sample_size {
                Some(s) => s,
                None => eers_sample_lower_bound(params.security, buffer)?,
            };
            if s == 0 || s >= n {
                return Err(Error::Config(format!("sample size {s} must lie in [1, {n})")));
            }
            let found = sample_errors(n, block.errors, s, rng)?;
            let design = found as f64 / s as f64 + buffer;
            let residual = (block.errors - found) as f64 / (n - s) as f64;
            let bits = leak(s as f64 + (n - s) as f64 * entropy_capped(design), n);
            let status = if design >= residual {
                BlockStatus::Corrected
            } else {
                BlockStatus::Undetected
            };
            Ok(BlockOutcome {
                status,
                bits_lost: bits,
                design_rate: design,
            })
        }
        Method::VerifyMinDist | Method::VerifyParity => {
            let variant = config.method.verification().expect("verification method");
            let design = prev_rate + buffer;
            let v = match config.verify_bits {
                Some(v) => v,
                None if design >= 0.5 => 0,
                None => verification_v_bound(variant, params.security, design).unwrap_or(n),
            };
            let kept = leak(v as f64 + nf * entropy_capped(design), n);
            if design >= block.realized_rate(n) {
                return Ok(BlockOutcome {
                    status: BlockStatus::Corrected,
                    bits_lost: kept,
                    design_rate: design,
                });
            }
            let d = min_distance(n, design)?.max(1);
            let status = if verification_detects(variant, n, d, v, rng)? {
                BlockStatus::Discarded
            } else {
                BlockStatus::Undetected
            };
            let bits = if status == BlockStatus::Discarded { n } else { kept };
            Ok(BlockOutcome {
                status,
                bits_lost: bits,
                design_rate: design,
            })
        }
        Method::Combination => {
            let s = config.sample_size.ok_or_else(|| {
                Error::Config("combination requires an explicit sample size".into())
            })?;
            if s == 0 || s >= n {
                return Err(Error::Config(format!("sample size {s} must lie in [1, {n})")));
            }
            let v = match config.verify_bits {
                Some(v) => v,
                None => combination_v_of_s(params.security, buffer, s)?,
            };
            let found = sample_errors(n, block.errors, s, rng)?;
            let rest = n - s;
            let design = found as f64 / s as f64 + buffer;
            let residual = (block.errors - found) as f64 / rest as f64;
            let kept = leak(s as f64 + v as f64 + rest as f64 * entropy_capped(design), n);
            if design >= residual {
                return Ok(BlockOutcome {
                    status: BlockStatus::Corrected,
                    bits_lost: kept,
                    design_rate: design,
                });
            }
            let d = min_distance(rest, design.min(crate::analytic::MAX_RATE))?.max(1);
            let status = if verification_detects(Verification::Parity, rest, d, v, rng)? {
                BlockStatus::Discarded
            } else {
                BlockStatus::Undetected
            };
            let bits = if status == BlockStatus::Discarded { n } else { kept };
            Ok(BlockOutcome {
                status,
                bits_lost: bits,
                design_rate: design,
            })
        }
    }
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Aggregated counts of a simulated campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub method: Method,
    pub block_size: u64,
    pub blocks_total: u64,
    pub blocks_corrected: u64,
    pub blocks_discarded: u64,
    pub failures_detected: u64,
    pub failures_undetected: u64,
    pub bits_lost_total: u64,
    /// `bits_lost_total / (N blocks) - h(delta)`.
    pub empirical_excess_loss: f64,
    /// Fraction of blocks with a failed correction, detected or not.
    pub empirical_p_error: f64,
    pub empirical_p_undetected: f64,
    /// 95% Wilson interval of `empirical_p_undetected`.
    pub p_undetected_ci: (f64, f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Tally {
    total: u64,
    corrected: u64,
    discarded: u64,
    undetected: u64,
    bits: u64,
}

impl Tally {
    fn record(mut self, o: &BlockOutcome) -> Self {
        self.total += 1;
        self.bits += o.bits_lost;
        match o.status {
            BlockStatus::Corrected => self.corrected += 1,
            BlockStatus::Discarded => self.discarded += 1,
            BlockStatus::Undetected => self.undetected += 1,
        }
        self
    }

    fn merge(self, o: Self) -> Self {
        Self {
            total: self.total + o.total,
            corrected: self.corrected + o.corrected,
            discarded: self.discarded + o.discarded,
            undetected: self.undetected + o.undetected,
            bits: self.bits + o.bits,
        }
    }
}

/// Simulates `blocks` blocks of the strategy on the model.
///
/// Verification needs a previous block: an extra warm-up block (index 0) is
/// drawn only to supply the first estimate and is left out of every count.
pub fn run_campaign(
    config: &StrategyConfig,
    params: &SystemParams,
    model: &BlockModel,
    blocks: u64,
) -> Result<SimOutcome> {
    params.validate()?;
    if model.block_size != params.block_size {
        return Err(Error::Config(format!(
            "model block size {} differs from system block size {}",
            model.block_size, params.block_size
        )));
    }
    let needs_previous = config.method.verification().is_some();
    let generated = if needs_previous {
        generate_range(model, 0, blocks + 1)?
    } else {
        generate_range(model, 0, blocks)?
    };
    let n = params.block_size;
    let offset = usize::from(needs_previous);
    let tally = (offset..generated.len())
        .into_par_iter()
        .map(|i| {
            let block = &generated[i];
            let prev = if i > 0 {
                generated[i - 1].realized_rate(n)
            } else {
                params.mean_rate
            };
            let mut rng = substream(model.seed, Purpose::Protocol, block.index);
            run_block(config, params, block, prev, &mut rng)
        })
        .try_fold(Tally::default, |t, o| o.map(|o| t.record(&o)))
        .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))?;

    let total = tally.total as f64;
    Ok(SimOutcome {
        method: config.method,
        block_size: n,
        blocks_total: tally.total,
        blocks_corrected: tally.corrected,
        blocks_discarded: tally.discarded,
        failures_detected: tally.discarded,
        failures_undetected: tally.undetected,
        bits_lost_total: tally.bits,
        empirical_excess_loss: tally.bits as f64 / (params.n() * total) - entropy(params.mean_rate),
        empirical_p_error: (tally.discarded + tally.undetected) as f64 / total,
        empirical_p_undetected: tally.undetected as f64 / total,
        p_undetected_ci: wilson_interval(tally.undetected, tally.total),
    })
}

/// Result of verification against forced correction failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedFailureOutcome {
    pub variant: Verification,
    pub block_size: u64,
    pub min_distance: u64,
    pub verify_bits: u64,
    pub trials: u64,
    pub detected: u64,
    pub detection_frequency: f64,
    /// 95% Wilson interval of the detection frequency.
    pub detection_ci: (f64, f64),
    /// `1 - (1 - d_min/N)^V` for bit pairs, `1 - 2^-V` for parities.
    pub expected_detection: f64,
}

/// Plays `trials` failed corrections, each leaving `d_min(N, design_rate)`
/// mismatches, through `verify_bits` checks.
pub fn forced_failure_trials(
    variant: Verification,
    block_size: u64,
    design_rate: f64,
    verify_bits: u64,
    trials: u64,
    seed: u64,
) -> Result<ForcedFailureOutcome> {
    if trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let d = min_distance(block_size, design_rate)?.max(1);
    let detected = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Purpose::ForcedFailure, i);
            verification_detects(variant, block_size, d, verify_bits, &mut rng).map(u64::from)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let expected = match variant {
        Verification::Parity => 1.0 - 0.5f64.powf(verify_bits as f64),
        Verification::MinDistance => {
            1.0 - p_undetected_min_distance_exact(block_size, d, verify_bits as f64)
        }
    };
    Ok(ForcedFailureOutcome {
        variant,
        block_size,
        min_distance: d,
        verify_bits,
        trials,
        detected,
        detection_frequency: detected as f64 / trials as f64,
        detection_ci: wilson_interval(detected, trials),
        expected_detection: expected,
    })
}

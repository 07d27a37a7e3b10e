//! Recorded block error-rate traces: CSV I/O, summary statistics,
//! deterministic replay of strategies and method recommendation.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{
    evaluate, verification_v_bound, Method, StrategyConfig, SystemParams, Verification,
};
use crate::error::{Error, Result};
use crate::optimize::optimize;
use crate::sim::{substream, Purpose, MAX_BLOCK_RATE};
use crate::special::entropy;

pub const HEADER: [&str; 2] = ["block_index", "error_rate"];
/// Blocks per statistics window.
pub const WINDOW: usize = 50;
/// Minimum trace length for a recommendation.
pub const MIN_RECOMMEND_BLOCKS: usize = 100;
/// Verification buffer as a multiple of the largest observed jump.
pub const JUMP_MARGIN: f64 = 1.25;
/// Smallest verification buffer recommended.
pub const MIN_VERIFY_BUFFER: f64 = 1e-6;
/// Family-wise significance of the window stability test.
pub const STABILITY_ALPHA: f64 = 0.01;

/// Clavis-like system block length.
pub const CLAVIS_BLOCK_SIZE: u64 = 2_600_000;

/// Ordered per-block error rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub source: String,
    /// Block length the trace was recorded with, when known.
    pub block_size: Option<u64>,
    pub indices: Vec<u64>,
    pub rates: Vec<f64>,
}

impl BlockTrace {
    /// Trace with indices `0..rates.len()`.
    pub fn from_rates(source: impl Into<String>, block_size: Option<u64>, rates: Vec<f64>) -> Result<Self> {
        if let Some(i) = rates.iter().position(|r| !(0.0..0.5).contains(r)) {
            return Err(Error::Domain(format!("rate {} of block {i} outside [0, 0.5)", rates[i])));
        }
        Ok(Self {
            source: source.into(),
            block_size,
            indices: (0..rates.len() as u64).collect(),
            rates,
        })
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }

    /// `rate[i] - rate[i-1]` for `i >= 1`.
    pub fn jumps(&self) -> Vec<f64> {
        self.rates.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        message: message.into(),
    }
}

/// Reads the `block_index,error_rate` CSV format. Line numbers in errors
/// count the header as line 1.
pub fn parse_trace<R: Read>(reader: R, source: impl Into<String>) -> Result<BlockTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(parse_error(1, "empty file, expected header block_index,error_rate")),
        Some(r) => r.map_err(|e| parse_error(csv_line(&e).unwrap_or(1), e.to_string()))?,
    };
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_error(
            1,
            format!("header must be exactly block_index,error_rate, found {:?}", header.as_slice()),
        ));
    }
    let mut indices = Vec::new();
    let mut rates = Vec::new();
    for row in records {
        let row = row.map_err(|e| parse_error(csv_line(&e).unwrap_or(0), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 2 {
            return Err(parse_error(line, format!("expected 2 fields, found {}", row.len())));
        }
        let index: u64 = row[0]
            .parse()
            .map_err(|_| parse_error(line, format!("block index {:?} is not a nonnegative integer", &row[0])))?;
        let rate: f64 = row[1]
            .parse()
            .map_err(|_| parse_error(line, format!("error rate {:?} is not a number", &row[1])))?;
        if !(0.0..0.5).contains(&rate) {
            return Err(parse_error(line, format!("error rate {rate} outside [0, 0.5)")));
        }
        if let Some(&prev) = indices.last() {
            if index <= prev {
                return Err(parse_error(
                    line,
                    format!("block index {index} does not increase (previous {prev})"),
                ));
            }
        }
        indices.push(index);
        rates.push(rate);
    }
    if rates.is_empty() {
        return Err(parse_error(2, "trace has a header but no rows"));
    }
    Ok(BlockTrace {
        source: source.into(),
        block_size: None,
        indices,
        rates,
    })
}

fn csv_line(e: &csv::Error) -> Option<u64> {
    e.position().map(|p| p.line())
}

/// Writes the trace in the format read by [`parse_trace`]. Rates use the
/// shortest representation that parses back to the same value.
pub fn write_trace<W: Write>(trace: &BlockTrace, writer: W) -> Result<()> {
    let io = |e: csv::Error| Error::Config(format!("writing trace: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER).map_err(io)?;
    for (i, r) in trace.indices.iter().zip(&trace.rates) {
        w.write_record([i.to_string(), r.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing trace: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    /// Position of the first block in the trace.
    pub start: usize,
    pub blocks: usize,
    pub mean: f64,
    pub std: f64,
    /// Largest positive jump into a block of this window.
    pub max_jump: f64,
    /// Shorter than [`WINDOW`]; only the trailing window can be.
    pub partial: bool,
    /// Jumps into each block of the window (none for the very first block).
    pub jumps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub blocks: usize,
    pub mean: f64,
    /// Sample standard deviation of the rates.
    pub std: f64,
    /// Largest `rate[i] - rate[i-1]`; zero when the rate never rises.
    pub max_jump: f64,
    pub windows: Vec<WindowStats>,
    pub stability: Stability,
}

/// Two-sample Kolmogorov-Smirnov comparison of the jump distributions of
/// consecutive full windows, Bonferroni corrected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub stable: bool,
    pub comparisons: usize,
    /// Largest statistic relative to its critical value; above 1 is unstable.
    pub max_ratio: f64,
    /// Index of the first window of the worst pair.
    pub worst_pair: Option<usize>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    // shifting by the first value keeps constant data exactly constant
    let n = xs.len() as f64;
    let shift = xs[0];
    let offset = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    if xs.len() < 2 {
        return (shift + offset, 0.0);
    }
    let var = xs.iter().map(|x| (x - shift - offset).powi(2)).sum::<f64>() / (n - 1.0);
    (shift + offset, var.sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic critical value of the two-sample statistic at level `alpha`.
pub fn ks_critical(alpha: f64, na: usize, nb: usize) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    (-(alpha / 2.0).ln() / 2.0).sqrt() * ((na + nb) / (na * nb)).sqrt()
}

fn stability(windows: &[WindowStats]) -> Stability {
    let full: Vec<&WindowStats> = windows
        .iter()
        .filter(|w| !w.partial && w.jumps.len() >= 2)
        .collect();
    let comparisons = full.len().saturating_sub(1);
    if comparisons == 0 {
        return Stability {
            stable: true,
            comparisons,
            max_ratio: 0.0,
            worst_pair: None,
        };
    }
    let alpha = STABILITY_ALPHA / comparisons as f64;
    let (worst, ratio) = full
        .windows(2)
        .enumerate()
        .map(|(k, p)| {
            let d = ks_statistic(&p[0].jumps, &p[1].jumps);
            (k, d / ks_critical(alpha, p[0].jumps.len(), p[1].jumps.len()))
        })
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    Stability {
        stable: ratio <= 1.0,
        comparisons,
        max_ratio: ratio,
        worst_pair: Some(worst),
    }
}

pub fn trace_stats(trace: &BlockTrace) -> Result<TraceStats> {
    if trace.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "trace statistics need at least 2 blocks, found {}",
            trace.len()
        )));
    }
    let (mean, std) = mean_std(&trace.rates);
    let jumps = trace.jumps();
    let max_jump = jumps.iter().copied().fold(0.0, f64::max);
    let windows: Vec<WindowStats> = trace
        .rates
        .chunks(WINDOW)
        .enumerate()
        .map(|(k, chunk)| {
            let start = k * WINDOW;
            let (m, s) = mean_std(chunk);
            let into: Vec<f64> = (start.max(1)..start + chunk.len())
                .map(|i| jumps[i - 1])
                .collect();
            WindowStats {
                start,
                blocks: chunk.len(),
                mean: m,
                std: s,
                max_jump: into.iter().copied().fold(0.0, f64::max),
                partial: chunk.len() < WINDOW,
                jumps: into,
            }
        })
        .collect();
    let stability = stability(&windows);
    Ok(TraceStats {
        blocks: trace.len(),
        mean,
        std,
        max_jump,
        windows,
        stability,
    })
}

/// Realized cost of one strategy over a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub config: StrategyConfig,
    /// Blocks counted; verification leaves out the first block.
    pub blocks: usize,
    /// Verification blocks whose estimate fell short and were thrown away.
    pub discarded: usize,
    pub bits_lost: f64,
    /// `bits_lost / (N blocks) - h(trace mean)`.
    pub excess_loss: f64,
}

fn block_params(params: &SystemParams, rate: f64) -> Result<SystemParams> {
    SystemParams::new(params.block_size, rate, params.security)
}

/// Replays one configuration over the trace without randomness.
///
/// Verification estimates each block by the previous one; the first block
/// only starts the chain and is not counted. A block fails iff
/// `rate[i-1] + buffer < rate[i]`, and every failure is taken as detected
/// and charged the full block. Sampling methods are charged their analytic
/// expected loss at each block's rate.
pub fn replay_one(trace: &BlockTrace, params: &SystemParams, config: &StrategyConfig) -> Result<ReplayReport> {
    params.validate()?;
    if let Some(n) = trace.block_size {
        if n != params.block_size {
            return Err(Error::Config(format!(
                "trace was recorded with N = {n}, replay requested N = {}",
                params.block_size
            )));
        }
    }
    if trace.len() < 2 {
        return Err(Error::InsufficientData("replay needs at least 2 blocks".into()));
    }
    let buffer = config.buffer;
    if !(buffer >= 0.0) {
        return Err(Error::Domain(format!("buffer {buffer} must be nonnegative")));
    }
    if let Some(i) = trace.rates.iter().position(|r| r + buffer >= 0.5) {
        return Err(Error::Domain(format!(
            "block {i}: rate {} plus buffer {buffer} reaches 0.5",
            trace.rates[i]
        )));
    }
    let n = params.n();
    let (blocks, discarded, bits_lost) = match config.method.verification() {
        Some(variant) => {
            let mut discarded = 0;
            let mut bits = 0.0;
            for w in trace.rates.windows(2) {
                let design = w[0] + buffer;
                if design >= w[1] {
                    bits += verify_bits(config, variant, params.security, design)? + n * entropy(design);
                } else {
                    discarded += 1;
                    bits += n;
                }
            }
            (trace.len() - 1, discarded, bits)
        }
        None => {
            let mut bits = 0.0;
            for &rate in &trace.rates {
                bits += evaluate(&block_params(params, rate)?, config)?.loss;
            }
            (trace.len(), 0, bits)
        }
    };
    Ok(ReplayReport {
        config: *config,
        blocks,
        discarded,
        bits_lost,
        excess_loss: bits_lost / (n * blocks as f64) - entropy(trace.mean()),
    })
}

fn verify_bits(config: &StrategyConfig, variant: Verification, security: f64, design: f64) -> Result<f64> {
    match config.verify_bits {
        Some(v) => Ok(v as f64),
        None => Ok(verification_v_bound(variant, security, design)? as f64),
    }
}

/// Replays several configurations in parallel; order is preserved.
pub fn replay(trace: &BlockTrace, params: &SystemParams, configs: &[StrategyConfig]) -> Vec<Result<ReplayReport>> {
    configs
        .par_iter()
        .map(|c| replay_one(trace, params, c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub method: Method,
    pub replay: Option<ReplayReport>,
    /// Why the method could not be evaluated, if it could not.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub method: Method,
    pub config: StrategyConfig,
    pub excess_loss: f64,
    /// Window jump distributions agree; when false, past jumps are a weak
    /// guide to the verification buffer.
    pub stable: bool,
    pub stats: TraceStats,
    pub candidates: Vec<Candidate>,
}

fn candidate_config(params: &SystemParams, method: Method, max_jump: f64) -> Result<StrategyConfig> {
    match method {
        Method::VerifyMinDist | Method::VerifyParity => {
            Ok(StrategyConfig::new(method, (JUMP_MARGIN * max_jump).max(MIN_VERIFY_BUFFER)))
        }
        _ => Ok(optimize(params, method)?.best_config),
    }
}

/// Chooses the method with the lowest realized excess loss on the trace.
///
/// Verification gets a buffer of 1.25 times the largest observed jump;
/// sampling methods are optimized at the trace mean.
pub fn recommend(trace: &BlockTrace, params: &SystemParams) -> Result<Recommendation> {
    if trace.len() < MIN_RECOMMEND_BLOCKS {
        return Err(Error::InsufficientData(format!(
            "recommendation needs at least {MIN_RECOMMEND_BLOCKS} blocks, found {}",
            trace.len()
        )));
    }
    let stats = trace_stats(trace)?;
    let at_mean = block_params(params, stats.mean)?;
    let candidates: Vec<Candidate> = Method::ALL
        .par_iter()
        .map(|&method| {
            let run = candidate_config(&at_mean, method, stats.max_jump)
                .and_then(|c| replay_one(trace, params, &c));
            match run {
                Ok(r) => Candidate {
                    method,
                    replay: Some(r),
                    error: None,
                },
                Err(e) => Candidate {
                    method,
                    replay: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let best = candidates
        .iter()
        .filter_map(|c| c.replay.as_ref())
        .fold(None::<&ReplayReport>, |best, r| match best {
            Some(b) if b.excess_loss <= r.excess_loss => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| Error::Domain("no method could be replayed on this trace".into()))?
        .clone();
    Ok(Recommendation {
        method: best.config.method,
        config: best.config,
        excess_loss: best.excess_loss,
        stable: stats.stability.stable,
        stats,
        candidates,
    })
}

/// Synthetic stand-in for a low-variance commercial system: rates uniform
/// on `0.016 +- 0.002`, so no jump exceeds 0.004.
pub fn clavis_like_trace(blocks: usize, seed: u64) -> BlockTrace {
    let mut rng = substream(seed, Purpose::Synthetic, 0);
    let rates = (0..blocks)
        .map(|_| 0.016 + rng.random_range(-0.002..0.002))
        .collect();
    BlockTrace {
        source: format!("synthetic clavis-like (seed {seed})"),
        block_size: Some(CLAVIS_BLOCK_SIZE),
        indices: (0..blocks as u64).collect(),
        rates,
    }
}

/// Rates drawn iid from `N(mean, sigma^2)` and clipped to `[0, 0.5)`.
pub fn normal_trace(mean: f64, sigma: f64, blocks: usize, block_size: u64, seed: u64) -> Result<BlockTrace> {
    if !(0.0..0.5).contains(&mean) || !(sigma >= 0.0) {
        return Err(Error::Config(format!(
            "normal trace needs mean in [0, 0.5) and sigma >= 0, got ({mean}, {sigma})"
        )));
    }
    let normal = Normal::new(mean, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = substream(seed, Purpose::Synthetic, 1);
    let rates = (0..blocks)
        .map(|_| normal.sample(&mut rng).clamp(0.0, MAX_BLOCK_RATE))
        .collect();
    Ok(BlockTrace {
        source: format!("synthetic normal({mean}, {sigma}) (seed {seed})"),
        block_size: Some(block_size),
        indices: (0..blocks as u64).collect(),
        rates,
    })
}

//! Buffer-parameter optimization.
//!
//! One-dimensional searches run a 64-point geometric scan over the buffer to
//! bracket the minimum, then golden-section search inside the bracket. The
//! combination is searched over `(buffer, S)`: an outer geometric grid on the
//! sample size with an inner buffer search, then integer ternary refinement
//! of `S`. Objectives use continuous sample and verification sizes; the
//! returned report rounds them up.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{
    self, combination_objective, eers_objective, verification_objective, LossReport, Method,
    StrategyConfig, SystemParams, Verification,
};
use crate::error::{Error, Result};

/// Differences below this are ties; ties go to the smaller buffer.
const TIE: f64 = 1e-12;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub scan_points: usize,
    /// Final bracket width in the buffer.
    pub tolerance: f64,
    /// Smallest buffer considered.
    pub min_buffer: f64,
    /// Gap kept between the design rate and one half.
    pub margin: f64,
    pub sample_grid_points: usize,
    pub min_sample: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            scan_points: 64,
            tolerance: 1e-6,
            min_buffer: 1e-6,
            margin: 1e-6,
            sample_grid_points: 32,
            min_sample: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best_config: StrategyConfig,
    pub best_report: LossReport,
    pub objective_evals: usize,
    /// False when the scan found the minimum on the search boundary.
    pub converged: bool,
    /// Final buffer interval.
    pub bracket: (f64, f64),
    /// Final sample-size interval, combination only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sample_bracket: Option<(u64, u64)>,
}

/// Outcome of a one-dimensional minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMinimum {
    pub x: f64,
    pub value: f64,
    pub evals: usize,
    pub bracket: (f64, f64),
    pub interior: bool,
}

/// Minimizes `f` over `[lo, hi]` (`lo > 0`) by geometric scan and golden
/// section. Evaluation failures count as `+inf`.
pub fn minimize_scalar<F>(mut f: F, lo: f64, hi: f64, opts: &SearchOptions) -> ScalarMinimum
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut evals = 0;
    let mut eval = |x: f64| {
        evals += 1;
        f(x).ok().filter(|v| v.is_finite()).unwrap_or(f64::INFINITY)
    };
    let n = opts.scan_points.max(3);
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    let xs: Vec<f64> = (0..n)
        .map(|k| if k == n - 1 { hi } else { lo * ratio.powi(k as i32) })
        .collect();
    let fs: Vec<f64> = xs.iter().map(|&x| eval(x)).collect();

    let mut k = 0;
    for i in 1..n {
        if fs[i] < fs[k] - TIE {
            k = i;
        }
    }
    if k == 0 || k == n - 1 {
        let bracket = if k == 0 { (xs[0], xs[1]) } else { (xs[n - 2], xs[n - 1]) };
        return ScalarMinimum {
            x: xs[k],
            value: fs[k],
            evals,
            bracket,
            interior: false,
        };
    }

    let (mut a, mut b) = (xs[k - 1], xs[k + 1]);
    let (mut best_x, mut best_f) = (xs[k], fs[k]);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    while b - a > opts.tolerance {
        if fc <= fd + TIE {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d);
        }
    }
    for (x, v) in [(c, fc), (d, fd)] {
        if v < best_f - TIE || ((v - best_f).abs() <= TIE && x < best_x) {
            best_x = x;
            best_f = v;
        }
    }
    ScalarMinimum {
        x: best_x,
        value: best_f,
        evals,
        bracket: (a, b),
        interior: true,
    }
}

fn buffer_range(params: &SystemParams, opts: &SearchOptions) -> Result<(f64, f64)> {
    let hi = 0.5 - params.mean_rate - opts.margin;
    if hi <= opts.min_buffer {
        return Err(Error::Domain(format!(
            "mean rate {} leaves no room for a buffer",
            params.mean_rate
        )));
    }
    Ok((opts.min_buffer, hi))
}

/// Finds the buffer minimizing the excess loss of a single-stage method.
pub fn optimize_buffer(params: &SystemParams, method: Method) -> Result<OptimizationResult> {
    optimize_buffer_with(params, method, &SearchOptions::default())
}

pub fn optimize_buffer_with(
    params: &SystemParams,
    method: Method,
    opts: &SearchOptions,
) -> Result<OptimizationResult> {
    params.validate()?;
    let (lo, hi) = buffer_range(params, opts)?;
    let min = match method {
        Method::Eers => minimize_scalar(|d| eers_objective(params, d), lo, hi, opts),
        Method::VerifyMinDist | Method::VerifyParity => {
            let variant = method.verification().expect("verification method");
            minimize_scalar(|d| verification_objective(params, variant, d), lo, hi, opts)
        }
        Method::Combination => {
            return Err(Error::Config(
                "the combination is optimized jointly over buffer and sample size".into(),
            ))
        }
    };
    let config = StrategyConfig::new(method, min.x);
    let report = analytic::evaluate(params, &config)?;
    Ok(OptimizationResult {
        best_config: config,
        best_report: report,
        objective_evals: min.evals,
        converged: min.interior,
        bracket: min.bracket,
        sample_bracket: None,
    })
}

/// Jointly optimizes buffer and sample size of the combination.
pub fn optimize_combination(params: &SystemParams) -> Result<OptimizationResult> {
    optimize_combination_with(params, &SearchOptions::default())
}

pub fn optimize_combination_with(
    params: &SystemParams,
    opts: &SearchOptions,
) -> Result<OptimizationResult> {
    params.validate()?;
    if params.block_size < 2 {
        return Err(Error::Domain("combination needs a block of at least 2 bits".into()));
    }
    let (lo, hi) = buffer_range(params, opts)?;
    let mut cache: BTreeMap<u64, ScalarMinimum> = BTreeMap::new();
    let mut evals = 0;
    let mut inner = |s: u64, cache: &mut BTreeMap<u64, ScalarMinimum>| -> ScalarMinimum {
        *cache.entry(s).or_insert_with(|| {
            let m = minimize_scalar(|d| combination_objective(params, d, s as f64), lo, hi, opts);
            evals += m.evals;
            m
        })
    };

    let s_max = (params.block_size / 4).max(1);
    let s_min = opts.min_sample.min(s_max).max(1);
    let points = opts.sample_grid_points.max(3);
    let ratio = (s_max as f64 / s_min as f64).powf(1.0 / (points - 1) as f64);
    let mut grid: Vec<u64> = (0..points)
        .map(|k| (s_min as f64 * ratio.powi(k as i32)).round() as u64)
        .map(|s| s.clamp(s_min, s_max))
        .collect();
    grid.dedup();

    let mut k = 0;
    let mut values = Vec::with_capacity(grid.len());
    for &s in &grid {
        values.push(inner(s, &mut cache).value);
    }
    for i in 1..grid.len() {
        if values[i] < values[k] - TIE {
            k = i;
        }
    }
    let last = grid.len() - 1;
    let mut s_lo = if k == 0 { 1 } else { grid[k - 1] };
    let mut s_hi = if k == last { grid[last] } else { grid[k + 1] };

    while s_hi - s_lo > 2 {
        let m1 = s_lo + (s_hi - s_lo) / 3;
        let m2 = s_hi - (s_hi - s_lo) / 3;
        if inner(m1, &mut cache).value <= inner(m2, &mut cache).value + TIE {
            s_hi = m2;
        } else {
            s_lo = m1;
        }
    }
    let mut best_s = s_lo;
    let mut best = inner(s_lo, &mut cache);
    for s in s_lo + 1..=s_hi {
        let m = inner(s, &mut cache);
        if m.value < best.value - TIE {
            best = m;
            best_s = s;
        }
    }
    // the refinement only ever sees cached or bracketed points; keep the
    // overall minimum in case the objective is not unimodal in S
    for (&s, m) in cache.iter() {
        if m.value < best.value - TIE {
            best = *m;
            best_s = s;
        }
    }

    let config = StrategyConfig::new(Method::Combination, best.x).with_sample_size(best_s);
    let report = analytic::evaluate(params, &config)?;
    Ok(OptimizationResult {
        best_config: config,
        best_report: report,
        objective_evals: evals,
        converged: best.interior && k != last,
        bracket: best.bracket,
        sample_bracket: Some((s_lo, s_hi)),
    })
}

/// Optimizes any method.
pub fn optimize(params: &SystemParams, method: Method) -> Result<OptimizationResult> {
    match method {
        Method::Combination => optimize_combination(params),
        _ => optimize_buffer(params, method),
    }
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVariable {
    Delta,
    N,
    Epsilon,
    Sigma,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::Delta => "delta",
            SweepVariable::N => "n",
            SweepVariable::Epsilon => "epsilon",
            SweepVariable::Sigma => "sigma",
        }
    }

    /// Applies the grid value to a parameter template.
    pub fn apply(self, template: &SystemParams, value: f64) -> Result<SystemParams> {
        let mut p = *template;
        match self {
            SweepVariable::Delta => p.mean_rate = value,
            SweepVariable::Epsilon => p.security = value,
            SweepVariable::Sigma => p.block_sigma = Some(value),
            SweepVariable::N => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= u64::MAX as f64) {
                    return Err(Error::Domain(format!("block size {value} is not a positive integer")));
                }
                p.block_size = value as u64;
            }
        }
        p.validate()?;
        Ok(p)
    }
}

impl std::str::FromStr for SweepVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(SweepVariable::Delta),
            "n" => Ok(SweepVariable::N),
            "epsilon" => Ok(SweepVariable::Epsilon),
            "sigma" => Ok(SweepVariable::Sigma),
            other => Err(Error::Config(format!("cannot sweep over '{other}'"))),
        }
    }
}

/// One optimized point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub vary: SweepVariable,
    pub value: f64,
    pub method: Method,
    pub buffer: Option<f64>,
    pub excess_loss: Option<f64>,
    pub sample_size: Option<u64>,
    pub verify_bits: Option<u64>,
    pub p_error: Option<f64>,
    pub p_undetected: Option<f64>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

impl SweepRow {
    /// Column names of the CSV rendering, in order.
    pub const COLUMNS: [&'static str; 11] = [
        "vary",
        "value",
        "method",
        "buffer",
        "excess_loss",
        "sample_size",
        "verify_bits",
        "p_error",
        "p_undetected",
        "converged",
        "error",
    ];

    fn new(vary: SweepVariable, value: f64, method: Method, outcome: Result<OptimizationResult>) -> Self {
        let mut row = Self {
            vary,
            value,
            method,
            buffer: None,
            excess_loss: None,
            sample_size: None,
            verify_bits: None,
            p_error: None,
            p_undetected: None,
            converged: None,
            error: None,
        };
        match outcome {
            Ok(r) => {
                row.buffer = Some(r.best_config.buffer);
                row.excess_loss = Some(r.best_report.excess_loss);
                row.sample_size = Some(r.best_report.sample_size);
                row.verify_bits = Some(r.best_report.verify_bits);
                row.p_error = r.best_report.p_error.map(|p| p.get());
                row.p_undetected = Some(r.best_report.p_undetected.get());
                row.converged = Some(r.converged);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    }

    /// Fields rendered as CSV cells in [`Self::COLUMNS`] order.
    pub fn to_record(&self) -> Vec<String> {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map(ToString::to_string).unwrap_or_default()
        }
        vec![
            self.vary.name().to_string(),
            self.value.to_string(),
            self.method.name().to_string(),
            opt(&self.buffer),
            opt(&self.excess_loss),
            opt(&self.sample_size),
            opt(&self.verify_bits),
            opt(&self.p_error),
            opt(&self.p_undetected),
            opt(&self.converged),
            opt(&self.error),
        ]
    }
}

/// Optimizes every method at every grid point. Rows come back ordered by
/// grid point, then by the order of `methods`; invalid points yield rows
/// carrying an error message.
pub fn sweep(
    template: &SystemParams,
    vary: SweepVariable,
    grid: &[f64],
    methods: &[Method],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("sweep needs at least one method".into()));
    }
    let jobs: Vec<(f64, Method)> = grid
        .iter()
        .flat_map(|&v| methods.iter().map(move |&m| (v, m)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(value, method)| {
            let outcome = vary.apply(template, value).and_then(|p| optimize(&p, method));
            SweepRow::new(vary, value, method, outcome)
        })
        .collect())
}

/// Block-rate spread at which the optimized verification loss meets the
/// optimized combination loss, searched by bisection on `[lo, hi]`.
/// `None` when the two curves do not cross inside the interval.
pub fn crossover_sigma(
    params: &SystemParams,
    variant: Verification,
    lo: f64,
    hi: f64,
) -> Result<Option<f64>> {
    let combo = optimize_combination(params)?.best_report.excess_loss;
    let gap = |sigma: f64| -> Result<f64> {
        let p = params.with_sigma(sigma)?;
        Ok(optimize_buffer(&p, variant.into())?.best_report.excess_loss - combo)
    };
    let (mut a, mut b) = (lo, hi);
    let (ga, gb) = (gap(a)?, gap(b)?);
    if ga.signum() == gb.signum() {
        return Ok(None);
    }
    while b - a > 1e-7 {
        let m = 0.5 * (a + b);
        if gap(m)?.signum() == ga.signum() {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

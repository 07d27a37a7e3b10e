use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use qkdrecon_core::analytic::{evaluate, verification_v_bound, MAX_RATE};
use qkdrecon_core::optimize::{optimize, sweep, OptimizationResult, SweepRow, SweepVariable};
use qkdrecon_core::sim::{
    forced_failure_trials, run_campaign, BlockModel, ForcedFailureOutcome, RateProcess, SimOutcome,
};
use qkdrecon_core::trace::{
    clavis_like_trace, normal_trace, parse_trace, recommend, replay, trace_stats, write_trace,
    BlockTrace, CLAVIS_BLOCK_SIZE,
};
use qkdrecon_core::{Error, Method, StrategyConfig, SystemParams, Verification};

const USAGE: u8 = 2;
const DOMAIN: u8 = 3;
const NOT_CONVERGED: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "qkdrecon",
    version,
    about = "Loss models, optimizer and simulator for QKD error estimation and verification"
)]
struct Cli {
    /// Output format; csv is only available for sweep and trace synth
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Write the result to this file instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Loss report for an explicit strategy configuration
    Analyze(AnalyzeArgs),
    /// Optimal buffer (and sample size) for one method
    Optimize(OptimizeArgs),
    /// Optimize methods over a grid of one parameter; CSV output
    Sweep(SweepArgs),
    /// Monte Carlo simulation of a strategy
    Simulate(SimulateArgs),
    /// Recorded error-rate traces
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Args, Debug, Serialize)]
struct SystemArgs {
    /// Block size in bits, e.g. 1e6
    #[arg(long, value_parser = parse_count)]
    n: u64,
    /// Mean block error rate
    #[arg(long)]
    delta: f64,
    /// Security parameter (bound on undetected failure)
    #[arg(long)]
    epsilon: f64,
    /// Standard deviation of the block error rate; defaults to the binomial spread
    #[arg(long)]
    sigma: Option<f64>,
}

impl SystemArgs {
    fn params(&self) -> Result<SystemParams, Error> {
        let p = SystemParams::new(self.n, self.delta, self.epsilon)?;
        match self.sigma {
            Some(s) => p.with_sigma(s),
            None => Ok(p),
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct StrategyArgs {
    /// eers, verify-mindist, verify-parity or combo
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Buffer added to the error-rate estimate
    #[arg(long)]
    buffer: Option<f64>,
    /// Sampled bit pairs; defaults to the bound for the buffer
    #[arg(long, value_parser = parse_count)]
    sample_size: Option<u64>,
    /// Verification bits; defaults to the bound for the buffer
    #[arg(long, value_parser = parse_count)]
    verify_bits: Option<u64>,
}

impl StrategyArgs {
    fn config(&self, buffer: f64) -> StrategyConfig {
        StrategyConfig {
            method: self.method,
            buffer,
            sample_size: self.sample_size,
            verify_bits: self.verify_bits,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    system: SystemArgs,
    #[command(flatten)]
    #[serde(flatten)]
    strategy: StrategyArgs,
}

#[derive(Args, Debug, Serialize)]
struct OptimizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    system: SystemArgs,
    /// eers, verify-mindist, verify-parity or combo
    #[arg(long, value_parser = parse_method)]
    method: Method,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    /// Parameter to vary: delta, n, epsilon or sigma
    #[arg(long, value_parser = parse_sweep_variable)]
    vary: SweepVariable,
    #[arg(long)]
    from: f64,
    #[arg(long)]
    to: f64,
    /// Number of grid points, ends included
    #[arg(long, value_parser = parse_count)]
    steps: u64,
    /// Space the grid geometrically instead of linearly
    #[arg(long)]
    log: bool,
    /// Methods to optimize; repeat the flag for several (default: all)
    #[arg(long, value_parser = parse_method)]
    method: Vec<Method>,
    /// Block size; may be omitted when it is the swept parameter
    #[arg(long, value_parser = parse_count)]
    n: Option<u64>,
    /// Mean error rate; may be omitted when it is the swept parameter
    #[arg(long)]
    delta: Option<f64>,
    /// Security parameter; may be omitted when it is the swept parameter
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    system: SystemArgs,
    #[command(flatten)]
    #[serde(flatten)]
    strategy: StrategyArgs,
    /// Number of simulated blocks
    #[arg(long, value_parser = parse_count, default_value = "1000")]
    blocks: u64,
    /// Also run this many forced-failure verification trials
    #[arg(long, value_parser = parse_count)]
    trials: Option<u64>,
    /// Drive block rates from a trace file instead of a normal model
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, env = "QKDRECON_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum TraceCommand {
    /// Mean, spread, largest jump and per-window statistics
    Stats(TraceFileArgs),
    /// Replay strategies over a trace
    Replay(ReplayArgs),
    /// Recommend the method with the lowest realized loss
    Recommend(RecommendArgs),
    /// Write a synthetic trace
    Synth(SynthArgs),
}

#[derive(Args, Debug, Serialize)]
struct TraceFileArgs {
    /// Trace CSV with header block_index,error_rate
    #[arg(long)]
    file: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReplayArgs {
    #[arg(long)]
    file: PathBuf,
    #[arg(long, value_parser = parse_count)]
    n: u64,
    #[arg(long)]
    epsilon: f64,
    /// Methods to replay; repeat for several
    #[arg(long, value_parser = parse_method, required = true)]
    method: Vec<Method>,
    /// Buffer for each method, in the same order; optimized when omitted
    #[arg(long)]
    buffer: Vec<f64>,
    #[arg(long, value_parser = parse_count)]
    sample_size: Option<u64>,
    #[arg(long, value_parser = parse_count)]
    verify_bits: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct RecommendArgs {
    #[arg(long)]
    file: PathBuf,
    #[arg(long, value_parser = parse_count)]
    n: u64,
    #[arg(long)]
    epsilon: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SynthKind {
    /// Uniform 0.016 +- 0.002, block size 2.6e6
    Clavis,
    /// Normal rates with --delta and --sigma
    Normal,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long, value_parser = parse_count, default_value = "1000")]
    blocks: u64,
    #[arg(long, value_parser = parse_count)]
    n: Option<u64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, env = "QKDRECON_SEED", default_value_t = 0)]
    seed: u64,
}

fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let x: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !(x >= 0.0 && x.fract() == 0.0 && x <= 9.007_199_254_740_992e15) {
        return Err(format!("'{s}' is not a nonnegative integer"));
    }
    Ok(x as u64)
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn parse_sweep_variable(s: &str) -> Result<SweepVariable, String> {
    s.parse::<SweepVariable>().map_err(|e| e.to_string())
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: DOMAIN,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: USAGE,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: DOMAIN,
        message: format!("{}: {e}", path.display()),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    params: Value,
    version: &'static str,
    seed: Option<u64>,
    timestamp: String,
}

fn manifest<'a>(subcommand: &'a str, params: &impl Serialize, seed: Option<u64>) -> Manifest<'a> {
    Manifest {
        subcommand,
        params: serde_json::to_value(params).expect("arguments serialize"),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    }
}

/// Output of one run: rendered text plus whether every search converged.
struct Output {
    text: String,
    converged: bool,
}

fn json_output(manifest: Manifest, result: impl Serialize, converged: bool) -> Output {
    let doc = json!({ "manifest": manifest, "result": result });
    let mut text = serde_json::to_string_pretty(&doc).expect("results serialize");
    text.push('\n');
    Output { text, converged }
}

fn run_analyze(a: &AnalyzeArgs) -> Result<Output, Failure> {
    let buffer = a
        .strategy
        .buffer
        .ok_or_else(|| usage("analyze needs --buffer"))?;
    let report = evaluate(&a.system.params()?, &a.strategy.config(buffer))?;
    Ok(json_output(manifest("analyze", a, None), report, true))
}

fn run_optimize(a: &OptimizeArgs) -> Result<Output, Failure> {
    let result = optimize(&a.system.params()?, a.method)?;
    let converged = result.converged;
    Ok(json_output(manifest("optimize", a, None), result, converged))
}

fn sweep_grid(a: &SweepArgs) -> Result<Vec<f64>, Failure> {
    if !(a.from.is_finite() && a.to.is_finite()) {
        return Err(usage("--from and --to must be finite"));
    }
    if a.from > a.to {
        return Err(usage(format!("--from {} is larger than --to {}", a.from, a.to)));
    }
    if a.steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    if a.log && a.from <= 0.0 {
        return Err(usage("--log needs a positive --from"));
    }
    let k = a.steps as usize;
    Ok((0..k)
        .map(|i| {
            let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
            let v = if a.log {
                a.from * (a.to / a.from).powf(t)
            } else {
                a.from + (a.to - a.from) * t
            };
            // drop representation noise such as 0.30000000000000004
            format!("{v:.12e}").parse().expect("formatted float parses")
        })
        .collect())
}

fn run_sweep(a: &SweepArgs) -> Result<Output, Failure> {
    let grid = sweep_grid(a)?;
    let first = grid[0];
    let pick = |given: Option<f64>, var: SweepVariable, flag: &str| -> Result<f64, Failure> {
        match given {
            Some(v) => Ok(v),
            None if a.vary == var => Ok(first),
            None => Err(usage(format!("sweep needs --{flag} unless it is the swept parameter"))),
        }
    };
    let n = pick(a.n.map(|n| n as f64), SweepVariable::N, "n")?;
    let delta = pick(a.delta, SweepVariable::Delta, "delta")?;
    let epsilon = pick(a.epsilon, SweepVariable::Epsilon, "epsilon")?;
    let template = SweepVariable::N.apply(
        &SystemParams {
            block_size: 1,
            mean_rate: delta,
            security: epsilon,
            block_sigma: a.sigma,
        },
        n,
    )?;
    let methods = if a.method.is_empty() {
        Method::ALL.to_vec()
    } else {
        a.method.clone()
    };
    let rows = sweep(&template, a.vary, &grid, &methods)?;

    let m = serde_json::to_string(&manifest("sweep", a, None)).expect("manifest serializes");
    let mut text = format!("# manifest: {m}\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SweepRow::COLUMNS).map_err(csv_failure)?;
    for row in &rows {
        w.write_record(row.to_record()).map_err(csv_failure)?;
    }
    let body = w.into_inner().map_err(csv_failure)?;
    text.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(Output {
        text,
        converged: true,
    })
}

fn csv_failure(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: DOMAIN,
        message: format!("writing csv: {e}"),
    }
}

#[derive(Serialize)]
struct SimulateResult {
    config: StrategyConfig,
    optimization: Option<OptimizationResult>,
    outcome: SimOutcome,
    forced_failure: Option<ForcedFailureOutcome>,
}

fn load_trace(path: &Path) -> Result<BlockTrace, Failure> {
    let file = File::open(path).map_err(|e| io_failure(path, e))?;
    Ok(parse_trace(io::BufReader::new(file), path.display().to_string())?)
}

fn run_simulate(a: &SimulateArgs) -> Result<Output, Failure> {
    let params = a.system.params()?;
    let (config, optimization) = match a.strategy.buffer {
        Some(b) => (a.strategy.config(b), None),
        None => {
            let r = optimize(&params, a.strategy.method)?;
            let mut c = r.best_config;
            c.sample_size = a.strategy.sample_size.or(c.sample_size);
            c.verify_bits = a.strategy.verify_bits.or(c.verify_bits);
            (c, Some(r))
        }
    };
    let process = match (&a.file, a.system.sigma) {
        (Some(path), _) => RateProcess::Trace {
            rates: load_trace(path)?.rates,
        },
        (None, Some(sigma)) if sigma > 0.0 => RateProcess::Normal {
            mean: params.mean_rate,
            sigma,
        },
        (None, _) => RateProcess::IidBinomial {
            rate: params.mean_rate,
        },
    };
    let model = BlockModel::new(params.block_size, process, a.seed);
    let outcome = run_campaign(&config, &params, &model, a.blocks)?;
    let forced_failure = match a.trials {
        None => None,
        Some(trials) => {
            let variant = match config.method {
                Method::VerifyMinDist => Verification::MinDistance,
                Method::VerifyParity | Method::Combination => Verification::Parity,
                Method::Eers => {
                    return Err(usage("--trials needs a method with a verification step"));
                }
            };
            let design = (params.mean_rate + config.buffer).min(MAX_RATE);
            let v = match config.verify_bits {
                Some(v) => v,
                None => verification_v_bound(variant, params.security, design)?,
            };
            Some(forced_failure_trials(variant, params.block_size, design, v, trials, a.seed)?)
        }
    };
    let converged = optimization.as_ref().is_none_or(|r| r.converged);
    let result = SimulateResult {
        config,
        optimization,
        outcome,
        forced_failure,
    };
    Ok(json_output(manifest("simulate", a, Some(a.seed)), result, converged))
}

fn run_trace(cmd: &TraceCommand) -> Result<Output, Failure> {
    match cmd {
        TraceCommand::Stats(a) => {
            let stats = trace_stats(&load_trace(&a.file)?)?;
            Ok(json_output(manifest("trace stats", a, None), stats, true))
        }
        TraceCommand::Replay(a) => {
            let trace = load_trace(&a.file)?;
            let params = SystemParams::new(a.n, trace.mean().min(MAX_RATE), a.epsilon)?;
            if !a.buffer.is_empty() && a.buffer.len() != a.method.len() {
                return Err(usage("give one --buffer per --method, or none"));
            }
            let mut configs = Vec::new();
            let mut converged = true;
            for (i, &method) in a.method.iter().enumerate() {
                let mut c = match a.buffer.get(i) {
                    Some(&b) => StrategyConfig::new(method, b),
                    None => {
                        let r = optimize(&params, method)?;
                        converged &= r.converged;
                        r.best_config
                    }
                };
                c.sample_size = a.sample_size.or(c.sample_size);
                c.verify_bits = a.verify_bits.or(c.verify_bits);
                configs.push(c);
            }
            let reports: Vec<Value> = replay(&trace, &params, &configs)
                .into_iter()
                .zip(&configs)
                .map(|(r, c)| match r {
                    Ok(r) => serde_json::to_value(r).expect("report serializes"),
                    Err(e) => json!({ "config": c, "error": e.to_string() }),
                })
                .collect();
            Ok(json_output(manifest("trace replay", a, None), reports, converged))
        }
        TraceCommand::Recommend(a) => {
            let trace = load_trace(&a.file)?;
            let params = SystemParams::new(a.n, trace.mean().min(MAX_RATE), a.epsilon)?;
            let rec = recommend(&trace, &params)?;
            Ok(json_output(manifest("trace recommend", a, None), rec, true))
        }
        TraceCommand::Synth(a) => {
            let blocks = a.blocks as usize;
            let trace = match a.kind {
                SynthKind::Clavis => clavis_like_trace(blocks, a.seed),
                SynthKind::Normal => {
                    let delta = a.delta.ok_or_else(|| usage("normal traces need --delta"))?;
                    let sigma = a.sigma.ok_or_else(|| usage("normal traces need --sigma"))?;
                    normal_trace(delta, sigma, blocks, a.n.unwrap_or(CLAVIS_BLOCK_SIZE), a.seed)?
                }
            };
            let mut buf = Vec::new();
            write_trace(&trace, &mut buf)?;
            Ok(Output {
                text: String::from_utf8(buf).expect("csv output is utf-8"),
                converged: true,
            })
        }
    }
}

fn run(cli: &Cli) -> Result<Output, Failure> {
    let csv_capable = matches!(
        cli.command,
        Command::Sweep(_) | Command::Trace(TraceCommand::Synth(_))
    );
    match cli.format {
        Some(Format::Csv) if !csv_capable => {
            return Err(usage("--format csv is only available for sweep and trace synth"))
        }
        Some(Format::Json) if csv_capable => {
            return Err(usage("this subcommand writes csv; use --format csv or omit it"))
        }
        _ => {}
    }
    match &cli.command {
        Command::Analyze(a) => run_analyze(a),
        Command::Optimize(a) => run_optimize(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Trace(t) => run_trace(t),
    }
}

fn emit(text: &str, out: Option<&Path>) -> io::Result<()> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            w.write_all(text.as_bytes())?;
            w.flush()
        }
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(output) => {
            if let Err(e) = emit(&output.text, cli.out.as_deref()) {
                eprintln!("error: {e}");
                return ExitCode::from(DOMAIN);
            }
            if output.converged {
                ExitCode::SUCCESS
            } else {
                eprintln!("warning: the search ended at a bound of its interval");
                ExitCode::from(NOT_CONVERGED)
            }
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

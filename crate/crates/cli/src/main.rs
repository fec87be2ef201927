//! `gamehedge` command line: envelope tables, hedge verification, dual
//! bounds, consistent-price-system diagnostics and worked examples.
//!
//! Exit codes: 0 on success, 2 on invalid input, 3 when a verification
//! fails, 1 for anything else.

mod examples;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gamehedge::cps::cps_pipeline;
use gamehedge::hedge::{verify_hedge, Monitoring, VerifyOptions};
use gamehedge::market::{read_paths_csv, simulate_with, write_paths_csv, MarketPath};
use gamehedge::stopping::{build_increment_basis, build_tree_with, dual_lower_bound, Control, ControlFamily, TreeOptions};
use gamehedge::{build_trivial_hedge, tangent_coefficients, Execution, GameOption, MarketModel};

#[derive(Parser, Debug)]
#[command(name = "gamehedge", version, about = "Super-replication of game options under transaction costs")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output format.
    #[arg(long, value_enum, global = true, default_value_t = Format::Json)]
    format: Format,

    /// Write the main output here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tangent coefficients and envelope values R(x).
    Envelope(EnvelopeArgs),
    /// Build the cheapest trivial hedge and check it on simulated or imported paths.
    HedgeVerify(HedgeArgs),
    /// Lower bound from optimal stopping on binomial/multinomial trees.
    DualBound(DualArgs),
    /// Project paths onto a tree martingale and check the relative band.
    CpsCheck(CpsArgs),
    /// Reproduce one of the worked examples.
    Example(examples::ExampleArgs),
}

#[derive(Args, Debug, Clone)]
struct OptionArgs {
    /// Canonical name (call, put, spread) or path to a JSON option spec.
    option: String,

    /// Strike of a canonical option.
    #[arg(long = "K", alias = "strike", default_value_t = 100.0)]
    strike: f64,

    /// Cancellation penalty of a canonical option.
    #[arg(long, default_value_t = 40.0)]
    delta: f64,

    /// Maturity of a canonical option.
    #[arg(long = "T", alias = "maturity", default_value_t = 1.0)]
    maturity: f64,
}

impl OptionArgs {
    fn load(&self) -> Result<GameOption> {
        match self.option.as_str() {
            "call" | "put" | "spread" => Ok(GameOption::canonical(&self.option, self.strike, self.delta, self.maturity)?),
            path => {
                let text = fs::read_to_string(path).with_context(|| format!("reading option spec {path}"))?;
                Ok(GameOption::from_json(&text)?)
            }
        }
    }
}

#[derive(Args, Debug, Clone)]
struct MarketArgs {
    /// JSON market spec; overrides the GBM flags.
    #[arg(long)]
    market: Option<PathBuf>,

    /// Drift of a one-asset GBM.
    #[arg(long, default_value_t = 0.03)]
    drift: f64,

    /// Volatility of a one-asset GBM.
    #[arg(long, default_value_t = 0.4)]
    vol: f64,

    /// Constant short rate.
    #[arg(long, default_value_t = 0.03)]
    rate: f64,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long, default_value_t = 10_000)]
    paths: usize,

    #[arg(long, default_value_t = 500)]
    steps: usize,

    /// Read paths from CSV instead of simulating.
    #[arg(long)]
    paths_csv: Option<PathBuf>,

    /// Also write the paths used to CSV.
    #[arg(long)]
    export_paths: Option<PathBuf>,
}

impl MarketArgs {
    fn model(&self) -> Result<MarketModel> {
        match &self.market {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading market spec {}", path.display()))?;
                Ok(MarketModel::from_json(&text)?)
            }
            None => Ok(MarketModel::gbm_1d(self.drift, self.vol, self.rate)?),
        }
    }

    fn paths(&self, s: &[f64], maturity: f64, exec: Execution) -> Result<Vec<MarketPath>> {
        let paths = match &self.paths_csv {
            Some(path) => {
                let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                read_paths_csv(file)?
            }
            None => {
                if self.paths == 0 || self.steps == 0 {
                    bail!(gamehedge::Error::InvalidInput("paths and steps must be positive".into()));
                }
                let model = self.model()?;
                if model.dim() != s.len() {
                    bail!(gamehedge::Error::DimensionMismatch { expected: s.len(), got: model.dim() });
                }
                if !model.has_full_support() {
                    eprintln!("warning: the market model is degenerate (no full support)");
                }
                simulate_with(&model, s, self.steps, maturity, self.seed, self.paths, exec)?
            }
        };
        if let Some(out) = &self.export_paths {
            write_paths_csv(&paths, fs::File::create(out)?)?;
        }
        Ok(paths)
    }
}

#[derive(Args, Debug)]
struct EnvelopeArgs {
    #[command(flatten)]
    option: OptionArgs,

    /// Evaluation point, coordinates separated by commas; repeatable.
    #[arg(long = "at")]
    at: Vec<String>,

    /// One-asset grid `lo:hi:n`.
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args, Debug)]
struct HedgeArgs {
    #[command(flatten)]
    option: OptionArgs,

    #[command(flatten)]
    market: MarketArgs,

    /// Initial stock prices, comma separated.
    #[arg(long, default_value = "50")]
    s: String,

    /// Proportional transaction cost.
    #[arg(long, default_value_t = 0.01)]
    kappa: f64,

    /// Added to the hedge's initial capital.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    capital_offset: f64,

    /// Cancellation monitoring.
    #[arg(long, value_enum, default_value_t = MonitoringArg::Continuous)]
    monitoring: MonitoringArg,

    /// Write violations (path_id,time,shortfall) to this CSV.
    #[arg(long)]
    violations_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MonitoringArg {
    Continuous,
    Grid,
}

#[derive(Args, Debug)]
struct DualArgs {
    #[command(flatten)]
    option: OptionArgs,

    /// Initial stock prices, comma separated.
    #[arg(long, default_value = "50")]
    s: String,

    /// Tree depth.
    #[arg(long, default_value_t = 2000)]
    n: usize,

    /// Upper end of the control search; defaults to the largest admissible.
    #[arg(long)]
    upper: Option<f64>,

    /// Largest number of tree evaluations.
    #[arg(long, default_value_t = 40)]
    budget: usize,
}

#[derive(Args, Debug)]
struct CpsArgs {
    #[command(flatten)]
    market: MarketArgs,

    /// Initial stock prices, comma separated.
    #[arg(long, default_value = "100")]
    s: String,

    /// Tree depth N.
    #[arg(long, default_value_t = 4)]
    levels: usize,

    /// Constant tree control.
    #[arg(long, default_value_t = 0.03)]
    control: f64,

    /// Path grid steps per tree level.
    #[arg(long, default_value_t = 1)]
    steps_per_level: usize,

    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,

    /// Snap radius; defaults to half the sibling gap over N + 1.
    #[arg(long)]
    snap: Option<f64>,

    /// Horizon of tree and paths.
    #[arg(long = "T", default_value_t = 1.0)]
    maturity: f64,

    /// Write per-path likelihood weights (path_id,step,weight) to this CSV.
    #[arg(long)]
    weights_csv: Option<PathBuf>,
}

/// Failure that maps to exit code 3.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn parse_point(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| gamehedge::Error::InvalidInput(format!("cannot parse '{v}' as a number")).into())
        })
        .collect()
}

struct Sink<'a> {
    output: Option<&'a Path>,
}

impl Sink<'_> {
    fn write(&self, text: &str) -> Result<()> {
        match self.output {
            Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
            None => {
                let mut out = io::stdout().lock();
                out.write_all(text.as_bytes())?;
                if !text.ends_with('\n') {
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    fn json<T: Serialize>(&self, value: &T) -> Result<()> {
        self.write(&serde_json::to_string_pretty(value)?)
    }
}

#[derive(Serialize)]
struct EnvelopeRow {
    x: Vec<f64>,
    payoff: f64,
    value: f64,
    branch: gamehedge::Branch,
}

#[derive(Serialize)]
struct EnvelopeReport {
    a: Vec<f64>,
    b: Vec<f64>,
    base: f64,
    rows: Vec<EnvelopeRow>,
}

fn cmd_envelope(args: &EnvelopeArgs, format: Format, sink: &Sink) -> Result<()> {
    let option = args.option.load()?;
    let env = tangent_coefficients(&option)?;
    let mut points: Vec<Vec<f64>> = args.at.iter().map(|s| parse_point(s)).collect::<Result<_>>()?;
    if let Some(grid) = &args.grid {
        let parts: Vec<&str> = grid.split(':').collect();
        let bad = || gamehedge::Error::InvalidInput(format!("grid must be lo:hi:n, got '{grid}'"));
        if parts.len() != 3 {
            bail!(bad());
        }
        let lo: f64 = parts[0].parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].parse().map_err(|_| bad())?;
        let n: usize = parts[2].parse().map_err(|_| bad())?;
        if n < 2 || hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
            bail!(bad());
        }
        points.extend((0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]));
    }
    let mut rows = Vec::with_capacity(points.len());
    for x in points {
        let (value, branch) = env.evaluate(&x)?;
        rows.push(EnvelopeRow { payoff: option.payoff().eval(&x), value, branch, x });
    }
    let report = EnvelopeReport { a: env.a().to_vec(), b: env.b().to_vec(), base: env.base(), rows };
    match format {
        Format::Json => sink.json(&report),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header: Vec<String> = (1..=option.dim()).map(|i| format!("x_{i}")).collect();
            header.extend(["F".into(), "R".into(), "branch".into()]);
            w.write_record(&header)?;
            for r in &report.rows {
                let mut rec: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
                rec.push(r.payoff.to_string());
                rec.push(r.value.to_string());
                rec.push(format!("{:?}", r.branch).to_lowercase());
                w.write_record(&rec)?;
            }
            sink.write(&String::from_utf8(w.into_inner()?)?)
        }
    }
}

fn cmd_hedge_verify(args: &HedgeArgs, format: Format, sink: &Sink, exec: Execution) -> Result<()> {
    let option = args.option.load()?;
    let s = parse_point(&args.s)?;
    let env = tangent_coefficients(&option)?;
    let hedge = build_trivial_hedge(&option, &env, &s)?.with_capital_offset(args.capital_offset);
    let paths = args.market.paths(&s, option.maturity(), exec)?;
    let opts = VerifyOptions {
        kappa: args.kappa,
        monitoring: match args.monitoring {
            MonitoringArg::Continuous => Monitoring::Continuous,
            MonitoringArg::Grid => Monitoring::GridOnly,
        },
        tolerance: None,
        exec,
    };
    let report = verify_hedge(&hedge, &option, &paths, &opts)?;
    if let Some(path) = &args.violations_csv {
        report.write_violations_csv(fs::File::create(path)?)?;
    }
    match format {
        Format::Json => sink.json(&report)?,
        Format::Csv => {
            let mut buf = Vec::new();
            report.write_violations_csv(&mut buf)?;
            sink.write(&String::from_utf8(buf)?)?;
        }
    }
    if !report.is_perfect() {
        bail!(VerificationFailed(format!(
            "{} violations, max shortfall {:.6e}",
            report.violations.len(),
            report.max_shortfall
        )));
    }
    Ok(())
}

fn cmd_dual_bound(args: &DualArgs, format: Format, sink: &Sink, exec: Execution) -> Result<()> {
    let option = args.option.load()?;
    let s = parse_point(&args.s)?;
    let family = ControlFamily { upper: args.upper, exec, ..ControlFamily::default() };
    let r = dual_lower_bound(&option, &s, args.n, &family, args.budget)?;
    match format {
        Format::Json => sink.json(&r),
        Format::Csv => sink.write(&format!(
            "value,control,c_max,envelope_value,fraction,allowance,evaluations\n{},{},{},{},{},{},{}\n",
            r.value, r.control, r.c_max, r.envelope_value, r.fraction, r.allowance, r.evaluations
        )),
    }
}

fn cmd_cps_check(args: &CpsArgs, format: Format, sink: &Sink, exec: Execution) -> Result<()> {
    let s = parse_point(&args.s)?;
    let mut market = args.market.clone();
    market.steps = args.levels * args.steps_per_level;
    let paths = market.paths(&s, args.maturity, exec)?;
    let first = paths.first().ok_or_else(|| gamehedge::Error::InvalidInput("no paths".into()))?;
    let basis = build_increment_basis(s.len())?;
    let opts = TreeOptions { exec, ..TreeOptions::default() };
    let tree = build_tree_with(&basis, first.discounted(0), args.levels, &Control::Constant(args.control), args.maturity, &opts)?;
    let out = cps_pipeline(&paths, &tree, args.epsilon, args.snap, exec)?;
    if let Some(path) = &args.weights_csv {
        out.weights.write_csv(fs::File::create(path)?)?;
    }
    match format {
        Format::Json => sink.json(&out)?,
        Format::Csv => {
            let mut buf = Vec::new();
            out.weights.write_csv(&mut buf)?;
            sink.write(&String::from_utf8(buf)?)?;
        }
    }
    if !out.band.ok {
        bail!(VerificationFailed(format!("{} band violations", out.band.violations.len())));
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("GAMEHEDGE_THREADS") else { return Ok(()) };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| gamehedge::Error::InvalidInput(format!("GAMEHEDGE_THREADS must be a positive integer, got '{value}'")))?;
    if threads == 0 {
        bail!(gamehedge::Error::InvalidInput("GAMEHEDGE_THREADS must be positive".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let sink = Sink { output: cli.output.as_deref() };
    match &cli.command {
        Command::Envelope(a) => cmd_envelope(a, cli.format, &sink),
        Command::HedgeVerify(a) => cmd_hedge_verify(a, cli.format, &sink, exec),
        Command::DualBound(a) => cmd_dual_bound(a, cli.format, &sink, exec),
        Command::CpsCheck(a) => cmd_cps_check(a, cli.format, &sink, exec),
        Command::Example(a) => examples::run(a, cli.format, &sink),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<gamehedge::Error>() {
        Some(gamehedge::Error::Numerical(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

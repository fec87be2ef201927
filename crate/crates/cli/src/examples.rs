//! Worked examples with closed-form answers, each reproduced as a list of
//! PASS/FAIL checks.

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use gamehedge::hedge::{static_hedge_search, CancelRule};
use gamehedge::market::UnboundedRateScenario;
use gamehedge::{build_trivial_hedge, tangent_coefficients, GameOption};

use crate::{Format, Sink, VerificationFailed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleName {
    /// Call with penalty above the strike.
    CallI,
    /// Call with penalty at most the strike.
    CallIi,
    /// Put with penalty above the strike.
    PutI,
    /// Put with penalty at most the strike.
    PutIi,
    /// `(x1 - x2 + K)^+` with penalty above the strike.
    CallputI,
    /// `(x1 - x2 + K)^+` with penalty at most the strike.
    CallputIi,
    /// Penalty proportional to the payoff: the cheapest static hedge depends on the rate.
    NonconstantPenalty,
    /// Unbounded short rate: simulated exercise values never exceed 1/4.
    UnboundedRate,
}

#[derive(Args, Debug)]
pub struct ExampleArgs {
    name: ExampleName,

    /// Strike; defaults to 100 for calls and puts and 2 for the spread.
    #[arg(long = "K")]
    strike: Option<f64>,

    /// Penalty; defaults to a value in the named case.
    #[arg(long)]
    delta: Option<f64>,

    /// Constant rate for the static hedge search.
    #[arg(long, default_value_t = 0.05)]
    r: f64,

    /// Maturity.
    #[arg(long = "T", default_value_t = 1.0)]
    maturity: f64,

    #[arg(long, default_value_t = 1000)]
    paths: usize,

    #[arg(long, default_value_t = 1000)]
    steps: usize,

    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    ok: bool,
    detail: String,
}

#[derive(Debug, Serialize)]
struct ExampleReport {
    example: ExampleName,
    passed: bool,
    checks: Vec<Check>,
}

fn check(checks: &mut Vec<Check>, name: &str, ok: bool, detail: String) {
    checks.push(Check { name: name.into(), ok, detail });
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + b.abs()) || (a.is_infinite() && a == b)
}

type ValueFn = Box<dyn Fn(&[f64]) -> f64>;

/// Closed form of one of the max-affine examples.
struct ClosedForm {
    option: GameOption,
    a: Vec<f64>,
    b: Vec<f64>,
    value: ValueFn,
    /// Start below the cancellation region, and one inside it (if any).
    below: Vec<f64>,
    inside: Option<Vec<f64>>,
    span: f64,
}

fn input_error(msg: String) -> anyhow::Error {
    gamehedge::Error::InvalidInput(msg).into()
}

fn closed_form(name: ExampleName, args: &ExampleArgs) -> Result<ClosedForm> {
    use ExampleName::*;
    let spread = matches!(name, CallputI | CallputIi);
    let k = args.strike.unwrap_or(if spread { 2.0 } else { 100.0 });
    let high = matches!(name, CallI | PutI | CallputI);
    let delta = args.delta.unwrap_or(match (spread, high) {
        (false, true) => 1.5 * k,
        (false, false) => 0.4 * k,
        (true, true) => 1.5 * k,
        (true, false) => 0.5 * k,
    });
    if high != (delta > k) {
        return Err(input_error(format!(
            "case {} needs the penalty {} the strike (K = {k}, delta = {delta})",
            if high { "i" } else { "ii" },
            if high { "above" } else { "at most" }
        )));
    }
    let t = args.maturity;
    let inf = f64::INFINITY;
    let span = 3.0 * k.max(delta);
    Ok(match name {
        CallI => ClosedForm {
            option: GameOption::canonical("call", k, delta, t)?,
            a: vec![inf],
            b: vec![1.0],
            value: Box::new(|x| x[0]),
            below: vec![0.5 * k],
            inside: None,
            span,
        },
        CallIi => ClosedForm {
            option: GameOption::canonical("call", k, delta, t)?,
            a: vec![k],
            b: vec![delta / k],
            value: Box::new(move |x| if x[0] < k { delta * x[0] / k } else { x[0] + delta - k }),
            below: vec![0.5 * k],
            inside: Some(vec![1.5 * k]),
            span,
        },
        PutI => ClosedForm {
            option: GameOption::canonical("put", k, delta, t)?,
            a: vec![inf],
            b: vec![0.0],
            value: Box::new(move |_| k),
            below: vec![0.5 * k],
            inside: None,
            span,
        },
        PutIi => ClosedForm {
            option: GameOption::canonical("put", k, delta, t)?,
            a: vec![k],
            b: vec![-(k - delta) / k],
            value: Box::new(move |x| if x[0] < k { k - (k - delta) / k * x[0] } else { delta }),
            below: vec![0.5 * k],
            inside: Some(vec![1.5 * k]),
            span,
        },
        CallputI => ClosedForm {
            option: GameOption::canonical("spread", k, delta, t)?,
            a: vec![inf, inf],
            b: vec![1.0, 0.0],
            value: Box::new(move |x| {
                if x[0] >= delta - k && x[1] >= delta {
                    (x[0] - x[1] + k).max(0.0) + delta
                } else {
                    x[0] + k
                }
            }),
            below: vec![0.5 * k, 0.5 * k],
            inside: Some(vec![delta - k + 1.0, delta + 1.0]),
            span,
        },
        CallputIi => ClosedForm {
            option: GameOption::canonical("spread", k, delta, t)?,
            a: vec![inf, k],
            b: vec![1.0, -(k - delta) / k],
            value: Box::new(move |x| {
                if x[1] < k {
                    x[0] + k - (k - delta) / k * x[1]
                } else {
                    (x[0] - x[1] + k).max(0.0) + delta
                }
            }),
            below: vec![0.5 * k, 0.5 * k],
            inside: Some(vec![0.5 * k, 1.5 * k]),
            span,
        },
        NonconstantPenalty | UnboundedRate => unreachable!(),
    })
}

fn closed_form_checks(cf: &ClosedForm) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let env = tangent_coefficients(&cf.option)?;
    let coeffs = env.a().iter().zip(&cf.a).all(|(x, y)| close(*x, *y)) && env.b().iter().zip(&cf.b).all(|(x, y)| close(*x, *y));
    check(&mut checks, "tangent coefficients", coeffs, format!("A = {:?}, B = {:?}", env.a(), env.b()));

    let n = if cf.option.dim() == 1 { 61 } else { 25 };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let coords: Vec<f64> = (0..n).map(|i| cf.span * i as f64 / (n - 1) as f64).collect();
    let points: Vec<Vec<f64>> = if cf.option.dim() == 1 {
        coords.iter().map(|x| vec![*x]).collect()
    } else {
        coords.iter().flat_map(|x| coords.iter().map(move |y| vec![*x, *y])).collect()
    };
    for x in &points {
        worst = worst.max((env.value(x)? - (cf.value)(x)).abs());
        count += 1;
    }
    check(&mut checks, "envelope table", worst <= 1e-10, format!("max |R - closed form| = {worst:.2e} over {count} points"));

    let hedge = build_trivial_hedge(&cf.option, &env, &cf.below)?;
    let expected = (cf.value)(&cf.below);
    let ok = close(hedge.initial_capital(), expected)
        && hedge.holdings().iter().zip(&cf.b).all(|(h, b)| close(*h, *b))
        && hedge.cancel_rule() == CancelRule::FirstEntry;
    check(
        &mut checks,
        "hedge below the cancellation region",
        ok,
        format!("s = {:?}: capital {} (expected {expected}), holdings {:?}", cf.below, hedge.initial_capital(), hedge.holdings()),
    );
    if let Some(s) = &cf.inside {
        let hedge = build_trivial_hedge(&cf.option, &env, s)?;
        let expected = cf.option.payoff().eval(s) + cf.option.penalty();
        let ok = close(hedge.initial_capital(), expected) && hedge.cancel_rule() == CancelRule::Immediate;
        check(
            &mut checks,
            "immediate cancellation inside the region",
            ok,
            format!("s = {s:?}: capital {} (expected F(s) + delta = {expected})", hedge.initial_capital()),
        );
    }
    Ok(checks)
}

fn nonconstant_penalty(args: &ExampleArgs) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let h = static_hedge_search(args.r, args.maturity)?;
    let expected = 4.0 - (-args.r * args.maturity).exp();
    let err = (h.capital - expected).abs();
    check(&mut checks, "static hedge value", err <= 1e-6, format!("V = {:.10}, 4 - exp(-rT) = {expected:.10}", h.capital));
    check(&mut checks, "shares held", (h.gamma - 1.0).abs() <= 1e-9, format!("gamma = {}", h.gamma));
    check(&mut checks, "cancellation barrier", (h.lambda - 3.0).abs() <= 1e-9, format!("Lambda = {}", h.lambda));
    Ok(checks)
}

fn unbounded_rate(args: &ExampleArgs) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let paths = UnboundedRateScenario::new(args.steps, args.maturity, args.seed, args.paths).paths()?;
    let mut worst: f64 = 0.0;
    for p in &paths {
        for k in 0..=p.steps() {
            worst = worst.max((0.5 - p.stock(k)[0]).max(0.0) / p.bank(k));
        }
    }
    check(
        &mut checks,
        "exercise value bound",
        worst <= 0.25 + 1e-12,
        format!("max Y = {worst:.6} over {} paths of {} steps", paths.len(), args.steps),
    );
    // with bounded rates the same put would cost R(1) = K
    let put = GameOption::canonical("put", 0.5, 1.0, args.maturity)?;
    let r = tangent_coefficients(&put)?.value(&[1.0])?;
    check(&mut checks, "envelope exceeds the bound", r > 0.25, format!("R(1) = {r}"));
    Ok(checks)
}

pub fn run(args: &ExampleArgs, format: Format, sink: &Sink) -> Result<()> {
    let checks = match args.name {
        ExampleName::NonconstantPenalty => nonconstant_penalty(args)?,
        ExampleName::UnboundedRate => unbounded_rate(args)?,
        name => closed_form_checks(&closed_form(name, args)?)?,
    };
    for c in &checks {
        eprintln!("{} {}: {}", if c.ok { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let report = ExampleReport { example: args.name, passed: checks.iter().all(|c| c.ok), checks };
    match format {
        Format::Json => sink.json(&report)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["check", "ok", "detail"])?;
            for c in &report.checks {
                w.write_record([c.name.as_str(), if c.ok { "true" } else { "false" }, c.detail.as_str()])?;
            }
            sink.write(&String::from_utf8(w.into_inner()?)?)?;
        }
    }
    if !report.passed {
        bail!(VerificationFailed(format!("example {:?} failed", args.name)));
    }
    Ok(())
}

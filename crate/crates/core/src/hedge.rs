//! Portfolio values under proportional transaction costs, the cheapest
//! trivial hedge and its pathwise verification.

mod static_search;

use std::io::Write;

use serde::Serialize;

use crate::envelope::{Branch, EnvelopeData};
use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;
use crate::linear::{dot, feasible_interval};
use crate::market::MarketPath;
use crate::payoff::GameOption;

pub use static_search::{static_hedge_search, StaticHedge, StaticHedgeKind};

/// Self-financing strategy: initial capital, the position held at time 0 and
/// later rebalancing trades.
///
/// Holdings are left-continuous: a trade at grid index `u` sets the holdings
/// from just after `u`, so the value at `u` itself is pre-trade.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Strategy {
    pub initial_capital: f64,
    pub initial_holdings: Vec<f64>,
    /// `(grid index, holdings after the trade)`, sorted by index.
    pub trades: Vec<(usize, Vec<f64>)>,
}

impl Strategy {
    pub fn buy_and_hold(initial_capital: f64, holdings: Vec<f64>) -> Self {
        Strategy { initial_capital, initial_holdings: holdings, trades: Vec::new() }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        check_dim(dim, self.initial_holdings.len())?;
        for (_, h) in &self.trades {
            check_dim(dim, h.len())?;
        }
        if self.trades.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::input("trades must be sorted by strictly increasing time index"));
        }
        Ok(())
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("transaction cost rate {kappa} must lie in (0, 1)")))
    }
}

/// Discounted value at grid index `t`, before any trade at `t`:
///
/// `Ξ + <γ(t), S̃(t)> - <γ(0), s> + (1-κ) Σ <S̃(u), sold(u)> - (1+κ) Σ <S̃(u), bought(u)>`
///
/// with sums over trades at `u < t`.
pub fn portfolio_value(strategy: &Strategy, path: &MarketPath, kappa: f64, t: usize) -> Result<f64> {
    check_kappa(kappa)?;
    strategy.validate(path.dim())?;
    if t > path.steps() {
        return Err(Error::input(format!("time index {t} outside grid 0..={}", path.steps())));
    }
    let mut holdings = strategy.initial_holdings.as_slice();
    let mut cash = strategy.initial_capital - dot(holdings, path.discounted(0));
    for (u, after) in strategy.trades.iter().take_while(|(u, _)| *u < t) {
        let price = path.discounted(*u);
        for i in 0..path.dim() {
            let change = after[i] - holdings[i];
            if change > 0.0 {
                cash -= (1.0 + kappa) * price[i] * change;
            } else {
                cash -= (1.0 - kappa) * price[i] * change;
            }
        }
        holdings = after;
    }
    Ok(cash + dot(holdings, path.discounted(t)))
}

/// When the trivial hedge cancels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CancelRule {
    /// At the first time `S` enters `D = {Δ + F(x) <= F(0) + <B, x>}`, capped
    /// at maturity.
    FirstEntry,
    /// At time 0.
    Immediate,
}

/// Buy-and-hold position with a hitting-time cancellation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrivialHedge {
    initial_capital: f64,
    nominal_capital: f64,
    holdings: Vec<f64>,
    cancel_rule: CancelRule,
    initial_stock: Vec<f64>,
    env: EnvelopeData,
}

/// Cheapest trivial hedge for initial stock `s`: capital `R(s)`; holdings `B`
/// with cancellation on entry to `D` when `R(s) < F(s) + Δ`, otherwise no
/// holdings and cancellation at once.
pub fn build_trivial_hedge(option: &GameOption, env: &EnvelopeData, s: &[f64]) -> Result<TrivialHedge> {
    check_dim(option.dim(), s.len())?;
    check_dim(option.dim(), env.dim())?;
    if env.option() != option {
        return Err(Error::input("envelope data was computed for a different option"));
    }
    if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::input("initial stock must be strictly positive"));
    }
    let (capital, branch) = env.evaluate(s)?;
    let (holdings, cancel_rule) = match branch {
        Branch::Penalty => (vec![0.0; s.len()], CancelRule::Immediate),
        Branch::Affine | Branch::Base => (env.b().to_vec(), CancelRule::FirstEntry),
    };
    Ok(TrivialHedge {
        initial_capital: capital,
        nominal_capital: capital,
        holdings,
        cancel_rule,
        initial_stock: s.to_vec(),
        env: env.clone(),
    })
}

impl TrivialHedge {
    pub fn initial_capital(&self) -> f64 {
        self.initial_capital
    }

    /// `R(s)`, the capital before any offset.
    pub fn nominal_capital(&self) -> f64 {
        self.nominal_capital
    }

    pub fn holdings(&self) -> &[f64] {
        &self.holdings
    }

    pub fn cancel_rule(&self) -> CancelRule {
        self.cancel_rule
    }

    pub fn initial_stock(&self) -> &[f64] {
        &self.initial_stock
    }

    pub fn envelope(&self) -> &EnvelopeData {
        &self.env
    }

    /// Same position and cancellation rule with capital shifted by `offset`.
    pub fn with_capital_offset(mut self, offset: f64) -> Self {
        self.initial_capital = self.nominal_capital + offset;
        self
    }

    pub fn strategy(&self) -> Strategy {
        Strategy::buy_and_hold(self.initial_capital, self.holdings.clone())
    }

    /// Discounted value `Ξ + <γ, x̃ - s>` at discounted price `x̃`.
    fn value_at(&self, discounted: &[f64]) -> f64 {
        self.initial_capital + dot(&self.holdings, discounted) - dot(&self.holdings, &self.initial_stock)
    }

    /// Constraints `slope * λ + offset >= 0` describing `S(t_k) + λ ΔS ∈ D`.
    fn entry_constraints<'a>(
        &'a self,
        from: &'a [f64],
        to: &'a [f64],
    ) -> impl Iterator<Item = (f64, f64)> + 'a {
        let delta = self.env.option().penalty();
        let shift = self.env.base() - delta;
        let b = self.env.b();
        self.env.option().payoff().pieces().iter().map(move |p| {
            let mut slope = 0.0;
            let mut offset = shift - p.b;
            for i in 0..from.len() {
                let w = b[i] - p.a[i];
                slope += w * (to[i] - from[i]);
                offset += w * from[i];
            }
            (slope, offset)
        })
    }
}

/// How the cancellation rule observes the stock path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monitoring {
    /// The path is linearly interpolated between grid points and the exact
    /// first entry time into `D` is used.
    #[default]
    Continuous,
    /// The rule acts only at grid times: an entry between two grid points
    /// triggers cancellation at the next one.
    GridOnly,
}

/// Cancellation time on one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cancellation {
    /// Grid interval `[t_step, t_{step+1})` containing the time (or `N`).
    pub step: usize,
    /// Fraction of that interval elapsed.
    pub frac: f64,
    pub time: f64,
    /// False when the rule never fired before maturity.
    pub cancelled: bool,
}

fn cancellation_time(hedge: &TrivialHedge, path: &MarketPath, monitoring: Monitoring) -> Cancellation {
    let n = path.steps();
    if hedge.cancel_rule == CancelRule::Immediate {
        return Cancellation { step: 0, frac: 0.0, time: 0.0, cancelled: true };
    }
    let at_grid = |k: usize| Cancellation { step: k, frac: 0.0, time: path.time(k), cancelled: true };
    if hedge.env.in_cancel_region(path.stock(0)) {
        return at_grid(0);
    }
    for k in 0..n {
        let (from, to) = (path.stock(k), path.stock(k + 1));
        if let Some((lambda, _)) = feasible_interval(hedge.entry_constraints(from, to), 0.0, 1.0) {
            if lambda >= 1.0 || monitoring == Monitoring::GridOnly {
                return at_grid(k + 1);
            }
            let dt = path.time(k + 1) - path.time(k);
            return Cancellation { step: k, frac: lambda, time: path.time(k) + lambda * dt, cancelled: true };
        }
    }
    Cancellation { step: n, frac: 0.0, time: path.time(n), cancelled: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HedgeViolation {
    pub path: usize,
    /// Grid index, or the start of the interval holding the cancellation.
    pub step: usize,
    pub time: f64,
    pub shortfall: f64,
}

/// Cancellation times bucketed over `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Paths on which the hedge ran to maturity without cancelling.
    pub not_cancelled: usize,
}

impl SigmaHistogram {
    fn new(maturity: f64, bins: usize) -> Self {
        SigmaHistogram {
            edges: (0..=bins).map(|i| maturity * i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
            not_cancelled: 0,
        }
    }

    fn record(&mut self, c: &Cancellation, maturity: f64) {
        if !c.cancelled {
            self.not_cancelled += 1;
            return;
        }
        let bins = self.counts.len();
        let bin = ((c.time / maturity * bins as f64) as usize).min(bins - 1);
        self.counts[bin] += 1;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HedgeReport {
    pub paths_checked: usize,
    pub initial_capital: f64,
    pub nominal_capital: f64,
    pub holdings: Vec<f64>,
    pub cancel_rule: CancelRule,
    pub monitoring: Monitoring,
    pub kappa: f64,
    pub tolerance: f64,
    pub violations: Vec<HedgeViolation>,
    /// Largest shortfall; 0 when there are no violations.
    pub max_shortfall: f64,
    /// Smallest `V - H` observed over all checks.
    pub min_margin: f64,
    pub sigma_distribution: SigmaHistogram,
}

impl HedgeReport {
    pub fn is_perfect(&self) -> bool {
        self.violations.is_empty()
    }

    /// Writes `path_id,time,shortfall` rows.
    pub fn write_violations_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["path_id", "time", "shortfall"])?;
        for v in &self.violations {
            w.write_record([v.path.to_string(), v.time.to_string(), v.shortfall.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Settings for [`verify_hedge`].
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub kappa: f64,
    pub monitoring: Monitoring,
    /// Absolute tolerance; defaults to `1e-9 (1 + R(s))`.
    pub tolerance: Option<f64>,
    pub exec: Execution,
}

impl VerifyOptions {
    pub fn new(kappa: f64) -> Self {
        VerifyOptions { kappa, monitoring: Monitoring::Continuous, tolerance: None, exec: Execution::default() }
    }
}

/// Checks the hedge on every path with default settings.
pub fn verify_perfect_hedge(
    hedge: &TrivialHedge,
    option: &GameOption,
    paths: &[MarketPath],
    kappa: f64,
) -> Result<HedgeReport> {
    verify_hedge(hedge, option, paths, &VerifyOptions::new(kappa))
}

/// Checks `V(t) >= H(σ, t)` along every path, with the portfolio frozen at
/// the cancellation time: `V(t_k) >= Y(t_k)` at grid times `t_k <= σ`, and
/// `V(σ) >= X(σ)` when the hedge cancels before maturity.
pub fn verify_hedge(
    hedge: &TrivialHedge,
    option: &GameOption,
    paths: &[MarketPath],
    opts: &VerifyOptions,
) -> Result<HedgeReport> {
    check_kappa(opts.kappa)?;
    if hedge.env.option() != option {
        return Err(Error::input("hedge was built for a different option"));
    }
    let first = paths.first().ok_or_else(|| Error::input("no paths to verify"))?;
    for p in paths {
        check_dim(option.dim(), p.dim())?;
        if p.grid() != first.grid() {
            return Err(Error::input("paths do not share a common grid"));
        }
        let s0 = p.initial_stock();
        if s0.iter().zip(&hedge.initial_stock).any(|(a, b)| (a - b).abs() > 1e-12 * b.abs().max(1.0)) {
            return Err(Error::input("path does not start at the hedge's initial stock"));
        }
    }
    let tol = opts.tolerance.unwrap_or(1e-9 * (1.0 + hedge.nominal_capital.abs()));
    let maturity = first.maturity();

    let outcomes = opts.exec.map_range(paths.len(), |id| check_path(hedge, option, &paths[id], id, tol, opts.monitoring));

    let mut violations = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut sigma = SigmaHistogram::new(maturity, 10);
    for out in outcomes {
        violations.extend(out.violations);
        min_margin = min_margin.min(out.min_margin);
        sigma.record(&out.cancellation, maturity);
    }
    let max_shortfall = violations.iter().map(|v| v.shortfall).fold(0.0, f64::max);
    Ok(HedgeReport {
        paths_checked: paths.len(),
        initial_capital: hedge.initial_capital,
        nominal_capital: hedge.nominal_capital,
        holdings: hedge.holdings.clone(),
        cancel_rule: hedge.cancel_rule,
        monitoring: opts.monitoring,
        kappa: opts.kappa,
        tolerance: tol,
        violations,
        max_shortfall,
        min_margin,
        sigma_distribution: sigma,
    })
}

struct PathOutcome {
    violations: Vec<HedgeViolation>,
    min_margin: f64,
    cancellation: Cancellation,
}

fn check_path(
    hedge: &TrivialHedge,
    option: &GameOption,
    path: &MarketPath,
    id: usize,
    tol: f64,
    monitoring: Monitoring,
) -> PathOutcome {
    let c = cancellation_time(hedge, path, monitoring);
    let mut violations = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut check = |step: usize, time: f64, value: f64, liability: f64| {
        let margin = value - liability;
        min_margin = min_margin.min(margin);
        if margin < -tol {
            violations.push(HedgeViolation { path: id, step, time, shortfall: -margin });
        }
    };
    // grid times up to and including σ
    for k in 0..=c.step {
        check(k, path.time(k), hedge.value_at(path.discounted(k)), option.exercise_value(path, k));
    }
    // cancelling at maturity pays Y(T), which the grid check already covered
    if c.cancelled && c.time < path.maturity() {
        let (stock, bank) = if c.frac > 0.0 {
            let (from, to) = (path.stock(c.step), path.stock(c.step + 1));
            let x: Vec<f64> = from.iter().zip(to).map(|(a, b)| a + c.frac * (b - a)).collect();
            (x, path.bank_within(c.step, c.frac))
        } else {
            (path.stock(c.step).to_vec(), path.bank(c.step))
        };
        let discounted: Vec<f64> = stock.iter().map(|v| v / bank).collect();
        let payout = (option.payoff().eval(&stock) + option.penalty()) / bank;
        check(c.step, c.time, hedge.value_at(&discounted), payout);
    }
    PathOutcome { violations, min_margin, cancellation: c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::tangent_coefficients;
    use crate::market::{simulate, MarketModel, PathBuilder};

    fn path_1d(values: &[f64], rate: f64) -> MarketPath {
        let n = values.len();
        let grid: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
        let bank = grid.iter().map(|t| (rate * t).exp()).collect();
        PathBuilder::new(grid, 1, values.to_vec(), bank, vec![rate; n - 1]).discount().unwrap()
    }

    fn setup(name: &str, k: f64, delta: f64, s: &[f64]) -> (GameOption, TrivialHedge) {
        let option = GameOption::canonical(name, k, delta, 1.0).unwrap();
        let env = tangent_coefficients(&option).unwrap();
        let hedge = build_trivial_hedge(&option, &env, s).unwrap();
        (option, hedge)
    }

    #[test]
    fn buy_and_hold_value() {
        let p = path_1d(&[10.0, 12.0, 9.0], 0.1);
        let s = Strategy::buy_and_hold(5.0, vec![2.0]);
        for t in 0..3 {
            let expected = 5.0 + 2.0 * (p.discounted(t)[0] - 10.0);
            for kappa in [0.01, 0.5] {
                assert!((portfolio_value(&s, &p, kappa, t).unwrap() - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_purchase_costs_kappa() {
        let p = path_1d(&[10.0, 12.0, 9.0, 11.0], 0.0);
        let hold = Strategy::buy_and_hold(0.0, vec![0.0]);
        let buy = Strategy { trades: vec![(1, vec![1.0])], ..hold.clone() };
        // the trade at index 1 is not yet reflected at index 1
        assert_eq!(portfolio_value(&buy, &p, 0.01, 1).unwrap(), portfolio_value(&hold, &p, 0.01, 1).unwrap());
        for t in 2..4 {
            let diff = portfolio_value(&buy, &p, 0.01, t).unwrap() - portfolio_value(&hold, &p, 0.01, t).unwrap();
            assert!((diff - (p.discounted(t)[0] - 1.01 * 12.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_costs_vanish_with_kappa() {
        let p = path_1d(&[10.0, 10.0, 10.0, 10.0], 0.0);
        let s = Strategy {
            initial_capital: 1.0,
            initial_holdings: vec![0.0],
            trades: vec![(1, vec![3.0]), (2, vec![0.0])],
        };
        let v = portfolio_value(&s, &p, 1e-12, 3).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        let v = portfolio_value(&s, &p, 0.1, 3).unwrap();
        assert!((v - (1.0 - 0.1 * 30.0 * 2.0)).abs() < 1e-9);
        assert!(portfolio_value(&s, &p, 0.0, 3).is_err());
        assert!(portfolio_value(&s, &p, 1.0, 3).is_err());
    }

    #[test]
    fn hedge_examples() {
        let (_, h) = setup("call", 100.0, 40.0, &[50.0]);
        assert!((h.initial_capital() - 20.0).abs() < 1e-12);
        assert!((h.holdings()[0] - 0.4).abs() < 1e-15);
        assert_eq!(h.cancel_rule(), CancelRule::FirstEntry);
        assert!(h.envelope().in_cancel_region(&[100.0]));
        assert!(!h.envelope().in_cancel_region(&[180.0]));
        assert!(!h.envelope().in_cancel_region(&[99.0]));

        let (_, h) = setup("put", 100.0, 40.0, &[150.0]);
        assert!((h.initial_capital() - 40.0).abs() < 1e-12);
        assert_eq!(h.holdings(), &[0.0]);
        assert_eq!(h.cancel_rule(), CancelRule::Immediate);

        let (_, h) = setup("spread", 2.0, 3.0, &[1.0, 1.0]);
        assert!((h.initial_capital() - 3.0).abs() < 1e-12);
        assert_eq!(h.holdings(), &[1.0, 0.0]);
        assert_eq!(h.cancel_rule(), CancelRule::FirstEntry);

        let option = GameOption::canonical("call", 100.0, 40.0, 1.0).unwrap();
        let env = tangent_coefficients(&option).unwrap();
        assert!(build_trivial_hedge(&option, &env, &[0.0]).is_err());
    }

    #[test]
    fn cancels_exactly_at_crossing() {
        let (option, h) = setup("call", 100.0, 40.0, &[50.0]);
        // crosses 100 between the second and third grid points
        let p = path_1d(&[50.0, 90.0, 130.0, 140.0], 0.0);
        let c = cancellation_time(&h, &p, Monitoring::Continuous);
        assert_eq!(c.step, 1);
        assert!((c.frac - 0.25).abs() < 1e-12);
        let r = verify_perfect_hedge(&h, &option, std::slice::from_ref(&p), 0.01).unwrap();
        assert!(r.is_perfect());
        assert!(r.min_margin.abs() < 1e-9);
        // grid monitoring sees 130 too late: 0.4 * 130 < 70
        let mut opts = VerifyOptions::new(0.01);
        opts.monitoring = Monitoring::GridOnly;
        let r = verify_hedge(&h, &option, &[p], &opts).unwrap();
        assert!(!r.is_perfect());
        assert!((r.max_shortfall - 18.0).abs() < 1e-9);
    }

    #[test]
    fn put_cancel_set_is_a_point() {
        let (option, h) = setup("put", 100.0, 40.0, &[50.0]);
        assert!((h.initial_capital() - 70.0).abs() < 1e-12);
        let p = path_1d(&[50.0, 80.0, 120.0, 90.0], 0.02);
        let r = verify_perfect_hedge(&h, &option, &[p], 0.01).unwrap();
        assert!(r.is_perfect(), "{:?}", r.violations);
        assert_eq!(r.sigma_distribution.not_cancelled, 0);
    }

    #[test]
    fn simulated_call_hedge() {
        let (option, h) = setup("call", 100.0, 40.0, &[50.0]);
        let model = MarketModel::gbm_1d(0.0, 0.6, 0.03).unwrap();
        let paths = simulate(&model, &[50.0], 100, 1.0, 17, 400).unwrap();
        let r = verify_perfect_hedge(&h, &option, &paths, 0.01).unwrap();
        assert!(r.is_perfect(), "{:?}", r.violations.first());
        assert_eq!(r.max_shortfall, 0.0);
        let cancelled: usize = r.sigma_distribution.counts.iter().sum();
        assert_eq!(cancelled + r.sigma_distribution.not_cancelled, 400);
        assert!(cancelled > 0);

        let short = h.clone().with_capital_offset(-0.2);
        let r2 = verify_perfect_hedge(&short, &option, &paths, 0.01).unwrap();
        assert!(!r2.is_perfect());
        let short2 = h.with_capital_offset(-0.4);
        let r3 = verify_perfect_hedge(&short2, &option, &paths, 0.01).unwrap();
        assert!(r3.max_shortfall >= r2.max_shortfall);

        let mut buf = Vec::new();
        r2.write_violations_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path_id,time,shortfall"));
        assert_eq!(text.lines().count(), r2.violations.len() + 1);
    }

    #[test]
    fn immediate_cancel_is_perfect() {
        let (option, h) = setup("put", 100.0, 40.0, &[150.0]);
        let model = MarketModel::gbm_1d(0.0, 0.3, 0.01).unwrap();
        let paths = simulate(&model, &[150.0], 20, 1.0, 1, 50).unwrap();
        let r = verify_perfect_hedge(&h, &option, &paths, 0.01).unwrap();
        assert!(r.is_perfect());
        assert_eq!(r.sigma_distribution.counts[0], 50);
    }

    #[test]
    fn rejects_mismatched_paths() {
        let (option, h) = setup("call", 100.0, 40.0, &[50.0]);
        let a = path_1d(&[50.0, 60.0], 0.0);
        let b = path_1d(&[50.0, 60.0, 70.0], 0.0);
        assert!(verify_perfect_hedge(&h, &option, &[a.clone(), b], 0.01).is_err());
        let c = path_1d(&[51.0, 60.0], 0.0);
        assert!(verify_perfect_hedge(&h, &option, &[c], 0.01).is_err());
        assert!(verify_perfect_hedge(&h, &option, &[a], 1.5).is_err());
    }
}

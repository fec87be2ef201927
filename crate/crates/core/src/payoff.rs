//! Convex max-affine payoffs and the discounted game reward.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linear::dot;
use crate::market::MarketPath;

/// Evaluations below this are treated as a violation of `F >= 0`.
const NEGATIVITY_GUARD: f64 = -1e-12;

/// One affine piece `x -> <a, x> + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePiece {
    pub a: Vec<f64>,
    pub b: f64,
}

impl AffinePiece {
    pub fn new(a: Vec<f64>, b: f64) -> Self {
        AffinePiece { a, b }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.a, x) + self.b
    }
}

/// Convex Lipschitz payoff `F(x) = max_j (<a_j, x> + b_j)` on the nonnegative
/// orthant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxAffinePayoff {
    dim: usize,
    pieces: Vec<AffinePiece>,
    #[serde(skip)]
    lipschitz: f64,
}

impl MaxAffinePayoff {
    /// Validates shape, finiteness and nonnegativity on the orthant.
    ///
    /// Nonnegativity is checked at the origin, along every axis at each kink of
    /// the coordinate section and at ten times the largest kink, and at the
    /// diagonal corner of that probe box. Each axis must also have a
    /// nonnegative dominating slope.
    pub fn new(dim: usize, pieces: Vec<AffinePiece>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("payoff dimension must be positive"));
        }
        if pieces.is_empty() {
            return Err(Error::input("payoff needs at least one affine piece"));
        }
        for p in &pieces {
            check_dim(dim, p.a.len())?;
            if !p.b.is_finite() || p.a.iter().any(|v| !v.is_finite()) {
                return Err(Error::input("payoff coefficients must be finite"));
            }
        }
        let lipschitz = pieces
            .iter()
            .map(|p| p.a.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let payoff = MaxAffinePayoff { dim, pieces, lipschitz };
        payoff.check_nonnegative()?;
        Ok(payoff)
    }

    fn check_nonnegative(&self) -> Result<()> {
        let origin = vec![0.0; self.dim];
        let mut probes = vec![origin];
        let mut largest = 1.0_f64;
        for i in 0..self.dim {
            let section = self.section(i)?;
            if section.max_slope() < 0.0 {
                return Err(Error::input(format!(
                    "payoff becomes negative along axis {}",
                    i + 1
                )));
            }
            let kinks = section.kinks();
            largest = kinks.iter().copied().fold(largest, f64::max);
            for &k in &kinks {
                let mut x = vec![0.0; self.dim];
                x[i] = k;
                probes.push(x);
            }
        }
        let far = 10.0 * largest;
        for i in 0..self.dim {
            let mut x = vec![0.0; self.dim];
            x[i] = far;
            probes.push(x);
        }
        probes.push(vec![far; self.dim]);
        for x in &probes {
            let v = self.eval(x);
            if v < NEGATIVITY_GUARD {
                return Err(Error::input(format!(
                    "payoff is negative ({v}) at probe point {x:?}"
                )));
            }
        }
        Ok(())
    }

    /// `(x - K)^+` on one asset.
    pub fn call(strike: f64) -> Result<Self> {
        check_strike(strike)?;
        Self::new(
            1,
            vec![AffinePiece::new(vec![1.0], -strike), AffinePiece::new(vec![0.0], 0.0)],
        )
    }

    /// `(K - x)^+` on one asset.
    pub fn put(strike: f64) -> Result<Self> {
        check_strike(strike)?;
        Self::new(
            1,
            vec![AffinePiece::new(vec![-1.0], strike), AffinePiece::new(vec![0.0], 0.0)],
        )
    }

    /// `(x_1 - x_2 + K)^+` on two assets.
    pub fn spread(strike: f64) -> Result<Self> {
        check_strike(strike)?;
        Self::new(
            2,
            vec![
                AffinePiece::new(vec![1.0, -1.0], strike),
                AffinePiece::new(vec![0.0, 0.0], 0.0),
            ],
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pieces(&self) -> &[AffinePiece] {
        &self.pieces
    }

    /// `max_j ||a_j||_1`, a Lipschitz constant for the l1 norm.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// `F(0) = max_j b_j`.
    pub fn at_origin(&self) -> f64 {
        self.pieces.iter().map(|p| p.b).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Unchecked evaluation. Callers guarantee `x.len() == dim`.
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        self.pieces
            .iter()
            .map(|p| p.eval(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Evaluation with dimension, domain and sign checks.
    pub fn try_eval(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        if x.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::input("payoff argument must be finite and nonnegative"));
        }
        let v = self.eval(x);
        if v < NEGATIVITY_GUARD {
            return Err(Error::input(format!("payoff evaluated to {v} at {x:?}")));
        }
        Ok(v)
    }

    /// Restriction to the `i`-th coordinate axis (0-based), `t -> F(t e_i)`.
    pub fn section(&self, i: usize) -> Result<Section1D> {
        if i >= self.dim {
            return Err(Error::input(format!(
                "coordinate {i} out of range for dimension {}",
                self.dim
            )));
        }
        Ok(Section1D::new(
            self.pieces.iter().map(|p| (p.a[i], p.b)).collect(),
        ))
    }
}

fn check_strike(strike: f64) -> Result<()> {
    if strike > 0.0 && strike.is_finite() {
        Ok(())
    } else {
        Err(Error::input("strike must be positive and finite"))
    }
}

/// Evaluates `F(x)` with input validation.
pub fn eval_payoff(payoff: &MaxAffinePayoff, x: &[f64]) -> Result<f64> {
    payoff.try_eval(x)
}

/// Convex piecewise-linear function of one variable on `t >= 0`, stored as the
/// pruned upper envelope of its lines: slopes strictly increasing, every piece
/// active on a nondegenerate interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Section1D {
    pieces: Vec<(f64, f64)>,
}

impl Section1D {
    /// Builds the section from `(slope, intercept)` pairs, dropping lines that
    /// are never strictly maximal on `[0, inf)`.
    pub fn new(mut lines: Vec<(f64, f64)>) -> Self {
        assert!(!lines.is_empty(), "section needs at least one line");
        // The line maximal at t = 0 (ties broken towards the larger slope)
        // dominates every line with a smaller slope on t >= 0.
        let (m0, c0) = lines
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
            .unwrap();
        lines.retain(|&(m, _)| m >= m0);
        lines.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        // equal slopes: keep the largest intercept (last after sorting)
        let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(lines.len());
        for l in lines {
            match dedup.last_mut() {
                Some(last) if last.0 == l.0 => *last = l,
                _ => dedup.push(l),
            }
        }
        debug_assert_eq!(dedup[0], (m0, c0));

        let mut hull: Vec<(f64, f64)> = Vec::with_capacity(dedup.len());
        for l in dedup {
            while let Some(&top) = hull.last() {
                let cross_new = intersection(top, l);
                let dominated = if hull.len() >= 2 {
                    let prev = hull[hull.len() - 2];
                    cross_new <= intersection(prev, top)
                } else {
                    cross_new <= 0.0
                };
                if dominated {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(l);
        }
        Section1D { pieces: hull }
    }

    pub fn pieces(&self) -> &[(f64, f64)] {
        &self.pieces
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        self.pieces
            .iter()
            .map(|&(m, c)| m * t + c)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Breakpoints in `(0, inf)` where the active piece changes, increasing.
    pub fn kinks(&self) -> Vec<f64> {
        self.pieces
            .windows(2)
            .map(|w| intersection(w[0], w[1]))
            .collect()
    }

    pub fn max_slope(&self) -> f64 {
        self.pieces.last().map(|p| p.0).unwrap()
    }
}

/// Abscissa where two lines with distinct slopes meet.
fn intersection(l1: (f64, f64), l2: (f64, f64)) -> f64 {
    (l1.1 - l2.1) / (l2.0 - l1.0)
}

/// Subgradient interval `[left derivative, right derivative]` of `f` at `t`.
///
/// At `t = 0` the left end is the smallest slope among the pieces active at 0
/// rather than `-inf`.
pub fn subgradient_1d(f: &Section1D, t: f64) -> Result<(f64, f64)> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::input("subgradient point must be finite and nonnegative"));
    }
    let value = f.eval(t);
    let scale = 1.0 + value.abs() + t * f.pieces.iter().map(|p| p.0.abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale;
    let (lo, hi) = f
        .pieces
        .iter()
        .filter(|&&(m, c)| (m * t + c - value).abs() <= tol)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(m, _)| {
            (lo.min(m), hi.max(m))
        });
    Ok((lo, hi))
}

/// Game option with payoff `F`, constant penalty `Δ` and maturity `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OptionSpec", into = "OptionSpec")]
pub struct GameOption {
    payoff: MaxAffinePayoff,
    penalty: f64,
    maturity: f64,
}

impl GameOption {
    pub fn new(payoff: MaxAffinePayoff, penalty: f64, maturity: f64) -> Result<Self> {
        if !(penalty > 0.0) || !penalty.is_finite() {
            return Err(Error::input("penalty must be positive and finite"));
        }
        if !(maturity > 0.0) || !maturity.is_finite() {
            return Err(Error::input("maturity must be positive and finite"));
        }
        Ok(GameOption { payoff, penalty, maturity })
    }

    /// Builds one of the built-in contracts: `call`, `put` or `spread`.
    pub fn canonical(name: &str, strike: f64, penalty: f64, maturity: f64) -> Result<Self> {
        let payoff = match name {
            "call" => MaxAffinePayoff::call(strike)?,
            "put" => MaxAffinePayoff::put(strike)?,
            "spread" => MaxAffinePayoff::spread(strike)?,
            other => return Err(Error::input(format!("unknown canonical option '{other}'"))),
        };
        GameOption::new(payoff, penalty, maturity)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn payoff(&self) -> &MaxAffinePayoff {
        &self.payoff
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn dim(&self) -> usize {
        self.payoff.dim
    }

    /// Discounted buyer-exercise payoff `Y(t_k) = F(S(t_k)) / S_0(t_k)`.
    pub fn exercise_value(&self, path: &MarketPath, k: usize) -> f64 {
        self.payoff.eval(path.stock(k)) / path.bank(k)
    }

    /// Discounted seller-cancellation payment `X(t_k) = (F(S(t_k)) + Δ) / S_0(t_k)`.
    pub fn cancel_value(&self, path: &MarketPath, k: usize) -> f64 {
        (self.payoff.eval(path.stock(k)) + self.penalty) / path.bank(k)
    }
}

/// JSON layout of an option: `{"dim", "pieces": [{"a", "b"}], "penalty", "maturity"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptionSpec {
    pub dim: usize,
    pub pieces: Vec<AffinePiece>,
    pub penalty: f64,
    pub maturity: f64,
}

impl TryFrom<OptionSpec> for GameOption {
    type Error = Error;

    fn try_from(spec: OptionSpec) -> Result<Self> {
        GameOption::new(
            MaxAffinePayoff::new(spec.dim, spec.pieces)?,
            spec.penalty,
            spec.maturity,
        )
    }
}

impl From<GameOption> for OptionSpec {
    fn from(o: GameOption) -> Self {
        OptionSpec {
            dim: o.payoff.dim,
            pieces: o.payoff.pieces,
            penalty: o.penalty,
            maturity: o.maturity,
        }
    }
}

/// Discounted amount the seller pays when cancelling at grid index `sigma`
/// while the buyer exercises at `tau`: `X(σ)` if `σ < τ`, else `Y(τ)`.
pub fn game_reward(option: &GameOption, path: &MarketPath, sigma: usize, tau: usize) -> Result<f64> {
    let last = path.steps();
    if sigma > last || tau > last {
        return Err(Error::input(format!(
            "stopping indices ({sigma}, {tau}) outside grid 0..={last}"
        )));
    }
    check_dim(option.dim(), path.dim())?;
    Ok(if sigma < tau {
        option.cancel_value(path, sigma)
    } else {
        option.exercise_value(path, tau)
    })
}

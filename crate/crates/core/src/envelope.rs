//! Tangent coefficients and the game variant of the concave envelope.
//!
//! For each coordinate section `F_i` the tangent point `A_i` is where the line
//! from `(0, F(0))` touches `F_i + Δ`; `B_i` is its slope. The envelope is
//!
//! ```text
//! R(0) = F(0)
//! R(x) = F(0) + <B, x>   if |x| < H(x)
//! R(x) = F(x) + Δ        otherwise
//! ```
//!
//! where `H(x)` is the first point along the ray through `x` at which the
//! affine branch reaches `F + Δ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::linear::{dot, feasible_interval, norm2};
use crate::payoff::{GameOption, Section1D};

/// Which formula produced an envelope value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// `x = 0`, value `F(0)`.
    Base,
    /// `F(0) + <B, x>`.
    Affine,
    /// `F(x) + Δ`.
    Penalty,
}

/// Tangent coefficients of an option together with the option itself.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeData {
    a: Vec<f64>,
    b: Vec<f64>,
    base: f64,
    option: GameOption,
}

/// Computes `(A_i, B_i)` for every coordinate.
///
/// On each section the tangency condition `(F_i(t) + Δ - F(0)) / t ∈ ∂F_i(t)`
/// can only first hold at a kink: in the interior of a piece with intercept
/// `c` it reduces to `c = F(0) - Δ`, which then also holds at the piece's left
/// kink, and the piece active at 0 has intercept `F(0)`. At the kink between
/// pieces with intercepts `c_l > c_r` the condition is
/// `c_l >= F(0) - Δ >= c_r`. Since intercepts decrease along the section, the
/// first such kink is found by one scan; if none exists `A_i = ∞` and `B_i` is
/// the largest slope.
pub fn tangent_coefficients(option: &GameOption) -> Result<EnvelopeData> {
    let payoff = option.payoff();
    let base = payoff.at_origin();
    let level = base - option.penalty();
    let mut a = Vec::with_capacity(option.dim());
    let mut b = Vec::with_capacity(option.dim());
    for i in 0..option.dim() {
        let section = payoff.section(i)?;
        let (ai, bi) = section_tangent(&section, base, option.penalty(), level);
        a.push(ai);
        b.push(bi);
    }
    Ok(EnvelopeData { a, b, base, option: option.clone() })
}

fn section_tangent(section: &Section1D, base: f64, penalty: f64, level: f64) -> (f64, f64) {
    let pieces = section.pieces();
    let tol = 1e-12 * (1.0 + level.abs());
    let kinks = section.kinks();
    for (j, &(_, c)) in pieces.iter().enumerate().skip(1) {
        if c <= level + tol {
            let t = kinks[j - 1];
            return (t, (section.eval(t) + penalty - base) / t);
        }
    }
    (f64::INFINITY, section.max_slope())
}

impl EnvelopeData {
    pub fn option(&self) -> &GameOption {
        &self.option
    }

    /// Tangent points; `f64::INFINITY` where no tangent exists.
    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// `F(0)`.
    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// `F(0) + <B, x>`.
    pub fn affine(&self, x: &[f64]) -> f64 {
        self.base + dot(&self.b, x)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        if x.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::input("envelope argument must be finite and nonnegative"));
        }
        Ok(())
    }

    /// `H(x)`: smallest `t >= 0` with `F(0) + <B, t u> >= F(t u) + Δ` for
    /// `u = x / |x|`, or infinity.
    ///
    /// Along the ray every piece `j` contributes the linear constraint
    /// `t (<B,u> - <a_j,u>) + (F(0) - Δ - b_j) >= 0`; their intersection is an
    /// interval whose lower end is `H(x)`.
    pub fn ray_threshold(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        let norm = norm2(x);
        if norm == 0.0 {
            return Err(Error::input("ray threshold is undefined at the origin"));
        }
        Ok(self.threshold_unchecked(x, norm))
    }

    fn threshold_unchecked(&self, x: &[f64], norm: f64) -> f64 {
        let bu = dot(&self.b, x) / norm;
        let shift = self.base - self.option.penalty();
        let constraints = self
            .option
            .payoff()
            .pieces()
            .iter()
            .map(|p| (bu - dot(&p.a, x) / norm, shift - p.b));
        match feasible_interval(constraints, 0.0, f64::INFINITY) {
            Some((lo, _)) => lo,
            None => f64::INFINITY,
        }
    }

    /// Envelope value and the branch that produced it.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, Branch)> {
        self.check_point(x)?;
        Ok(self.evaluate_unchecked(x))
    }

    pub(crate) fn evaluate_unchecked(&self, x: &[f64]) -> (f64, Branch) {
        let norm = norm2(x);
        if norm == 0.0 {
            return (self.base, Branch::Base);
        }
        if norm < self.threshold_unchecked(x, norm) {
            (self.affine(x), Branch::Affine)
        } else {
            (self.option.payoff().eval(x) + self.option.penalty(), Branch::Penalty)
        }
    }

    /// `R(x)`.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.evaluate(x).map(|(v, _)| v)
    }

    /// Whether `x` lies in `D = {Δ + F(x) <= F(0) + <B, x>}`.
    pub fn in_cancel_region(&self, x: &[f64]) -> bool {
        let f = self.option.payoff().eval(x);
        self.option.penalty() + f <= self.affine(x) + self.region_tol(x)
    }

    pub(crate) fn region_tol(&self, x: &[f64]) -> f64 {
        1e-12 * (1.0 + self.base.abs() + self.option.penalty() + dot(&self.b, x).abs())
    }
}

/// Evaluates `R(x)`.
pub fn game_concave_envelope(env: &EnvelopeData, x: &[f64]) -> Result<f64> {
    env.value(x)
}

/// Evaluates `H(x)` for nonzero `x`.
pub fn ray_threshold(env: &EnvelopeData, x: &[f64]) -> Result<f64> {
    env.ray_threshold(x)
}

/// Checks the two structural relations behind the hedge at `x`:
///
/// * r1: `F(x) > F(0) + <x, B>` implies `sum_{A_i < ∞} x_i / A_i > 1`;
/// * r2: `sum_{A_i < ∞} x_i / A_i = 1` implies `F(x) + Δ <= F(0) + <x, B>`.
///
/// Comparisons carry a tolerance of `1e-9 (1 + L |x|_1 + |F(0)| + Δ)`.
pub fn check_hedge_relations(env: &EnvelopeData, x: &[f64]) -> Result<(bool, bool)> {
    env.check_point(x)?;
    let payoff = env.option.payoff();
    let f = payoff.eval(x);
    let affine = env.affine(x);
    let l1: f64 = x.iter().sum();
    let tol = 1e-9 * (1.0 + payoff.lipschitz() * l1 + env.base.abs() + env.option.penalty());
    let ratio: f64 = x
        .iter()
        .zip(&env.a)
        .filter(|(_, a)| a.is_finite())
        .map(|(xi, a)| xi / a)
        .sum();
    let r1 = !(f > affine + tol) || ratio > 1.0;
    let r2 = !((ratio - 1.0).abs() <= 1e-9) || f + env.option.penalty() <= affine + tol;
    Ok((r1, r2))
}

/// Points and segments at which a candidate function is tested.
#[derive(Debug, Clone, Default)]
pub struct SamplingPlan {
    pub points: Vec<Vec<f64>>,
    pub segments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SamplingPlan {
    /// `n` evenly spaced points on `[0, x_max]` and every segment between
    /// pairs of them taken `stride` apart.
    pub fn uniform_1d(x_max: f64, n: usize, stride: usize) -> Self {
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![x_max * i as f64 / (n.max(2) - 1) as f64])
            .collect();
        let stride = stride.max(1);
        let segments = (0..n.saturating_sub(stride))
            .map(|i| (points[i].clone(), points[i + stride].clone()))
            .collect();
        SamplingPlan { points, segments }
    }

    /// Random points in the box `[0, x_max]^dim` and random segments between
    /// them, seeded.
    pub fn random(dim: usize, x_max: f64, points: usize, segments: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(0.0..=x_max)).collect()
        };
        let pts = (0..points).map(|_| draw(&mut rng)).collect();
        let segs = (0..segments).map(|_| (draw(&mut rng), draw(&mut rng))).collect();
        SamplingPlan { points: pts, segments: segs }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundViolation {
    pub x: Vec<f64>,
    pub payoff: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcavityViolation {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `(g(x) + g(y)) / 2 - g((x + y) / 2)`, positive when violated.
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GMembershipReport {
    pub is_member: bool,
    pub bound_violations: Vec<BoundViolation>,
    pub concavity_violations: Vec<ConcavityViolation>,
}

/// Samples per segment used to confirm that `g < F + Δ` along it.
const SEGMENT_SAMPLES: usize = 32;

/// Tests whether `g` behaves like an element of the admissible class on the
/// sampled points: `F <= g <= F + Δ`, and midpoint concavity on every sampled
/// segment along which `g < F + Δ - tol` (a segment is itself a convex set).
pub fn check_g_membership<G>(g: G, option: &GameOption, plan: &SamplingPlan, tol: f64) -> GMembershipReport
where
    G: Fn(&[f64]) -> f64,
{
    let payoff = option.payoff();
    let delta = option.penalty();
    let mut bound_violations = Vec::new();
    for x in &plan.points {
        let f = payoff.eval(x);
        let v = g(x);
        if v < f - tol || v > f + delta + tol {
            bound_violations.push(BoundViolation { x: x.clone(), payoff: f, value: v });
        }
    }
    let mut concavity_violations = Vec::new();
    let lerp = |x: &[f64], y: &[f64], s: f64| -> Vec<f64> {
        x.iter().zip(y).map(|(a, b)| a + s * (b - a)).collect()
    };
    for (x, y) in &plan.segments {
        let below = (0..=SEGMENT_SAMPLES).all(|k| {
            let p = lerp(x, y, k as f64 / SEGMENT_SAMPLES as f64);
            g(&p) < payoff.eval(&p) + delta - tol
        });
        if !below {
            continue;
        }
        let mid = lerp(x, y, 0.5);
        let gap = 0.5 * (g(x) + g(y)) - g(&mid);
        if gap > tol {
            concavity_violations.push(ConcavityViolation { x: x.clone(), y: y.clone(), gap });
        }
    }
    GMembershipReport {
        is_member: bound_violations.is_empty() && concavity_violations.is_empty(),
        bound_violations,
        concavity_violations,
    }
}

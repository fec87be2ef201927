//! Cheapest trivial hedge for the option with discounted payoffs
//! `Y = (1 + (S - 3)^+) / S_0` and `X = 2Y`, started at `s = 4` under a
//! constant rate.
//!
//! A hedge holds `γ` shares and cancels at `σ = inf{t : S(t) = Λ} ∧ T` with
//! `Λ ∈ [3, 4)`, or at one of the constant times `0` and `T`. With full
//! support every continuation of the path is possible, so the hedge must
//! satisfy, with `c = Ξ - 4γ`,
//!
//! ```text
//! c e^{rt} + γ x >= x - 2         for all x > Λ, t <= T   (buyer exercises first)
//! c e^{rt} + γ Λ >= 2 (Λ - 2)     for all t <= T          (seller cancels at Λ)
//! ```
//!
//! The search runs over a `(γ, Λ)` grid, refines around the best cell, and
//! finds the least feasible `Ξ` in each cell by bisection against sampled
//! constraints.

use serde::Serialize;

use crate::error::{Error, Result};

const INITIAL_STOCK: f64 = 4.0;
const GAMMA_MAX: f64 = 3.0;
/// Exercise prices sampled above the barrier, as offsets from it.
const PRICE_SAMPLES: usize = 32;
const PRICE_SPAN: f64 = 1e3;
const TIME_SAMPLES: usize = 17;
const BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StaticHedgeKind {
    /// Cancel when the stock first hits the barrier.
    Barrier,
    /// Cancel at time 0.
    CancelAtOnce,
    /// Never cancel.
    HoldToMaturity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StaticHedge {
    pub capital: f64,
    pub gamma: f64,
    /// Barrier `Λ`; `NaN` for the constant cancellation times.
    pub lambda: f64,
    pub kind: StaticHedgeKind,
    pub cells_searched: usize,
}

struct Sampler {
    times: Vec<f64>,
    rate: f64,
}

impl Sampler {
    fn new(rate: f64, maturity: f64) -> Self {
        let times = (0..TIME_SAMPLES)
            .map(|k| maturity * k as f64 / (TIME_SAMPLES - 1) as f64)
            .collect();
        Sampler { times, rate }
    }

    /// Prices from `lo` upwards, geometrically spaced offsets including 0.
    fn prices(lo: f64) -> impl Iterator<Item = f64> {
        std::iter::once(lo).chain((0..PRICE_SAMPLES).map(move |k| {
            lo + PRICE_SPAN.powf(k as f64 / (PRICE_SAMPLES - 1) as f64) - 1.0 + 1e-9
        }))
    }

    fn barrier_feasible(&self, capital: f64, gamma: f64, lambda: f64) -> bool {
        let c = capital - INITIAL_STOCK * gamma;
        self.times.iter().all(|&t| {
            let cash = c * (self.rate * t).exp();
            cash + gamma * lambda >= 2.0 * (lambda - 2.0)
                && Self::prices(lambda).all(|x| cash + gamma * x >= x - 2.0)
        })
    }

    fn hold_feasible(&self, capital: f64, gamma: f64) -> bool {
        let c = capital - INITIAL_STOCK * gamma;
        self.times.iter().all(|&t| {
            let cash = c * (self.rate * t).exp();
            Self::prices(0.0).all(|x| cash + gamma * x >= 1.0 + (x - 3.0).max(0.0))
        })
    }

    /// Least capital in `[lo, hi]` passing `feasible`, if `hi` passes.
    fn least_capital(lo: f64, hi: f64, feasible: impl Fn(f64) -> bool) -> Option<f64> {
        if !feasible(hi) {
            return None;
        }
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-13 * hi.abs().max(1.0) {
                break;
            }
        }
        Some(hi)
    }
}

/// Searches for the cheapest trivial hedge at rate `rate` and maturity
/// `maturity`.
pub fn static_hedge_search(rate: f64, maturity: f64) -> Result<StaticHedge> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::input("rate must be finite and nonnegative"));
    }
    if !(maturity > 0.0) || !maturity.is_finite() {
        return Err(Error::input("maturity must be positive"));
    }
    let sampler = Sampler::new(rate, maturity);
    // capital bracket: nothing is cheaper than -1 and 4γ + 2 always suffices
    let cap_hi = |gamma: f64| INITIAL_STOCK * gamma + 2.0;
    let mut cells = 0;
    let mut best: Option<StaticHedge> = None;
    let mut consider = |h: StaticHedge| {
        if best.map(|b| h.capital < b.capital).unwrap_or(true) {
            best = Some(h);
        }
    };

    let eval_cell = |gamma: f64, lambda: f64, cells: &mut usize| -> Option<f64> {
        *cells += 1;
        Sampler::least_capital(-1.0, cap_hi(gamma), |v| sampler.barrier_feasible(v, gamma, lambda))
    };

    // coarse grid, then successive refinement around the incumbent
    let (mut g_lo, mut g_hi, mut l_lo, mut l_hi) = (1.0, GAMMA_MAX, 3.0, 4.0);
    let mut incumbent: Option<(f64, f64, f64)> = None;
    for _round in 0..3 {
        const STEPS: usize = 16;
        for gi in 0..=STEPS {
            let gamma = g_lo + (g_hi - g_lo) * gi as f64 / STEPS as f64;
            // Λ ranges over [3, 4); the right end is excluded
            for li in 0..STEPS {
                let lambda = l_lo + (l_hi - l_lo) * li as f64 / STEPS as f64;
                if let Some(v) = eval_cell(gamma, lambda, &mut cells) {
                    if incumbent.map(|(b, _, _)| v < b).unwrap_or(true) {
                        incumbent = Some((v, gamma, lambda));
                    }
                }
            }
        }
        let Some((_, g, l)) = incumbent else { break };
        let g_step = (g_hi - g_lo) / STEPS as f64;
        let l_step = (l_hi - l_lo) / STEPS as f64;
        g_lo = (g - g_step).max(1.0);
        g_hi = (g + g_step).min(GAMMA_MAX);
        l_lo = (l - l_step).max(3.0);
        l_hi = (l + l_step).min(4.0);
    }
    if let Some((v, gamma, lambda)) = incumbent {
        consider(StaticHedge { capital: v, gamma, lambda, kind: StaticHedgeKind::Barrier, cells_searched: 0 });
    }

    // cancel at once: pay X(0) = 2 (1 + (4 - 3)) = 4 with no position
    consider(StaticHedge {
        capital: 2.0 * (1.0 + (INITIAL_STOCK - 3.0).max(0.0)),
        gamma: 0.0,
        lambda: f64::NAN,
        kind: StaticHedgeKind::CancelAtOnce,
        cells_searched: 0,
    });

    // never cancel: a position of γ >= 1 shares is needed for large prices
    let mut hold_best: Option<(f64, f64)> = None;
    for gi in 0..=32 {
        let gamma = 1.0 + (GAMMA_MAX - 1.0) * gi as f64 / 32.0;
        cells += 1;
        if let Some(v) = Sampler::least_capital(-1.0, cap_hi(gamma) + 1.0, |v| sampler.hold_feasible(v, gamma)) {
            if hold_best.map(|(b, _)| v < b).unwrap_or(true) {
                hold_best = Some((v, gamma));
            }
        }
    }
    if let Some((v, gamma)) = hold_best {
        consider(StaticHedge {
            capital: v,
            gamma,
            lambda: f64::NAN,
            kind: StaticHedgeKind::HoldToMaturity,
            cells_searched: 0,
        });
    }

    let mut best = best.ok_or_else(|| Error::numerical("no feasible static hedge on the search grid"))?;
    best.cells_searched = cells;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_closed_form() {
        for (r, t) in [(0.0, 1.0), (0.05, 1.0), (0.1, 2.0)] {
            let h = static_hedge_search(r, t).unwrap();
            let expected = 4.0 - (-r * t).exp();
            assert!((h.capital - expected).abs() < 1e-6, "r={r} T={t}: {h:?}");
            assert_eq!(h.kind, StaticHedgeKind::Barrier);
            assert!((h.gamma - 1.0).abs() < 1e-9);
            assert!((h.lambda - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn barrier_constraints_at_optimum() {
        let s = Sampler::new(0.05, 1.0);
        let v = 4.0 - (-0.05_f64).exp();
        assert!(s.barrier_feasible(v + 1e-12, 1.0, 3.0));
        assert!(!s.barrier_feasible(v - 1e-6, 1.0, 3.0));
        // fewer than one share cannot cover large exercise prices
        assert!(!s.barrier_feasible(10.0, 0.9, 3.0));
    }

    #[test]
    fn holding_to_maturity_costs_more() {
        let s = Sampler::new(0.05, 1.0);
        let v = Sampler::least_capital(-1.0, 10.0, |v| s.hold_feasible(v, 1.0)).unwrap();
        assert!((v - 5.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_negative_rate() {
        assert!(static_hedge_search(-0.01, 1.0).is_err());
        assert!(static_hedge_search(0.01, 0.0).is_err());
    }
}

//! Brute-force minimal element of the admissible class in one dimension.
//!
//! An admissible `g` satisfies `F <= g <= F + Δ` and is concave on every
//! interval where `g < F + Δ`. Because `F` is convex, a minimal `g` can only
//! sit strictly below `F + Δ` on an interval that starts at the origin, which
//! leaves two shapes:
//!
//! * concave on `[0, b)` and equal to `F + Δ` from `b` on, for some grid point
//!   `b`: the smallest such function is the upper concave hull of
//!   `{(x_i, F(x_i)) : i < b}` and `(x_b, F(x_b) + Δ)`;
//! * concave on the whole half line: the concave majorant of `F`, which grows
//!   with the largest slope of `F` at infinity.
//!
//! Every feasible candidate is admissible, so the pointwise minimum over the
//! feasible ones is the minimal element on the grid. The search is `O(n^2)`.
//! The grid should extend past the last kink of `F`.

use crate::error::{Error, Result};
use crate::payoff::GameOption;

/// Horizontal distance of the point that stands in for the asymptote when
/// building the global concave majorant, relative to the grid's end.
const FAR_FACTOR: f64 = 1e7;

/// `n` evenly spaced points on `[0, x_max]`.
pub fn uniform_grid(x_max: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| x_max * i as f64 / (n - 1) as f64).collect()
}

/// Minimal admissible function on `grid` (increasing, starting at 0) for a
/// one-asset option.
pub fn minimal_envelope_oracle_1d(option: &GameOption, grid: &[f64]) -> Result<Vec<f64>> {
    if option.dim() != 1 {
        return Err(Error::input("the envelope oracle is one-dimensional"));
    }
    if grid.len() < 2 || grid[0] != 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::input("oracle grid must start at 0 and increase strictly"));
    }
    let payoff = option.payoff();
    let delta = option.penalty();
    let n = grid.len();
    let f: Vec<f64> = grid.iter().map(|&x| payoff.eval(&[x])).collect();
    let cap: Vec<f64> = f.iter().map(|v| v + delta).collect();
    let tol = |i: usize| 1e-10 * (1.0 + cap[i].abs());

    let mut best = cap.clone();
    // upper hull of (x_i, F(x_i)) for i < b, grown one point at a time
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(n + 1);
    let mut candidate: Vec<(f64, f64)> = Vec::with_capacity(n + 1);
    let mut values = vec![0.0; n];
    for b in 1..n {
        push_upper(&mut hull, (grid[b - 1], f[b - 1]));
        candidate.clear();
        candidate.extend_from_slice(&hull);
        push_upper(&mut candidate, (grid[b], cap[b]));
        eval_chain(&candidate, &grid[..=b], &mut values[..=b]);
        if (0..=b).all(|i| values[i] <= cap[i] + tol(i)) {
            for i in 0..b {
                best[i] = best[i].min(values[i]);
            }
        }
    }

    push_upper(&mut hull, (grid[n - 1], f[n - 1]));
    let max_slope = payoff.section(0)?.max_slope();
    let far = FAR_FACTOR * (1.0 + grid[n - 1]);
    push_upper(&mut hull, (grid[n - 1] + far, f[n - 1] + max_slope * far));
    eval_chain(&hull, grid, &mut values);
    if (0..n).all(|i| values[i] <= cap[i] + tol(i)) {
        for i in 0..n {
            best[i] = best[i].min(values[i]);
        }
    }
    Ok(best)
}

/// Monotone-chain step for the upper hull of points with increasing `x`.
fn push_upper(hull: &mut Vec<(f64, f64)>, p: (f64, f64)) {
    while hull.len() >= 2 {
        let (o, a) = (hull[hull.len() - 2], hull[hull.len() - 1]);
        let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
        if cross >= 0.0 {
            hull.pop();
        } else {
            break;
        }
    }
    hull.push(p);
}

/// Evaluates the piecewise-linear chain at increasing abscissae within its span.
fn eval_chain(chain: &[(f64, f64)], xs: &[f64], out: &mut [f64]) {
    let mut seg = 0;
    for (x, o) in xs.iter().zip(out.iter_mut()) {
        while seg + 2 < chain.len() && chain[seg + 1].0 < *x {
            seg += 1;
        }
        if chain.len() == 1 {
            *o = chain[0].1;
            continue;
        }
        let (p, q) = (chain[seg], chain[seg + 1]);
        let w = (x - p.0) / (q.0 - p.0);
        *o = p.1 + w * (q.1 - p.1);
    }
}

//! Interval arithmetic for systems of one-variable linear inequalities.

/// Relative slack used when the lower and upper ends of a feasible interval
/// cross only through rounding (tangential touches).
pub(crate) const TOUCH_TOL: f64 = 1e-9;

/// Feasible set of `{t in [lo, hi] : slope_j * t + offset_j >= 0 for all j}`.
///
/// Returns `None` when the system is infeasible on `[lo, hi]`. Intervals whose
/// ends cross by less than `TOUCH_TOL` (relative) are treated as a single
/// touching point.
pub(crate) fn feasible_interval<I>(constraints: I, lo: f64, hi: f64) -> Option<(f64, f64)>
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let mut lower = lo;
    let mut upper = hi;
    for (slope, offset) in constraints {
        if slope > 0.0 {
            lower = lower.max(-offset / slope);
        } else if slope < 0.0 {
            upper = upper.min(-offset / slope);
        } else if offset < -TOUCH_TOL * (1.0 + offset.abs()) {
            return None;
        }
    }
    let slack = TOUCH_TOL * (1.0 + upper.abs().min(lower.abs()));
    if lower <= upper + slack {
        Some((lower, upper.max(lower)))
    } else {
        None
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_from_both_sides() {
        // t >= 2 and t <= 5
        let iv = feasible_interval([(1.0, -2.0), (-1.0, 5.0)], 0.0, f64::INFINITY);
        assert_eq!(iv, Some((2.0, 5.0)));
    }

    #[test]
    fn flat_infeasible_constraint() {
        assert_eq!(feasible_interval([(0.0, -1.0)], 0.0, 1.0), None);
        assert_eq!(feasible_interval([(0.0, 0.0)], 0.0, 1.0), Some((0.0, 1.0)));
    }

    #[test]
    fn rounding_touch_is_feasible() {
        // 0.4 t >= 40 and 0.6 t <= 60 meet at t = 100 up to rounding
        let iv = feasible_interval([(0.4, -40.0), (-0.6, 60.0)], 0.0, f64::INFINITY).unwrap();
        assert!((iv.0 - 100.0).abs() < 1e-9);
    }

    #[test]
    fn crossing_bounds_are_infeasible() {
        assert_eq!(feasible_interval([(1.0, -3.0), (-1.0, 2.0)], 0.0, 10.0), None);
    }
}

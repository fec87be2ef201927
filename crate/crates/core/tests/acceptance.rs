//! Acceptance gate: one PASS/FAIL line per criterion, with the tolerance and
//! time budget each one is held to. Exits nonzero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gamehedge::cps::{self, AtomicIncrementDistribution};
use gamehedge::envelope::check_hedge_relations;
use gamehedge::hedge::{static_hedge_search, VerifyOptions};
use gamehedge::market::{counterexample_paths, simulate};
use gamehedge::oracle::{minimal_envelope_oracle_1d, uniform_grid};
use gamehedge::stopping::{build_increment_basis, build_tree, dual_lower_bound, Control, ControlFamily};
use gamehedge::{build_trivial_hedge, tangent_coefficients, Execution, GameOption, MarketModel};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

type Check = fn() -> Result<Outcome, String>;

fn canonical(name: &str, k: f64, delta: f64) -> GameOption {
    GameOption::canonical(name, k, delta, 1.0).unwrap()
}

fn envelope_value(o: &GameOption, x: &[f64]) -> f64 {
    tangent_coefficients(o).unwrap().value(x).unwrap()
}

fn closed_form_1d() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k: f64 = rng.random_range(1.0..200.0);
        let delta: f64 = rng.random_range(0.0..2.0 * k);
        let x: f64 = rng.random_range(0.0..3.0 * k);
        let call = if delta > k {
            x
        } else if x < k {
            delta * x / k
        } else {
            x + delta - k
        };
        let put = if delta > k {
            k
        } else if x < k {
            k - (k - delta) / k * x
        } else {
            delta
        };
        worst = worst.max((envelope_value(&canonical("call", k, delta), &[x]) - call).abs());
        worst = worst.max((envelope_value(&canonical("put", k, delta), &[x]) - put).abs());
    }
    Ok(outcome(worst <= 1e-10, format!("max error {worst:.2e} <= 1e-10 over 1000 draws")))
}

fn spread_2d() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k: f64 = rng.random_range(0.5..50.0);
        let delta: f64 = rng.random_range(0.0..2.0 * k);
        let top = 3.0 * k.max(delta);
        let (x1, x2): (f64, f64) = (rng.random_range(0.0..top), rng.random_range(0.0..top));
        let f = (x1 - x2 + k).max(0.0);
        let exact = if delta > k {
            if x1 >= delta - k && x2 >= delta {
                f + delta
            } else {
                x1 + k
            }
        } else if x2 < k {
            x1 + k - (k - delta) / k * x2
        } else {
            f + delta
        };
        worst = worst.max((envelope_value(&canonical("spread", k, delta), &[x1, x2]) - exact).abs());
    }
    Ok(outcome(worst <= 1e-10, format!("max error {worst:.2e} <= 1e-10 over 1000 draws")))
}

fn oracle_agreement() -> Result<Outcome, String> {
    let mut worst_ratio: f64 = 0.0;
    for name in ["call", "put"] {
        for (k, delta) in [(100.0, 40.0), (100.0, 150.0), (50.0, 10.0)] {
            let o = canonical(name, k, delta);
            let grid = uniform_grid(3.0 * k, 1200);
            let h = grid[1];
            let lip = o.payoff().lipschitz();
            let g = minimal_envelope_oracle_1d(&o, &grid).map_err(|e| e.to_string())?;
            let env = tangent_coefficients(&o).map_err(|e| e.to_string())?;
            for (x, v) in grid.iter().zip(&g) {
                let r = env.value(&[*x]).map_err(|e| e.to_string())?;
                worst_ratio = worst_ratio.max((r - v).abs() / (5.0 * h * lip));
            }
        }
    }
    Ok(outcome(
        worst_ratio <= 1.0,
        format!("max |R - oracle| / (5 h L) = {worst_ratio:.3} <= 1 on 6 options"),
    ))
}

fn perfect_hedge() -> Result<Outcome, String> {
    let o = canonical("call", 100.0, 40.0);
    let env = tangent_coefficients(&o).map_err(|e| e.to_string())?;
    let h = build_trivial_hedge(&o, &env, &[50.0]).map_err(|e| e.to_string())?;
    let short = h.clone().with_capital_offset(-0.01 * h.initial_capital());
    let model = MarketModel::gbm_1d(0.03, 0.4, 0.03).map_err(|e| e.to_string())?;
    let opts = VerifyOptions::new(0.01);
    let (mut violations, mut short_violations, mut checked) = (0, 0, 0);
    // batches keep memory flat; every batch has its own seed
    for batch in 0..10u64 {
        let paths = simulate(&model, &[50.0], 500, 1.0, 4000 + batch, 1000).map_err(|e| e.to_string())?;
        let r = gamehedge::hedge::verify_hedge(&h, &o, &paths, &opts).map_err(|e| e.to_string())?;
        violations += r.violations.len();
        checked += r.paths_checked;
        let r = gamehedge::hedge::verify_hedge(&short, &o, &paths, &opts).map_err(|e| e.to_string())?;
        short_violations += r.violations.len();
    }
    Ok(outcome(
        violations == 0 && short_violations > 0 && checked == 10_000,
        format!(
            "{violations} violations on {checked} paths at tol 1e-9(1+R); {short_violations} with capital -1%"
        ),
    ))
}

fn dual_bound() -> Result<Outcome, String> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, k, delta, s) in [("call", 100.0, 40.0, 50.0), ("put", 100.0, 150.0, 80.0)] {
        let o = canonical(name, k, delta);
        let r = dual_lower_bound(&o, &[s], 2000, &ControlFamily::default(), 40).map_err(|e| e.to_string())?;
        ok &= r.fraction >= 0.98 && r.value <= r.envelope_value + r.allowance;
        parts.push(format!(
            "{name}: V={:.4} R={} fraction {:.4} >= 0.98, c={:.3}, V <= R+{:.1}",
            r.value, r.envelope_value, r.fraction, r.control, r.allowance
        ));
    }
    Ok(outcome(ok, parts.join("; ")))
}

fn esscher_kernel() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut accepted, mut worst, mut min_prob) = (0, 0.0f64, f64::INFINITY);
    while accepted < 1000 {
        let d = rng.random_range(1..=3usize);
        let k = rng.random_range(d + 1..=6usize);
        let atoms: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs = raw.iter().map(|p| p / total).collect();
        let Ok(dist) = AtomicIncrementDistribution::new(atoms, probs) else { continue };
        let r = cps::esscher_theta(&dist).map_err(|e| e.to_string())?;
        let sum: f64 = r.new_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Ok(outcome(false, format!("tilted probabilities sum to {sum}")));
        }
        worst = worst.max(r.residual);
        min_prob = r.new_probs.iter().copied().fold(min_prob, f64::min);
        accepted += 1;
    }
    let hand = AtomicIncrementDistribution::new(vec![vec![1.0], vec![-1.0]], vec![0.9, 0.1]).map_err(|e| e.to_string())?;
    let theta = cps::esscher_theta(&hand).map_err(|e| e.to_string())?.theta[0];
    let hand_err = (theta + 3f64.ln()).abs();
    Ok(outcome(
        worst <= 1e-10 && min_prob > 0.0 && hand_err <= 1e-10,
        format!("max residual {worst:.2e} <= 1e-10, min weight {min_prob:.2e} > 0, |θ + ln 3| = {hand_err:.1e}"),
    ))
}

fn band_pipeline() -> Result<Outcome, String> {
    let epsilon = 0.05;
    let basis = build_increment_basis(1).map_err(|e| e.to_string())?;
    let model = MarketModel::gbm_1d(0.01, 0.03, 0.01).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    // (tree depth, control, path steps per level)
    for (n, c, q) in [(4, 0.03, 1), (4, 0.03, 2), (5, 0.03, 1)] {
        let tree = build_tree(&basis, &[100.0], n, &Control::Constant(c), 1.0).map_err(|e| e.to_string())?;
        let step = cps::max_relative_step(&tree);
        let paths = simulate(&model, &[100.0], n * q, 1.0, 7 + n as u64, 1000).map_err(|e| e.to_string())?;
        let out = cps::cps_pipeline(&paths, &tree, epsilon, None, Execution::Parallel).map_err(|e| e.to_string())?;
        ok &= step < epsilon / 3.0 && out.band.ok && out.band.unfrozen_paths > 0;
        parts.push(format!(
            "N={n} q={q} step {step:.4}: {} violations, {} unfrozen",
            out.band.violations.len(),
            out.band.unfrozen_paths
        ));
    }
    Ok(outcome(ok, format!("ε=0.05, 1000 paths each; {}", parts.join("; "))))
}

fn static_search() -> Result<Outcome, String> {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in [0.0, 0.05, 0.1] {
        let h = static_hedge_search(r, 1.0).map_err(|e| e.to_string())?;
        let err = (h.capital - (4.0 - (-r).exp())).abs();
        ok &= err <= 1e-6 && (h.gamma - 1.0).abs() <= 1e-9 && (h.lambda - 3.0).abs() <= 1e-9;
        parts.push(format!("r={r}: V={:.8} err {err:.1e}, γ={}, Λ={}", h.capital, h.gamma, h.lambda));
    }
    Ok(outcome(ok, parts.join("; ")))
}

fn unbounded_rate() -> Result<Outcome, String> {
    let paths = counterexample_paths(1000, 1.0, 9, 1000).map_err(|e| e.to_string())?;
    let mut worst: f64 = f64::NEG_INFINITY;
    for p in &paths {
        for k in 0..=p.steps() {
            let y = (0.5 - p.stock(k)[0]).max(0.0) / p.bank(k);
            worst = worst.max(y);
        }
    }
    Ok(outcome(worst <= 0.25 + 1e-12, format!("max Y = {worst:.6} <= 0.25 + 1e-12 over 1000 paths")))
}

fn relations() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cases = [
        ("call", 100.0, 150.0),
        ("call", 100.0, 40.0),
        ("put", 100.0, 150.0),
        ("put", 100.0, 40.0),
        ("spread", 2.0, 3.0),
        ("spread", 2.0, 1.0),
    ];
    let mut failures = 0;
    for (name, k, delta) in cases {
        let o = canonical(name, k, delta);
        let env = tangent_coefficients(&o).map_err(|e| e.to_string())?;
        let top = 3.0 * f64::max(k, delta);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..o.dim()).map(|_| rng.random_range(0.0..top)).collect();
            if check_hedge_relations(&env, &x).map_err(|e| e.to_string())? != (true, true) {
                failures += 1;
            }
        }
    }
    Ok(outcome(failures == 0, format!("{failures} failures over 6 x 10^4 points")))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check, Option<u64>); 10] = [
        ("closed-form envelopes, one asset", closed_form_1d, Some(1)),
        ("two-asset spread envelope", spread_2d, None),
        ("oracle equivalence", oracle_agreement, Some(5)),
        ("perfect hedging", perfect_hedge, Some(30)),
        ("dual lower bound", dual_bound, Some(60)),
        ("Esscher kernel", esscher_kernel, Some(5)),
        ("band pipeline", band_pipeline, None),
        ("static hedge for a non-constant penalty", static_search, Some(5)),
        ("unbounded rate bound", unbounded_rate, None),
        ("hedge relations", relations, None),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = budget.map(|b| elapsed <= Duration::from_secs(b)).unwrap_or(true);
        let (ok, detail) = match result {
            Ok(o) => (o.ok && in_time, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let timing = match budget {
            Some(b) => format!("{:.2}s <= {b}s", elapsed.as_secs_f64()),
            None => format!("{:.2}s", elapsed.as_secs_f64()),
        };
        println!("{} {:>2} {name}: {detail} [{timing}]", if ok { "PASS" } else { "FAIL" }, i + 1);
        if !ok {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

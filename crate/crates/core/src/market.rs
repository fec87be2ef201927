//! Seeded market scenarios: stock paths, bank account and discounted prices.
//!
//! Model families are restricted to ones known to have conditional full
//! support (nondegenerate GBM and exponentials of fractional Brownian
//! motion); the property itself is a statement about the continuous-time law
//! and is not tested on samples. Arbitrary scenario sets can be brought in
//! through CSV.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;

/// Largest grid supported by the exact fBM sampler.
pub const MAX_FBM_STEPS: usize = 1 << 12;

/// One discretized scenario on `[0, T]`.
///
/// Stock and discounted values are stored row-major, `dim` entries per grid
/// point. `rate[k]` is the short rate on `[t_k, t_{k+1})` and the bank account
/// integrates it with the left-endpoint rule.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    grid: Vec<f64>,
    dim: usize,
    stock: Vec<f64>,
    bank: Vec<f64>,
    rate: Vec<f64>,
    discounted: Vec<f64>,
    rate_bound: f64,
}

impl MarketPath {
    /// Number of steps `N`; grid indices run over `0..=N`.
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn time(&self, k: usize) -> f64 {
        self.grid[k]
    }

    pub fn maturity(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn stock(&self, k: usize) -> &[f64] {
        &self.stock[k * self.dim..(k + 1) * self.dim]
    }

    pub fn discounted(&self, k: usize) -> &[f64] {
        &self.discounted[k * self.dim..(k + 1) * self.dim]
    }

    pub fn bank(&self, k: usize) -> f64 {
        self.bank[k]
    }

    /// Short rate on `[t_k, t_{k+1})`, `k < N`.
    pub fn rate(&self, k: usize) -> f64 {
        self.rate[k]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rate
    }

    /// Uniform bound on the short rate; infinite for the unbounded-rate
    /// counterexample scenario.
    pub fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    pub fn has_unbounded_rate(&self) -> bool {
        self.rate_bound.is_infinite()
    }

    pub fn initial_stock(&self) -> &[f64] {
        self.stock(0)
    }

    /// Bank account at `t_k + frac * (t_{k+1} - t_k)`, exact for the
    /// piecewise-constant rate.
    pub fn bank_within(&self, k: usize, frac: f64) -> f64 {
        if frac == 0.0 || k == self.steps() {
            return self.bank[k];
        }
        let dt = self.grid[k + 1] - self.grid[k];
        self.bank[k] * (self.rate[k] * frac * dt).exp()
    }

    pub fn into_builder(self) -> PathBuilder {
        PathBuilder {
            grid: self.grid,
            dim: self.dim,
            stock: self.stock,
            bank: self.bank,
            rate: self.rate,
            rate_bound: Some(self.rate_bound),
        }
    }
}

/// A path before discounting.
#[derive(Debug, Clone)]
pub struct PathBuilder {
    pub grid: Vec<f64>,
    pub dim: usize,
    pub stock: Vec<f64>,
    pub bank: Vec<f64>,
    pub rate: Vec<f64>,
    /// Defaults to the largest observed rate.
    pub rate_bound: Option<f64>,
}

impl PathBuilder {
    pub fn new(grid: Vec<f64>, dim: usize, stock: Vec<f64>, bank: Vec<f64>, rate: Vec<f64>) -> Self {
        PathBuilder { grid, dim, stock, bank, rate, rate_bound: None }
    }

    pub fn with_rate_bound(mut self, bound: f64) -> Self {
        self.rate_bound = Some(bound);
        self
    }

    /// Validates the path and fills the discounted prices `S / S_0`.
    pub fn discount(self) -> Result<MarketPath> {
        discount(self)
    }
}

/// Validates a path and computes its discounted stock prices.
pub fn discount(p: PathBuilder) -> Result<MarketPath> {
    let n_points = p.grid.len();
    if n_points < 2 {
        return Err(Error::input("a path needs at least two grid points"));
    }
    if p.dim == 0 {
        return Err(Error::input("path dimension must be positive"));
    }
    check_dim(n_points * p.dim, p.stock.len())?;
    check_dim(n_points, p.bank.len())?;
    check_dim(n_points - 1, p.rate.len())?;
    if p.grid[0] != 0.0 || p.grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::input("grid must start at 0 and be strictly increasing"));
    }
    if p.bank.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
        return Err(Error::input("bank account must be positive"));
    }
    if (p.bank[0] - 1.0).abs() > 1e-12 {
        return Err(Error::input("bank account must start at 1"));
    }
    if p.bank.windows(2).any(|w| w[1] < w[0] * (1.0 - 1e-12)) {
        return Err(Error::input("bank account must be nondecreasing (nonnegative rates)"));
    }
    if p.rate.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::input("short rates must be nonnegative"));
    }
    if p.stock.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::input("stock prices must be strictly positive"));
    }
    let observed = p.rate.iter().copied().fold(0.0, f64::max);
    let rate_bound = p.rate_bound.unwrap_or(observed);
    if observed > rate_bound * (1.0 + 1e-12) {
        return Err(Error::input(format!(
            "short rate {observed} exceeds its bound {rate_bound}"
        )));
    }
    let discounted = p
        .stock
        .chunks(p.dim)
        .zip(&p.bank)
        .flat_map(|(row, b)| row.iter().map(move |s| s / b))
        .collect();
    Ok(MarketPath {
        grid: p.grid,
        dim: p.dim,
        stock: p.stock,
        bank: p.bank,
        rate: p.rate,
        discounted,
        rate_bound,
    })
}

/// Stock dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    /// `dS_i = S_i (mu_i dt + sum_j vol_ij dW_j)`, simulated with the exact
    /// log-Euler step.
    Gbm { drift: Vec<f64>, volatility: Vec<Vec<f64>> },
    /// `S_i(t) = s_i exp(mu_i t + vol_i B^H_i(t) - vol_i^2 t^{2H} / 2)` with
    /// independent fractional Brownian motions of Hurst index `H`.
    FbmExponential { drift: Vec<f64>, volatility: Vec<f64>, hurst: f64 },
}

/// Short-rate dynamics; every variant is bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RateModel {
    Constant { rate: f64 },
    /// Euler-stepped mean reversion clamped to `[0, bound]`.
    MeanReverting { initial: f64, mean: f64, speed: f64, volatility: f64, bound: f64 },
}

impl RateModel {
    pub fn bound(&self) -> f64 {
        match self {
            RateModel::Constant { rate } => *rate,
            RateModel::MeanReverting { bound, .. } => *bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub model: ModelKind,
    pub rate: RateModel,
}

impl MarketModel {
    pub fn gbm(drift: Vec<f64>, volatility: Vec<Vec<f64>>, rate: RateModel) -> Result<Self> {
        let m = MarketModel { model: ModelKind::Gbm { drift, volatility }, rate };
        m.validate()?;
        Ok(m)
    }

    /// One-asset GBM with a constant rate.
    pub fn gbm_1d(drift: f64, volatility: f64, rate: f64) -> Result<Self> {
        Self::gbm(vec![drift], vec![vec![volatility]], RateModel::Constant { rate })
    }

    pub fn fbm(drift: Vec<f64>, volatility: Vec<f64>, hurst: f64, rate: RateModel) -> Result<Self> {
        let m = MarketModel { model: ModelKind::FbmExponential { drift, volatility, hurst }, rate };
        m.validate()?;
        Ok(m)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MarketModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            ModelKind::Gbm { drift, .. } | ModelKind::FbmExponential { drift, .. } => drift.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::input("market needs at least one asset"));
        }
        match &self.model {
            ModelKind::Gbm { drift, volatility } => {
                check_dim(d, volatility.len())?;
                for row in volatility {
                    check_dim(d, row.len())?;
                }
                if drift.iter().chain(volatility.iter().flatten()).any(|v| !v.is_finite()) {
                    return Err(Error::input("GBM coefficients must be finite"));
                }
            }
            ModelKind::FbmExponential { drift, volatility, hurst } => {
                check_dim(d, volatility.len())?;
                if !(*hurst > 0.0 && *hurst < 1.0) {
                    return Err(Error::input("Hurst index must lie in (0, 1)"));
                }
                if drift.iter().chain(volatility).any(|v| !v.is_finite()) {
                    return Err(Error::input("fBM coefficients must be finite"));
                }
            }
        }
        match &self.rate {
            RateModel::Constant { rate } if !(*rate >= 0.0) || !rate.is_finite() => {
                Err(Error::input("constant rate must be finite and nonnegative"))
            }
            RateModel::MeanReverting { initial, mean, speed, volatility, bound }
                if !(*bound >= 0.0)
                    || !bound.is_finite()
                    || !(0.0..=*bound).contains(initial)
                    || !mean.is_finite()
                    || !speed.is_finite()
                    || !volatility.is_finite() =>
            {
                Err(Error::input("mean-reverting rate needs a finite bound with 0 <= initial <= bound"))
            }
            _ => Ok(()),
        }
    }

    /// Whether the stock model belongs to a family with conditional full
    /// support: full-rank GBM or exponential fBM with nonzero volatilities.
    ///
    /// Degenerate models (e.g. zero volatility) can still be simulated.
    pub fn has_full_support(&self) -> bool {
        match &self.model {
            ModelKind::Gbm { volatility, .. } => {
                let d = volatility.len();
                let m = DMatrix::from_fn(d, d, |i, j| volatility[i][j]);
                m.rank(1e-12) == d
            }
            ModelKind::FbmExponential { volatility, .. } => volatility.iter().all(|v| *v != 0.0),
        }
    }
}

/// Per-path random stream: the ChaCha stream id is the path index, so paths
/// do not depend on generation order or thread count.
fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Simulates `count` paths on a uniform grid of `steps` intervals over
/// `[0, maturity]`.
pub fn simulate(
    model: &MarketModel,
    s: &[f64],
    steps: usize,
    maturity: f64,
    seed: u64,
    count: usize,
) -> Result<Vec<MarketPath>> {
    simulate_with(model, s, steps, maturity, seed, count, Execution::default())
}

pub fn simulate_with(
    model: &MarketModel,
    s: &[f64],
    steps: usize,
    maturity: f64,
    seed: u64,
    count: usize,
    exec: Execution,
) -> Result<Vec<MarketPath>> {
    model.validate()?;
    let d = model.dim();
    check_dim(d, s.len())?;
    if steps == 0 || count == 0 {
        return Err(Error::input("steps and path count must be positive"));
    }
    if !(maturity > 0.0) || !maturity.is_finite() {
        return Err(Error::input("maturity must be positive"));
    }
    if s.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::input("initial stock must be strictly positive"));
    }
    let grid: Vec<f64> = (0..=steps).map(|k| maturity * k as f64 / steps as f64).collect();
    let dt = maturity / steps as f64;

    let fbm_factor = match &model.model {
        ModelKind::FbmExponential { hurst, .. } => Some(fgn_cholesky(steps, dt, *hurst)?),
        ModelKind::Gbm { .. } => None,
    };

    exec.map_range(count, |path_index| {
        let mut rng = path_rng(seed, path_index);
        let stock = match &model.model {
            ModelKind::Gbm { drift, volatility } => gbm_stock(drift, volatility, s, steps, dt, &mut rng),
            ModelKind::FbmExponential { drift, volatility, hurst } => fbm_stock(
                drift,
                volatility,
                *hurst,
                s,
                &grid,
                fbm_factor.as_ref().unwrap(),
                &mut rng,
            ),
        };
        let (rate, bank) = simulate_rate(&model.rate, steps, dt, &mut rng);
        PathBuilder {
            grid: grid.clone(),
            dim: d,
            stock,
            bank,
            rate,
            rate_bound: Some(model.rate.bound()),
        }
        .discount()
    })
    .into_iter()
    .collect()
}

fn gbm_stock(
    drift: &[f64],
    vol: &[Vec<f64>],
    s: &[f64],
    steps: usize,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let d = s.len();
    let sqdt = dt.sqrt();
    let log_drift: Vec<f64> = (0..d)
        .map(|i| (drift[i] - 0.5 * vol[i].iter().map(|v| v * v).sum::<f64>()) * dt)
        .collect();
    let mut out = Vec::with_capacity((steps + 1) * d);
    out.extend_from_slice(s);
    let mut z = vec![0.0; d];
    for k in 0..steps {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let shock: f64 = vol[i].iter().zip(&z).map(|(v, zj)| v * zj).sum();
            let prev = out[k * d + i];
            out.push(prev * (log_drift[i] + sqdt * shock).exp());
        }
    }
    out
}

/// Lower Cholesky factor of the covariance of fractional Gaussian noise
/// increments on a uniform grid.
fn fgn_cholesky(steps: usize, dt: f64, hurst: f64) -> Result<DMatrix<f64>> {
    if steps > MAX_FBM_STEPS {
        return Err(Error::input(format!(
            "exact fBM sampling supports at most {MAX_FBM_STEPS} steps"
        )));
    }
    let two_h = 2.0 * hurst;
    let autocov = |lag: usize| {
        let k = lag as f64;
        0.5 * dt.powf(two_h) * ((k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h))
    };
    let cov = DMatrix::from_fn(steps, steps, |i, j| autocov(i.abs_diff(j)));
    cov.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::numerical("fGn covariance is not positive definite"))
}

fn fbm_stock(
    drift: &[f64],
    vol: &[f64],
    hurst: f64,
    s: &[f64],
    grid: &[f64],
    factor: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let d = s.len();
    let steps = grid.len() - 1;
    let mut out = vec![0.0; (steps + 1) * d];
    out[..d].copy_from_slice(s);
    let mut z = vec![0.0; steps];
    for i in 0..d {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        let mut level = 0.0;
        for k in 0..steps {
            let incr: f64 = factor.row(k).iter().take(k + 1).zip(&z).map(|(l, zj)| l * zj).sum();
            level += incr;
            let t = grid[k + 1];
            let exponent = drift[i] * t + vol[i] * level - 0.5 * vol[i] * vol[i] * t.powf(2.0 * hurst);
            out[(k + 1) * d + i] = s[i] * exponent.exp();
        }
    }
    out
}

fn simulate_rate(model: &RateModel, steps: usize, dt: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let rate: Vec<f64> = match *model {
        RateModel::Constant { rate } => vec![rate; steps],
        RateModel::MeanReverting { initial, mean, speed, volatility, bound } => {
            let mut r = initial;
            let mut out = Vec::with_capacity(steps);
            for _ in 0..steps {
                out.push(r);
                let z: f64 = rng.sample(StandardNormal);
                r = (r + speed * (mean - r) * dt + volatility * dt.sqrt() * z).clamp(0.0, bound);
            }
            out
        }
    };
    let mut bank = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    bank.push(1.0);
    for r in &rate {
        acc += r * dt;
        bank.push(acc.exp());
    }
    (rate, bank)
}

/// Scenario where the short rate `|W|` is unbounded: bank
/// `exp(int_0^t |W|)` and stock `exp(int_0^t (|W| + 2W))`, integrated with the
/// left-endpoint rule. A `noise_scale` of 0 freezes `W` at 0.
#[derive(Debug, Clone, Copy)]
pub struct UnboundedRateScenario {
    pub steps: usize,
    pub maturity: f64,
    pub seed: u64,
    pub count: usize,
    pub noise_scale: f64,
}

impl UnboundedRateScenario {
    pub fn new(steps: usize, maturity: f64, seed: u64, count: usize) -> Self {
        UnboundedRateScenario { steps, maturity, seed, count, noise_scale: 1.0 }
    }

    pub fn paths(&self) -> Result<Vec<MarketPath>> {
        if self.steps == 0 || self.count == 0 || !(self.maturity > 0.0) {
            return Err(Error::input("scenario needs positive steps, count and maturity"));
        }
        let dt = self.maturity / self.steps as f64;
        let grid: Vec<f64> = (0..=self.steps).map(|k| k as f64 * dt).collect();
        Execution::default()
            .map_range(self.count, |p| {
                let mut rng = path_rng(self.seed, p);
                let mut w = 0.0_f64;
                let mut log_bank = 0.0;
                let mut log_stock = 0.0;
                let mut stock = Vec::with_capacity(self.steps + 1);
                let mut bank = Vec::with_capacity(self.steps + 1);
                let mut rate = Vec::with_capacity(self.steps);
                stock.push(1.0);
                bank.push(1.0);
                for _ in 0..self.steps {
                    rate.push(w.abs());
                    log_bank += w.abs() * dt;
                    log_stock += (w.abs() + 2.0 * w) * dt;
                    stock.push(log_stock.exp());
                    bank.push(log_bank.exp());
                    let z: f64 = rng.sample(StandardNormal);
                    w += self.noise_scale * dt.sqrt() * z;
                }
                PathBuilder {
                    grid: grid.clone(),
                    dim: 1,
                    stock,
                    bank,
                    rate,
                    rate_bound: Some(f64::INFINITY),
                }
                .discount()
            })
            .into_iter()
            .collect()
    }
}

/// Shorthand for [`UnboundedRateScenario::paths`] with unit noise.
pub fn counterexample_paths(steps: usize, maturity: f64, seed: u64, count: usize) -> Result<Vec<MarketPath>> {
    UnboundedRateScenario::new(steps, maturity, seed, count).paths()
}

/// Writes paths as CSV with columns `path,t,S_1..S_d,S0,r`. The rate column
/// holds the rate on `[t_k, t_{k+1})` and is empty on each path's last row.
pub fn write_paths_csv<W: Write>(paths: &[MarketPath], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = paths.first().map(|p| p.dim).unwrap_or(1);
    let mut header = vec!["path".to_string(), "t".to_string()];
    header.extend((1..=d).map(|i| format!("S_{i}")));
    header.push("S0".into());
    header.push("r".into());
    w.write_record(&header)?;
    for (id, p) in paths.iter().enumerate() {
        check_dim(d, p.dim)?;
        for k in 0..=p.steps() {
            let mut row = vec![id.to_string(), p.grid[k].to_string()];
            row.extend(p.stock(k).iter().map(|v| v.to_string()));
            row.push(p.bank[k].to_string());
            row.push(if k < p.steps() { p.rate[k].to_string() } else { String::new() });
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads paths written by [`write_paths_csv`]. The `path` column is optional
/// (a file without it holds one path) and so is `r`; missing rates are
/// recovered from consecutive bank values.
pub fn read_paths_csv<R: Read>(reader: R) -> Result<Vec<MarketPath>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let t_col = col("t").ok_or_else(|| Error::input("CSV is missing the 't' column"))?;
    let bank_col = col("S0").ok_or_else(|| Error::input("CSV is missing the 'S0' column"))?;
    let path_col = col("path");
    let rate_col = col("r");
    let stock_cols: Vec<usize> = (1..)
        .map_while(|i| col(&format!("S_{i}")))
        .collect();
    if stock_cols.is_empty() {
        return Err(Error::input("CSV has no stock columns S_1..S_d"));
    }
    let d = stock_cols.len();

    struct Raw {
        id: String,
        grid: Vec<f64>,
        stock: Vec<f64>,
        bank: Vec<f64>,
        rate: Vec<Option<f64>>,
    }
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::input(format!("cannot parse '{s}' as a number")))
    };
    let mut raws: Vec<Raw> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = path_col.map(|c| rec[c].trim().to_string()).unwrap_or_default();
        if raws.last().map(|r| r.id != id).unwrap_or(true) {
            raws.push(Raw { id, grid: vec![], stock: vec![], bank: vec![], rate: vec![] });
        }
        let raw = raws.last_mut().unwrap();
        raw.grid.push(parse(&rec[t_col])?);
        for &c in &stock_cols {
            raw.stock.push(parse(&rec[c])?);
        }
        raw.bank.push(parse(&rec[bank_col])?);
        raw.rate.push(match rate_col.map(|c| rec[c].trim()) {
            Some(s) if !s.is_empty() => Some(parse(s)?),
            _ => None,
        });
    }
    raws.into_iter()
        .map(|raw| {
            let n = raw.grid.len();
            let rate = (0..n.saturating_sub(1))
                .map(|k| {
                    raw.rate[k].unwrap_or_else(|| {
                        ((raw.bank[k + 1] / raw.bank[k]).ln() / (raw.grid[k + 1] - raw.grid[k])).max(0.0)
                    })
                })
                .collect();
            PathBuilder::new(raw.grid, d, raw.stock, raw.bank, rate).discount()
        })
        .collect()
}

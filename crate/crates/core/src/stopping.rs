//! Multinomial tree martingales and the game stopping recursion on them.
//!
//! The increments of a `d`-dimensional tree are built from `d + 1` atoms with
//! mean zero and identity covariance, obtained from an orthogonal matrix whose
//! last column is constant. On a tree of depth `n` over `[0, T]` a node `x`
//! moves to
//!
//! ```text
//! x_i (1 + sqrt(T/n) <λ e_i + f_i(x), ξ_m>),   m = 0..=d, each with probability 1/(d+1)
//! ```
//!
//! where `f` is the volatility control and `λ` a small ridge. Backward
//! induction of `min(F + Δ, E[next])` with terminal value `F` gives the value
//! of the best stopping rule against that martingale, a lower bound for the
//! robust stopping value and hence for the super-replication price.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::envelope::{tangent_coefficients, EnvelopeData};
use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;
use crate::payoff::GameOption;

/// Default ridge added to the control.
pub const DEFAULT_RIDGE: f64 = 1e-8;
/// Smallest increment factor allowed by the default control bound.
pub const MIN_FACTOR: f64 = 0.05;

/// Orthogonal completion of the constant vector and the atoms derived from it.
#[derive(Debug, Clone)]
pub struct IncrementBasis {
    dim: usize,
    matrix: DMatrix<f64>,
    atoms: Vec<Vec<f64>>,
}

/// Householder reflection mapping `e_{d+1}` to `(1, ..., 1) / sqrt(d+1)`; the
/// atoms are `sqrt(d+1)` times the first `d` entries of each row.
pub fn build_increment_basis(d: usize) -> Result<IncrementBasis> {
    if d == 0 {
        return Err(Error::input("dimension must be positive"));
    }
    let k = d + 1;
    let c = 1.0 / (k as f64).sqrt();
    let mut v = nalgebra::DVector::from_element(k, -c);
    v[d] += 1.0;
    let vv = v.dot(&v);
    let matrix = DMatrix::<f64>::identity(k, k) - (&v * v.transpose()) * (2.0 / vv);
    let scale = (k as f64).sqrt();
    let atoms = (0..k)
        .map(|m| (0..d).map(|j| scale * matrix[(m, j)]).collect())
        .collect();
    Ok(IncrementBasis { dim: d, matrix, atoms })
}

impl IncrementBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    /// Probability of each atom.
    pub fn prob(&self) -> f64 {
        1.0 / (self.dim + 1) as f64
    }

    /// `max_m max_i |ξ_m,i|`, used to bound increments.
    pub fn max_abs(&self) -> f64 {
        self.atoms.iter().flatten().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Volatility control `f(x)`.
#[derive(Debug, Clone)]
pub enum Control {
    /// `f = c I`.
    Constant(f64),
    /// Constant matrix with rows `f_i`.
    Matrix(Vec<Vec<f64>>),
    /// `inner I` where `F(0) + <B, x> < F(x) + Δ`, `outer I` elsewhere.
    TwoRegime { inner: f64, outer: f64, envelope: EnvelopeData },
}

impl Control {
    pub fn two_regime(option: &GameOption, inner: f64, outer: f64) -> Result<Self> {
        Ok(Control::TwoRegime { inner, outer, envelope: tangent_coefficients(option)? })
    }

    /// `<f_i(x), ξ>` for every coordinate `i`.
    fn apply(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        match self {
            Control::Constant(c) => {
                for (o, v) in out.iter_mut().zip(xi) {
                    *o = c * v;
                }
            }
            Control::Matrix(rows) => {
                for (o, row) in out.iter_mut().zip(rows) {
                    *o = row.iter().zip(xi).map(|(a, b)| a * b).sum();
                }
            }
            Control::TwoRegime { inner, outer, envelope } => {
                let option = envelope.option();
                let gap = envelope.affine(x) - option.payoff().eval(x) - option.penalty();
                let c = if gap < 0.0 { inner } else { outer };
                for (o, v) in out.iter_mut().zip(xi) {
                    *o = c * v;
                }
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            Control::Constant(c) => format!("constant c={c}"),
            Control::Matrix(rows) => format!("matrix {rows:?}"),
            Control::TwoRegime { inner, outer, .. } => format!("two-regime inner={inner} outer={outer}"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeOptions {
    pub ridge: f64,
    /// Build the full tree even where a recombining lattice would do.
    pub force_full: bool,
    pub exec: Execution,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions { ridge: DEFAULT_RIDGE, force_full: false, exec: Execution::default() }
    }
}

#[derive(Debug, Clone)]
enum Layout {
    /// One asset, constant control: node `(k, j)` is `s up^j down^(k-j)`;
    /// its children are `(k+1, j+1)` and `(k+1, j)`.
    Lattice { ln_up: f64, ln_down: f64 },
    /// Level `k` holds `(d+1)^k` nodes of `d` values; child `m` of node `j`
    /// is node `j (d+1) + m` of the next level.
    Full { levels: Vec<Vec<f64>> },
}

/// Martingale on a multinomial tree.
#[derive(Debug, Clone)]
pub struct TreeMartingale {
    depth: usize,
    dim: usize,
    root: Vec<f64>,
    maturity: f64,
    ridge: f64,
    control: String,
    layout: Layout,
}

/// Largest node count at the last level of a full tree.
const MAX_FULL_LEAVES: usize = 1_594_323; // 3^13

fn full_tree_cap(d: usize) -> usize {
    match d {
        1 => 22,
        _ => {
            let mut n = 0;
            let mut leaves = 1usize;
            while leaves.saturating_mul(d + 1) <= MAX_FULL_LEAVES {
                leaves *= d + 1;
                n += 1;
            }
            n
        }
    }
}

/// Builds the tree with default options.
pub fn build_tree(
    basis: &IncrementBasis,
    s: &[f64],
    n: usize,
    control: &Control,
    maturity: f64,
) -> Result<TreeMartingale> {
    build_tree_with(basis, s, n, control, maturity, &TreeOptions::default())
}

pub fn build_tree_with(
    basis: &IncrementBasis,
    s: &[f64],
    n: usize,
    control: &Control,
    maturity: f64,
    opts: &TreeOptions,
) -> Result<TreeMartingale> {
    let d = basis.dim;
    check_dim(d, s.len())?;
    if n == 0 {
        return Err(Error::input("tree depth must be positive"));
    }
    if !(maturity > 0.0) || !maturity.is_finite() {
        return Err(Error::input("maturity must be positive"));
    }
    if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::input("tree root must be strictly positive"));
    }
    if !(opts.ridge >= 0.0) {
        return Err(Error::input("ridge must be nonnegative"));
    }
    if let Control::Matrix(rows) = control {
        check_dim(d, rows.len())?;
        for r in rows {
            check_dim(d, r.len())?;
        }
    }
    let h = (maturity / n as f64).sqrt();
    let lattice = d == 1 && !opts.force_full && matches!(control, Control::Constant(_));
    let layout = if lattice {
        let c = match control {
            Control::Constant(c) => *c,
            _ => unreachable!(),
        };
        // atoms are ±1 in some order; use the positive one for "up"
        let a = basis.atoms[0][0].abs();
        let step = h * (opts.ridge + c) * a;
        if step.abs() >= 1.0 {
            return Err(positivity_error(step.abs()));
        }
        Layout::Lattice { ln_up: (1.0 + step.abs()).ln(), ln_down: (1.0 - step.abs()).ln() }
    } else {
        let cap = full_tree_cap(d);
        if n > cap {
            return Err(Error::input(format!(
                "a full tree in dimension {d} is limited to depth {cap}; got {n}"
            )));
        }
        let mut levels = vec![s.to_vec()];
        for _ in 0..n {
            let next = grow_level(basis, levels.last().unwrap(), control, h, opts)?;
            levels.push(next);
        }
        Layout::Full { levels }
    };
    Ok(TreeMartingale {
        depth: n,
        dim: d,
        root: s.to_vec(),
        maturity,
        ridge: opts.ridge,
        control: control.describe(),
        layout,
    })
}

fn positivity_error(step: f64) -> Error {
    Error::input(format!(
        "tree increment of relative size {step:.4} leaves the positive orthant; increase n or shrink control"
    ))
}

fn grow_level(
    basis: &IncrementBasis,
    level: &[f64],
    control: &Control,
    h: f64,
    opts: &TreeOptions,
) -> Result<Vec<f64>> {
    let d = basis.dim;
    let k = d + 1;
    let nodes = level.len() / d;
    let mut next = vec![0.0; nodes * k * d];
    let bad = std::sync::atomic::AtomicU64::new(0);
    // one slot per child node
    let mut children: Vec<Vec<f64>> = vec![Vec::new(); nodes * k];
    opts.exec.fill(&mut children, |idx| {
        let (j, m) = (idx / k, idx % k);
        let x = &level[j * d..(j + 1) * d];
        let xi = &basis.atoms[m];
        let mut fx = vec![0.0; d];
        control.apply(x, xi, &mut fx);
        (0..d)
            .map(|i| {
                let step = h * (opts.ridge * xi[i] + fx[i]);
                if step.abs() >= 1.0 {
                    bad.fetch_max(step.abs().to_bits(), std::sync::atomic::Ordering::Relaxed);
                }
                x[i] * (1.0 + step)
            })
            .collect()
    });
    let worst = f64::from_bits(bad.into_inner());
    if worst >= 1.0 {
        return Err(positivity_error(worst));
    }
    for (slot, child) in next.chunks_mut(d).zip(&children) {
        slot.copy_from_slice(child);
    }
    Ok(next)
}

impl TreeMartingale {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> &[f64] {
        &self.root
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self.layout, Layout::Lattice { .. })
    }

    /// Number of branches per node.
    pub fn branching(&self) -> usize {
        if self.is_lattice() {
            2
        } else {
            self.dim + 1
        }
    }

    /// Number of nodes at level `k`.
    pub fn level_size(&self, k: usize) -> usize {
        match &self.layout {
            Layout::Lattice { .. } => k + 1,
            Layout::Full { levels } => levels[k].len() / self.dim,
        }
    }

    /// Value of node `j` at level `k`.
    pub fn node(&self, k: usize, j: usize) -> Vec<f64> {
        match &self.layout {
            Layout::Lattice { ln_up, ln_down } => {
                vec![self.root[0] * (j as f64 * ln_up + (k - j) as f64 * ln_down).exp()]
            }
            Layout::Full { levels } => levels[k][j * self.dim..(j + 1) * self.dim].to_vec(),
        }
    }

    /// Indices of the children of node `j` at level `k < depth`, in atom
    /// order for full trees and `(up, down)` for lattices.
    pub fn children(&self, k: usize, j: usize) -> Vec<usize> {
        match &self.layout {
            Layout::Lattice { .. } => vec![j + 1, j],
            Layout::Full { .. } => {
                let b = self.dim + 1;
                (0..b).map(|m| j * b + m).collect()
            }
        }
        .into_iter()
        .filter(|_| k < self.depth)
        .collect()
    }

    /// Largest `|mean of children - node|` over the tree, relative to the node.
    pub fn max_martingale_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.depth {
            for j in 0..self.level_size(k) {
                let x = self.node(k, j);
                let kids = self.children(k, j);
                let w = 1.0 / kids.len() as f64;
                for (i, xi) in x.iter().enumerate() {
                    let mean: f64 = kids.iter().map(|&c| self.node(k + 1, c)[i]).sum::<f64>() * w;
                    worst = worst.max((mean - xi).abs() / xi);
                }
            }
        }
        worst
    }

    /// Smallest coordinate over all nodes.
    pub fn min_node(&self) -> f64 {
        match &self.layout {
            Layout::Lattice { ln_down, .. } => self.root[0] * (self.depth as f64 * ln_down).exp(),
            Layout::Full { levels } => levels.iter().flatten().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Root value, stopping flags per level (true where stopping attains the
/// minimum) and the control used.
#[derive(Debug, Clone, Serialize)]
pub struct StoppingValue {
    pub value: f64,
    pub stop_region: Vec<Vec<bool>>,
    pub control_used: String,
}

/// Backward induction with stop flags.
pub fn optimal_stopping_dp(tree: &TreeMartingale, option: &GameOption) -> Result<StoppingValue> {
    let (value, flags) = run_dp(tree, option, true)?;
    Ok(StoppingValue { value, stop_region: flags, control_used: tree.control.clone() })
}

/// Backward induction returning only the root value.
pub fn stopping_value(tree: &TreeMartingale, option: &GameOption) -> Result<f64> {
    run_dp(tree, option, false).map(|(v, _)| v)
}

fn run_dp(tree: &TreeMartingale, option: &GameOption, keep_flags: bool) -> Result<(f64, Vec<Vec<bool>>)> {
    check_dim(option.dim(), tree.dim)?;
    let payoff = option.payoff();
    let delta = option.penalty();
    let n = tree.depth;
    let mut flags: Vec<Vec<bool>> = if keep_flags { vec![Vec::new(); n + 1] } else { Vec::new() };
    match &tree.layout {
        Layout::Lattice { ln_up, ln_down } => {
            let s = tree.root[0];
            let node = |k: usize, j: usize| s * (j as f64 * ln_up + (k - j) as f64 * ln_down).exp();
            let mut values: Vec<f64> = (0..=n).map(|j| payoff.eval(&[node(n, j)])).collect();
            if keep_flags {
                flags[n] = vec![true; n + 1];
            }
            for k in (0..n).rev() {
                let mut level_flags = if keep_flags { vec![false; k + 1] } else { Vec::new() };
                for j in 0..=k {
                    let cont = 0.5 * (values[j] + values[j + 1]);
                    let stop = payoff.eval(&[node(k, j)]) + delta;
                    if stop <= cont {
                        values[j] = stop;
                        if keep_flags {
                            level_flags[j] = true;
                        }
                    } else {
                        values[j] = cont;
                    }
                }
                if keep_flags {
                    flags[k] = level_flags;
                }
            }
            Ok((values[0], flags))
        }
        Layout::Full { levels } => {
            let d = tree.dim;
            let b = d + 1;
            let w = 1.0 / b as f64;
            let mut values: Vec<f64> = levels[n].chunks(d).map(|x| payoff.eval(x)).collect();
            if keep_flags {
                flags[n] = vec![true; values.len()];
            }
            for k in (0..n).rev() {
                let next: Vec<(f64, bool)> = levels[k]
                    .chunks(d)
                    .enumerate()
                    .map(|(j, x)| {
                        let cont = values[j * b..(j + 1) * b].iter().sum::<f64>() * w;
                        let stop = payoff.eval(x) + delta;
                        if stop <= cont {
                            (stop, true)
                        } else {
                            (cont, false)
                        }
                    })
                    .collect();
                values = next.iter().map(|p| p.0).collect();
                if keep_flags {
                    flags[k] = next.iter().map(|p| p.1).collect();
                }
            }
            Ok((values[0], flags))
        }
    }
}

/// Largest constant control at depth `n` (maturity 1) keeping every factor
/// at least [`MIN_FACTOR`].
pub fn c_max(basis: &IncrementBasis, n: usize, ridge: f64) -> f64 {
    let h = (1.0 / n as f64).sqrt();
    ((1.0 - MIN_FACTOR) / (h * basis.max_abs()) - ridge).max(0.0)
}

/// Scalar family `f = c I`, `c ∈ [0, upper]`.
#[derive(Debug, Clone, Copy)]
pub struct ControlFamily {
    /// Defaults to [`c_max`].
    pub upper: Option<f64>,
    /// Points in the initial scan.
    pub grid_points: usize,
    pub exec: Execution,
}

impl Default for ControlFamily {
    fn default() -> Self {
        ControlFamily { upper: None, grid_points: 9, exec: Execution::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DualBound {
    pub value: f64,
    pub control: f64,
    pub c_max: f64,
    pub evaluations: usize,
    pub budget_exhausted: bool,
    /// `R(s)`.
    pub envelope_value: f64,
    pub fraction: f64,
    /// Discretization allowance `3 L |s|_1 sqrt(1/n) c_max`.
    pub allowance: f64,
}

/// Maximizes the tree stopping value over constant controls: a scan of the
/// family followed by golden-section refinement around the best scan point.
/// Trees use maturity 1; the value does not depend on the horizon once the
/// control is rescaled.
pub fn dual_lower_bound(
    option: &GameOption,
    s: &[f64],
    n: usize,
    family: &ControlFamily,
    budget: usize,
) -> Result<DualBound> {
    check_dim(option.dim(), s.len())?;
    if budget == 0 {
        return Err(Error::input("evaluation budget must be positive"));
    }
    let basis = build_increment_basis(option.dim())?;
    let ridge = DEFAULT_RIDGE;
    let cmax = c_max(&basis, n, ridge);
    let upper = family.upper.unwrap_or(cmax);
    if !(upper >= 0.0) || upper > cmax * (1.0 + 1e-12) {
        return Err(Error::input(format!(
            "control bound {upper} outside [0, {cmax}] for depth {n}"
        )));
    }
    let tree_opts = TreeOptions { ridge, force_full: false, exec: Execution::Sequential };
    let eval = |c: f64| -> Result<f64> {
        let tree = build_tree_with(&basis, s, n, &Control::Constant(c), 1.0, &tree_opts)?;
        stopping_value(&tree, option)
    };

    let points = family.grid_points.max(2).min(budget);
    let grid: Vec<f64> = (0..points).map(|i| upper * i as f64 / (points - 1) as f64).collect();
    let scanned: Vec<f64> = family
        .exec
        .map(&grid, |&c| eval(c))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut evaluations = points;
    let (mut best_i, mut best_v) = (0, scanned[0]);
    for (i, v) in scanned.iter().enumerate() {
        if *v > best_v {
            best_i = i;
            best_v = *v;
        }
    }
    let mut best_c = grid[best_i];

    // golden section on the bracket around the best scan point
    let mut lo = grid[best_i.saturating_sub(1)];
    let mut hi = grid[(best_i + 1).min(points - 1)];
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut budget_exhausted = false;
    if hi > lo {
        let mut x1 = hi - ratio * (hi - lo);
        let mut x2 = lo + ratio * (hi - lo);
        let mut f1 = None;
        let mut f2 = None;
        while hi - lo > 1e-6 * upper.max(1.0) {
            if evaluations + 2 > budget {
                budget_exhausted = true;
                break;
            }
            let v1 = match f1 {
                Some(v) => v,
                None => {
                    evaluations += 1;
                    eval(x1)?
                }
            };
            let v2 = match f2 {
                Some(v) => v,
                None => {
                    evaluations += 1;
                    eval(x2)?
                }
            };
            for (c, v) in [(x1, v1), (x2, v2)] {
                if v > best_v {
                    best_v = v;
                    best_c = c;
                }
            }
            if v1 >= v2 {
                hi = x2;
                x2 = x1;
                f2 = Some(v1);
                x1 = hi - ratio * (hi - lo);
                f1 = None;
            } else {
                lo = x1;
                x1 = x2;
                f1 = Some(v2);
                x2 = lo + ratio * (hi - lo);
                f2 = None;
            }
        }
    }

    let env = tangent_coefficients(option)?;
    let envelope_value = env.value(s)?;
    let l1: f64 = s.iter().sum();
    let allowance = 3.0 * option.payoff().lipschitz() * l1 * (1.0 / n as f64).sqrt() * cmax;
    Ok(DualBound {
        value: best_v,
        control: best_c,
        c_max: cmax,
        evaluations,
        budget_exhausted,
        envelope_value,
        fraction: if envelope_value != 0.0 { best_v / envelope_value } else { f64::NAN },
        allowance,
    })
}

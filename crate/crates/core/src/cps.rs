//! Consistent price systems on a tree: Esscher reweighting of atomic
//! increment laws, projection of discounted paths onto tree martingales with
//! freezing, and the relative band check between a path and its shadow.
//!
//! A path is projected level by level. From node `x` at level `k` it moves
//! to the child `y` whose straight line `x -> y` it follows within `(k+1) δ`
//! over the whole tree interval; when no child qualifies the projection
//! freezes and stays constant. The shadow price is the step function of the
//! projected levels.

use std::collections::HashMap;
use std::io::Write;

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;
use crate::linear::norm2;
use crate::market::MarketPath;
use crate::stopping::TreeMartingale;

/// Smallest admissible strictly positive weight in the interior check.
pub const INTERIOR_THRESHOLD: f64 = 1e-10;
const PROB_SUM_TOL: f64 = 1e-14;
const ESSCHER_MAX_ITER: usize = 200;
const ESSCHER_TOL: f64 = 1e-10;
const ARMIJO: f64 = 1e-4;

/// Finitely many atoms in `R^d` with strictly positive probabilities, and
/// zero in the interior of their convex hull.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicIncrementDistribution {
    atoms: Vec<Vec<f64>>,
    probs: Vec<f64>,
    margin: f64,
}

impl AtomicIncrementDistribution {
    pub fn new(atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::input("distribution needs at least one atom"));
        }
        check_dim(atoms.len(), probs.len())?;
        let d = atoms[0].len();
        if d == 0 {
            return Err(Error::input("atoms must have positive dimension"));
        }
        for a in &atoms {
            check_dim(d, a.len())?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::input("atoms must be finite"));
            }
        }
        if probs.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::input("probabilities must be strictly positive"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::input(format!("probabilities sum to {total}, not 1")));
        }
        let margin = interior_margin(&atoms);
        if !(margin > INTERIOR_THRESHOLD) {
            return Err(Error::input("no interior point: 0 is not inside the convex hull of the atoms"));
        }
        Ok(AtomicIncrementDistribution { atoms, probs, margin })
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    /// Largest minimum weight of a convex combination of the atoms equal to 0.
    pub fn interior_margin(&self) -> f64 {
        self.margin
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (a, p) in self.atoms.iter().zip(&self.probs) {
            for (mi, ai) in m.iter_mut().zip(a) {
                *mi += p * ai;
            }
        }
        m
    }
}

/// Largest `t` such that some convex combination with all weights `>= t`
/// puts the atoms at 0, or 0 when none exists or the atoms do not span the
/// space. A positive value means 0 is an interior point of the hull.
pub fn interior_margin(atoms: &[Vec<f64>]) -> f64 {
    let d = atoms[0].len();
    let k = atoms.len();
    if k <= d {
        return 0.0;
    }
    // full rank of the second-moment matrix: atoms span R^d
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let scale = atoms.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    for a in atoms {
        let v = DVector::from_iterator(d, a.iter().map(|x| x / scale));
        gram += &v * v.transpose();
    }
    let sv = gram.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if !(lo > 1e-12 * hi) {
        return 0.0;
    }

    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let t = lp.add_var(1.0, (0.0, 1.0));
    let w: Vec<_> = (0..k).map(|_| lp.add_var(0.0, (0.0, 1.0))).collect();
    for i in 0..d {
        let row: Vec<_> = w.iter().zip(atoms).map(|(&v, a)| (v, a[i] / scale)).collect();
        lp.add_constraint(row, ComparisonOp::Eq, 0.0);
    }
    let sum: Vec<_> = w.iter().map(|&v| (v, 1.0)).collect();
    lp.add_constraint(sum, ComparisonOp::Eq, 1.0);
    for &v in &w {
        lp.add_constraint([(v, 1.0), (t, -1.0)], ComparisonOp::Ge, 0.0);
    }
    match lp.solve().ok().and_then(|o| o.into_solution().ok()) {
        Some(sol) => sol.objective(),
        None => 0.0,
    }
}

/// Exponential tilt making the increment law mean-zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EsscherResult {
    pub theta: Vec<f64>,
    pub new_probs: Vec<f64>,
    /// Euclidean norm of the reweighted mean.
    pub residual: f64,
    pub iterations: usize,
}

/// Tilted probabilities `p e^{<θ,x>} / Z` and `ln Z`, via log-sum-exp.
fn tilt(dist: &AtomicIncrementDistribution, theta: &[f64]) -> (Vec<f64>, f64) {
    let logs: Vec<f64> = dist
        .atoms
        .iter()
        .zip(&dist.probs)
        .map(|(a, p)| p.ln() + a.iter().zip(theta).map(|(x, t)| x * t).sum::<f64>())
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    let q = weights.iter().map(|w| w / z).collect();
    (q, top + z.ln())
}

fn tilted_mean(dist: &AtomicIncrementDistribution, q: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; dist.dim()];
    for (a, w) in dist.atoms.iter().zip(q) {
        for (gi, ai) in g.iter_mut().zip(a) {
            *gi += w * ai;
        }
    }
    g
}

/// Finds `θ` minimizing `φ(θ) = Σ p_m e^{<θ, x_m>}` by damped Newton on
/// `ln φ`, whose gradient is the tilted mean and whose Hessian is the tilted
/// covariance.
pub fn esscher_theta(dist: &AtomicIncrementDistribution) -> Result<EsscherResult> {
    let d = dist.dim();
    let mut theta = vec![0.0; d];
    let (mut q, mut psi) = tilt(dist, &theta);
    let mut g = tilted_mean(dist, &q);
    // iterate past the tolerance while Newton still makes progress, so the
    // tilted probabilities are accurate to rounding
    let scale = dist.atoms.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let polish = 1e-15 * (1.0 + scale);
    let mut iterations = 0;
    while iterations < ESSCHER_MAX_ITER && norm2(&g) > polish {
        let Some((trial, tq, tpsi)) = newton_step(dist, &theta, &q, &g, psi)? else { break };
        theta = trial;
        q = tq;
        psi = tpsi;
        g = tilted_mean(dist, &q);
        iterations += 1;
    }
    let residual = norm2(&g);
    if residual <= ESSCHER_TOL {
        return Ok(EsscherResult { theta, new_probs: q, residual, iterations });
    }
    Err(Error::numerical(format!(
        "Esscher Newton did not reach residual {ESSCHER_TOL:e} in {ESSCHER_MAX_ITER} iterations (residual {residual:e})"
    )))
}

type Trial = (Vec<f64>, Vec<f64>, f64);

/// One damped Newton step; `None` when no decrease can be found.
fn newton_step(dist: &AtomicIncrementDistribution, theta: &[f64], q: &[f64], g: &[f64], psi: f64) -> Result<Option<Trial>> {
    let d = dist.dim();
    let mut hess = DMatrix::<f64>::zeros(d, d);
    for (a, w) in dist.atoms.iter().zip(q) {
        for i in 0..d {
            for j in 0..d {
                hess[(i, j)] += w * (a[i] - g[i]) * (a[j] - g[j]);
            }
        }
    }
    let rhs = DVector::from_iterator(d, g.iter().map(|v| -v));
    let step = match hess.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let ridge = 1e-12 * hess.diagonal().amax().max(f64::MIN_POSITIVE);
            (hess + DMatrix::identity(d, d) * ridge)
                .cholesky()
                .ok_or_else(|| Error::numerical("Esscher Hessian is singular"))?
                .solve(&rhs)
        }
    };
    let slope: f64 = g.iter().zip(step.iter()).map(|(a, b)| a * b).sum();
    if !(slope < 0.0) {
        return Ok(None);
    }
    let residual = norm2(g);
    let mut t = 1.0;
    while t >= 1e-12 {
        let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
        let (tq, tpsi) = tilt(dist, &trial);
        if tpsi <= psi + ARMIJO * t * slope {
            return Ok(Some((trial, tq, tpsi)));
        }
        // near the minimizer the decrease drowns in rounding of ψ; accept
        // steps that keep ψ flat and shrink the gradient instead
        let flat = tpsi <= psi + 8.0 * f64::EPSILON * (1.0 + psi.abs());
        if flat && norm2(&tilted_mean(dist, &tq)) < residual {
            return Ok(Some((trial, tq, tpsi)));
        }
        t *= 0.5;
    }
    Ok(None)
}

/// A path's projection onto a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Projected values `M(0..=N)`, `dim` entries each.
    pub values: Vec<Vec<f64>>,
    /// Node index reached at each level before freezing.
    pub nodes: Vec<usize>,
    /// First level at which the projection stopped following the tree;
    /// `N + 1` when it never froze.
    pub freeze_index: usize,
    /// Path grid steps per tree level.
    pub steps_per_level: usize,
}

impl Projection {
    pub fn levels(&self) -> usize {
        self.values.len() - 1
    }

    pub fn is_frozen(&self) -> bool {
        self.freeze_index <= self.levels()
    }

    /// Shadow price at path grid index `j`: the projected value of the tree
    /// level whose interval contains `t_j`.
    pub fn shadow(&self, j: usize) -> &[f64] {
        &self.values[(j / self.steps_per_level).min(self.levels())]
    }

    /// Last path grid index at which the shadow is meaningful.
    pub fn last_checked_step(&self) -> usize {
        (self.freeze_index - 1) * self.steps_per_level
    }
}

/// Smallest distance between two distinct children of a common node, or
/// `None` when all siblings coincide.
pub fn min_sibling_gap(tree: &TreeMartingale) -> Option<f64> {
    let mut gap = f64::INFINITY;
    for k in 0..tree.depth() {
        for j in 0..tree.level_size(k) {
            let kids: Vec<Vec<f64>> = tree.children(k, j).iter().map(|&c| tree.node(k + 1, c)).collect();
            for a in 0..kids.len() {
                for b in a + 1..kids.len() {
                    let dist = distance(&kids[a], &kids[b]);
                    if dist > 0.0 {
                        gap = gap.min(dist);
                    }
                }
            }
        }
    }
    gap.is_finite().then_some(gap)
}

/// Largest `|y_i / x_i - 1|` over all parent-child pairs.
pub fn max_relative_step(tree: &TreeMartingale) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..tree.depth() {
        for j in 0..tree.level_size(k) {
            let x = tree.node(k, j);
            for c in tree.children(k, j) {
                let y = tree.node(k + 1, c);
                for (xi, yi) in x.iter().zip(&y) {
                    worst = worst.max((yi / xi - 1.0).abs());
                }
            }
        }
    }
    worst
}

/// Default snap radius: half the smallest sibling gap over `N + 1`. When all
/// siblings coincide any radius separates them; a small relative one is used.
pub fn default_delta(tree: &TreeMartingale) -> f64 {
    match min_sibling_gap(tree) {
        Some(gap) => gap / (2.0 * (tree.depth() + 1) as f64),
        None => 1e-8 * (1.0 + norm2(tree.root())),
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_delta(tree: &TreeMartingale, delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::input("snap radius must be positive"));
    }
    if let Some(gap) = min_sibling_gap(tree) {
        if 2.0 * delta * (tree.depth() + 1) as f64 > gap {
            return Err(Error::input(format!(
                "snap radius {delta:e} too large: 2 δ (N+1) must not exceed the sibling gap {gap:e}"
            )));
        }
    }
    Ok(())
}

/// Path grid steps per tree level, checking the tree times lie on the grid.
fn alignment(path: &MarketPath, tree: &TreeMartingale) -> Result<usize> {
    check_dim(tree.dim(), path.dim())?;
    let n = tree.depth();
    let steps = path.steps();
    if !steps.is_multiple_of(n) {
        return Err(Error::input(format!("path has {steps} steps, not a multiple of the tree depth {n}")));
    }
    let q = steps / n;
    let horizon = tree.maturity();
    for k in 0..=n {
        let expected = horizon * k as f64 / n as f64;
        if (path.time(k * q) - expected).abs() > 1e-9 * horizon {
            return Err(Error::input("tree levels are not aligned with the path grid"));
        }
    }
    let root = path.discounted(0);
    if distance(root, tree.root()) > 1e-9 * (1.0 + norm2(root)) {
        return Err(Error::input("tree root must equal the initial discounted price"));
    }
    Ok(q)
}

/// Projects the discounted path onto the tree with snap radius `delta`
/// (default per [`default_delta`]).
pub fn project_path_to_tree(path: &MarketPath, tree: &TreeMartingale, delta: Option<f64>) -> Result<Projection> {
    let delta = delta.unwrap_or_else(|| default_delta(tree));
    check_delta(tree, delta)?;
    let q = alignment(path, tree)?;
    Ok(project_aligned(path, tree, delta, q))
}

fn project_aligned(path: &MarketPath, tree: &TreeMartingale, delta: f64, q: usize) -> Projection {
    let n = tree.depth();
    let mut node = 0;
    let mut values = vec![tree.root().to_vec()];
    let mut nodes = vec![0];
    let mut freeze_index = n + 1;
    for k in 0..n {
        let x = tree.node(k, node);
        let radius = (k + 1) as f64 * delta;
        let mut best: Option<(usize, f64)> = None;
        for c in tree.children(k, node) {
            let y = tree.node(k + 1, c);
            let worst = (0..=q)
                .map(|i| {
                    let w = i as f64 / q as f64;
                    let s = path.discounted(k * q + i);
                    s.iter()
                        .zip(x.iter().zip(&y))
                        .map(|(si, (xi, yi))| {
                            let e = si - (xi + w * (yi - xi));
                            e * e
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
            if worst <= radius && best.map(|(_, b)| worst < b).unwrap_or(true) {
                best = Some((c, worst));
            }
        }
        match best {
            Some((c, _)) => {
                node = c;
                nodes.push(c);
                values.push(tree.node(k + 1, c));
            }
            None => {
                freeze_index = k + 1;
                let last = values[k].clone();
                values.resize(n + 1, last);
                break;
            }
        }
    }
    Projection { values, nodes, freeze_index, steps_per_level: q }
}

/// Projects every path, in parallel when `exec` allows.
pub fn project_paths(
    paths: &[MarketPath],
    tree: &TreeMartingale,
    delta: Option<f64>,
    exec: Execution,
) -> Result<Vec<Projection>> {
    let delta = delta.unwrap_or_else(|| default_delta(tree));
    check_delta(tree, delta)?;
    let qs = paths.iter().map(|p| alignment(p, tree)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(&MarketPath, usize)> = paths.iter().zip(qs).collect();
    Ok(exec.map(&jobs, |(p, q)| project_aligned(p, tree, delta, *q)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandViolation {
    pub path: usize,
    /// Path grid index.
    pub step: usize,
    pub asset: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandReport {
    pub epsilon: f64,
    pub violations: Vec<BandViolation>,
    pub ok: bool,
    pub paths: usize,
    pub unfrozen_paths: usize,
    pub checked_points: usize,
}

/// Checks `1 - ε < S_i(t) / Ŝ_i(t) < 1 + ε` for every asset at every grid
/// time up to the freezing level of each path.
pub fn band_check(
    paths: &[MarketPath],
    shadow: &[Projection],
    epsilon: f64,
    exec: Execution,
) -> Result<BandReport> {
    check_dim(paths.len(), shadow.len())?;
    for (p, s) in paths.iter().zip(shadow) {
        check_dim(p.steps(), s.levels() * s.steps_per_level)?;
        check_dim(p.dim(), s.values[0].len())?;
    }
    let jobs: Vec<usize> = (0..paths.len()).collect();
    let per_path = exec.map(&jobs, |&id| {
        let (path, proj) = (&paths[id], &shadow[id]);
        let last = proj.last_checked_step().min(path.steps());
        let mut out = Vec::new();
        for j in 0..=last {
            for (i, (s, h)) in path.discounted(j).iter().zip(proj.shadow(j)).enumerate() {
                let ratio = s / h;
                if !(ratio > 1.0 - epsilon && ratio < 1.0 + epsilon) {
                    out.push(BandViolation { path: id, step: j, asset: i, ratio });
                }
            }
        }
        (out, (last + 1) * path.dim())
    });
    let mut violations = Vec::new();
    let mut checked_points = 0;
    for (v, n) in per_path {
        violations.extend(v);
        checked_points += n;
    }
    Ok(BandReport {
        epsilon,
        ok: violations.is_empty(),
        violations,
        paths: paths.len(),
        unfrozen_paths: shadow.iter().filter(|s| !s.is_frozen()).count(),
        checked_points,
    })
}

/// Density process of the reweighted tree law against the empirical one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LikelihoodWeights {
    /// `weights[path][k]` for levels `0..=N`.
    pub weights: Vec<Vec<f64>>,
    /// Nodes reweighted by an Esscher tilt.
    pub reweighted_nodes: usize,
    /// Nodes whose observed children do not surround the node; paths through
    /// them get weight 0.
    pub degenerate_nodes: usize,
    pub max_residual: f64,
}

impl LikelihoodWeights {
    pub fn positive_paths(&self) -> usize {
        self.weights.iter().filter(|w| w.last().map(|v| *v > 0.0).unwrap_or(false)).count()
    }

    /// Writes `path_id,step,weight` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["path_id", "step", "weight"])?;
        for (id, row) in self.weights.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                w.write_record([id.to_string(), k.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Default)]
struct NodeCounts {
    children: Vec<usize>,
    total: usize,
}

/// Per-path likelihood weights: at every node visited, the empirical law of
/// the next move (with freezing counted as a move of its own) is compared
/// with the Esscher tilt of the conditional law over the observed children,
/// written in relative increments. Frozen paths get weight 0 from the
/// freezing level on.
pub fn likelihood_weights(tree: &TreeMartingale, projections: &[Projection]) -> Result<LikelihoodWeights> {
    let n = tree.depth();
    for p in projections {
        check_dim(n, p.levels())?;
    }
    let mut multipliers: Vec<HashMap<usize, Option<Vec<f64>>>> = Vec::with_capacity(n);
    let (mut reweighted, mut degenerate, mut max_residual) = (0, 0, 0.0f64);
    for k in 0..n {
        let mut counts: HashMap<usize, NodeCounts> = HashMap::new();
        for p in projections.iter().filter(|p| p.freeze_index > k) {
            let node = p.nodes[k];
            let kids = tree.children(k, node);
            let entry = counts.entry(node).or_insert_with(|| NodeCounts { children: vec![0; kids.len()], total: 0 });
            entry.total += 1;
            if p.freeze_index > k + 1 {
                let slot = kids.iter().position(|&c| c == p.nodes[k + 1]).expect("projection moved to a non-child");
                entry.children[slot] += 1;
            }
        }
        let mut level = HashMap::new();
        for (node, c) in counts {
            let x = tree.node(k, node);
            let kids = tree.children(k, node);
            let moved: usize = c.children.iter().sum();
            let observed: Vec<usize> = (0..kids.len()).filter(|&m| c.children[m] > 0).collect();
            let dist = if moved == 0 {
                None
            } else {
                let atoms = observed
                    .iter()
                    .map(|&m| tree.node(k + 1, kids[m]).iter().zip(&x).map(|(y, xi)| y / xi - 1.0).collect())
                    .collect();
                let mut probs: Vec<f64> = observed.iter().map(|&m| c.children[m] as f64 / moved as f64).collect();
                // absorb rounding so the probabilities sum to 1 exactly enough
                let total: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= total);
                AtomicIncrementDistribution::new(atoms, probs).ok()
            };
            let mult = dist.and_then(|d| esscher_theta(&d).ok()).map(|res| {
                max_residual = max_residual.max(res.residual);
                let mut m = vec![0.0; kids.len()];
                for (&slot, q) in observed.iter().zip(&res.new_probs) {
                    m[slot] = q / (c.children[slot] as f64 / c.total as f64);
                }
                m
            });
            if mult.is_some() {
                reweighted += 1;
            } else {
                degenerate += 1;
            }
            level.insert(node, mult);
        }
        multipliers.push(level);
    }

    let weights = projections
        .iter()
        .map(|p| {
            let mut w = vec![1.0; n + 1];
            for k in 0..n {
                let step = if p.freeze_index > k + 1 {
                    let node = p.nodes[k];
                    match &multipliers[k][&node] {
                        Some(m) => {
                            let slot = tree.children(k, node).iter().position(|&c| c == p.nodes[k + 1]).unwrap();
                            m[slot]
                        }
                        None => 0.0,
                    }
                } else {
                    0.0
                };
                w[k + 1] = w[k] * step;
            }
            w
        })
        .collect();
    Ok(LikelihoodWeights { weights, reweighted_nodes: reweighted, degenerate_nodes: degenerate, max_residual })
}

/// Projection, band check and weights for a batch of paths.
#[derive(Debug, Clone, Serialize)]
pub struct CpsOutcome {
    pub delta: f64,
    pub max_relative_step: f64,
    pub band: BandReport,
    #[serde(skip)]
    pub projections: Vec<Projection>,
    #[serde(skip)]
    pub weights: LikelihoodWeights,
    pub positive_weight_paths: usize,
    pub reweighted_nodes: usize,
    pub degenerate_nodes: usize,
}

pub fn cps_pipeline(
    paths: &[MarketPath],
    tree: &TreeMartingale,
    epsilon: f64,
    delta: Option<f64>,
    exec: Execution,
) -> Result<CpsOutcome> {
    let delta = delta.unwrap_or_else(|| default_delta(tree));
    let projections = project_paths(paths, tree, Some(delta), exec)?;
    let band = band_check(paths, &projections, epsilon, exec)?;
    let weights = likelihood_weights(tree, &projections)?;
    Ok(CpsOutcome {
        delta,
        max_relative_step: max_relative_step(tree),
        band,
        positive_weight_paths: weights.positive_paths(),
        reweighted_nodes: weights.reweighted_nodes,
        degenerate_nodes: weights.degenerate_nodes,
        projections,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::PathBuilder;
    use crate::stopping::{build_increment_basis, build_tree, build_tree_with, Control, TreeOptions};
    use proptest::prelude::*;

    fn dist(atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> AtomicIncrementDistribution {
        AtomicIncrementDistribution::new(atoms, probs).unwrap()
    }

    /// Path with zero rate through the given discounted values.
    fn path(values: &[f64], maturity: f64) -> MarketPath {
        let n = values.len() - 1;
        let grid = (0..=n).map(|k| maturity * k as f64 / n as f64).collect();
        PathBuilder::new(grid, 1, values.to_vec(), vec![1.0; n + 1], vec![0.0; n]).discount().unwrap()
    }

    #[test]
    fn symmetric_atoms_need_no_tilt() {
        let r = esscher_theta(&dist(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.5])).unwrap();
        assert_eq!(r.theta, vec![0.0]);
        assert_eq!(r.new_probs, vec![0.5, 0.5]);
    }

    #[test]
    fn two_point_tilt_by_hand() {
        // 0.9 e^θ = 0.1 e^{-θ}  =>  θ = -ln 3
        let r = esscher_theta(&dist(vec![vec![1.0], vec![-1.0]], vec![0.9, 0.1])).unwrap();
        assert!((r.theta[0] + 3f64.ln()).abs() < 1e-10, "{r:?}");
        assert!((r.new_probs[0] - 0.5).abs() < 1e-12);
        assert!(r.residual <= 1e-10);
    }

    #[test]
    fn basis_atoms_are_mean_zero() {
        let b = build_increment_basis(2).unwrap();
        let r = esscher_theta(&dist(b.atoms().to_vec(), vec![1.0 / 3.0; 3])).unwrap();
        assert!(r.theta.iter().all(|t| t.abs() < 1e-10));
    }

    #[test]
    fn rejects_boundary_and_outside() {
        // 0 on the boundary of the hull
        assert!(AtomicIncrementDistribution::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).is_err());
        // 0 outside
        assert!(AtomicIncrementDistribution::new(vec![vec![1.0], vec![2.0]], vec![0.5, 0.5]).is_err());
        // atoms on a line in the plane
        let line = vec![vec![1.0, 1.0], vec![-1.0, -1.0], vec![2.0, 2.0]];
        assert!(AtomicIncrementDistribution::new(line, vec![0.2, 0.4, 0.4]).is_err());
        // bad probabilities
        assert!(AtomicIncrementDistribution::new(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.6]).is_err());
        assert!(AtomicIncrementDistribution::new(vec![vec![1.0], vec![-1.0]], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn interior_margin_of_symmetric_pair() {
        let m = interior_margin(&[vec![1.0], vec![-1.0]]);
        assert!((m - 0.5).abs() < 1e-9);
    }

    fn lattice(c: f64, n: usize, root: f64) -> TreeMartingale {
        let basis = build_increment_basis(1).unwrap();
        build_tree(&basis, &[root], n, &Control::Constant(c), 1.0).unwrap()
    }

    #[test]
    fn tracing_path_follows_children() {
        let tree = lattice(0.1, 4, 100.0);
        // up, down, down, up along node-to-child segments, two grid steps each
        let route = [1, 1, 1, 2];
        let mut values = vec![100.0];
        let mut prev = 100.0;
        for (k, &j) in route.iter().enumerate() {
            let next = tree.node(k + 1, j)[0];
            values.push(0.5 * (prev + next));
            values.push(next);
            prev = next;
        }
        let p = project_path_to_tree(&path(&values, 1.0), &tree, None).unwrap();
        assert_eq!(p.freeze_index, 5);
        assert_eq!(p.nodes, vec![0, 1, 1, 1, 2]);
        for (k, v) in p.values.iter().enumerate() {
            assert_eq!(v[0], tree.node(k, p.nodes[k])[0]);
        }
    }

    #[test]
    fn jump_freezes_projection() {
        let tree = lattice(0.1, 4, 100.0);
        let up = tree.node(1, 1)[0];
        // follows the first step, then jumps far away during the second
        let values = [100.0, up, 150.0, 150.0, 150.0];
        let p = project_path_to_tree(&path(&values, 1.0), &tree, None).unwrap();
        assert_eq!(p.freeze_index, 2);
        assert!(p.values[2..].iter().all(|v| v == &p.values[1]));
        assert!(p.is_frozen());
    }

    #[test]
    fn constant_path_on_flat_tree() {
        let basis = build_increment_basis(1).unwrap();
        let opts = TreeOptions { ridge: 0.0, ..TreeOptions::default() };
        let tree = build_tree_with(&basis, &[100.0], 5, &Control::Constant(0.0), 1.0, &opts).unwrap();
        let p = project_path_to_tree(&path(&[100.0; 11], 1.0), &tree, None).unwrap();
        assert_eq!(p.freeze_index, 6);
        assert!(p.values.iter().all(|v| v[0] == 100.0));
    }

    #[test]
    fn rejects_large_delta_and_misalignment() {
        let tree = lattice(0.1, 4, 100.0);
        let p = path(&[100.0; 9], 1.0);
        let gap = min_sibling_gap(&tree).unwrap();
        assert!(project_path_to_tree(&p, &tree, Some(gap)).is_err());
        assert!(project_path_to_tree(&path(&[100.0; 7], 1.0), &tree, None).is_err());
        assert!(project_path_to_tree(&path(&[101.0; 9], 1.0), &tree, None).is_err());
    }

    #[test]
    fn band_trivial_cases() {
        let tree = lattice(0.1, 2, 100.0);
        let paths = vec![path(&[100.0, 101.0, 99.0, 100.5, 100.0], 1.0)];
        let proj = project_paths(&paths, &tree, None, Execution::Sequential).unwrap();
        assert!(!band_check(&paths, &proj, 0.0, Execution::Sequential).unwrap().ok);

        // shadow equal to the path itself: one tree level per grid step
        let fine = lattice(0.1, 4, 100.0);
        let exact = Projection {
            values: (0..=4).map(|j| paths[0].discounted(j).to_vec()).collect(),
            nodes: vec![0; 5],
            freeze_index: 5,
            steps_per_level: 1,
        };
        let _ = fine;
        for eps in [1e-12, 0.01, 0.5] {
            let r = band_check(&paths, std::slice::from_ref(&exact), eps, Execution::Sequential).unwrap();
            assert!(r.ok && r.checked_points == 5);
        }
    }

    #[test]
    fn weights_follow_empirical_counts() {
        let tree = lattice(0.1, 1, 100.0);
        let up = tree.node(1, 1)[0];
        let down = tree.node(1, 0)[0];
        // three up, one down, one frozen
        let mut paths = vec![path(&[100.0, up], 1.0); 3];
        paths.push(path(&[100.0, down], 1.0));
        paths.push(path(&[100.0, 130.0], 1.0));
        let proj = project_paths(&paths, &tree, None, Execution::Sequential).unwrap();
        let w = likelihood_weights(&tree, &proj).unwrap();
        // tilted law is uniform; empirical probabilities 3/5 and 1/5
        assert!((w.weights[0][1] - 0.5 / 0.6).abs() < 1e-9);
        assert!((w.weights[3][1] - 0.5 / 0.2).abs() < 1e-9, "{w:?} {proj:?}");
        assert_eq!(w.weights[4][1], 0.0);
        let mean: f64 = w.weights.iter().map(|r| r[1]).sum::<f64>() / 5.0;
        assert!((mean - 1.0).abs() < 1e-9);
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path_id,step,weight\n"));
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn one_sided_node_is_degenerate() {
        let tree = lattice(0.1, 1, 100.0);
        let up = tree.node(1, 1)[0];
        let paths = vec![path(&[100.0, up], 1.0); 2];
        let proj = project_paths(&paths, &tree, None, Execution::Sequential).unwrap();
        let w = likelihood_weights(&tree, &proj).unwrap();
        assert_eq!(w.degenerate_nodes, 1);
        assert!(w.weights.iter().all(|r| r[1] == 0.0));
    }

    proptest! {
        #[test]
        fn esscher_is_scale_equivariant(
            raw in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.05f64..1.0), 4..7),
        ) {
            let atoms: Vec<Vec<f64>> = raw.iter().map(|(a, b, _)| vec![*a, *b]).collect();
            let total: f64 = raw.iter().map(|r| r.2).sum();
            let probs: Vec<f64> = raw.iter().map(|r| r.2 / total).collect();
            prop_assume!(interior_margin(&atoms) > 1e-3);
            let Ok(base) = AtomicIncrementDistribution::new(atoms.clone(), probs.clone()) else {
                return Ok(());
            };
            let r = esscher_theta(&base).unwrap();
            prop_assert!(r.residual <= 1e-10);
            prop_assert!(r.new_probs.iter().all(|p| *p > 0.0));
            for lambda in [0.5, 2.0] {
                let scaled = atoms.iter().map(|a| a.iter().map(|v| v * lambda).collect()).collect();
                let s = esscher_theta(&dist(scaled, probs.clone())).unwrap();
                for (a, b) in s.theta.iter().zip(&r.theta) {
                    prop_assert!((a - b / lambda).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {}", b / lambda);
                }
            }
        }
    }
}

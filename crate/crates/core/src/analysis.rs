//! Conditional analysis on finite spaces.
//!
//! Convergence in probability is metrized by the Ky Fan distance
//! `E[min(|X - Y|, 1)]`; on a finite space with positive weights it is
//! equivalent to pointwise convergence, so limits in probability are
//! computed scenario by scenario. The module also provides a conditional
//! uniform-integrability diagnostic, the two greedy net constructions for
//! `F_tau`-convexly compact sets, and an exact grid verifier for the
//! conditional minimax identity `sup_x inf_y K = inf_y sup_x K` with kernel
//! `K(x, y) = E[U(x) - x y | G]`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtered_space::{FilteredSpace, RandomVariable, SigmaAlgebra, StoppingTime};
use crate::market::{node_constraints, ConstraintKind, MarketModel};
use crate::utility::UtilityPair;

/// `E[min(|X - Y|, 1)]`.
pub fn ky_fan(space: &FilteredSpace, x: &RandomVariable, y: &RandomVariable) -> Result<f64> {
    let n = space.n_scenarios();
    for v in [x, y] {
        if v.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: v.len(),
            });
        }
    }
    Ok(space
        .prob()
        .iter()
        .zip(x.values().iter().zip(y.values()))
        .map(|(p, (a, b))| p * (a - b).abs().min(1.0))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitMode {
    Limsup,
    Liminf,
}

/// Deterministic vanishing sequences `g(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Vanishing {
    Harmonic,
    InverseSquare,
    AlternatingHarmonic,
}

impl Vanishing {
    pub fn at(self, n: usize) -> f64 {
        let n = n as f64;
        match self {
            Vanishing::Harmonic => 1.0 / n,
            Vanishing::InverseSquare => 1.0 / (n * n),
            Vanishing::AlternatingHarmonic => {
                if n as usize % 2 == 0 {
                    1.0 / n
                } else {
                    -1.0 / n
                }
            }
        }
    }
}

/// A sequence given by a finite prefix and a tail rule: for `n > prefix.len()`,
/// `X_n = cycle[n mod k] + g(n) * direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct TailSequence {
    pub prefix: Vec<RandomVariable>,
    pub cycle: Vec<RandomVariable>,
    pub perturbation: Option<(RandomVariable, Vanishing)>,
}

impl TailSequence {
    pub fn constant(x: RandomVariable) -> Self {
        Self {
            prefix: Vec::new(),
            cycle: vec![x],
            perturbation: None,
        }
    }

    /// The `n`-th term, `n >= 1`.
    pub fn term(&self, n: usize) -> RandomVariable {
        assert!(n >= 1, "sequences are indexed from 1");
        if n <= self.prefix.len() {
            return self.prefix[n - 1].clone();
        }
        let base = &self.cycle[n % self.cycle.len()];
        match &self.perturbation {
            None => base.clone(),
            Some((dir, g)) => {
                let s = g.at(n);
                base.zip_with(dir, |b, d| b + s * d)
            }
        }
    }
}

/// Limit superior or inferior in probability, which on a finite space is
/// the per-scenario extremum over the limit points of the tail.
pub fn p_lim_extremum(seq: &TailSequence, mode: LimitMode) -> Result<RandomVariable> {
    let first = seq.cycle.first().ok_or(Error::EmptyFamily)?;
    let n = first.len();
    let all = seq
        .prefix
        .iter()
        .chain(&seq.cycle)
        .chain(seq.perturbation.iter().map(|p| &p.0));
    for x in all {
        if x.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: x.len(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("sequence term".to_string()));
        }
    }
    let mut out = first.clone();
    for x in &seq.cycle[1..] {
        for (o, &v) in out.0.iter_mut().zip(x.values()) {
            *o = match mode {
                LimitMode::Limsup => o.max(v),
                LimitMode::Liminf => o.min(v),
            };
        }
    }
    Ok(out)
}

/// Outcome of [`cond_ui_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UiReport {
    /// `max_alpha E[G(|X_alpha|) | A]` per atom.
    pub per_atom_bound: Vec<f64>,
    pub bound: f64,
    /// Running sup over the whole family divided by the sup over its first half.
    pub growth_ratio: f64,
    pub unbounded_growth: bool,
    pub uniformly_integrable: bool,
}

/// Growth ratio above which a family is reported as unbounded.
pub const GROWTH_RATIO_LIMIT: f64 = 1.05;

/// Checks that `G(x) / x` increases to infinity on a geometric grid.
pub fn is_superlinear(growth: &dyn Fn(f64) -> f64) -> bool {
    let ratios: Vec<f64> = (0..=12)
        .map(|k| {
            let x = 10f64.powf(k as f64 / 2.0);
            growth(x) / x
        })
        .collect();
    ratios.iter().all(|r| r.is_finite())
        && ratios.windows(2).all(|w| w[1] > w[0])
        && ratios[ratios.len() - 1] >= 100.0 * ratios[0].abs().max(1e-300)
}

/// de la Vallee-Poussin surrogate for `G`-uniform integrability of a finite family.
pub fn cond_ui_check(
    space: &FilteredSpace,
    family: &[RandomVariable],
    g: &SigmaAlgebra,
    growth: &dyn Fn(f64) -> f64,
) -> Result<UiReport> {
    if !is_superlinear(growth) {
        return Err(Error::OutOfRange(
            "growth function is not superlinear".to_string(),
        ));
    }
    if family.is_empty() {
        return Ok(UiReport {
            per_atom_bound: vec![0.0; g.n_atoms()],
            bound: 0.0,
            growth_ratio: 1.0,
            unbounded_growth: false,
            uniformly_integrable: true,
        });
    }
    let mut running = Vec::with_capacity(family.len());
    let mut per_atom = vec![f64::NEG_INFINITY; g.n_atoms()];
    for x in family {
        if x.len() != space.n_scenarios() {
            return Err(Error::LengthMismatch {
                expected: space.n_scenarios(),
                got: x.len(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("family member".to_string()));
        }
        let gx = x.map(|v| growth(v.abs()));
        for (b, e) in per_atom.iter_mut().zip(space.atom_expect(&gx, g)) {
            *b = b.max(e);
        }
        running.push(per_atom.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let bound = running[running.len() - 1];
    let half = running[(running.len() - 1) / 2];
    let growth_ratio = if half > 0.0 { bound / half } else if bound > 0.0 { f64::INFINITY } else { 1.0 };
    let unbounded_growth = growth_ratio > GROWTH_RATIO_LIMIT;
    Ok(UiReport {
        per_atom_bound: per_atom,
        bound,
        growth_ratio,
        unbounded_growth,
        uniformly_integrable: bound.is_finite() && !unbounded_growth,
    })
}

/// An `F_tau`-convexly compact set: the `F_tau`-convex hull of finitely many
/// `F_tau`-measurable generators, optionally intersected with an order interval.
///
/// Members are constant on atoms, so per atom the set is the interval
/// `[lo_A, hi_A]` and `F_tau`-convex combinations act atom by atom.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexCompactSet {
    g: SigmaAlgebra,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ConvexCompactSet {
    pub fn new(
        g: SigmaAlgebra,
        generators: &[RandomVariable],
        interval: Option<(&RandomVariable, &RandomVariable)>,
    ) -> Result<Self> {
        let n_atoms = g.n_atoms();
        let (mut lo, mut hi) = (vec![f64::NEG_INFINITY; n_atoms], vec![f64::INFINITY; n_atoms]);
        if !generators.is_empty() {
            lo = vec![f64::INFINITY; n_atoms];
            hi = vec![f64::NEG_INFINITY; n_atoms];
            for x in generators {
                for (a, v) in g.atom_values(x)?.into_iter().enumerate() {
                    lo[a] = lo[a].min(v);
                    hi[a] = hi[a].max(v);
                }
            }
        }
        if let Some((a, b)) = interval {
            let (a, b) = (g.atom_values(a)?, g.atom_values(b)?);
            for k in 0..n_atoms {
                lo[k] = lo[k].max(a[k]);
                hi[k] = hi[k].min(b[k]);
            }
        }
        if generators.is_empty() && interval.is_none() {
            return Err(Error::EmptyFamily);
        }
        if let Some(k) = (0..n_atoms).find(|&k| !(lo[k] <= hi[k]) || !lo[k].is_finite() || !hi[k].is_finite()) {
            return Err(Error::OutOfRange(format!("set is empty or unbounded on atom {k}")));
        }
        Ok(Self { g, lo, hi })
    }

    /// Order interval `[a, b]` with constant ends.
    pub fn order_interval(g: SigmaAlgebra, a: f64, b: f64) -> Result<Self> {
        let n = g.atoms().iter().map(|x| x.members.len()).sum();
        let (a, b) = (RandomVariable::constant(n, a), RandomVariable::constant(n, b));
        Self::new(g, &[], Some((&a, &b)))
    }

    pub fn sigma(&self) -> &SigmaAlgebra {
        &self.g
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn lower(&self) -> RandomVariable {
        self.g.spread(&self.lo)
    }

    pub fn upper(&self) -> RandomVariable {
        self.g.spread(&self.hi)
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.lo.iter().all(|&v| v > 0.0)
    }

    pub fn contains(&self, x: &RandomVariable) -> bool {
        match self.g.atom_values(x) {
            Ok(v) => v
                .iter()
                .enumerate()
                .all(|(k, &x)| x >= self.lo[k] && x <= self.hi[k]),
            Err(_) => false,
        }
    }

    /// A member drawn uniformly per atom.
    pub fn sample(&self, rng: &mut impl Rng) -> RandomVariable {
        let vals: Vec<f64> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| if b > a { rng.gen_range(a..=b) } else { a })
            .collect();
        self.g.spread(&vals)
    }

    /// Per-atom lattice with spacing at most `h`, including both ends.
    pub fn lattice(&self, h: f64) -> Vec<Vec<f64>> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| {
                let k = ((b - a) / h).ceil().max(0.0) as usize;
                if k == 0 {
                    vec![a]
                } else {
                    (0..=k).map(|i| a + (b - a) * i as f64 / k as f64).collect()
                }
            })
            .collect()
    }
}

/// Iteration cap for the greedy net constructions.
pub const NET_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    /// Hull = `F_tau`-convex combinations of the net.
    Convex,
    /// Hull = members of K dominated by `F_tau`-partition splices of the net.
    PartitionSubconvex,
}

/// Per-atom interval covered by the hull of `net` inside `k`.
fn hull_intervals(k: &ConvexCompactSet, net: &[RandomVariable], kind: NetKind) -> Vec<(f64, f64)> {
    let vals: Vec<Vec<f64>> = net
        .iter()
        .map(|x| k.g.atom_values(x).expect("net members are measurable"))
        .collect();
    (0..k.lo.len())
        .map(|a| {
            let top = vals.iter().map(|v| v[a]).fold(f64::NEG_INFINITY, f64::max);
            match kind {
                NetKind::Convex => (vals.iter().map(|v| v[a]).fold(f64::INFINITY, f64::min), top),
                NetKind::PartitionSubconvex => (k.lo[a], top),
            }
        })
        .collect()
}

/// Ky Fan distance from `x` to the hull of `net`, via per-atom projection.
pub fn hull_distance(
    space: &FilteredSpace,
    k: &ConvexCompactSet,
    net: &[RandomVariable],
    kind: NetKind,
    x: &RandomVariable,
) -> Result<f64> {
    let hull = hull_intervals(k, net, kind);
    let xv = k.g.atom_values(x)?;
    let proj: Vec<f64> = xv
        .iter()
        .zip(&hull)
        .map(|(&v, &(a, b))| v.clamp(a, b))
        .collect();
    ky_fan(space, x, &k.g.spread(&proj))
}

fn greedy_net(space: &FilteredSpace, k: &ConvexCompactSet, r: f64, kind: NetKind) -> Result<Vec<RandomVariable>> {
    if !(r > 0.0) {
        return Err(Error::OutOfRange(format!("net radius r={r} must be positive")));
    }
    let start = match kind {
        NetKind::Convex => k.lower(),
        NetKind::PartitionSubconvex => k.upper(),
    };
    let mut net = vec![start];
    for _ in 0..NET_MAX_ITER {
        // The farthest member splices, atom by atom, the end of K farthest
        // from the current hull.
        let hull = hull_intervals(k, &net, kind);
        let far: Vec<f64> = (0..k.lo.len())
            .map(|a| {
                let (h0, h1) = hull[a];
                if (h0 - k.lo[a]) >= (k.hi[a] - h1) {
                    k.lo[a]
                } else {
                    k.hi[a]
                }
            })
            .collect();
        let candidate = k.g.spread(&far);
        if hull_distance(space, k, &net, kind, &candidate)? <= r {
            return Ok(net);
        }
        net.push(candidate);
    }
    Err(Error::NetDidNotTerminate(NET_MAX_ITER))
}

/// Finite `F_tau`-convex `r`-net of `K` by the greedy farthest-point rule.
pub fn ftau_convex_net(space: &FilteredSpace, k: &ConvexCompactSet, r: f64) -> Result<Vec<RandomVariable>> {
    greedy_net(space, k, r, NetKind::Convex)
}

/// Finite partition sub-convex `r`-net of `K`; requires `K` strictly positive.
pub fn partition_subconvex_net(space: &FilteredSpace, k: &ConvexCompactSet, r: f64) -> Result<Vec<RandomVariable>> {
    if let Some(a) = k.lo.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::SetTouchesZero { atom: a });
    }
    greedy_net(space, k, r, NetKind::PartitionSubconvex)
}

/// Sampling certificate for a net.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverReport {
    pub kind: NetKind,
    pub radius: f64,
    pub net_size: usize,
    pub samples: usize,
    pub seed: u64,
    pub violations: usize,
    pub max_distance: f64,
}

pub fn net_cover_certificate(
    space: &FilteredSpace,
    k: &ConvexCompactSet,
    net: &[RandomVariable],
    kind: NetKind,
    r: f64,
    samples: usize,
    seed: u64,
) -> Result<CoverReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut max_distance: f64 = 0.0;
    for _ in 0..samples {
        let x = k.sample(&mut rng);
        let d = hull_distance(space, k, net, kind, &x)?;
        max_distance = max_distance.max(d);
        if d > r {
            violations += 1;
        }
    }
    Ok(CoverReport {
        kind,
        radius: r,
        net_size: net.len(),
        samples,
        seed,
        violations,
        max_distance,
    })
}

/// Primal candidates for the minimax verifier.
#[derive(Debug, Clone, PartialEq)]
pub enum XSpec {
    Singleton(RandomVariable),
    /// Per scenario `x in {step, 2 step, ..., bound}`.
    Grid { bound: f64, step: f64 },
}

/// Dual candidates for the minimax verifier.
#[derive(Debug, Clone, PartialEq)]
pub enum YSpec {
    Singleton(RandomVariable),
    /// Lattice points `y in step * N^k` of the deflator set
    /// `{y >= 0 : E[X_T y | A] <= eta for all admissible X with X_tau = 1}`.
    Deflators { eta: RandomVariable, step: f64 },
}

/// Maximum scenarios per atom for the minimax verifier.
pub const MINIMAX_MAX_SCENARIOS: usize = 4;
/// Maximum of the product of 1-D grid sizes, and of enumerated dual prefixes.
pub const MINIMAX_MAX_COMBINATIONS: f64 = 1e6;

/// Per-atom outcome of [`conditional_minimax_verify`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimaxAtom {
    /// `sup_x inf_y K(x, y)`.
    pub sup_inf: f64,
    /// `inf_y sup_x K(x, y)`.
    pub inf_sup: f64,
    pub gap: f64,
    pub frontier_size: usize,
    pub x_levels: usize,
    pub lipschitz: f64,
    /// `lipschitz * max(step_x, step_y)`.
    pub tolerance: f64,
    pub pass: bool,
    pub cuts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimaxVerification {
    pub atoms: Vec<MinimaxAtom>,
    pub max_gap: f64,
    pub min_gap: f64,
}

/// Exact `sup inf` and `inf sup` of `K(x, y) = E[U(x) - x y | A]` over the
/// discretized sets, atom by atom.
///
/// `inf_y sup_x` separates over scenarios once `y` is fixed; since the
/// objective decreases in `y` and the dual lattice is down-closed, the
/// infimum is attained on its upper frontier. `sup_x inf_y` is computed by
/// cutting-plane iterations: a branch-and-bound maximizes
/// `min_{y in S} K(x, y)` over the primal lattice for a growing cut set `S`
/// until the most violated dual point is already in `S`.
pub fn conditional_minimax_verify(
    market: &MarketModel,
    tau: &StoppingTime,
    u: &UtilityPair,
    xs: &XSpec,
    ys: &YSpec,
) -> Result<MinimaxVerification> {
    let space = market.space();
    let g = space.sigma_at(tau);
    if let Some(a) = g.atoms().iter().position(|a| a.members.len() > MINIMAX_MAX_SCENARIOS) {
        return Err(Error::GridTooLarge(format!(
            "atom {a} has {} scenarios (limit {MINIMAX_MAX_SCENARIOS})",
            g.atoms()[a].members.len()
        )));
    }
    let (x_step, x_levels_1d) = match xs {
        XSpec::Singleton(x) => {
            if x.len() != space.n_scenarios() || x.min_value() <= 0.0 {
                return Err(Error::OutOfRange("x must be a positive scenario vector".into()));
            }
            (0.0, 1usize)
        }
        XSpec::Grid { bound, step } => {
            if !(*step > 0.0 && *bound >= *step) {
                return Err(Error::OutOfRange(format!("x grid bound={bound} step={step}")));
            }
            (*step, (bound / step + 1e-9).floor() as usize)
        }
    };
    let (y_step, eta_atoms) = match ys {
        YSpec::Singleton(y) => {
            if y.len() != space.n_scenarios() || y.min_value() < 0.0 {
                return Err(Error::OutOfRange("y must be a nonnegative scenario vector".into()));
            }
            (0.0, vec![0.0; g.n_atoms()])
        }
        YSpec::Deflators { eta, step } => {
            if !(*step > 0.0) {
                return Err(Error::OutOfRange(format!("y grid step={step}")));
            }
            let e = g.atom_values(eta)?;
            if e.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::OutOfRange("eta must be positive".into()));
            }
            (*step, e)
        }
    };
    if let YSpec::Deflators { step, .. } = ys {
        // Largest single-scenario level across atoms bounds the 1-D y grid.
        let max_levels = g
            .atoms()
            .iter()
            .zip(&eta_atoms)
            .map(|(a, &e)| {
                let mass = space.node_prob(a.node);
                a.members
                    .iter()
                    .map(|&w| e * mass / space.prob()[w] / step)
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (x_levels_1d as f64) * max_levels > MINIMAX_MAX_COMBINATIONS {
            return Err(Error::GridTooLarge(format!(
                "{x_levels_1d} x-levels times {max_levels:.0} y-levels exceeds {MINIMAX_MAX_COMBINATIONS:e}"
            )));
        }
    }

    let atoms: Vec<MinimaxAtom> = g
        .atoms()
        .par_iter()
        .enumerate()
        .map(|(a, atom)| {
            let mass = space.node_prob(atom.node);
            let p: Vec<f64> = atom.members.iter().map(|&w| space.prob()[w] / mass).collect();
            let x_vals: Vec<Vec<f64>> = atom
                .members
                .iter()
                .map(|&w| match xs {
                    XSpec::Singleton(x) => vec![x[w]],
                    XSpec::Grid { step, .. } => (1..=x_levels_1d).map(|j| j as f64 * step).collect(),
                })
                .collect();
            let frontier = match ys {
                YSpec::Singleton(y) => vec![atom.members.iter().map(|&w| y[w]).collect()],
                YSpec::Deflators { step, .. } => {
                    deflator_frontier(market, atom.node, &atom.members, eta_atoms[a], *step)?
                }
            };
            Ok(solve_minimax_atom(u, &p, &x_vals, &frontier, x_step, y_step))
        })
        .collect::<Result<_>>()?;
    Ok(MinimaxVerification {
        max_gap: atoms.iter().map(|a| a.gap).fold(f64::NEG_INFINITY, f64::max),
        min_gap: atoms.iter().map(|a| a.gap).fold(f64::INFINITY, f64::min),
        atoms,
    })
}

/// `W_node = sup_H E[W_child (1 + H dS)]` with `W = y` at the leaves; `y` is
/// an admissible dual point iff `W_root <= eta`.
struct DeflatorOracle {
    /// Non-terminal nodes in reverse BFS order, each with its constraint rows
    /// expressed on indices into `vals`.
    rows: Vec<(usize, Vec<Vec<(usize, f64)>>, bool)>,
    n_nodes: usize,
    leaf_slot: Vec<usize>,
}

impl DeflatorOracle {
    fn new(market: &MarketModel, root: crate::filtered_space::NodeId, members: &[usize]) -> Self {
        use std::collections::{BTreeMap, VecDeque};
        let space = market.space();
        let mut order = Vec::new();
        let mut queue = VecDeque::from([root]);
        let mut slot = BTreeMap::new();
        while let Some(n) = queue.pop_front() {
            slot.insert(n, slot.len());
            order.push(n);
            if n.t < market.horizon() {
                queue.extend(space.children(n));
            }
        }
        let mut rows = Vec::new();
        for &n in order.iter().rev() {
            if n.t == market.horizon() {
                continue;
            }
            let step = market.step(n);
            let mut recession = false;
            let cons: Vec<Vec<(usize, f64)>> = node_constraints(&step)
                .into_iter()
                .filter_map(|k| {
                    if matches!(k.kind, ConstraintKind::Recession { .. }) {
                        recession = true;
                        return None;
                    }
                    Some(k.coeffs.iter().map(|&(c, a)| (slot[&c], a)).collect())
                })
                .collect();
            rows.push((slot[&n], cons, recession));
        }
        let leaf_slot = members
            .iter()
            .map(|&w| {
                slot[&crate::filtered_space::NodeId {
                    t: market.horizon(),
                    cell: space.cell_of(market.horizon(), w),
                }]
            })
            .collect();
        Self {
            rows,
            n_nodes: order.len(),
            leaf_slot,
        }
    }

    fn root_value(&self, y: &[f64], buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        buf.resize(self.n_nodes, 0.0);
        for (&s, &v) in self.leaf_slot.iter().zip(y) {
            buf[s] = v;
        }
        for (node, cons, recession) in &self.rows {
            if *recession {
                return f64::INFINITY;
            }
            buf[*node] = cons
                .iter()
                .map(|row| row.iter().map(|&(c, a)| a * buf[c]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
        }
        buf[0]
    }
}

/// Upper frontier of the down-closed dual lattice: for every admissible
/// prefix of the first `k - 1` coordinates, the largest admissible last one.
fn deflator_frontier(
    market: &MarketModel,
    root: crate::filtered_space::NodeId,
    members: &[usize],
    eta: f64,
    step: f64,
) -> Result<Vec<Vec<f64>>> {
    let k = members.len();
    if root.t == market.horizon() {
        // Y = 1 at tau = T: the only deflator is eta itself.
        return Ok(vec![vec![((eta / step) + 1e-9).floor() * step]]);
    }
    let oracle = DeflatorOracle::new(market, root, members);
    let limit = eta * (1.0 + 1e-12);
    let mut buf = Vec::new();
    let mut admissible = |levels: &[usize]| -> bool {
        let y: Vec<f64> = levels.iter().map(|&j| j as f64 * step).collect();
        oracle.root_value(&y, &mut buf) <= limit
    };
    let mut frontier = Vec::new();
    let mut levels = vec![0usize; k];
    let mut prefixes = 0f64;
    if !admissible(&levels) {
        return Ok(frontier);
    }
    // odometer over the first k-1 coordinates, pruned by down-closedness
    'outer: loop {
        prefixes += 1.0;
        if prefixes > MINIMAX_MAX_COMBINATIONS {
            return Err(Error::GridTooLarge(format!(
                "more than {MINIMAX_MAX_COMBINATIONS:e} dual prefixes"
            )));
        }
        let (mut lo, mut hi) = (0usize, 1usize);
        loop {
            levels[k - 1] = hi;
            if !admissible(&levels) {
                break;
            }
            lo = hi;
            hi *= 2;
        }
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            levels[k - 1] = mid;
            if admissible(&levels) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        levels[k - 1] = lo;
        frontier.push(levels.iter().map(|&j| j as f64 * step).collect());
        levels[k - 1] = 0;
        let mut d = k.saturating_sub(1);
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            levels[d] += 1;
            if admissible(&levels) {
                break;
            }
            levels[d] = 0;
        }
    }
    Ok(frontier)
}

/// `max_j U(x_j) - x_j y` over a sorted concave-objective grid slice.
fn best_on(u: &UtilityPair, xs: &[f64], y: f64) -> (usize, f64) {
    let target = if y > 0.0 { u.inv_marginal(y) } else { f64::INFINITY };
    let i = xs.partition_point(|&x| x < target);
    let mut best = (0, f64::NEG_INFINITY);
    for j in [i.saturating_sub(1), i.min(xs.len() - 1)] {
        let v = u.u(xs[j]) - xs[j] * y;
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

fn kernel(u: &UtilityPair, p: &[f64], x: &[f64], y: &[f64]) -> f64 {
    p.iter()
        .zip(x.iter().zip(y))
        .map(|(p, (&x, &y))| p * (u.u(x) - x * y))
        .sum()
}

#[derive(Debug, Clone)]
struct Node {
    bound: f64,
    lo: Vec<usize>,
    hi: Vec<usize>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.total_cmp(&other.bound)
    }
}

fn solve_minimax_atom(
    u: &UtilityPair,
    p: &[f64],
    x_vals: &[Vec<f64>],
    frontier: &[Vec<f64>],
    x_step: f64,
    y_step: f64,
) -> MinimaxAtom {
    let k = p.len();
    // inf_y sup_x: separable in x once y is fixed
    let sup_x = |y: &[f64]| -> (Vec<f64>, f64) {
        let xs: Vec<f64> = (0..k).map(|w| x_vals[w][best_on(u, &x_vals[w], y[w]).0]).collect();
        let v = kernel(u, p, &xs, y);
        (xs, v)
    };
    let (mut y_best, mut inf_sup) = (0usize, f64::INFINITY);
    for (i, y) in frontier.iter().enumerate() {
        let v = sup_x(y).1;
        if v < inf_sup {
            inf_sup = v;
            y_best = i;
        }
    }

    // sup_x inf_y by cutting planes
    let mut cuts = vec![y_best];
    let sup_inf;
    loop {
        let (x_star, relaxed) = maximize_min_over(u, p, x_vals, frontier, &cuts);
        let (worst, value) = frontier
            .iter()
            .enumerate()
            .map(|(i, y)| (i, kernel(u, p, &x_star, y)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if value >= relaxed || cuts.contains(&worst) {
            sup_inf = value.min(relaxed);
            break;
        }
        cuts.push(worst);
    }

    let x_max = x_vals.iter().map(|v| v[v.len() - 1]).fold(0.0, f64::max);
    let x_min = x_vals.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
    let y_max = frontier.iter().flatten().copied().fold(0.0, f64::max);
    let lipschitz = (u.u_prime(x_min) + y_max).max(x_max);
    let tolerance = lipschitz * x_step.max(y_step);
    let gap = inf_sup - sup_inf;
    MinimaxAtom {
        sup_inf,
        inf_sup,
        gap,
        frontier_size: frontier.len(),
        x_levels: x_vals.iter().map(|v| v.len()).max().unwrap_or(0),
        lipschitz,
        tolerance,
        pass: gap >= -1e-12 && gap <= tolerance,
        cuts: cuts.len(),
    }
}

/// Exact `max_x min_{y in cuts} K(x, y)` over the primal lattice by
/// best-first branch and bound on index boxes.
fn maximize_min_over(
    u: &UtilityPair,
    p: &[f64],
    x_vals: &[Vec<f64>],
    frontier: &[Vec<f64>],
    cuts: &[usize],
) -> (Vec<f64>, f64) {
    let k = p.len();
    let bound_of = |lo: &[usize], hi: &[usize]| -> f64 {
        cuts.iter()
            .map(|&c| {
                let y = &frontier[c];
                (0..k)
                    .map(|w| p[w] * best_on(u, &x_vals[w][lo[w]..=hi[w]], y[w]).1)
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let value_at = |idx: &[usize]| -> f64 {
        let x: Vec<f64> = (0..k).map(|w| x_vals[w][idx[w]]).collect();
        cuts.iter()
            .map(|&c| kernel(u, p, &x, &frontier[c]))
            .fold(f64::INFINITY, f64::min)
    };
    let lo0 = vec![0; k];
    let hi0: Vec<usize> = x_vals.iter().map(|v| v.len() - 1).collect();
    // incumbent: the sup_x point of the first cut
    let y0 = &frontier[cuts[0]];
    let mut best_idx: Vec<usize> = (0..k).map(|w| best_on(u, &x_vals[w], y0[w]).0).collect();
    let mut best = value_at(&best_idx);
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        bound: bound_of(&lo0, &hi0),
        lo: lo0,
        hi: hi0,
    });
    while let Some(node) = heap.pop() {
        if node.bound <= best {
            break;
        }
        let w = (0..k).max_by_key(|&w| node.hi[w] - node.lo[w]).unwrap();
        if node.hi[w] == node.lo[w] {
            let v = value_at(&node.lo);
            if v > best {
                best = v;
                best_idx = node.lo.clone();
            }
            continue;
        }
        let mid = (node.lo[w] + node.hi[w]) / 2;
        for (a, b) in [(node.lo[w], mid), (mid + 1, node.hi[w])] {
            let mut lo = node.lo.clone();
            let mut hi = node.hi.clone();
            lo[w] = a;
            hi[w] = b;
            let bound = bound_of(&lo, &hi);
            if bound > best {
                // probe the box's centre to tighten the incumbent
                let probe: Vec<usize> = (0..k).map(|i| (lo[i] + hi[i]) / 2).collect();
                let v = value_at(&probe);
                if v > best {
                    best = v;
                    best_idx = probe;
                }
                heap.push(Node { bound, lo, hi });
            }
        }
    }
    let x: Vec<f64> = (0..k).map(|w| x_vals[w][best_idx[w]]).collect();
    (x, best)
}

//! Conditional primal and dual problems at a stopping time.
//!
//! For each atom `A` of `F_tau` (a node of the tree) the primal problem is
//!
//! ```text
//! u(xi)  = max_H  E[U(xi X_T) | A],   X_T = 1 + sum H dS >= 0
//! ```
//!
//! over share holdings `H` on the sub-tree below `A`, and the dual problem is
//!
//! ```text
//! v(eta) = min_Y  E[V(eta Y_T) | A]
//! ```
//!
//! over supermartingale deflators with `Y = 1` on `A`. Both are smooth convex
//! programs solved by [`crate::solver`]. Atoms do not interact, so
//! `F_tau`-measurable inputs are handled atom by atom and reassembled in atom
//! order.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtered_space::{NodeId, RandomVariable, SigmaAlgebra, StoppingTime};
use crate::linalg::Matrix;
use crate::market::{node_constraints, MarketModel, NodeStep};
use crate::solver::{minimize, BarrierError, BarrierOptions, Constraints, Objective};
use crate::utility::{geometric_grid, UtilityPair};

/// Relative finite-difference step for [`dual_derivative`].
pub const FD_STEP: f64 = 1e-4;
/// Relative derivative gap that raises [`Error::DerivativeInconsistency`].
pub const DERIVATIVE_ERROR_GAP: f64 = 5e-3;

/// Numerical settings shared by the solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub barrier: BarrierOptions,
    /// Interior start `Y_child = c Y_node q / p` for the dual, `0 < c < 1`.
    pub dual_start: f64,
    /// Optional lower bound `Y_T >= floor` on dual candidates.
    pub floor: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            barrier: BarrierOptions::default(),
            dual_start: 0.9,
            floor: None,
        }
    }
}

/// Primal solution at a stopping time, normalized so that `X_tau = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimalSolution {
    pub values: Vec<f64>,
    pub u_prime: Vec<f64>,
    pub x_hat: RandomVariable,
    /// `X_t`, `t = 0..=T`, equal to 1 before `tau`.
    pub wealth_path: Vec<RandomVariable>,
    /// Optimal share holdings per non-terminal node after `tau`.
    pub strategy: Vec<(NodeId, f64)>,
    pub kkt_residual: f64,
}

/// Dual solution at a stopping time, normalized so that `Y_tau = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualSolution {
    pub values: Vec<f64>,
    pub v_prime: Vec<f64>,
    pub y_hat: RandomVariable,
    /// `Y_t`, `t = 0..=T`, equal to 1 before `tau`.
    pub deflator_path: Vec<RandomVariable>,
    pub kkt_residual: f64,
}

/// Both sides of the duality at one `(xi, eta)` pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityResult {
    pub atom_values_u: Vec<f64>,
    pub atom_values_v: Vec<f64>,
    pub x_hat: RandomVariable,
    pub y_hat: RandomVariable,
    pub u_prime: Vec<f64>,
    pub v_prime: Vec<f64>,
    pub kkt_residual: f64,
    pub wealth_path: Vec<RandomVariable>,
    pub deflator_path: Vec<RandomVariable>,
}

/// The sub-tree hanging below one atom.
#[derive(Debug, Clone)]
struct Subtree {
    root: NodeId,
    steps: Vec<NodeStep>,
    below: Vec<NodeId>,
    below_index: BTreeMap<NodeId, usize>,
    leaves: Vec<usize>,
    leaf_p: Vec<f64>,
    leaf_var: Vec<usize>,
    /// Per leaf: `(step index, dS on the path)`.
    exposure: Vec<Vec<(usize, f64)>>,
}

impl Subtree {
    fn new(m: &MarketModel, root: NodeId) -> Self {
        let space = m.space();
        let horizon = m.horizon();
        let mut steps = Vec::new();
        let mut below = Vec::new();
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            if n.t == horizon {
                continue;
            }
            let step = m.step(n);
            for &c in &step.children {
                below.push(c);
                queue.push_back(c);
            }
            steps.push(step);
        }
        let below_index: BTreeMap<NodeId, usize> =
            below.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let leaves = space.members(root).to_vec();
        let mass = space.node_prob(root);
        let leaf_p = leaves.iter().map(|&w| space.prob()[w] / mass).collect();
        let leaf_var = leaves
            .iter()
            .map(|&w| {
                let node = NodeId {
                    t: horizon,
                    cell: space.cell_of(horizon, w),
                };
                below_index.get(&node).copied().unwrap_or(usize::MAX)
            })
            .collect();
        let exposure = leaves
            .iter()
            .map(|&w| {
                steps
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.node.cell == space.cell_of(s.node.t, w))
                    .map(|(k, s)| {
                        let child = space.cell_of(s.node.t + 1, w);
                        let j = s.children.iter().position(|c| c.cell == child).unwrap();
                        (k, s.ds[j])
                    })
                    .collect()
            })
            .collect();
        Self {
            root,
            steps,
            below,
            below_index,
            leaves,
            leaf_p,
            leaf_var,
            exposure,
        }
    }

    fn is_terminal(&self) -> bool {
        self.steps.is_empty()
    }

    fn terminal_wealth(&self, h: &[f64]) -> Vec<f64> {
        self.exposure
            .iter()
            .map(|e| 1.0 + e.iter().map(|&(k, d)| h[k] * d).sum::<f64>())
            .collect()
    }

    fn node_wealth(&self, h: &[f64]) -> BTreeMap<NodeId, f64> {
        let mut x = BTreeMap::from([(self.root, 1.0)]);
        for (k, step) in self.steps.iter().enumerate() {
            let xn = x[&step.node];
            for (c, d) in step.children.iter().zip(&step.ds) {
                x.insert(*c, xn + h[k] * d);
            }
        }
        x
    }

    fn dual_constraints(&self, floor: Option<f64>) -> Constraints {
        let n = self.below.len();
        let mut cons = Constraints::default();
        for step in &self.steps {
            for k in node_constraints(step) {
                let mut row = vec![0.0; n];
                for &(c, a) in &k.coeffs {
                    row[self.below_index[&c]] += a;
                }
                let rhs = if step.node == self.root {
                    k.parent_coeff
                } else {
                    row[self.below_index[&step.node]] -= k.parent_coeff;
                    0.0
                };
                cons.push(row, rhs);
            }
        }
        if let Some(eps) = floor {
            for &v in &self.leaf_var {
                let mut row = vec![0.0; n];
                row[v] = -1.0;
                cons.push(row, -eps);
            }
        }
        cons
    }
}

struct PrimalObjective<'a> {
    sub: &'a Subtree,
    u: &'a UtilityPair,
    xi: f64,
}

impl Objective for PrimalObjective<'_> {
    fn dim(&self) -> usize {
        self.sub.steps.len()
    }

    fn value(&self, h: &[f64]) -> Option<f64> {
        let x = self.sub.terminal_wealth(h);
        if x.iter().any(|&v| !(v > 0.0)) {
            return None;
        }
        let total: f64 = x
            .iter()
            .zip(&self.sub.leaf_p)
            .map(|(&v, p)| p * self.u.u(self.xi * v))
            .sum();
        total.is_finite().then_some(-total)
    }

    fn derivatives(&self, h: &[f64], g: &mut [f64], hess: &mut Matrix) {
        let x = self.sub.terminal_wealth(h);
        for (i, e) in self.sub.exposure.iter().enumerate() {
            let p = self.sub.leaf_p[i];
            let w1 = p * self.xi * self.u.u_prime(self.xi * x[i]);
            let w2 = p * self.xi * self.xi * self.u.u_second(self.xi * x[i]);
            for &(k, dk) in e {
                g[k] -= w1 * dk;
                for &(l, dl) in e {
                    hess.add(k, l, -w2 * dk * dl);
                }
            }
        }
    }
}

struct DualObjective<'a> {
    sub: &'a Subtree,
    u: &'a UtilityPair,
    eta: f64,
}

impl Objective for DualObjective<'_> {
    fn dim(&self) -> usize {
        self.sub.below.len()
    }

    fn value(&self, y: &[f64]) -> Option<f64> {
        let mut total = 0.0;
        for (&v, p) in self.sub.leaf_var.iter().zip(&self.sub.leaf_p) {
            if !(y[v] > 0.0) {
                return None;
            }
            total += p * self.u.v(self.eta * y[v]);
        }
        total.is_finite().then_some(total)
    }

    fn derivatives(&self, y: &[f64], g: &mut [f64], hess: &mut Matrix) {
        for (&v, p) in self.sub.leaf_var.iter().zip(&self.sub.leaf_p) {
            let z = self.eta * y[v];
            g[v] += p * self.eta * self.u.v_prime(z);
            hess.add(v, v, p * self.eta * self.eta * self.u.v_second(z));
        }
    }
}

#[derive(Debug, Clone)]
struct AtomPrimal {
    value: f64,
    u_prime: f64,
    x_hat: Vec<f64>,
    wealth: BTreeMap<NodeId, f64>,
    strategy: Vec<(NodeId, f64)>,
    kkt: f64,
}

#[derive(Debug, Clone)]
struct AtomDual {
    value: f64,
    v_prime: f64,
    y_hat: Vec<f64>,
    path: BTreeMap<NodeId, f64>,
    kkt: f64,
}

/// Solver bound to a market and a utility.
#[derive(Debug, Clone)]
pub struct Duality<'a> {
    market: &'a MarketModel,
    utility: &'a UtilityPair,
    settings: SolverSettings,
}

impl<'a> Duality<'a> {
    pub fn new(market: &'a MarketModel, utility: &'a UtilityPair) -> Self {
        Self {
            market,
            utility,
            settings: SolverSettings::default(),
        }
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn market(&self) -> &MarketModel {
        self.market
    }

    pub fn utility(&self) -> &UtilityPair {
        self.utility
    }

    fn subtrees(&self, g: &SigmaAlgebra) -> Vec<Subtree> {
        g.atoms()
            .iter()
            .map(|a| Subtree::new(self.market, a.node))
            .collect()
    }

    fn atom_inputs(&self, g: &SigmaAlgebra, x: &RandomVariable, what: &str) -> Result<Vec<f64>> {
        let n = self.market.space().n_scenarios();
        if x.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: x.len(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        let vals = g.atom_values(x)?;
        if let Some(a) = vals.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::OutOfRange(format!(
                "{what} must be positive (atom {a}: {})",
                vals[a]
            )));
        }
        Ok(vals)
    }

    fn primal_atom(&self, sub: &Subtree, atom: usize, xi: f64) -> Result<AtomPrimal> {
        let u = self.utility;
        if sub.is_terminal() {
            return Ok(AtomPrimal {
                value: u.u(xi),
                u_prime: u.u_prime(xi),
                x_hat: vec![1.0; sub.leaves.len()],
                wealth: BTreeMap::from([(sub.root, 1.0)]),
                strategy: Vec::new(),
                kkt: 0.0,
            });
        }
        if sub.steps.iter().any(|s| s.has_arbitrage()) {
            return Err(Error::PrimalUnbounded { atom });
        }
        let mut cons = Constraints::default();
        for e in &sub.exposure {
            let mut row = vec![0.0; sub.steps.len()];
            for &(k, d) in e {
                row[k] -= d;
            }
            cons.push(row, 1.0);
        }
        let obj = PrimalObjective { sub, u, xi };
        let sol = minimize(&obj, &cons, &vec![0.0; sub.steps.len()], &self.settings.barrier)
            .map_err(|e| match e {
                BarrierError::Unbounded => Error::PrimalUnbounded { atom },
                other => Error::SolverFailed {
                    atom,
                    reason: format!("{other:?}"),
                },
            })?;
        let x_hat = sub.terminal_wealth(&sol.x);
        let u_prime = x_hat
            .iter()
            .zip(&sub.leaf_p)
            .map(|(&x, p)| p * x * u.u_prime(xi * x))
            .sum();
        Ok(AtomPrimal {
            value: -sol.value,
            u_prime,
            wealth: sub.node_wealth(&sol.x),
            strategy: sub.steps.iter().map(|s| s.node).zip(sol.x.iter().copied()).collect(),
            x_hat,
            kkt: sol.kkt_residual,
        })
    }

    fn dual_atom(&self, sub: &Subtree, atom: usize, eta: f64) -> Result<AtomDual> {
        let u = self.utility;
        if sub.is_terminal() {
            return Ok(AtomDual {
                value: u.v(eta),
                v_prime: u.v_prime(eta),
                y_hat: vec![1.0; sub.leaves.len()],
                path: BTreeMap::from([(sub.root, 1.0)]),
                kkt: 0.0,
            });
        }
        let c = self.settings.dual_start;
        let mut y0 = vec![0.0; sub.below.len()];
        let mut at = BTreeMap::from([(sub.root, 1.0)]);
        for step in &sub.steps {
            let q = self
                .market
                .martingale_weights(step.node)
                .ok_or(Error::NflvrFailed)?;
            let yn = at[&step.node];
            for (j, child) in step.children.iter().enumerate() {
                let v = c * yn * q[j] / step.p[j];
                y0[sub.below_index[child]] = v;
                at.insert(*child, v);
            }
        }
        let cons = sub.dual_constraints(self.settings.floor);
        let obj = DualObjective { sub, u, eta };
        let sol = minimize(&obj, &cons, &y0, &self.settings.barrier).map_err(|e| match e {
            BarrierError::Unbounded => Error::DualUnbounded { atom },
            other => Error::SolverFailed {
                atom,
                reason: format!("{other:?}"),
            },
        })?;
        let y_hat: Vec<f64> = sub.leaf_var.iter().map(|&v| sol.x[v]).collect();
        let v_prime = -y_hat
            .iter()
            .zip(&sub.leaf_p)
            .map(|(&y, p)| p * y * u.inv_marginal(eta * y))
            .sum::<f64>();
        let mut path = BTreeMap::from([(sub.root, 1.0)]);
        for (i, n) in sub.below.iter().enumerate() {
            path.insert(*n, sol.x[i]);
        }
        Ok(AtomDual {
            value: sol.value,
            v_prime,
            y_hat,
            path,
            kkt: sol.kkt_residual,
        })
    }

    /// Spreads per-node values of each atom into scenario-indexed paths,
    /// holding the value 1 before `tau`.
    fn assemble_path(&self, tau: &StoppingTime, nodes: &[&BTreeMap<NodeId, f64>], g: &SigmaAlgebra) -> Vec<RandomVariable> {
        let space = self.market.space();
        (0..=self.market.horizon())
            .map(|t| {
                RandomVariable(
                    (0..space.n_scenarios())
                        .map(|w| {
                            if tau.at(w) > t {
                                1.0
                            } else {
                                let node = NodeId {
                                    t,
                                    cell: space.cell_of(t, w),
                                };
                                nodes[g.atom_of(w)][&node]
                            }
                        })
                        .collect(),
                )
            })
            .collect()
    }

    fn spread_leaves(&self, subs: &[Subtree], per_atom: &[&Vec<f64>]) -> RandomVariable {
        let mut out = vec![0.0; self.market.space().n_scenarios()];
        for (sub, vals) in subs.iter().zip(per_atom) {
            for (&w, &v) in sub.leaves.iter().zip(vals.iter()) {
                out[w] = v;
            }
        }
        RandomVariable(out)
    }

    pub fn primal(&self, tau: &StoppingTime, xi: &RandomVariable) -> Result<PrimalSolution> {
        let g = self.market.space().sigma_at(tau);
        let xs = self.atom_inputs(&g, xi, "xi")?;
        let subs = self.subtrees(&g);
        let atoms: Vec<AtomPrimal> = subs
            .par_iter()
            .zip(xs.par_iter())
            .enumerate()
            .map(|(a, (sub, &x))| self.primal_atom(sub, a, x))
            .collect::<Result<_>>()?;
        let wealth: Vec<&BTreeMap<NodeId, f64>> = atoms.iter().map(|a| &a.wealth).collect();
        let leaves: Vec<&Vec<f64>> = atoms.iter().map(|a| &a.x_hat).collect();
        Ok(PrimalSolution {
            values: atoms.iter().map(|a| a.value).collect(),
            u_prime: atoms.iter().map(|a| a.u_prime).collect(),
            x_hat: self.spread_leaves(&subs, &leaves),
            wealth_path: self.assemble_path(tau, &wealth, &g),
            strategy: atoms.iter().flat_map(|a| a.strategy.iter().copied()).collect(),
            kkt_residual: atoms.iter().map(|a| a.kkt).fold(0.0, f64::max),
        })
    }

    pub fn dual(&self, tau: &StoppingTime, eta: &RandomVariable) -> Result<DualSolution> {
        let g = self.market.space().sigma_at(tau);
        let es = self.atom_inputs(&g, eta, "eta")?;
        let subs = self.subtrees(&g);
        let atoms: Vec<AtomDual> = subs
            .par_iter()
            .zip(es.par_iter())
            .enumerate()
            .map(|(a, (sub, &e))| self.dual_atom(sub, a, e))
            .collect::<Result<_>>()?;
        let paths: Vec<&BTreeMap<NodeId, f64>> = atoms.iter().map(|a| &a.path).collect();
        let leaves: Vec<&Vec<f64>> = atoms.iter().map(|a| &a.y_hat).collect();
        Ok(DualSolution {
            values: atoms.iter().map(|a| a.value).collect(),
            v_prime: atoms.iter().map(|a| a.v_prime).collect(),
            y_hat: self.spread_leaves(&subs, &leaves),
            deflator_path: self.assemble_path(tau, &paths, &g),
            kkt_residual: atoms.iter().map(|a| a.kkt).fold(0.0, f64::max),
        })
    }

    pub fn solve(
        &self,
        tau: &StoppingTime,
        xi: &RandomVariable,
        eta: &RandomVariable,
    ) -> Result<DualityResult> {
        let p = self.primal(tau, xi)?;
        let d = self.dual(tau, eta)?;
        Ok(DualityResult {
            atom_values_u: p.values,
            atom_values_v: d.values,
            x_hat: p.x_hat,
            y_hat: d.y_hat,
            u_prime: p.u_prime,
            v_prime: d.v_prime,
            kkt_residual: p.kkt_residual.max(d.kkt_residual),
            wealth_path: p.wealth_path,
            deflator_path: d.deflator_path,
        })
    }

    /// Formula and central finite-difference values of `v'(eta)` per atom.
    pub fn dual_derivative(&self, tau: &StoppingTime, eta: &RandomVariable) -> Result<DerivativeReport> {
        let base = self.dual(tau, eta)?;
        let up = self.dual(tau, &eta.map(|e| e * (1.0 + FD_STEP)))?;
        let down = self.dual(tau, &eta.map(|e| e * (1.0 - FD_STEP)))?;
        let g = self.market.space().sigma_at(tau);
        let es = g.atom_values(eta)?;
        let fd: Vec<f64> = (0..es.len())
            .map(|a| (up.values[a] - down.values[a]) / (2.0 * FD_STEP * es[a]))
            .collect();
        let rel_gap: Vec<f64> = base
            .v_prime
            .iter()
            .zip(&fd)
            .map(|(f, d)| (f - d).abs() / f.abs().max(f64::MIN_POSITIVE))
            .collect();
        for (a, &r) in rel_gap.iter().enumerate() {
            if !(r <= DERIVATIVE_ERROR_GAP) {
                return Err(Error::DerivativeInconsistency {
                    atom: a,
                    formula: base.v_prime[a],
                    finite_difference: fd[a],
                });
            }
        }
        Ok(DerivativeReport {
            formula: base.v_prime,
            finite_difference: fd,
            max_rel_gap: rel_gap.iter().copied().fold(0.0, f64::max),
            rel_gap,
        })
    }

    /// `|v(eta) - sup_xi (u(xi) - xi eta)|` per atom over a geometric grid of
    /// `points` values spanning `[I(1e3 eta), I(1e-3 eta)]`.
    ///
    /// The grid maximum is sharpened by two successive parabolic steps in
    /// `ln xi` inside the bracket around the best grid point.
    pub fn conjugacy_check(
        &self,
        tau: &StoppingTime,
        eta: &RandomVariable,
        points: usize,
    ) -> Result<ConjugacyReport> {
        if points < 3 {
            return Err(Error::OutOfRange(format!("conjugacy grid needs >= 3 points, got {points}")));
        }
        let g = self.market.space().sigma_at(tau);
        let es = self.atom_inputs(&g, eta, "eta")?;
        let subs = self.subtrees(&g);
        let u = self.utility;
        let atoms: Vec<ConjugacyAtom> = subs
            .iter()
            .zip(&es)
            .enumerate()
            .map(|(a, (sub, &eta))| {
                let v = self.dual_atom(sub, a, eta)?.value;
                let grid = geometric_grid(u.inv_marginal(eta * 1e3), u.inv_marginal(eta * 1e-3), points);
                let objective = |xi: f64| -> Result<f64> {
                    Ok(self.primal_atom(sub, a, xi)?.value - xi * eta)
                };
                let vals: Vec<f64> = grid
                    .par_iter()
                    .map(|&xi| objective(xi))
                    .collect::<Result<_>>()?;
                let k = (0..vals.len())
                    .max_by(|&i, &j| vals[i].total_cmp(&vals[j]))
                    .unwrap();
                let grid_sup = vals[k];
                let mut refined = grid_sup;
                if k > 0 && k + 1 < vals.len() {
                    let mut tri = [
                        (grid[k - 1].ln(), vals[k - 1]),
                        (grid[k].ln(), vals[k]),
                        (grid[k + 1].ln(), vals[k + 1]),
                    ];
                    for _ in 0..PARABOLIC_STEPS {
                        let Some(t) = parabola_vertex(tri) else { break };
                        let f = objective(t.exp())?;
                        refined = refined.max(f);
                        let [l, m, r] = tri;
                        tri = match (t < m.0, f > m.1) {
                            (true, true) => [l, (t, f), m],
                            (true, false) => [(t, f), m, r],
                            (false, true) => [m, (t, f), r],
                            (false, false) => [l, m, (t, f)],
                        };
                    }
                }
                Ok(ConjugacyAtom {
                    eta,
                    v,
                    grid_sup,
                    refined_sup: refined,
                    grid_residual: (v - grid_sup).abs(),
                    residual: (v - refined).abs(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ConjugacyReport {
            points,
            max_residual: atoms.iter().map(|a| a.residual).fold(0.0, f64::max),
            max_grid_residual: atoms.iter().map(|a| a.grid_residual).fold(0.0, f64::max),
            atoms,
        })
    }

    /// Solves the primal at `xi`, sets `eta = u'(xi)` and compares
    /// `eta Y_T` with `U'(xi X_T)` scenario by scenario.
    pub fn dual_relation_check(&self, tau: &StoppingTime, xi: &RandomVariable) -> Result<DualRelationReport> {
        let g = self.market.space().sigma_at(tau);
        let primal = self.primal(tau, xi)?;
        let eta = g.spread(&primal.u_prime);
        let dual = self.dual(tau, &eta)?;
        let u = self.utility;
        let residual = (0..xi.len())
            .map(|w| {
                let target = u.u_prime(xi[w] * primal.x_hat[w]);
                (eta[w] * dual.y_hat[w] - target).abs() / target
            })
            .fold(0.0, f64::max);
        Ok(DualRelationReport {
            eta: primal.u_prime.clone(),
            residual,
            x_hat: primal.x_hat,
            y_hat: dual.y_hat,
        })
    }

    /// `U_t = u_t(x X_t)` along the optimal wealth from time 0, re-solving
    /// the conditional problem at every node.
    pub fn value_process(&self, x: f64) -> Result<ValueProcess> {
        let space = self.market.space();
        let horizon = self.market.horizon();
        let tau0 = space.deterministic_time(0);
        let start = self.primal(&tau0, &space.constant(x))?;
        let mut values = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let tau = space.deterministic_time(t);
            let xi = start.wealth_path[t].map(|v| x * v);
            let sol = self.primal(&tau, &xi)?;
            values.push(space.sigma_at(&tau).spread(&sol.values));
        }
        let mut martingale_residual: f64 = 0.0;
        for t in 0..horizon {
            let next = space.cond_expect(&values[t + 1], &space.sigma_at_time(t));
            martingale_residual = martingale_residual.max(next.max_abs_diff(&values[t]));
        }
        let terminal = start.x_hat.map(|v| self.utility.u(x * v));
        let consistency_residual = (0..=horizon)
            .map(|t| space.cond_expect(&terminal, &space.sigma_at_time(t)).max_abs_diff(&values[t]))
            .fold(0.0, f64::max);
        Ok(ValueProcess {
            values,
            martingale_residual,
            consistency_residual,
        })
    }

    /// Exhaustive grid search over per-node wealth proportions, one value per atom.
    pub fn brute_force_oracle(
        &self,
        tau: &StoppingTime,
        xi: &RandomVariable,
        grid: GridSpec,
    ) -> Result<Vec<f64>> {
        Ok(self.brute_force_optimum(tau, xi, grid)?.values)
    }

    /// As [`Duality::brute_force_oracle`], also returning the maximizing
    /// proportions and the terminal wealth they generate from `X_tau = 1`.
    pub fn brute_force_optimum(
        &self,
        tau: &StoppingTime,
        xi: &RandomVariable,
        grid: GridSpec,
    ) -> Result<BruteForceOptimum> {
        let g = self.market.space().sigma_at(tau);
        let xs = self.atom_inputs(&g, xi, "xi")?;
        let subs = self.subtrees(&g);
        let atoms: Vec<(f64, Vec<(NodeId, f64)>, Vec<f64>)> = subs
            .iter()
            .zip(&xs)
            .enumerate()
            .map(|(a, (sub, &x))| brute_force_atom(sub, a, self.utility, x, grid))
            .collect::<Result<_>>()?;
        let leaves: Vec<&Vec<f64>> = atoms.iter().map(|a| &a.2).collect();
        Ok(BruteForceOptimum {
            values: atoms.iter().map(|a| a.0).collect(),
            proportions: atoms.iter().flat_map(|a| a.1.iter().copied()).collect(),
            x_hat: self.spread_leaves(&subs, &leaves),
        })
    }
}

/// Output of [`Duality::brute_force_optimum`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceOptimum {
    pub values: Vec<f64>,
    /// Wealth proportion invested per non-terminal node.
    pub proportions: Vec<(NodeId, f64)>,
    pub x_hat: RandomVariable,
}

/// Grid for [`Duality::brute_force_oracle`]: an exhaustive pass at `step`
/// followed by `zoom_levels` passes at `step / 10^k` around the incumbent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub step: f64,
    pub zoom_levels: usize,
}

pub const BRUTE_FORCE_MAX_DIM: usize = 4;
const BRUTE_FORCE_MAX_POINTS: f64 = 5e7;

fn brute_force_atom(
    sub: &Subtree,
    atom: usize,
    u: &UtilityPair,
    xi: f64,
    grid: GridSpec,
) -> Result<(f64, Vec<(NodeId, f64)>, Vec<f64>)> {
    let dim = sub.steps.len();
    if dim > BRUTE_FORCE_MAX_DIM {
        return Err(Error::DimensionTooLarge {
            dim,
            limit: BRUTE_FORCE_MAX_DIM,
        });
    }
    if dim == 0 {
        return Ok((u.u(xi), Vec::new(), vec![1.0; sub.leaves.len()]));
    }
    if sub.steps.iter().any(|s| s.has_arbitrage()) {
        return Err(Error::PrimalUnbounded { atom });
    }
    let bounds: Vec<(f64, f64)> = sub.steps.iter().map(|s| s.position_bounds()).collect();
    let leaf_nodes: Vec<NodeId> = sub.leaf_var.iter().map(|&v| sub.below[v]).collect();
    let wealth = |pi: &[f64]| -> Vec<f64> {
        let mut x = BTreeMap::from([(sub.root, 1.0)]);
        for (k, step) in sub.steps.iter().enumerate() {
            let xn = x[&step.node];
            for (c, d) in step.children.iter().zip(&step.ds) {
                x.insert(*c, xn * (1.0 + pi[k] * d));
            }
        }
        leaf_nodes.iter().map(|n| x[n]).collect()
    };
    let eval = |pi: &[f64]| -> f64 {
        wealth(pi)
            .iter()
            .zip(&sub.leaf_p)
            .map(|(x, p)| p * u.u(xi * x))
            .sum()
    };
    let mut lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
    let mut hi: Vec<f64> = bounds.iter().map(|b| b.1).collect();
    let mut step = grid.step;
    let mut best = (f64::NEG_INFINITY, vec![0.0; dim]);
    for level in 0..=grid.zoom_levels {
        let counts: Vec<usize> = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| ((b - a) / step).floor() as usize + 1)
            .collect();
        let total: f64 = counts.iter().map(|&c| c as f64).product();
        if total > BRUTE_FORCE_MAX_POINTS {
            return Err(Error::GridTooLarge(format!(
                "{total:e} grid points at level {level} (limit {BRUTE_FORCE_MAX_POINTS:e})"
            )));
        }
        let mut idx = vec![0usize; dim];
        let mut pi = vec![0.0; dim];
        loop {
            for k in 0..dim {
                pi[k] = lo[k] + idx[k] as f64 * step;
            }
            let v = eval(&pi);
            if v > best.0 {
                best = (v, pi.clone());
            }
            let mut k = 0;
            while k < dim {
                idx[k] += 1;
                if idx[k] < counts[k] {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == dim {
                break;
            }
        }
        for k in 0..dim {
            lo[k] = (best.1[k] - 2.0 * step).max(bounds[k].0);
            hi[k] = (best.1[k] + 2.0 * step).min(bounds[k].1);
        }
        step /= 10.0;
    }
    let proportions = sub.steps.iter().map(|s| s.node).zip(best.1.iter().copied()).collect();
    Ok((best.0, proportions, wealth(&best.1)))
}

/// Successive parabolic steps sharpening the conjugacy grid maximum.
const PARABOLIC_STEPS: usize = 2;

/// Vertex of the parabola through three points, if it lies strictly inside
/// the bracket and away from the middle point.
fn parabola_vertex(tri: [(f64, f64); 3]) -> Option<f64> {
    let [(t0, f0), (t1, f1), (t2, f2)] = tri;
    let denom = (t1 - t0) * (f1 - f2) - (t1 - t2) * (f1 - f0);
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    let v = t1 - 0.5 * ((t1 - t0).powi(2) * (f1 - f2) - (t1 - t2).powi(2) * (f1 - f0)) / denom;
    (v > t0 && v < t2 && v != t1).then_some(v)
}

/// Output of [`Duality::dual_derivative`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub formula: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub rel_gap: Vec<f64>,
    pub max_rel_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjugacyAtom {
    pub eta: f64,
    pub v: f64,
    pub grid_sup: f64,
    pub refined_sup: f64,
    pub grid_residual: f64,
    pub residual: f64,
}

/// Output of [`Duality::conjugacy_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjugacyReport {
    pub points: usize,
    pub atoms: Vec<ConjugacyAtom>,
    pub max_residual: f64,
    pub max_grid_residual: f64,
}

/// Output of [`Duality::dual_relation_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualRelationReport {
    pub eta: Vec<f64>,
    pub residual: f64,
    pub x_hat: RandomVariable,
    pub y_hat: RandomVariable,
}

/// Output of [`Duality::value_process`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueProcess {
    /// `U_t` for `t = 0..=T`, `F_t`-measurable.
    pub values: Vec<RandomVariable>,
    /// `max |E[U_{t+1} | F_t] - U_t|` over nodes.
    pub martingale_residual: f64,
    /// `max |E[U(x X_T) | F_t] - U_t|` over nodes.
    pub consistency_residual: f64,
}

pub fn primal_solve(
    m: &MarketModel,
    u: &UtilityPair,
    tau: &StoppingTime,
    xi: &RandomVariable,
) -> Result<PrimalSolution> {
    Duality::new(m, u).primal(tau, xi)
}

pub fn dual_solve(
    m: &MarketModel,
    u: &UtilityPair,
    tau: &StoppingTime,
    eta: &RandomVariable,
) -> Result<DualSolution> {
    Duality::new(m, u).dual(tau, eta)
}

pub fn dual_derivative(
    m: &MarketModel,
    u: &UtilityPair,
    tau: &StoppingTime,
    eta: &RandomVariable,
) -> Result<DerivativeReport> {
    Duality::new(m, u).dual_derivative(tau, eta)
}

pub fn conjugacy_check(
    m: &MarketModel,
    u: &UtilityPair,
    tau: &StoppingTime,
    eta: &RandomVariable,
    points: usize,
) -> Result<ConjugacyReport> {
    Duality::new(m, u).conjugacy_check(tau, eta, points)
}

pub fn dual_relation_check(
    m: &MarketModel,
    u: &UtilityPair,
    tau: &StoppingTime,
    xi: &RandomVariable,
) -> Result<DualRelationReport> {
    Duality::new(m, u).dual_relation_check(tau, xi)
}

pub fn value_process(m: &MarketModel, u: &UtilityPair, x: f64) -> Result<ValueProcess> {
    Duality::new(m, u).value_process(x)
}

pub fn brute_force_oracle(
    m: &MarketModel,
    u: &UtilityPair,
    tau: &StoppingTime,
    xi: &RandomVariable,
    grid: GridSpec,
) -> Result<Vec<f64>> {
    Duality::new(m, u).brute_force_oracle(tau, xi, grid)
}

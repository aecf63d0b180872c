//! Single-asset market on an event tree.
//!
//! The model is given by martingale increments `dM_t` and a predictable drift
//! `lam_t`. Prices follow
//!
//! ```text
//! S_t = 1 + sum_{s<=t} (dM_s + lam_s * qv_s),   qv_s = E[dM_s^2 | F_{s-1}]
//! ```
//!
//! Per node the one-period density factor is the minimal martingale density
//! `z = 1 - alpha (dS - E[dS])` with `alpha = E[dS] / Var(dS)`, which makes
//! `Z S` an exact martingale. Supermartingale deflators are described by
//! their polar node constraints (see [`DeflatorConstraintSet`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtered_space::{FilteredSpace, NodeId, RandomVariable, StoppingTime};

/// Tolerance on `E[dM_t | F_{t-1}] = 0`.
pub const MARTINGALE_TOL: f64 = 1e-10;
/// Lower bound on the conditional weights of the equivalent martingale measure.
pub const NFLVR_EPS: f64 = 1e-9;
const ADAPTED_TOL: f64 = 1e-12;
const VAR_FLOOR: f64 = 1e-24;

/// A validated market.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    space: FilteredSpace,
    dm: Vec<RandomVariable>,
    lam: Vec<RandomVariable>,
    qv: Vec<RandomVariable>,
    ds: Vec<RandomVariable>,
    s: Vec<RandomVariable>,
}

/// One-period branching data at a non-terminal node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStep {
    pub node: NodeId,
    pub children: Vec<NodeId>,
    /// Conditional probabilities of the children.
    pub p: Vec<f64>,
    /// Price increment on each child.
    pub ds: Vec<f64>,
}

impl NodeStep {
    pub fn mean(&self) -> f64 {
        self.p.iter().zip(&self.ds).map(|(p, d)| p * d).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.p
            .iter()
            .zip(&self.ds)
            .map(|(p, d)| p * (d - m) * (d - m))
            .sum()
    }

    pub fn min_ds(&self) -> f64 {
        self.ds.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_ds(&self) -> f64 {
        self.ds.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Admissible one-period positions `{H : 1 + H dS >= 0}` as `(lo, hi)`;
    /// infinite ends mean the corresponding side has no losing branch.
    pub fn position_bounds(&self) -> (f64, f64) {
        let (mn, mx) = (self.min_ds(), self.max_ds());
        let lo = if mx > 0.0 { -1.0 / mx } else { f64::NEG_INFINITY };
        let hi = if mn < 0.0 { -1.0 / mn } else { f64::INFINITY };
        (lo, hi)
    }

    /// True iff some position earns a riskless profit at this node.
    pub fn has_arbitrage(&self) -> bool {
        let (mn, mx) = (self.min_ds(), self.max_ds());
        (mn >= 0.0 && mx > 0.0) || (mx <= 0.0 && mn < 0.0)
    }
}

impl MarketModel {
    /// Builds and validates a market from scenario-indexed increments.
    ///
    /// `dm[t - 1]` and `lam[t - 1]` hold the period-`t` values, `t = 1..=T`.
    pub fn new(
        space: FilteredSpace,
        dm: Vec<RandomVariable>,
        lam: Vec<RandomVariable>,
    ) -> Result<Self> {
        let horizon = space.horizon();
        let n = space.n_scenarios();
        for v in [&dm, &lam] {
            if v.len() != horizon {
                return Err(Error::LengthMismatch {
                    expected: horizon,
                    got: v.len(),
                });
            }
            for x in v.iter() {
                if x.len() != n {
                    return Err(Error::LengthMismatch {
                        expected: n,
                        got: x.len(),
                    });
                }
                if !x.is_finite() {
                    return Err(Error::NonFinite("market input".to_string()));
                }
            }
        }
        for t in 1..=horizon {
            check_adapted(&space, &dm[t - 1], t, t, "dM")?;
            check_adapted(&space, &lam[t - 1], t, t - 1, "lam")?;
        }

        let mut qv = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            let mut q = vec![0.0; n];
            for (c, cell) in space.partition(t - 1).iter().enumerate() {
                let node = NodeId { t: t - 1, cell: c };
                let mass = space.node_prob(node);
                let mean: f64 = cell
                    .iter()
                    .map(|&w| space.prob()[w] * dm[t - 1][w])
                    .sum::<f64>()
                    / mass;
                if mean.abs() > MARTINGALE_TOL {
                    return Err(Error::NonMartingaleIncrement { t, node: c, mean });
                }
                let second: f64 = cell
                    .iter()
                    .map(|&w| space.prob()[w] * dm[t - 1][w] * dm[t - 1][w])
                    .sum::<f64>()
                    / mass;
                for &w in cell {
                    q[w] = second;
                }
            }
            qv.push(RandomVariable(q));
        }

        let ds: Vec<RandomVariable> = (0..horizon)
            .map(|k| {
                RandomVariable(
                    (0..n)
                        .map(|w| dm[k][w] + lam[k][w] * qv[k][w])
                        .collect(),
                )
            })
            .collect();
        let mut s = vec![space.constant(1.0)];
        for t in 1..=horizon {
            let next = s[t - 1].zip_with(&ds[t - 1], |a, b| a + b);
            if let Some(w) = next.values().iter().position(|&v| !(v > 0.0)) {
                return Err(Error::NonPositivePrice { t, scenario: w });
            }
            s.push(next);
        }
        Ok(Self {
            space,
            dm,
            lam,
            qv,
            ds,
            s,
        })
    }

    /// Builds a market from per-cell inputs: `dm_cells[t - 1][c]` is the
    /// increment on cell `c` of `partitions[t]`, `lam_cells[t - 1][c]` the
    /// drift on cell `c` of `partitions[t - 1]`.
    pub fn from_cells(
        space: FilteredSpace,
        dm_cells: &[Vec<f64>],
        lam_cells: &[Vec<f64>],
    ) -> Result<Self> {
        let horizon = space.horizon();
        let spread = |cells: &[Vec<f64>], shift: usize| -> Result<Vec<RandomVariable>> {
            if cells.len() != horizon {
                return Err(Error::LengthMismatch {
                    expected: horizon,
                    got: cells.len(),
                });
            }
            cells
                .iter()
                .enumerate()
                .map(|(k, vals)| {
                    let t = k + 1 - shift;
                    if vals.len() != space.n_cells(t) {
                        return Err(Error::LengthMismatch {
                            expected: space.n_cells(t),
                            got: vals.len(),
                        });
                    }
                    Ok(RandomVariable(
                        (0..space.n_scenarios())
                            .map(|w| vals[space.cell_of(t, w)])
                            .collect(),
                    ))
                })
                .collect()
        };
        let dm = spread(dm_cells, 0)?;
        let lam = spread(lam_cells, 1)?;
        Self::new(space, dm, lam)
    }

    /// The same increments with a different drift.
    pub fn with_lambda(&self, lam: Vec<RandomVariable>) -> Result<Self> {
        Self::new(self.space.clone(), self.dm.clone(), lam)
    }

    pub fn space(&self) -> &FilteredSpace {
        &self.space
    }

    pub fn horizon(&self) -> usize {
        self.space.horizon()
    }

    /// `dM_t`, `t = 1..=T`.
    pub fn dm(&self, t: usize) -> &RandomVariable {
        &self.dm[t - 1]
    }

    /// `lam_t`, `t = 1..=T`.
    pub fn lam(&self, t: usize) -> &RandomVariable {
        &self.lam[t - 1]
    }

    pub fn lambdas(&self) -> &[RandomVariable] {
        &self.lam
    }

    /// Predictable quadratic variation increment at period `t`.
    pub fn qv(&self, t: usize) -> &RandomVariable {
        &self.qv[t - 1]
    }

    /// Price increment `S_t - S_{t-1}`.
    pub fn ds(&self, t: usize) -> &RandomVariable {
        &self.ds[t - 1]
    }

    /// Price `S_t`, `t = 0..=T`.
    pub fn price(&self, t: usize) -> &RandomVariable {
        &self.s[t]
    }

    pub fn step(&self, node: NodeId) -> NodeStep {
        let space = &self.space;
        let mass = space.node_prob(node);
        let children: Vec<NodeId> = space.children(node).collect();
        let p = children.iter().map(|&c| space.node_prob(c) / mass).collect();
        let ds = children
            .iter()
            .map(|&c| space.node_value(&self.ds[node.t], c))
            .collect();
        NodeStep {
            node,
            children,
            p,
            ds,
        }
    }

    /// One-period minimal martingale density factors, one per child.
    pub fn density_factor(&self, node: NodeId) -> Result<Vec<f64>> {
        let step = self.step(node);
        let mean = step.mean();
        let var = step.variance();
        if var <= VAR_FLOOR {
            if mean.abs() > MARTINGALE_TOL {
                return Err(Error::Arbitrage {
                    t: node.t,
                    node: node.cell,
                    mean,
                });
            }
            return Ok(vec![1.0; step.children.len()]);
        }
        let alpha = mean / var;
        let z: Vec<f64> = step.ds.iter().map(|d| 1.0 - alpha * (d - mean)).collect();
        if z.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::DensityNonPositive {
                t: node.t,
                node: node.cell,
            });
        }
        Ok(z)
    }

    /// Density path `Z_0 = 1, ..., Z_T`.
    pub fn build_density(&self) -> Result<Vec<RandomVariable>> {
        let space = &self.space;
        let mut z = vec![space.constant(1.0)];
        for t in 0..self.horizon() {
            let mut next = z[t].clone();
            for c in 0..space.n_cells(t) {
                let node = NodeId { t, cell: c };
                let factors = self.density_factor(node)?;
                for (child, f) in space.children(node).zip(factors) {
                    for &w in space.members(child) {
                        next.0[w] *= f;
                    }
                }
            }
            z.push(next);
        }
        Ok(z)
    }

    /// Exact feasibility of `{q >= eps, sum q = 1, E_q[dS] = 0}` at one node.
    ///
    /// With weights bounded below by `eps` the attainable drift is an interval,
    /// so the LP reduces to checking that it contains 0.
    pub fn node_nflvr(&self, node: NodeId) -> bool {
        let step = self.step(node);
        let k = step.ds.len() as f64;
        let base: f64 = NFLVR_EPS * step.ds.iter().sum::<f64>();
        let free = 1.0 - k * NFLVR_EPS;
        if free < 0.0 {
            return false;
        }
        let lo = base + free * step.min_ds();
        let hi = base + free * step.max_ds();
        lo <= 0.0 && 0.0 <= hi && !step.has_arbitrage()
    }

    /// True iff an equivalent martingale measure with weights bounded below
    /// by [`NFLVR_EPS`] exists. The tree decomposes the LP node by node.
    pub fn check_nflvr(&self) -> bool {
        (0..self.horizon()).all(|t| {
            (0..self.space.n_cells(t)).all(|c| self.node_nflvr(NodeId { t, cell: c }))
        })
    }

    /// Conditional weights of a strictly positive martingale measure at a node.
    pub fn martingale_weights(&self, node: NodeId) -> Option<Vec<f64>> {
        let step = self.step(node);
        if step.has_arbitrage() {
            return None;
        }
        let p_pos: f64 = step
            .p
            .iter()
            .zip(&step.ds)
            .filter(|(_, &d)| d > 0.0)
            .map(|(p, _)| p)
            .sum();
        let p_neg: f64 = step
            .p
            .iter()
            .zip(&step.ds)
            .filter(|(_, &d)| d < 0.0)
            .map(|(p, _)| p)
            .sum();
        let mut q: Vec<f64> = step
            .p
            .iter()
            .zip(&step.ds)
            .map(|(&p, &d)| {
                if d > 0.0 {
                    p_neg * p / d
                } else if d < 0.0 {
                    p_pos * p / -d
                } else {
                    p
                }
            })
            .collect();
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= total);
        Some(q)
    }

    /// Node constraints describing supermartingale deflators on `[tau, T]`.
    pub fn deflator_constraints(&self, tau: &StoppingTime) -> DeflatorConstraintSet {
        let space = &self.space;
        let g = space.sigma_at(tau);
        let roots: Vec<NodeId> = g.atoms().iter().map(|a| a.node).collect();
        let mut constraints = Vec::new();
        for t in 0..self.horizon() {
            for c in 0..space.n_cells(t) {
                let node = NodeId { t, cell: c };
                if tau.at(space.members(node)[0]) > t {
                    continue;
                }
                constraints.extend(node_constraints(&self.step(node)));
            }
        }
        DeflatorConstraintSet { roots, constraints }
    }
}

fn check_adapted(
    space: &FilteredSpace,
    x: &RandomVariable,
    t: usize,
    partition: usize,
    what: &'static str,
) -> Result<()> {
    for (c, cell) in space.partition(partition).iter().enumerate() {
        let v0 = x[cell[0]];
        if cell
            .iter()
            .any(|&w| (x[w] - v0).abs() > ADAPTED_TOL * 1.0f64.max(v0.abs()))
        {
            return Err(Error::NotAdapted {
                what,
                t,
                cell: c,
                partition,
            });
        }
    }
    Ok(())
}

/// Which admissible position a deflator constraint encodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `H = 0`: `E[Y_{t+1} | node] <= Y_node`.
    Zero,
    /// Endpoint of the admissible position interval.
    Position { h: f64 },
    /// Limit of `E[Y (1 + H dS)] / |H|` along an unbounded direction.
    Recession { sign: f64 },
}

/// `sum_k coeffs[k].1 * Y[coeffs[k].0] <= parent_coeff * Y[node]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConstraint {
    pub node: NodeId,
    pub kind: ConstraintKind,
    pub coeffs: Vec<(NodeId, f64)>,
    pub parent_coeff: f64,
}

/// Linear constraints on a deflator process started at 1 on each root node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeflatorConstraintSet {
    /// Nodes carrying the normalization `Y = 1` (the atoms of `F_tau`).
    pub roots: Vec<NodeId>,
    pub constraints: Vec<NodeConstraint>,
}

impl DeflatorConstraintSet {
    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Largest violation `lhs - rhs` over all constraints for a node-indexed process.
    pub fn max_violation(&self, y: impl Fn(NodeId) -> f64) -> f64 {
        self.constraints
            .iter()
            .map(|k| {
                let lhs: f64 = k.coeffs.iter().map(|&(n, a)| a * y(n)).sum();
                lhs - k.parent_coeff * y(k.node)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn node_constraints(step: &NodeStep) -> Vec<NodeConstraint> {
    let mut out = vec![NodeConstraint {
        node: step.node,
        kind: ConstraintKind::Zero,
        coeffs: step.children.iter().copied().zip(step.p.iter().copied()).collect(),
        parent_coeff: 1.0,
    }];
    if step.ds.iter().all(|&d| d == 0.0) {
        return out;
    }
    let (lo, hi) = step.position_bounds();
    for (bound, sign) in [(hi, 1.0), (lo, -1.0)] {
        if bound.is_finite() {
            out.push(NodeConstraint {
                node: step.node,
                kind: ConstraintKind::Position { h: bound },
                coeffs: step
                    .children
                    .iter()
                    .zip(step.p.iter().zip(&step.ds))
                    .map(|(&c, (&p, &d))| (c, (p * (1.0 + bound * d)).max(0.0)))
                    .collect(),
                parent_coeff: 1.0,
            });
        } else {
            out.push(NodeConstraint {
                node: step.node,
                kind: ConstraintKind::Recession { sign },
                coeffs: step
                    .children
                    .iter()
                    .zip(step.p.iter().zip(&step.ds))
                    .map(|(&c, (&p, &d))| (c, sign * p * d))
                    .collect(),
                parent_coeff: 0.0,
            });
        }
    }
    out
}

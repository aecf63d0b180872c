//! Finite filtered probability spaces.
//!
//! A space is a finite scenario set with strictly positive weights and a
//! chain of refining partitions `partitions[0], ..., partitions[T]`, where
//! `partitions[t]` generates the information available at time `t` and the
//! last partition consists of singletons. The cells of `partitions[t]` are
//! the nodes of the event tree at time `t`.
//!
//! On a finite space every notion used by the duality solvers reduces to an
//! exact finite computation: conditional expectations are weighted cell
//! averages and essential extrema over finite families are per-atom max/min.

use serde::{Deserialize, Serialize};
use std::ops::Index;

use crate::error::{Error, Result};

/// Tolerance on the total probability mass.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A real-valued random variable: one value per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomVariable(pub Vec<f64>);

impl RandomVariable {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self(vec![c; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for RandomVariable {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for RandomVariable {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A node of the event tree: cell `cell` of `partitions[t]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub t: usize,
    pub cell: usize,
}

/// Finite filtered probability space.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredSpace {
    scenarios: Vec<String>,
    prob: Vec<f64>,
    partitions: Vec<Vec<Vec<usize>>>,
    cell_of: Vec<Vec<usize>>,
    children: Vec<Vec<Vec<usize>>>,
    cell_prob: Vec<Vec<f64>>,
}

impl FilteredSpace {
    /// Builds a space, rejecting it with the full list of violations.
    pub fn new(
        scenarios: Vec<String>,
        prob: Vec<f64>,
        partitions: Vec<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let problems = Self::violations(&scenarios, &prob, &partitions);
        if !problems.is_empty() {
            return Err(Error::InvalidSpace(problems));
        }
        let n = prob.len();
        let partitions: Vec<Vec<Vec<usize>>> = partitions
            .into_iter()
            .map(|p| {
                p.into_iter()
                    .map(|mut cell| {
                        cell.sort_unstable();
                        cell
                    })
                    .collect()
            })
            .collect();
        let cell_of: Vec<Vec<usize>> = partitions
            .iter()
            .map(|p| {
                let mut of = vec![0; n];
                for (c, cell) in p.iter().enumerate() {
                    for &w in cell {
                        of[w] = c;
                    }
                }
                of
            })
            .collect();
        let horizon = partitions.len() - 1;
        let mut children = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let mut ch = vec![Vec::new(); partitions[t].len()];
            for (c, cell) in partitions[t + 1].iter().enumerate() {
                ch[cell_of[t][cell[0]]].push(c);
            }
            children.push(ch);
        }
        let cell_prob = partitions
            .iter()
            .map(|p| {
                p.iter()
                    .map(|cell| cell.iter().map(|&w| prob[w]).sum())
                    .collect()
            })
            .collect();
        Ok(Self {
            scenarios,
            prob,
            partitions,
            cell_of,
            children,
            cell_prob,
        })
    }

    /// Every invariant violation of a candidate space description.
    pub fn violations(
        scenarios: &[String],
        prob: &[f64],
        partitions: &[Vec<Vec<usize>>],
    ) -> Vec<String> {
        let mut out = Vec::new();
        let n = prob.len();
        if n == 0 {
            out.push("prob: empty scenario set".to_string());
        }
        if scenarios.len() != n {
            out.push(format!(
                "scenarios: {} identifiers for {} probabilities",
                scenarios.len(),
                n
            ));
        }
        for (i, &p) in prob.iter().enumerate() {
            if !(p > 0.0) || !p.is_finite() {
                out.push(format!("prob[{i}]: {p} is not strictly positive"));
            }
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            out.push(format!("prob: entries sum to {total}, expected 1"));
        }
        if partitions.is_empty() {
            out.push("partitions: at least one partition (t=0) is required".to_string());
            return out;
        }
        let mut well_formed = vec![true; partitions.len()];
        for (t, p) in partitions.iter().enumerate() {
            let mut seen = vec![0usize; n];
            for cell in p {
                if cell.is_empty() {
                    out.push(format!("partitions[{t}]: empty cell"));
                    well_formed[t] = false;
                }
                for &w in cell {
                    if w >= n {
                        out.push(format!("partitions[{t}]: scenario index {w} out of range"));
                        well_formed[t] = false;
                    } else {
                        seen[w] += 1;
                    }
                }
            }
            for (w, &count) in seen.iter().enumerate() {
                if count != 1 {
                    out.push(format!(
                        "partitions[{t}]: scenario {w} appears {count} times"
                    ));
                    well_formed[t] = false;
                }
            }
        }
        for t in 0..partitions.len().saturating_sub(1) {
            if !(well_formed[t] && well_formed[t + 1]) {
                continue;
            }
            let mut owner = vec![usize::MAX; n];
            for (c, cell) in partitions[t].iter().enumerate() {
                for &w in cell {
                    owner[w] = c;
                }
            }
            for cell in &partitions[t + 1] {
                let o = owner[cell[0]];
                if cell.iter().any(|&w| owner[w] != o) {
                    out.push(format!(
                        "partitions[{}] does not refine partitions[{t}] (t={})",
                        t + 1,
                        t + 1
                    ));
                    break;
                }
            }
        }
        let last = partitions.len() - 1;
        if well_formed[last] && partitions[last].iter().any(|c| c.len() != 1) {
            out.push(format!("partitions[{last}]: terminal partition must consist of singletons"));
        }
        out
    }

    /// Number of periods `T`.
    pub fn horizon(&self) -> usize {
        self.partitions.len() - 1
    }

    pub fn n_scenarios(&self) -> usize {
        self.prob.len()
    }

    pub fn scenarios(&self) -> &[String] {
        &self.scenarios
    }

    pub fn prob(&self) -> &[f64] {
        &self.prob
    }

    pub fn partition(&self, t: usize) -> &[Vec<usize>] {
        &self.partitions[t]
    }

    pub fn partitions(&self) -> &[Vec<Vec<usize>>] {
        &self.partitions
    }

    pub fn n_cells(&self, t: usize) -> usize {
        self.partitions[t].len()
    }

    pub fn cell_of(&self, t: usize, scenario: usize) -> usize {
        self.cell_of[t][scenario]
    }

    pub fn members(&self, node: NodeId) -> &[usize] {
        &self.partitions[node.t][node.cell]
    }

    pub fn node_prob(&self, node: NodeId) -> f64 {
        self.cell_prob[node.t][node.cell]
    }

    /// Children of a non-terminal node, as nodes at `t + 1`.
    pub fn children(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.children[node.t][node.cell].iter().map(move |&c| NodeId {
            t: node.t + 1,
            cell: c,
        })
    }

    /// Representative value of an `F_t`-measurable variable on a node.
    pub fn node_value(&self, x: &RandomVariable, node: NodeId) -> f64 {
        x[self.members(node)[0]]
    }

    pub fn constant(&self, c: f64) -> RandomVariable {
        RandomVariable::constant(self.n_scenarios(), c)
    }

    pub fn expect(&self, x: &RandomVariable) -> f64 {
        self.prob.iter().zip(x.values()).map(|(p, v)| p * v).sum()
    }

    /// The sigma-algebra `F_t` as an atom list.
    pub fn sigma_at_time(&self, t: usize) -> SigmaAlgebra {
        let atoms = self.partitions[t]
            .iter()
            .enumerate()
            .map(|(c, cell)| Atom {
                node: NodeId { t, cell: c },
                members: cell.clone(),
            })
            .collect();
        SigmaAlgebra::from_atoms(self.n_scenarios(), atoms)
    }

    /// True iff `{tau <= t}` is a union of cells of `partitions[t]` for all `t`.
    pub fn check_stopping_time(&self, tau: &[usize]) -> bool {
        if tau.len() != self.n_scenarios() || tau.iter().any(|&s| s > self.horizon()) {
            return false;
        }
        (0..=self.horizon()).all(|t| {
            self.partitions[t].iter().all(|cell| {
                let first = tau[cell[0]] <= t;
                cell.iter().all(|&w| (tau[w] <= t) == first)
            })
        })
    }

    pub fn stopping_time(&self, tau: Vec<usize>) -> Result<StoppingTime> {
        if tau.len() != self.n_scenarios() {
            return Err(Error::LengthMismatch {
                expected: self.n_scenarios(),
                got: tau.len(),
            });
        }
        if let Some(&bad) = tau.iter().find(|&&s| s > self.horizon()) {
            return Err(Error::InvalidStoppingTime(format!(
                "value {bad} outside [0, {}]",
                self.horizon()
            )));
        }
        if !self.check_stopping_time(&tau) {
            return Err(Error::InvalidStoppingTime(
                "{tau <= t} is not F_t-measurable for some t".to_string(),
            ));
        }
        Ok(StoppingTime(tau))
    }

    pub fn deterministic_time(&self, t: usize) -> StoppingTime {
        assert!(t <= self.horizon(), "time {t} beyond horizon");
        StoppingTime(vec![t; self.n_scenarios()])
    }

    /// The trace sigma-algebra `F_tau`: one atom per node `(tau, cell)` hit by tau.
    pub fn sigma_at(&self, tau: &StoppingTime) -> SigmaAlgebra {
        let mut atoms: Vec<Atom> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for w in 0..self.n_scenarios() {
            let t = tau.0[w];
            let node = NodeId {
                t,
                cell: self.cell_of[t][w],
            };
            if seen.insert(node) {
                atoms.push(Atom {
                    node,
                    members: self.members(node).to_vec(),
                });
            }
        }
        SigmaAlgebra::from_atoms(self.n_scenarios(), atoms)
    }

    /// Conditional expectation `E[X | G]`.
    pub fn cond_expect(&self, x: &RandomVariable, g: &SigmaAlgebra) -> RandomVariable {
        let mut out = vec![0.0; self.n_scenarios()];
        for atom in g.atoms() {
            let mass: f64 = atom.members.iter().map(|&w| self.prob[w]).sum();
            let avg = atom.members.iter().map(|&w| self.prob[w] * x[w]).sum::<f64>() / mass;
            for &w in &atom.members {
                out[w] = avg;
            }
        }
        RandomVariable(out)
    }

    /// Per-atom conditional expectation, one value per atom.
    pub fn atom_expect(&self, x: &RandomVariable, g: &SigmaAlgebra) -> Vec<f64> {
        g.atoms()
            .iter()
            .map(|atom| {
                let mass: f64 = atom.members.iter().map(|&w| self.prob[w]).sum();
                atom.members.iter().map(|&w| self.prob[w] * x[w]).sum::<f64>() / mass
            })
            .collect()
    }

    /// Essential supremum or infimum of a finite family of G-measurable variables.
    pub fn essential_extremum(
        &self,
        family: &[RandomVariable],
        g: &SigmaAlgebra,
        mode: Extremum,
    ) -> Result<RandomVariable> {
        let first = family.first().ok_or(Error::EmptyFamily)?;
        for x in family {
            if x.len() != self.n_scenarios() {
                return Err(Error::LengthMismatch {
                    expected: self.n_scenarios(),
                    got: x.len(),
                });
            }
            g.check_measurable(x)?;
        }
        let mut out = first.clone();
        for x in &family[1..] {
            for (o, &v) in out.0.iter_mut().zip(x.values()) {
                *o = match mode {
                    Extremum::Sup => o.max(v),
                    Extremum::Inf => o.min(v),
                };
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extremum {
    Sup,
    Inf,
}

/// A stopping time, validated against its space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppingTime(Vec<usize>);

impl StoppingTime {
    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn at(&self, scenario: usize) -> usize {
        self.0[scenario]
    }
}

/// An atom of a sub-sigma-algebra, identified with the tree node it sits on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub node: NodeId,
    pub members: Vec<usize>,
}

/// A sub-sigma-algebra generated by a finite partition (e.g. `F_tau`).
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaAlgebra {
    atoms: Vec<Atom>,
    atom_of: Vec<usize>,
}

/// Relative tolerance for "constant on an atom".
const MEASURABILITY_TOL: f64 = 1e-12;

impl SigmaAlgebra {
    fn from_atoms(n: usize, atoms: Vec<Atom>) -> Self {
        let mut atom_of = vec![0; n];
        for (a, atom) in atoms.iter().enumerate() {
            for &w in &atom.members {
                atom_of[w] = a;
            }
        }
        Self { atoms, atom_of }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atom_of(&self, scenario: usize) -> usize {
        self.atom_of[scenario]
    }

    pub fn is_measurable(&self, x: &RandomVariable) -> bool {
        self.check_measurable(x).is_ok()
    }

    pub fn check_measurable(&self, x: &RandomVariable) -> Result<()> {
        for (a, atom) in self.atoms.iter().enumerate() {
            let v0 = x[atom.members[0]];
            let scale = 1.0f64.max(v0.abs());
            if atom
                .members
                .iter()
                .any(|&w| (x[w] - v0).abs() > MEASURABILITY_TOL * scale)
            {
                return Err(Error::NotMeasurable { atom: a });
            }
        }
        Ok(())
    }

    /// Per-atom values of a G-measurable variable.
    pub fn atom_values(&self, x: &RandomVariable) -> Result<Vec<f64>> {
        self.check_measurable(x)?;
        Ok(self.atoms.iter().map(|a| x[a.members[0]]).collect())
    }

    /// Spreads per-atom values back to a scenario vector.
    pub fn spread(&self, per_atom: &[f64]) -> RandomVariable {
        RandomVariable(self.atom_of.iter().map(|&a| per_atom[a]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_period() -> FilteredSpace {
        FilteredSpace::new(
            (0..4).map(|i| format!("w{i}")).collect(),
            vec![0.25; 4],
            vec![
                vec![vec![0, 1, 2, 3]],
                vec![vec![0, 1], vec![2, 3]],
                vec![vec![0], vec![1], vec![2], vec![3]],
            ],
        )
        .unwrap()
    }

    #[test]
    fn cond_expect_examples() {
        let s = two_period();
        let g0 = s.sigma_at_time(0);
        let c = s.constant(3.5);
        assert_eq!(s.cond_expect(&c, &g0), c);
        let x = RandomVariable::new(vec![1.0, -2.0, 0.5, 7.0]);
        assert_eq!(s.cond_expect(&x, &s.sigma_at_time(2)), x);

        let one = FilteredSpace::new(
            vec!["u".into(), "d".into()],
            vec![0.5, 0.5],
            vec![vec![vec![0, 1]], vec![vec![0], vec![1]]],
        )
        .unwrap();
        let y = RandomVariable::new(vec![0.0, 2.0]);
        let e = one.cond_expect(&y, &one.sigma_at_time(0));
        assert_eq!(e.values(), &[1.0, 1.0]);
    }

    #[test]
    fn tower_property() {
        let s = two_period();
        let x = RandomVariable::new(vec![0.3, -1.7, 2.25, 9.0]);
        let inner = s.cond_expect(&x, &s.sigma_at_time(1));
        let outer = s.cond_expect(&inner, &s.sigma_at_time(0));
        let direct = s.cond_expect(&x, &s.sigma_at_time(0));
        assert!(outer.max_abs_diff(&direct) <= 1e-12);
    }

    #[test]
    fn essential_extremum_examples() {
        let s = two_period();
        let g = s.sigma_at_time(1);
        let a = RandomVariable::new(vec![1.0, 1.0, 3.0, 3.0]);
        let b = RandomVariable::new(vec![2.0, 2.0, 2.0, 2.0]);
        let sup = s
            .essential_extremum(&[a.clone(), b.clone()], &g, Extremum::Sup)
            .unwrap();
        assert_eq!(sup.values(), &[2.0, 2.0, 3.0, 3.0]);
        let inf = s
            .essential_extremum(&[a.clone(), b], &g, Extremum::Inf)
            .unwrap();
        assert_eq!(inf.values(), &[1.0, 1.0, 2.0, 2.0]);
        let single = s.essential_extremum(&[a.clone()], &g, Extremum::Sup).unwrap();
        assert_eq!(single, a);
        assert_eq!(
            s.essential_extremum(&[], &g, Extremum::Sup),
            Err(Error::EmptyFamily)
        );
        let bad = RandomVariable::new(vec![1.0, 2.0, 3.0, 3.0]);
        assert!(matches!(
            s.essential_extremum(&[bad], &g, Extremum::Sup),
            Err(Error::NotMeasurable { atom: 0 })
        ));
    }

    #[test]
    fn stopping_time_examples() {
        let s = two_period();
        assert!(s.check_stopping_time(&[0, 0, 0, 0]));
        assert!(s.check_stopping_time(&[2, 2, 2, 2]));
        // stop at t=1 on the first cell only
        assert!(s.check_stopping_time(&[1, 1, 2, 2]));
        assert!(!s.check_stopping_time(&[1, 2, 2, 2]));
        assert!(!s.check_stopping_time(&[0, 1, 1, 1]));
        assert!(!s.check_stopping_time(&[3, 3, 3, 3]));
    }

    #[test]
    fn f_tau_atoms() {
        let s = two_period();
        let tau = s.stopping_time(vec![1, 1, 2, 2]).unwrap();
        let g = s.sigma_at(&tau);
        assert_eq!(g.n_atoms(), 3);
        assert_eq!(g.atoms()[0].members, vec![0, 1]);
        assert_eq!(g.atoms()[0].node, NodeId { t: 1, cell: 0 });
        assert_eq!(g.atoms()[1].members, vec![2]);
        assert_eq!(g.atoms()[2].members, vec![3]);
    }

    #[test]
    fn rejects_bad_spaces_with_all_violations() {
        let err = FilteredSpace::new(
            vec!["a".into(), "b".into()],
            vec![0.5, 0.4],
            vec![vec![vec![0], vec![1]], vec![vec![0, 1]]],
        )
        .unwrap_err();
        let Error::InvalidSpace(list) = err else {
            panic!("wrong error")
        };
        assert!(list.iter().any(|m| m.contains("sum to")));
        assert!(list.iter().any(|m| m.contains("does not refine") && m.contains("t=1")));
        assert!(list.iter().any(|m| m.contains("singletons")));
    }
}

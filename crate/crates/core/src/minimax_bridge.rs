//! Ties the grid minimax verifier to the duality solver.
//!
//! For each grid step and truncation bound `n` the verifier is run with
//! `X = {x <= n}` on a wealth lattice and `Y` the lattice points of the
//! scaled deflator set `eta * D`. Its `inf sup` value is the truncated dual
//! value `v^n(eta) = inf_y E[V^n(y)]` with `V^n(y) = sup_{0 < x <= n} (U(x) - x y)`,
//! which must increase in `n` towards the solver's `v_tau(eta)`.

use serde::Serialize;

use crate::analysis::{conditional_minimax_verify, MinimaxAtom, XSpec, YSpec};
use crate::duality::Duality;
use crate::error::{Error, Result};
use crate::filtered_space::{RandomVariable, StoppingTime};
use crate::market::MarketModel;
use crate::utility::UtilityPair;

pub const TRUNCATION_LEVELS: [f64; 3] = [1.0, 4.0, 16.0];

/// Grid size for the conjugacy residual used in the reconciliation.
pub const RECONCILE_POINTS: usize = 128;

/// Slack allowed when comparing `v^n` across `n`.
pub const MONOTONE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationLevel {
    pub bound: f64,
    pub atoms: Vec<MinimaxAtom>,
}

impl TruncationLevel {
    /// `v^n(eta)` per atom.
    pub fn truncated_values(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.inf_sup).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepBlock {
    pub step: f64,
    pub levels: Vec<TruncationLevel>,
    /// `v^n` nondecreasing in `n` on every atom.
    pub monotone_in_n: bool,
    /// `|v^n_max - v_tau(eta)|` per atom.
    pub limit_error: Vec<f64>,
    /// `2 * step * max(1, |v|)` per atom.
    pub limit_tolerance: Vec<f64>,
    /// `max |gap - conjugacy residual|` over atoms at the largest bound.
    pub reconciliation: f64,
    pub max_gap: f64,
    pub min_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimaxReport {
    pub eta: Vec<f64>,
    pub dual_values: Vec<f64>,
    pub conjugacy_residual: Vec<f64>,
    pub steps: Vec<StepBlock>,
    /// `gap(step_{k+1}) / gap(step_k)` at the largest bound; NaN when both vanish.
    pub gap_ratios: Vec<f64>,
    pub easy_inequality: bool,
    pub monotone_in_n: bool,
    pub converges: bool,
}

pub fn reconcile_minimax(
    m: &MarketModel,
    u: &UtilityPair,
    tau: &StoppingTime,
    eta: &RandomVariable,
    steps: &[f64],
) -> Result<MinimaxReport> {
    if steps.is_empty() {
        return Err(Error::OutOfRange("at least one grid step is required".into()));
    }
    let solver = Duality::new(m, u);
    let dual = solver.dual(tau, eta)?;
    let conj = solver.conjugacy_check(tau, eta, RECONCILE_POINTS)?;
    let conjugacy_residual: Vec<f64> = conj.atoms.iter().map(|a| a.residual).collect();
    let eta_atoms: Vec<f64> = conj.atoms.iter().map(|a| a.eta).collect();

    let mut blocks = Vec::with_capacity(steps.len());
    for &step in steps {
        let levels: Vec<TruncationLevel> = TRUNCATION_LEVELS
            .iter()
            .map(|&bound| {
                let r = conditional_minimax_verify(
                    m,
                    tau,
                    u,
                    &XSpec::Grid { bound, step },
                    &YSpec::Deflators {
                        eta: eta.clone(),
                        step,
                    },
                )?;
                Ok(TruncationLevel {
                    bound,
                    atoms: r.atoms,
                })
            })
            .collect::<Result<_>>()?;
        let monotone_in_n = levels.windows(2).all(|w| {
            w[0].truncated_values()
                .iter()
                .zip(w[1].truncated_values())
                .all(|(a, b)| b >= a - MONOTONE_TOL)
        });
        let last = levels.last().expect("three truncation levels");
        let limit_error: Vec<f64> = last
            .truncated_values()
            .iter()
            .zip(&dual.values)
            .map(|(a, v)| (a - v).abs())
            .collect();
        let limit_tolerance = dual.values.iter().map(|v| 2.0 * step * v.abs().max(1.0)).collect();
        let reconciliation = last
            .atoms
            .iter()
            .zip(&conjugacy_residual)
            .map(|(a, c)| (a.gap - c).abs())
            .fold(0.0, f64::max);
        let gaps = levels.iter().flat_map(|l| l.atoms.iter().map(|a| a.gap));
        let (max_gap, min_gap) = gaps.fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), g| {
            (hi.max(g), lo.min(g))
        });
        blocks.push(StepBlock {
            step,
            monotone_in_n,
            limit_error,
            limit_tolerance,
            reconciliation,
            max_gap,
            min_gap,
            levels,
        });
    }
    let top_gap = |b: &StepBlock| {
        b.levels
            .last()
            .map(|l| l.atoms.iter().map(|a| a.gap).fold(0.0, f64::max))
            .unwrap_or(0.0)
    };
    let gap_ratios = blocks.windows(2).map(|w| top_gap(&w[1]) / top_gap(&w[0])).collect();
    Ok(MinimaxReport {
        eta: eta_atoms,
        dual_values: dual.values,
        conjugacy_residual,
        easy_inequality: blocks.iter().all(|b| b.min_gap >= -MONOTONE_TOL),
        monotone_in_n: blocks.iter().all(|b| b.monotone_in_n),
        converges: blocks
            .iter()
            .all(|b| b.limit_error.iter().zip(&b.limit_tolerance).all(|(e, t)| e <= t)),
        gap_ratios,
        steps: blocks,
    })
}

//! Market-sequence experiments.
//!
//! A [`MarketSequence`] perturbs the drift of a base market along a
//! predictable direction, `lam_n = lam + delta * g(n)`, and the checks here
//! track how densities, optimal wealths, value functions and their
//! derivatives approach those of the base market as `n` grows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{ftau_convex_net, ky_fan, ConvexCompactSet};
use crate::duality::Duality;
use crate::error::{Error, Result};
use crate::filtered_space::{RandomVariable, StoppingTime};
use crate::market::MarketModel;
use crate::utility::UtilityPair;

/// Ky Fan threshold at `N_max` for a sequence to count as converging.
pub const CONVERGENCE_TOL: f64 = 1e-3;
/// First index from which the distance columns must be nonincreasing.
pub const BURN_IN: usize = 4;
/// Slack for the monotonicity checks, absolute.
pub const MONOTONE_SLACK: f64 = 1e-12;
/// Growth ratio of running sups above which a family is flagged unbounded.
pub const GROWTH_RATIO_LIMIT: f64 = 1.05;
/// Relative step for the finite-difference slope of `lam -> Z^lam_T`.
pub const SLOPE_FD_STEP: f64 = 1e-6;
/// Accepted window for `d_n / (slope * g(n))`.
pub const RATIO_WINDOW: (f64, f64) = (0.8, 1.2);
/// Half-width of the accepted window around the model log-log slope.
pub const SLOPE_TOL: f64 = 0.2;

/// Decay `g(n)` of the perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum Decay {
    Harmonic,
    InverseSquare,
    /// `values[n - 1] = g(n)`.
    Table { values: Vec<f64> },
}

impl Decay {
    pub fn at(&self, n: usize) -> f64 {
        match self {
            Decay::Harmonic => 1.0 / n as f64,
            Decay::InverseSquare => 1.0 / (n * n) as f64,
            Decay::Table { values } => values[n - 1],
        }
    }

    /// Log-log slope implied by the rule, when it has one.
    pub fn model_slope(&self) -> Option<f64> {
        match self {
            Decay::Harmonic => Some(-1.0),
            Decay::InverseSquare => Some(-2.0),
            Decay::Table { .. } => None,
        }
    }
}

/// `lam_n = lam + delta * g(n)` for `n = 1..=n_max`; every member is
/// validated and checked for NFLVR at construction.
#[derive(Debug, Clone)]
pub struct MarketSequence {
    base: MarketModel,
    delta: Vec<RandomVariable>,
    decay: Decay,
    markets: Vec<MarketModel>,
}

impl MarketSequence {
    pub fn new(base: MarketModel, delta: Vec<RandomVariable>, decay: Decay, n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::OutOfRange("sequence length must be positive".into()));
        }
        if let Decay::Table { values } = &decay {
            if values.len() < n_max {
                return Err(Error::LengthMismatch {
                    expected: n_max,
                    got: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("decay table".into()));
            }
        }
        if delta.len() != base.horizon() {
            return Err(Error::LengthMismatch {
                expected: base.horizon(),
                got: delta.len(),
            });
        }
        let markets = (1..=n_max)
            .map(|n| {
                let g = decay.at(n);
                let lam = base
                    .lambdas()
                    .iter()
                    .zip(&delta)
                    .map(|(l, d)| l.zip_with(d, |l, d| l + d * g))
                    .collect();
                let m = base
                    .with_lambda(lam)
                    .map_err(|e| Error::SequenceStep { n, source: Box::new(e) })?;
                if !m.check_nflvr() {
                    return Err(Error::SequenceStep {
                        n,
                        source: Box::new(Error::NflvrFailed),
                    });
                }
                Ok(m)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            base,
            delta,
            decay,
            markets,
        })
    }

    /// `lam_n = lam` for every `n`.
    pub fn constant(base: MarketModel, n_max: usize) -> Result<Self> {
        let n = base.space().n_scenarios();
        let delta = vec![RandomVariable::constant(n, 0.0); base.horizon()];
        Self::new(base, delta, Decay::Harmonic, n_max)
    }

    pub fn base(&self) -> &MarketModel {
        &self.base
    }

    pub fn delta(&self) -> &[RandomVariable] {
        &self.delta
    }

    pub fn decay(&self) -> &Decay {
        &self.decay
    }

    pub fn n_max(&self) -> usize {
        self.markets.len()
    }

    /// The `n`-th market, `n >= 1`.
    pub fn market(&self, n: usize) -> &MarketModel {
        &self.markets[n - 1]
    }

    /// The base drift moved by `h` along `delta`.
    pub fn shifted(&self, h: f64) -> Result<MarketModel> {
        let lam = self
            .base
            .lambdas()
            .iter()
            .zip(&self.delta)
            .map(|(l, d)| l.zip_with(d, |l, d| l + d * h))
            .collect();
        self.base.with_lambda(lam)
    }
}

fn terminal_density(m: &MarketModel) -> Result<RandomVariable> {
    Ok(m.build_density()?.pop().expect("density has T + 1 entries"))
}

/// `col[n+1] <= col[n] + slack` for every `n >= BURN_IN` (1-based).
pub fn monotone_after_burn_in(col: &[f64]) -> bool {
    col.iter()
        .skip(BURN_IN - 1)
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| *w[1] <= *w[0] + MONOTONE_SLACK)
}

/// Least-squares slope of `ln d` against `ln n` over `n >= BURN_IN` with `d > 0`.
pub fn log_log_slope(col: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = col
        .iter()
        .enumerate()
        .skip(BURN_IN - 1)
        .filter(|(_, &d)| d > 0.0)
        .map(|(i, &d)| (((i + 1) as f64).ln(), d.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Output of [`v_compactness_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VCompactnessReport {
    /// `E[V(Z^n_T)^2]` per `n`.
    pub second_moments: Vec<f64>,
    pub bound: f64,
    pub growth_ratio: f64,
    pub pass: bool,
}

/// de la Vallee-Poussin surrogate with `G(x) = x^2` for the family `V(Z^n_T)`.
pub fn v_compactness_check(seq: &MarketSequence, u: &UtilityPair) -> Result<VCompactnessReport> {
    let second_moments: Vec<f64> = seq
        .markets
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let z = terminal_density(m).map_err(|e| Error::SequenceStep {
                n: i + 1,
                source: Box::new(e),
            })?;
            Ok(m.space().expect(&z.map(|z| u.v(z).powi(2))))
        })
        .collect::<Result<_>>()?;
    let running: Vec<f64> = second_moments
        .iter()
        .scan(f64::NEG_INFINITY, |s, &v| {
            *s = s.max(v);
            Some(*s)
        })
        .collect();
    let bound = running[running.len() - 1];
    let half = running[(running.len() - 1) / 2];
    let growth_ratio = if half > 0.0 { bound / half } else if bound > 0.0 { f64::INFINITY } else { 1.0 };
    Ok(VCompactnessReport {
        pass: bound.is_finite() && growth_ratio <= GROWTH_RATIO_LIMIT,
        second_moments,
        bound,
        growth_ratio,
    })
}

/// Output of [`appropriate_convergence_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// `ky_fan(Z^n_T, Z_T)` per `n`.
    pub distances: Vec<f64>,
    /// `ky_fan(Z^{lam + h delta}_T, Z_T) / h` for small `h`.
    pub model_slope: f64,
    /// `d_n / (model_slope * g(n))` per `n`; NaN where the model predicts 0.
    pub ratios: Vec<f64>,
    pub ratio_test: bool,
    pub log_log_slope: Option<f64>,
    pub rate_test: Option<bool>,
    pub monotone: bool,
    pub final_distance: f64,
    pub pass: bool,
}

pub fn appropriate_convergence_check(seq: &MarketSequence) -> Result<ConvergenceReport> {
    let space = seq.base.space();
    let z = terminal_density(&seq.base)?;
    let distances: Vec<f64> = seq
        .markets
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let zn = terminal_density(m).map_err(|e| Error::SequenceStep {
                n: i + 1,
                source: Box::new(e),
            })?;
            ky_fan(space, &zn, &z)
        })
        .collect::<Result<_>>()?;
    let model_slope = ky_fan(space, &terminal_density(&seq.shifted(SLOPE_FD_STEP)?)?, &z)? / SLOPE_FD_STEP;
    let ratios: Vec<f64> = distances
        .iter()
        .enumerate()
        .map(|(i, d)| d / (model_slope * seq.decay.at(i + 1)).abs())
        .collect();
    let ratio_test = model_slope == 0.0
        || ratios
            .iter()
            .skip(BURN_IN - 1)
            .all(|r| (RATIO_WINDOW.0..=RATIO_WINDOW.1).contains(r));
    let slope = log_log_slope(&distances);
    let rate_test = match (slope, seq.decay.model_slope()) {
        (Some(s), Some(m)) if model_slope > 0.0 => Some((s - m).abs() <= SLOPE_TOL),
        _ => None,
    };
    let final_distance = distances[distances.len() - 1];
    let monotone = monotone_after_burn_in(&distances);
    Ok(ConvergenceReport {
        pass: monotone && final_distance <= CONVERGENCE_TOL,
        distances,
        model_slope,
        ratios,
        ratio_test,
        log_log_slope: slope,
        rate_test,
        monotone,
        final_distance,
    })
}

/// Inputs of [`run_stability_experiment`] beyond the sequence itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentInputs {
    pub tau: StoppingTime,
    /// `F_tau`-measurable initial wealth of the conditional problem.
    pub xi: RandomVariable,
    /// `F_tau`-measurable dual argument.
    pub eta: RandomVariable,
    /// Initial capital of the time-0 problem whose wealth at `tau` is compared.
    pub x0: f64,
    /// `xi_n = xi (1 + h(n))` when set, for joint continuity.
    pub joint_xi: Option<Decay>,
}

/// One row of the stability table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub n: usize,
    pub d_z: f64,
    pub d_xt: f64,
    pub d_xtau: f64,
    pub d_u: f64,
    pub d_v: f64,
    pub d_vprime: f64,
    pub d_ucp: f64,
    /// `max_A max(v^n - v, 0)`.
    pub d_v_upper: f64,
    /// `E[|U(xi X^n_T) - U(xi X_T)|]`.
    pub d_ut_l1: f64,
}

impl StabilityRow {
    /// The columns that must converge, in report order.
    pub fn distances(&self) -> [f64; 7] {
        [self.d_z, self.d_xt, self.d_xtau, self.d_u, self.d_v, self.d_vprime, self.d_ucp]
    }
}

pub const STABILITY_COLUMNS: [&str; 7] = ["dZ", "dXT", "dXtau", "du", "dv", "dvprime", "ducp"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSummary {
    pub name: String,
    pub final_value: f64,
    pub monotone: bool,
    pub below_tol: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub columns: Vec<ColumnSummary>,
    pub tol: f64,
    pub v_compactness_bound: f64,
    /// `max(v^n - v, 0)` never exceeds `|v^n - v|`.
    pub upper_semicontinuity: bool,
    pub pass: bool,
}

struct Snapshot {
    z: RandomVariable,
    x_t: RandomVariable,
    x_tau: RandomVariable,
    u: Vec<f64>,
    v: Vec<f64>,
    v_prime: Vec<f64>,
    ucp: Vec<RandomVariable>,
    u_t: RandomVariable,
}

fn snapshot(m: &MarketModel, u: &UtilityPair, inp: &ExperimentInputs, xi: &RandomVariable) -> Result<Snapshot> {
    let space = m.space();
    let solver = Duality::new(m, u);
    let primal = solver.primal(&inp.tau, xi)?;
    let dual = solver.dual(&inp.tau, &inp.eta)?;
    let start = solver.primal(&space.deterministic_time(0), &space.constant(inp.x0))?;
    let x_tau = RandomVariable::new(
        (0..space.n_scenarios())
            .map(|w| inp.x0 * start.wealth_path[inp.tau.at(w)][w])
            .collect(),
    );
    let x_t = primal.x_hat.zip_with(xi, |x, s| x * s);
    Ok(Snapshot {
        z: terminal_density(m)?,
        u_t: x_t.map(|x| u.u(x)),
        x_t,
        x_tau,
        u: primal.values,
        v: dual.values,
        v_prime: dual.v_prime,
        ucp: solver.value_process(inp.x0)?.values,
    })
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Solves every market in the sequence and tabulates distances to the base solution.
pub fn run_stability_experiment(
    seq: &MarketSequence,
    u: &UtilityPair,
    inp: &ExperimentInputs,
) -> Result<StabilityReport> {
    let space = seq.base.space();
    let base = snapshot(&seq.base, u, inp, &inp.xi)?;
    let compact = v_compactness_check(seq, u)?;
    let rows: Vec<StabilityRow> = (1..=seq.n_max())
        .into_par_iter()
        .map(|n| {
            let xi = match &inp.joint_xi {
                Some(h) => inp.xi.map(|x| x * (1.0 + h.at(n))),
                None => inp.xi.clone(),
            };
            let s = snapshot(seq.market(n), u, inp, &xi).map_err(|e| Error::SequenceStep {
                n,
                source: Box::new(e),
            })?;
            let d_ucp = s
                .ucp
                .iter()
                .zip(&base.ucp)
                .map(|(a, b)| a.max_abs_diff(b))
                .fold(0.0, f64::max);
            let d_ut_l1 = space.expect(&s.u_t.zip_with(&base.u_t, |a, b| (a - b).abs()));
            Ok(StabilityRow {
                n,
                d_z: ky_fan(space, &s.z, &base.z)?,
                d_xt: ky_fan(space, &s.x_t, &base.x_t)?,
                d_xtau: ky_fan(space, &s.x_tau, &base.x_tau)?,
                d_u: max_gap(&s.u, &base.u),
                d_v: max_gap(&s.v, &base.v),
                d_vprime: max_gap(&s.v_prime, &base.v_prime),
                d_ucp,
                d_v_upper: s
                    .v
                    .iter()
                    .zip(&base.v)
                    .map(|(a, b)| (a - b).max(0.0))
                    .fold(0.0, f64::max),
                d_ut_l1,
            })
        })
        .collect::<Result<_>>()?;
    let columns: Vec<ColumnSummary> = STABILITY_COLUMNS
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let col: Vec<f64> = rows.iter().map(|r| r.distances()[k]).collect();
            let final_value = col[col.len() - 1];
            ColumnSummary {
                name: name.to_string(),
                final_value,
                monotone: monotone_after_burn_in(&col),
                below_tol: final_value.is_finite() && final_value <= CONVERGENCE_TOL,
            }
        })
        .collect();
    let finite = rows.iter().all(|r| r.distances().iter().all(|d| d.is_finite()));
    Ok(StabilityReport {
        pass: finite && columns.iter().all(|c| c.monotone && c.below_tol),
        upper_semicontinuity: rows.iter().all(|r| r.d_v_upper <= r.d_v),
        v_compactness_bound: compact.bound,
        tol: CONVERGENCE_TOL,
        columns,
        rows,
    })
}

/// Output of [`uniform_convergence_on_set`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformReport {
    pub radius: f64,
    /// Size of the `F_tau`-convex net of `K`.
    pub convex_net_size: usize,
    /// Per-atom levels of the evaluation lattice (an `r`-net containing the convex net).
    pub levels: Vec<Vec<f64>>,
    /// `sup_K |v^n - v|` per `n`.
    pub value_gap: Vec<f64>,
    /// `sup_K |(v^n)' - v'|` per `n`.
    pub derivative_gap: Vec<f64>,
    /// Largest pairwise slope of `v^n` on the lattice, per `n`.
    pub empirical_lipschitz: Vec<f64>,
    /// `max_n max_A |(v^n)'|` at the ends of `K`; bounds every slope by convexity.
    pub alpha: f64,
    pub alpha_certifies_all_pairs: bool,
    /// `min_n min_K v^n`.
    pub min_value: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Sup-gap tolerance for [`uniform_convergence_on_set`] at `N_max`.
pub const UNIFORM_TOL: f64 = 2e-3;

/// `sup_K |v^n_tau - v_tau|` and the derivative gap per `n`, plus an
/// equicontinuity check with one Lipschitz constant for all `n`.
///
/// `v` is local, so on each atom it depends only on the value of `eta`
/// there; the sup over the spliced lattice reduces to a per-atom sup over
/// 1-D levels, each level solved once for all atoms at the same time.
pub fn uniform_convergence_on_set(
    seq: &MarketSequence,
    u: &UtilityPair,
    tau: &StoppingTime,
    k: &ConvexCompactSet,
    r: f64,
) -> Result<UniformReport> {
    let space = seq.base.space();
    let convex_net = ftau_convex_net(space, k, r)?;
    let lo = k.bounds().0;
    if let Some(a) = lo.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::SetTouchesZero { atom: a });
    }
    let g = space.sigma_at(tau);
    if g.atoms() != k.sigma().atoms() {
        return Err(Error::OutOfRange("K is not defined on the atoms of F_tau".into()));
    }
    let levels = k.lattice(r);
    let depth = levels.iter().map(|l| l.len()).max().unwrap_or(0);
    let eta_at = |j: usize| -> RandomVariable {
        let per_atom: Vec<f64> = levels.iter().map(|l| l[j.min(l.len() - 1)]).collect();
        g.spread(&per_atom)
    };
    // values[n][j][a], n = 0 is the base market
    let markets: Vec<&MarketModel> = std::iter::once(&seq.base).chain(seq.markets.iter()).collect();
    let solved: Vec<Vec<(Vec<f64>, Vec<f64>)>> = markets
        .par_iter()
        .enumerate()
        .map(|(n, m)| {
            let solver = Duality::new(m, u);
            (0..depth)
                .map(|j| {
                    let d = solver.dual(tau, &eta_at(j))?;
                    Ok((d.values, d.v_prime))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::SequenceStep { n, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let n_atoms = levels.len();
    let at = |n: usize, j: usize, a: usize| -> (f64, f64) {
        let j = j.min(levels[a].len() - 1);
        (solved[n][j].0[a], solved[n][j].1[a])
    };
    let mut value_gap = Vec::new();
    let mut derivative_gap = Vec::new();
    let mut empirical_lipschitz = Vec::new();
    let mut alpha: f64 = 0.0;
    let mut min_value = f64::INFINITY;
    for n in 0..markets.len() {
        let (mut vg, mut dg, mut lip) = (0.0f64, 0.0f64, 0.0f64);
        for a in 0..n_atoms {
            let m = levels[a].len();
            for j in 0..m {
                let (v, dv) = at(n, j, a);
                let (v0, dv0) = at(0, j, a);
                vg = vg.max((v - v0).abs());
                dg = dg.max((dv - dv0).abs());
                min_value = min_value.min(v);
                for i in 0..j {
                    let slope = (v - at(n, i, a).0).abs() / (levels[a][j] - levels[a][i]);
                    lip = lip.max(slope);
                }
            }
            alpha = alpha.max(at(n, 0, a).1.abs()).max(at(n, m - 1, a).1.abs());
        }
        if n > 0 {
            value_gap.push(vg);
            derivative_gap.push(dg);
        }
        empirical_lipschitz.push(lip);
    }
    let alpha_certifies_all_pairs = empirical_lipschitz.iter().all(|&l| l <= alpha * (1.0 + 1e-9));
    let last = |v: &[f64]| v[v.len() - 1];
    let pass = alpha_certifies_all_pairs
        && alpha.is_finite()
        && last(&value_gap) <= UNIFORM_TOL
        && last(&derivative_gap) <= UNIFORM_TOL
        && min_value.is_finite();
    Ok(UniformReport {
        radius: r,
        convex_net_size: convex_net.len(),
        levels,
        value_gap,
        derivative_gap,
        empirical_lipschitz,
        alpha,
        alpha_certifies_all_pairs,
        min_value,
        tol: UNIFORM_TOL,
        pass,
    })
}

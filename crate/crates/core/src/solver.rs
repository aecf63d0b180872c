//! Log-barrier Newton method for small smooth convex programs
//! `min f(x)  s.t.  A x <= b`.
//!
//! Each stage minimizes `f(x) - mu * sum ln(b - A x)` by damped Newton with
//! Armijo backtracking; `mu` shrinks by a constant factor until `m * mu`
//! (the duality-gap bound of the central path) falls below `gap_tol`.

use crate::linalg::Matrix;

/// Smooth convex objective. `value` returns `None` outside the domain.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Option<f64>;
    /// Writes the gradient into `g` and the Hessian into `h` (both pre-zeroed).
    fn derivatives(&self, x: &[f64], g: &mut [f64], h: &mut Matrix);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierOptions {
    pub mu0: f64,
    pub shrink: f64,
    pub gap_tol: f64,
    pub max_newton: usize,
    /// Iterates beyond this norm are reported as unbounded.
    pub unbounded_norm: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            mu0: 1.0,
            shrink: 0.2,
            gap_tol: 1e-12,
            max_newton: 60,
            unbounded_norm: 1e12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSolution {
    pub x: Vec<f64>,
    pub value: f64,
    /// Central-path multipliers `mu / s_i`.
    pub multipliers: Vec<f64>,
    /// Max of stationarity, complementarity and primal infeasibility.
    pub kkt_residual: f64,
    pub newton_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BarrierError {
    NotStrictlyFeasible,
    Unbounded,
    Numerical(String),
}

/// Linear inequality block `A x <= b`, dense rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Constraints {
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

impl Constraints {
    pub fn push(&mut self, row: Vec<f64>, rhs: f64) {
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Slacks `b - A x`.
    pub fn slacks(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(r, b)| b - r.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }
}

pub fn minimize(
    f: &dyn Objective,
    cons: &Constraints,
    x0: &[f64],
    opts: &BarrierOptions,
) -> Result<BarrierSolution, BarrierError> {
    let n = f.dim();
    let m = cons.len();
    let mut x = x0.to_vec();
    if cons.slacks(&x).iter().any(|&s| !(s > 0.0)) || f.value(&x).is_none() {
        return Err(BarrierError::NotStrictlyFeasible);
    }
    let mut mu = if m == 0 { 0.0 } else { opts.mu0 };
    let mut steps = 0;
    let mut g = vec![0.0; n];
    let mut h = Matrix::zeros(n);

    let phi = |x: &[f64], mu: f64| -> Option<f64> {
        let v = f.value(x)?;
        let s = cons.slacks(x);
        if s.iter().any(|&v| !(v > 0.0)) {
            return None;
        }
        Some(v - mu * s.iter().map(|v| v.ln()).sum::<f64>())
    };

    loop {
        let mut prev_dec2 = f64::INFINITY;
        for _ in 0..opts.max_newton {
            g.iter_mut().for_each(|v| *v = 0.0);
            h.fill(0.0);
            f.derivatives(&x, &mut g, &mut h);
            let s = cons.slacks(&x);
            for (row, &si) in cons.rows.iter().zip(&s) {
                let w = mu / si;
                let w2 = mu / (si * si);
                for (j, &aj) in row.iter().enumerate() {
                    if aj == 0.0 {
                        continue;
                    }
                    g[j] += w * aj;
                    for (k, &ak) in row.iter().enumerate() {
                        if ak != 0.0 {
                            h.add(j, k, w2 * aj * ak);
                        }
                    }
                }
            }
            let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
            let dx = match h.solve(&rhs) {
                Some(d) => d,
                None => {
                    let mut reg = h.clone();
                    let tr = (0..n).map(|i| h.get(i, i).abs()).fold(0.0, f64::max).max(1.0);
                    for i in 0..n {
                        reg.add(i, i, 1e-12 * tr);
                    }
                    reg.solve(&rhs)
                        .ok_or_else(|| BarrierError::Numerical("singular Newton system".into()))?
                }
            };
            steps += 1;
            let dec2: f64 = -g.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>();
            if !(dec2 >= 0.0) {
                // Hessian lost definiteness numerically; stop refining this stage.
                break;
            }
            // Converged, or stalled at rounding level of the barrier terms.
            if dec2 <= 1e-26 || (dec2 < 1e-14 && dec2 > 0.5 * prev_dec2) {
                break;
            }
            prev_dec2 = dec2;
            let base = phi(&x, mu).ok_or(BarrierError::NotStrictlyFeasible)?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..80 {
                let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + t * b).collect();
                if let Some(v) = phi(&trial, mu) {
                    if v <= base - 0.25 * t * dec2 || (dec2 < 1e-16 && v <= base + 1e-15 * base.abs().max(1.0)) {
                        x = trial;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            let norm = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !(norm <= opts.unbounded_norm) {
                return Err(BarrierError::Unbounded);
            }
            if !accepted {
                break;
            }
        }
        if m == 0 || (m as f64) * mu <= opts.gap_tol {
            break;
        }
        mu *= opts.shrink;
    }

    let value = f.value(&x).ok_or(BarrierError::NotStrictlyFeasible)?;
    let s = cons.slacks(&x);
    g.iter_mut().for_each(|v| *v = 0.0);
    h.fill(0.0);
    f.derivatives(&x, &mut g, &mut h);
    let barrier: Vec<f64> = s.iter().map(|&si| if m == 0 { 0.0 } else { mu / si }).collect();
    let mut best = (kkt_residual(cons, &g, &s, &barrier), barrier);
    if let Some(ls) = least_squares_multipliers(cons, &g, &s) {
        let r = kkt_residual(cons, &g, &s, &ls);
        if r < best.0 {
            best = (r, ls);
        }
    }
    Ok(BarrierSolution {
        x,
        value,
        multipliers: best.1,
        kkt_residual: best.0,
        newton_steps: steps,
    })
}

/// Slack below which a constraint counts as active for multiplier estimation.
const ACTIVE_SLACK: f64 = 1e-7;

/// Max of stationarity, complementarity, primal and dual infeasibility.
fn kkt_residual(cons: &Constraints, grad_f: &[f64], s: &[f64], lambda: &[f64]) -> f64 {
    let mut r = grad_f.to_vec();
    for (row, &l) in cons.rows.iter().zip(lambda) {
        for (j, &aj) in row.iter().enumerate() {
            r[j] += l * aj;
        }
    }
    let stationarity = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let complementarity = lambda
        .iter()
        .zip(s)
        .fold(0.0f64, |a, (l, s)| a.max((l * s).abs()));
    let infeasibility = s.iter().fold(0.0f64, |a, &v| a.max(-v));
    let dual_infeasibility = lambda.iter().fold(0.0f64, |a, &l| a.max(-l));
    stationarity
        .max(complementarity)
        .max(infeasibility)
        .max(dual_infeasibility)
}

/// Multipliers of the near-active constraints minimizing `|grad f + A^T lambda|`.
fn least_squares_multipliers(cons: &Constraints, grad_f: &[f64], s: &[f64]) -> Option<Vec<f64>> {
    let active: Vec<usize> = (0..cons.len())
        .filter(|&i| s[i] <= ACTIVE_SLACK * cons.rhs[i].abs().max(1.0))
        .collect();
    if active.is_empty() {
        return None;
    }
    let k = active.len();
    let mut gram = Matrix::zeros(k);
    let mut rhs = vec![0.0; k];
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            let dot: f64 = cons.rows[i].iter().zip(&cons.rows[j]).map(|(u, v)| u * v).sum();
            gram.set(a, b, dot);
        }
        rhs[a] = -cons.rows[i].iter().zip(grad_f).map(|(u, v)| u * v).sum::<f64>();
    }
    // Degenerate vertices have more active rows than variables; a tiny ridge
    // picks the minimum-norm multipliers.
    let trace: f64 = (0..k).map(|i| gram.get(i, i)).sum();
    for i in 0..k {
        gram.add(i, i, 1e-14 * trace.max(f64::MIN_POSITIVE));
    }
    let sol = gram.solve(&rhs)?;
    let mut lambda = vec![0.0; cons.len()];
    for (a, &i) in active.iter().enumerate() {
        lambda[i] = sol[a];
    }
    Some(lambda)
}

//! Utility functions and their convex conjugates.
//!
//! Each [`UtilityPair`] carries `U`, `U'`, `U''`, the inverse marginal
//! `I = (U')^{-1}`, and the conjugate `V(y) = sup_x (U(x) - x y)` with
//! `V' = -I`. Built-ins are `ln x` and `x^p / p`; tabulated utilities are
//! interpolated by a concave quadratic spline with logarithmic tails, so the
//! interpolant is strictly increasing, strictly concave and satisfies Inada.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Utility selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum UtilitySpec {
    Log,
    Power { p: f64 },
    Table { points: Vec<(f64, f64)> },
}

impl UtilitySpec {
    pub fn build(&self) -> Result<UtilityPair> {
        match self {
            UtilitySpec::Log => Ok(UtilityPair::log()),
            UtilitySpec::Power { p } => UtilityPair::power(*p),
            UtilitySpec::Table { points } => UtilityPair::table(points),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Log,
    Power { p: f64 },
    Table(Spline),
}

/// A utility with its conjugate and asymptotic-elasticity data.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityPair {
    kind: Kind,
    ae_bound: f64,
    alpha: f64,
}

/// Grid used for the Inada checks.
pub const INADA_GRID: (f64, f64) = (1e-8, 1e8);
/// Relative tolerance under which `V(mu y) = mu^-alpha V(y)` counts as a pass.
pub const AE_BOUNDARY_TOL: f64 = 1e-9;

impl UtilityPair {
    pub fn log() -> Self {
        Self {
            kind: Kind::Log,
            ae_bound: 0.5,
            alpha: 1.0,
        }
    }

    /// `U(x) = x^p / p` for `p` in `(0, 1)`.
    pub fn power(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidUtility(format!(
                "power exponent p={p} must lie in (0, 1)"
            )));
        }
        Ok(Self {
            kind: Kind::Power { p },
            ae_bound: p,
            alpha: p / (1.0 - p),
        })
    }

    /// Tabulated `(x, U(x))` points, strictly increasing and strictly concave.
    pub fn table(points: &[(f64, f64)]) -> Result<Self> {
        Ok(Self {
            kind: Kind::Table(Spline::new(points)?),
            ae_bound: 0.5,
            alpha: 1.0,
        })
    }

    pub fn name(&self) -> String {
        match &self.kind {
            Kind::Log => "log".to_string(),
            Kind::Power { p } => format!("power(p={p})"),
            Kind::Table(_) => "table".to_string(),
        }
    }

    /// Claimed asymptotic elasticity.
    pub fn ae_bound(&self) -> f64 {
        self.ae_bound
    }

    /// Exponent in the dual growth bound `V(mu y) < mu^-alpha V(y)`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `U(x)`; `-inf` where the utility is not finite.
    pub fn u(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return match self.kind {
                Kind::Power { .. } if x == 0.0 => 0.0,
                _ => f64::NEG_INFINITY,
            };
        }
        match &self.kind {
            Kind::Log => x.ln(),
            Kind::Power { p } => x.powf(*p) / p,
            Kind::Table(s) => s.value(x),
        }
    }

    pub fn u_prime(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Log => 1.0 / x,
            Kind::Power { p } => x.powf(p - 1.0),
            Kind::Table(s) => s.slope(x),
        }
    }

    pub fn u_second(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Log => -1.0 / (x * x),
            Kind::Power { p } => (p - 1.0) * x.powf(p - 2.0),
            Kind::Table(s) => s.curvature(x),
        }
    }

    /// Inverse marginal utility `I(y) = (U')^{-1}(y)`.
    pub fn inv_marginal(&self, y: f64) -> f64 {
        match &self.kind {
            Kind::Log => 1.0 / y,
            Kind::Power { p } => y.powf(1.0 / (p - 1.0)),
            Kind::Table(s) => s.inverse_slope(y),
        }
    }

    /// `V(y)`; `+inf` for `y <= 0`.
    pub fn v(&self, y: f64) -> f64 {
        if !(y > 0.0) {
            return f64::INFINITY;
        }
        match &self.kind {
            Kind::Log => -y.ln() - 1.0,
            Kind::Power { p } => (1.0 - p) / p * y.powf(p / (p - 1.0)),
            Kind::Table(_) => {
                let x = self.inv_marginal(y);
                self.u(x) - x * y
            }
        }
    }

    pub fn v_prime(&self, y: f64) -> f64 {
        -self.inv_marginal(y)
    }

    pub fn v_second(&self, y: f64) -> f64 {
        -1.0 / self.u_second(self.inv_marginal(y))
    }

    /// Positive and negative parts of `V`.
    pub fn v_parts(&self, y: f64) -> (f64, f64) {
        let v = self.v(y);
        (v.max(0.0), (-v).max(0.0))
    }

    /// `V(y)` with input validation.
    pub fn conjugate_eval(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) || !y.is_finite() {
            return Err(Error::OutOfRange(format!("conjugate needs y > 0, got {y}")));
        }
        Ok(self.v(y))
    }

    /// Checks `U' > 0`, `U'` strictly decreasing and the Inada limits on the
    /// geometric grid [`INADA_GRID`].
    pub fn inada_check(&self) -> Result<()> {
        let grid = geometric_grid(INADA_GRID.0, INADA_GRID.1, 161);
        let slopes: Vec<f64> = grid.iter().map(|&x| self.u_prime(x)).collect();
        if slopes.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InadmissibleUtility("U' not positive on the grid".into()));
        }
        if slopes.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InadmissibleUtility("U' not strictly decreasing".into()));
        }
        if slopes[0] < 1e3 || slopes[slopes.len() - 1] > 1e-3 {
            return Err(Error::InadmissibleUtility(format!(
                "Inada limits not reached: U'({:e}) = {:e}, U'({:e}) = {:e}",
                INADA_GRID.0,
                slopes[0],
                INADA_GRID.1,
                slopes[slopes.len() - 1]
            )));
        }
        Ok(())
    }

    pub fn elasticity(&self, x: f64) -> Option<f64> {
        let u = self.u(x);
        (u > 0.0).then(|| x * self.u_prime(x) / u)
    }

    /// Numerical `limsup x U'(x) / U(x)`.
    pub fn asymptotic_elasticity_estimate(&self) -> AeEstimate {
        let mut est = elasticity_profile(|x| self.u(x), |x| self.u_prime(x));
        est.within_bound = est.estimate <= self.ae_bound + 1e-3;
        est
    }

    /// `y0 = U'(x0)` for the smallest grid point `x0` beyond which the
    /// elasticity stays below [`ae_bound`](Self::ae_bound).
    pub fn y0(&self) -> f64 {
        let grid: Vec<f64> = (-8..=8).map(|k| 10f64.powi(k)).collect();
        let mut x0 = grid[grid.len() - 1];
        for &x in grid.iter().rev() {
            match self.elasticity(x) {
                Some(e) if e <= self.ae_bound => x0 = x,
                _ => break,
            }
        }
        self.u_prime(x0)
    }

    /// `V(mu y) < mu^-alpha V(y)`, with boundary equality accepted at
    /// relative tolerance [`AE_BOUNDARY_TOL`].
    pub fn ae_dual_bound_check(&self, mu: f64, y: f64) -> Result<bool> {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(Error::OutOfRange(format!("mu={mu} outside (0, 1)")));
        }
        if !(y > 0.0) {
            return Err(Error::OutOfRange(format!("y={y} must be positive")));
        }
        let lhs = self.v(mu * y);
        let rhs = mu.powf(-self.alpha) * self.v(y);
        Ok(lhs < rhs || (lhs - rhs) <= AE_BOUNDARY_TOL * rhs.abs().max(1.0))
    }
}

/// Result of an asymptotic-elasticity estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AeEstimate {
    /// `(x, x U'(x) / U(x))` for grid points with `U(x) > 0`.
    pub profile: Vec<(f64, f64)>,
    pub estimate: f64,
    /// False when the estimate reaches 1.
    pub admissible: bool,
    pub within_bound: bool,
}

/// Elasticity on `x = 10^k`, `k = 2..=8`; the estimate is the max over the
/// last three grid points, where the limsup is read off.
pub fn elasticity_profile(u: impl Fn(f64) -> f64, du: impl Fn(f64) -> f64) -> AeEstimate {
    let profile: Vec<(f64, f64)> = (2..=8)
        .map(|k| 10f64.powi(k))
        .filter_map(|x| {
            let v = u(x);
            (v > 0.0).then(|| (x, x * du(x) / v))
        })
        .collect();
    let tail = &profile[profile.len().saturating_sub(3)..];
    let estimate = tail.iter().map(|p| p.1).fold(f64::NAN, f64::max);
    let admissible = estimate < 1.0;
    AeEstimate {
        profile,
        estimate,
        admissible,
        within_bound: admissible,
    }
}

pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && lo > 0.0 && hi > lo);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Concave quadratic spline through tabulated points.
///
/// Knot slopes `d_i` are geometric means of adjacent secants; on each
/// interval an extra knot splits it so that `U'` is piecewise linear from
/// `d_i` through the secant slope to `d_{i+1}`. Outside the table the spline
/// continues as `U(x_k) + c ln(x / x_k)`.
#[derive(Debug, Clone, PartialEq)]
struct Spline {
    x: Vec<f64>,
    u: Vec<f64>,
    d: Vec<f64>,
    /// Interior knot per interval and the slope there (the secant).
    mid: Vec<(f64, f64)>,
}

impl Spline {
    fn new(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidUtility(
                "table needs at least three points".into(),
            ));
        }
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::InvalidUtility("table has non-finite entries".into()));
        }
        let x: Vec<f64> = points.iter().map(|p| p.0).collect();
        let u: Vec<f64> = points.iter().map(|p| p.1).collect();
        if x[0] <= 0.0 || x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidUtility(
                "table abscissae must be positive and strictly increasing".into(),
            ));
        }
        let s: Vec<f64> = (0..x.len() - 1)
            .map(|i| (u[i + 1] - u[i]) / (x[i + 1] - x[i]))
            .collect();
        if s.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidUtility("table is not strictly increasing".into()));
        }
        if s.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidUtility("table is not strictly concave".into()));
        }
        let k = x.len() - 1;
        let mut d = vec![0.0; x.len()];
        d[0] = (u[1] - u[0]) / (x[1] / x[0]).ln() / x[0];
        d[k] = (u[k] - u[k - 1]) / (x[k] / x[k - 1]).ln() / x[k];
        for i in 1..k {
            d[i] = (s[i - 1] * s[i]).sqrt();
        }
        let mid = (0..k)
            .map(|i| {
                let theta = (s[i] - d[i + 1]) / (d[i] - d[i + 1]);
                (x[i] + theta * (x[i + 1] - x[i]), s[i])
            })
            .collect();
        Ok(Self { x, u, d, mid })
    }

    fn last(&self) -> usize {
        self.x.len() - 1
    }

    fn interval(&self, x: f64) -> usize {
        self.x.partition_point(|&v| v <= x).saturating_sub(1).min(self.last() - 1)
    }

    fn value(&self, x: f64) -> f64 {
        let k = self.last();
        if x <= self.x[0] {
            return self.u[0] + self.d[0] * self.x[0] * (x / self.x[0]).ln();
        }
        if x >= self.x[k] {
            return self.u[k] + self.d[k] * self.x[k] * (x / self.x[k]).ln();
        }
        let i = self.interval(x);
        let (xm, sm) = self.mid[i];
        if x <= xm {
            let h = x - self.x[i];
            let slope = (sm - self.d[i]) / (xm - self.x[i]);
            self.u[i] + self.d[i] * h + 0.5 * slope * h * h
        } else {
            let h = self.x[i + 1] - x;
            let slope = (self.d[i + 1] - sm) / (self.x[i + 1] - xm);
            self.u[i + 1] - self.d[i + 1] * h + 0.5 * slope * h * h
        }
    }

    fn slope(&self, x: f64) -> f64 {
        let k = self.last();
        if x <= self.x[0] {
            return self.d[0] * self.x[0] / x;
        }
        if x >= self.x[k] {
            return self.d[k] * self.x[k] / x;
        }
        let i = self.interval(x);
        let (xm, sm) = self.mid[i];
        if x <= xm {
            self.d[i] + (sm - self.d[i]) * (x - self.x[i]) / (xm - self.x[i])
        } else {
            sm + (self.d[i + 1] - sm) * (x - xm) / (self.x[i + 1] - xm)
        }
    }

    fn curvature(&self, x: f64) -> f64 {
        let k = self.last();
        if x <= self.x[0] {
            return -self.d[0] * self.x[0] / (x * x);
        }
        if x >= self.x[k] {
            return -self.d[k] * self.x[k] / (x * x);
        }
        let i = self.interval(x);
        let (xm, sm) = self.mid[i];
        if x <= xm {
            (sm - self.d[i]) / (xm - self.x[i])
        } else {
            (self.d[i + 1] - sm) / (self.x[i + 1] - xm)
        }
    }

    fn inverse_slope(&self, y: f64) -> f64 {
        let k = self.last();
        if y >= self.d[0] {
            return self.d[0] * self.x[0] / y;
        }
        if y <= self.d[k] {
            return self.d[k] * self.x[k] / y;
        }
        // knot slopes decrease with x
        let i = self.d.partition_point(|&v| v > y).saturating_sub(1).min(k - 1);
        let (xm, sm) = self.mid[i];
        if y >= sm {
            self.x[i] + (y - self.d[i]) / (sm - self.d[i]) * (xm - self.x[i])
        } else {
            xm + (y - sm) / (self.d[i + 1] - sm) * (self.x[i + 1] - xm)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_conjugate(u: &UtilityPair, y: f64) -> f64 {
        // golden-section on ln x; U(x) - x y is concave in x
        let (mut a, mut b) = ((u.inv_marginal(y) / 100.0).ln(), (u.inv_marginal(y) * 100.0).ln());
        let f = |t: f64| u.u(t.exp()) - t.exp() * y;
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        f(0.5 * (a + b))
    }

    fn sample_table() -> UtilityPair {
        let pts: Vec<(f64, f64)> = [0.1, 0.3, 0.7, 1.0, 2.0, 5.0, 12.0]
            .iter()
            .map(|&x: &f64| (x, 2.0 * x.sqrt()))
            .collect();
        UtilityPair::table(&pts).unwrap()
    }

    fn all() -> Vec<UtilityPair> {
        vec![
            UtilityPair::log(),
            UtilityPair::power(0.5).unwrap(),
            UtilityPair::power(0.3).unwrap(),
            sample_table(),
        ]
    }

    #[test]
    fn conjugate_examples() {
        assert!((UtilityPair::log().conjugate_eval(1.0).unwrap() + 1.0).abs() < 1e-15);
        let p = UtilityPair::power(0.5).unwrap();
        assert!((p.u(1.0) - 2.0).abs() < 1e-15);
        assert!((p.conjugate_eval(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(p.conjugate_eval(0.0).is_err());
        assert!(p.conjugate_eval(-1.0).is_err());
    }

    #[test]
    fn conjugate_matches_numeric_sup() {
        for u in all() {
            for &y in &[0.05, 0.3, 1.0, 2.5, 9.0] {
                let v = u.v(y);
                let num = numeric_conjugate(&u, y);
                assert!(
                    (v - num).abs() <= 1e-6 * v.abs().max(1.0),
                    "{}: V({y}) = {v} vs {num}",
                    u.name()
                );
            }
        }
    }

    #[test]
    fn inverse_marginal_identity() {
        for u in all() {
            for x in geometric_grid(1e-3, 1e3, 41) {
                let back = u.inv_marginal(u.u_prime(x));
                assert!((back - x).abs() <= 1e-10 * x, "{}: {x} -> {back}", u.name());
            }
        }
    }

    #[test]
    fn fenchel_young_and_derivatives() {
        for u in all() {
            let grid = geometric_grid(1e-2, 1e2, 25);
            for &x in &grid {
                for &y in &grid {
                    assert!(u.u(x) <= u.v(y) + x * y + 1e-8);
                }
                let y = u.u_prime(x);
                assert!((u.u(x) - u.v(y) - x * y).abs() <= 1e-8 * (1.0 + x * y));
            }
            for &y in &grid {
                let h = 1e-6 * y;
                let fd = (u.v(y + h) - u.v(y - h)) / (2.0 * h);
                assert!((fd - u.v_prime(y)).abs() <= 1e-6 * u.v_prime(y).abs().max(1.0));
            }
        }
    }

    #[test]
    fn strict_convexity_of_v() {
        for u in all() {
            let grid = geometric_grid(1e-2, 1e2, 30);
            for w in grid.windows(3) {
                let (a, c) = (w[0], w[2]);
                let m = 0.5 * (a + c);
                let gap = 0.5 * (u.v(a) + u.v(c)) - u.v(m);
                assert!(gap >= 1e-12, "{}: gap {gap}", u.name());
            }
        }
    }

    #[test]
    fn inada() {
        for u in all() {
            u.inada_check().unwrap();
        }
    }

    #[test]
    fn asymptotic_elasticity() {
        let p = UtilityPair::power(0.5).unwrap().asymptotic_elasticity_estimate();
        assert!((p.estimate - 0.5).abs() < 1e-12 && p.within_bound);
        let l = UtilityPair::log().asymptotic_elasticity_estimate();
        let at_1e8 = l.profile.last().unwrap();
        assert!((at_1e8.1 - 1.0 / 1e8f64.ln()).abs() < 1e-12);
        assert!(l.estimate < 0.1 && l.within_bound);
        let lin = elasticity_profile(|x| x, |_| 1.0);
        assert_eq!(lin.estimate, 1.0);
        assert!(!lin.admissible);
    }

    #[test]
    fn dual_growth_bound() {
        let p = UtilityPair::power(0.5).unwrap();
        // V(0.05) = 20 = 2 * V(0.1): the tight case
        assert!(p.ae_dual_bound_check(0.5, 0.1).unwrap());
        let l = UtilityPair::log();
        assert!((l.y0() - 0.1).abs() < 1e-15);
        assert!(l.ae_dual_bound_check(0.5, 0.1).unwrap());
        assert!((l.v(0.05) - 1.9957).abs() < 1e-4);
        assert!(l.ae_dual_bound_check(1.0, 0.1).is_err());
        for &mu in &[0.1, 0.5, 0.9, 0.99] {
            for &y in &[1e-3, 1e-2, 0.05] {
                assert!(l.ae_dual_bound_check(mu, y).unwrap());
                assert!(p.ae_dual_bound_check(mu, y).unwrap());
            }
        }
    }

    #[test]
    fn table_rejects_bad_shapes() {
        assert!(UtilityPair::table(&[(1.0, 0.0), (2.0, 1.0)]).is_err());
        assert!(UtilityPair::table(&[(1.0, 0.0), (2.0, 1.0), (3.0, 3.0)]).is_err());
        assert!(UtilityPair::table(&[(1.0, 0.0), (2.0, -1.0), (3.0, -1.5)]).is_err());
        assert!(UtilityPair::table(&[(2.0, 0.0), (1.0, 1.0), (3.0, 1.5)]).is_err());
    }

    #[test]
    fn table_interpolates_points() {
        let t = sample_table();
        for &x in &[0.1, 0.3, 0.7, 1.0, 2.0, 5.0, 12.0f64] {
            assert!((t.u(x) - 2.0 * x.sqrt()).abs() < 1e-12);
        }
        let grid = geometric_grid(1e-4, 1e4, 400);
        for w in grid.windows(2) {
            assert!(t.u_prime(w[1]) < t.u_prime(w[0]));
            assert!(t.u(w[1]) > t.u(w[0]));
        }
    }
}

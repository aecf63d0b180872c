use std::collections::HashMap;

use duality_core::analysis::ky_fan;
use duality_core::duality::Duality;
use duality_core::filtered_space::{Extremum, FilteredSpace, NodeId, RandomVariable};
use duality_core::fixtures;
use duality_core::market::MarketModel;
use duality_core::utility::UtilityPair;
use proptest::prelude::*;

fn three_period() -> FilteredSpace {
    fixtures::product_space(&[0.25, 0.35, 0.4], 3, &["a", "b", "c"])
}

fn rv(n: usize) -> impl Strategy<Value = RandomVariable> {
    prop::collection::vec(-10.0f64..10.0, n).prop_map(RandomVariable::new)
}

fn utilities() -> Vec<UtilityPair> {
    let pts: Vec<(f64, f64)> = [0.1, 0.3, 0.7, 1.0, 2.0, 5.0, 12.0]
        .iter()
        .map(|&x: &f64| (x, 2.0 * x.sqrt()))
        .collect();
    vec![
        UtilityPair::log(),
        UtilityPair::power(0.5).unwrap(),
        UtilityPair::power(0.25).unwrap(),
        UtilityPair::table(&pts).unwrap(),
    ]
}

/// Wealth on every node from relative positions `theta[node]`, clamped to
/// the admissible range.
fn wealth(m: &MarketModel, x0: f64, theta: &[f64]) -> HashMap<NodeId, f64> {
    let s = m.space();
    let mut x = HashMap::from([(NodeId { t: 0, cell: 0 }, x0)]);
    let mut k = 0;
    for t in 0..m.horizon() {
        for cell in 0..s.n_cells(t) {
            let step = m.step(NodeId { t, cell });
            let (lo, hi) = step.position_bounds();
            let th = theta[k % theta.len()].clamp(lo.max(-50.0), hi.min(50.0));
            k += 1;
            let here = x[&step.node];
            for (c, d) in step.children.iter().zip(&step.ds) {
                x.insert(*c, here * (1.0 + th * d));
            }
        }
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tower_property(x in rv(27), s in 0usize..=3, dt in 0usize..=3) {
        let sp = three_period();
        let t = (s + dt).min(3);
        let inner = sp.cond_expect(&x, &sp.sigma_at_time(t));
        let lhs = sp.cond_expect(&inner, &sp.sigma_at_time(s));
        let rhs = sp.cond_expect(&x, &sp.sigma_at_time(s));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        prop_assert!((sp.expect(&x) - sp.expect(&inner)).abs() <= 1e-12);
    }

    #[test]
    fn essential_extrema_dominate_family(raw in prop::collection::vec(rv(27), 1..6), t in 0usize..=3) {
        let sp = three_period();
        let g = sp.sigma_at_time(t);
        let fam: Vec<RandomVariable> = raw.iter().map(|x| sp.cond_expect(x, &g)).collect();
        let hi = sp.essential_extremum(&fam, &g, Extremum::Sup).unwrap();
        let lo = sp.essential_extremum(&fam, &g, Extremum::Inf).unwrap();
        prop_assert!(g.is_measurable(&hi) && g.is_measurable(&lo));
        for x in &fam {
            for w in 0..27 {
                prop_assert!(lo[w] <= x[w] && x[w] <= hi[w]);
            }
        }
        // smallest measurable upper bound: attained on every atom
        for a in g.atoms() {
            let w0 = a.members[0];
            prop_assert!(fam.iter().any(|x| a.members.iter().any(|&w| x[w] == hi[w0])));
        }
    }

    #[test]
    fn ky_fan_is_a_bounded_metric(x in rv(27), y in rv(27), z in rv(27)) {
        let sp = three_period();
        let dxy = ky_fan(&sp, &x, &y).unwrap();
        // probabilities of the product tree sum to 1 up to rounding
        prop_assert!((0.0..=1.0 + 1e-12).contains(&dxy));
        prop_assert_eq!(dxy, ky_fan(&sp, &y, &x).unwrap());
        prop_assert_eq!(ky_fan(&sp, &x, &x).unwrap(), 0.0);
        let bound = ky_fan(&sp, &x, &z).unwrap() + ky_fan(&sp, &z, &y).unwrap();
        prop_assert!(dxy <= bound + 1e-12);
    }

    #[test]
    fn fenchel_young(x in 0.05f64..20.0, y in 0.05f64..20.0) {
        for u in utilities() {
            let tol = 1e-9 * (1.0 + u.v(y).abs());
            prop_assert!(u.u(x) - x * y <= u.v(y) + tol, "{}", u.name());
            let xi = u.inv_marginal(y);
            prop_assert!((u.u(xi) - xi * y - u.v(y)).abs() <= tol, "{}", u.name());
        }
    }

    #[test]
    fn deflated_wealth_is_a_supermartingale(
        theta in prop::collection::vec(-30.0f64..30.0, 1..13),
        x0 in 0.1f64..5.0,
    ) {
        let u = UtilityPair::log();
        for m in [fixtures::fix_b_two_period(), fixtures::trinomial_two_period()] {
            let s = m.space();
            let dual = Duality::new(&m, &u).dual(&s.deterministic_time(0), &s.constant(1.0)).unwrap();
            let x = wealth(&m, x0, &theta);
            for t in 0..m.horizon() {
                for cell in 0..s.n_cells(t) {
                    let step = m.step(NodeId { t, cell });
                    let y = |n: NodeId| s.node_value(&dual.deflator_path[n.t], n);
                    let next: f64 = step.children.iter().zip(&step.p).map(|(c, p)| p * x[c] * y(*c)).sum();
                    let now = x[&step.node] * y(step.node);
                    prop_assert!(next <= now * (1.0 + 1e-8) + 1e-12, "{next} > {now}");
                }
            }
        }
    }

    #[test]
    fn weak_duality(xi in 0.1f64..5.0, eta in 0.1f64..5.0) {
        let m = fixtures::trinomial_two_period();
        let s = m.space();
        for u in [UtilityPair::log(), UtilityPair::power(0.5).unwrap()] {
            let d = Duality::new(&m, &u);
            let tau = s.deterministic_time(1);
            let p = d.primal(&tau, &s.constant(xi)).unwrap();
            let q = d.dual(&tau, &s.constant(eta)).unwrap();
            for (a, b) in p.values.iter().zip(&q.values) {
                prop_assert!(*a <= b + xi * eta + 1e-8);
            }
        }
    }
}

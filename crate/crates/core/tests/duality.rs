use duality_core::duality::{Duality, GridSpec, SolverSettings};
use duality_core::filtered_space::RandomVariable;
use duality_core::fixtures;
use duality_core::market::MarketModel;
use duality_core::utility::UtilityPair;
use duality_core::Error;

fn all_markets() -> Vec<(&'static str, MarketModel)> {
    vec![
        ("fix_a", fixtures::fix_a()),
        ("fix_b", fixtures::fix_b()),
        ("fix_c", fixtures::fix_c()),
        ("fix_b_two_period", fixtures::fix_b_two_period()),
        ("trinomial_two_period", fixtures::trinomial_two_period()),
    ]
}

fn utilities() -> Vec<UtilityPair> {
    vec![UtilityPair::log(), UtilityPair::power(0.5).unwrap()]
}

#[test]
fn fix_a_log_holds_the_bond() {
    let m = fixtures::fix_a();
    let u = UtilityPair::log();
    let d = Duality::new(&m, &u);
    let tau = m.space().deterministic_time(0);
    let r = d.solve(&tau, &m.space().constant(1.0), &m.space().constant(1.0)).unwrap();
    assert!(r.atom_values_u[0].abs() < 1e-10);
    assert!((r.atom_values_v[0] + 1.0).abs() < 1e-10);
    assert!(r.x_hat.max_abs_diff(&m.space().constant(1.0)) < 1e-8);
    assert!(r.y_hat.max_abs_diff(&m.space().constant(1.0)) < 1e-8);
    assert!(r.kkt_residual <= 1e-8, "kkt {}", r.kkt_residual);
}

#[test]
fn fix_b_log_closed_forms() {
    let m = fixtures::fix_b();
    let u = UtilityPair::log();
    let d = Duality::new(&m, &u);
    let tau = m.space().deterministic_time(0);
    let one = m.space().constant(1.0);
    let r = d.solve(&tau, &one, &one).unwrap();
    let u0 = -0.5 * 0.99f64.ln();
    assert!((r.atom_values_u[0] - u0).abs() < 1e-10);
    assert!((r.x_hat[0] - 10.0 / 9.0).abs() < 1e-8 && (r.x_hat[1] - 10.0 / 11.0).abs() < 1e-8);
    assert!((r.atom_values_v[0] - (-1.0 + u0)).abs() < 1e-10);
    assert!((r.y_hat[0] - 0.9).abs() < 1e-8 && (r.y_hat[1] - 1.1).abs() < 1e-8);
    assert!(r.kkt_residual <= 1e-8, "kkt {}", r.kkt_residual);
}

#[test]
fn fix_b_power_closed_forms() {
    let m = fixtures::fix_b();
    let u = UtilityPair::power(0.5).unwrap();
    let d = Duality::new(&m, &u);
    let tau = m.space().deterministic_time(0);
    let one = m.space().constant(1.0);
    let e_inv_z: f64 = 0.5 * (1.0 / 0.9 + 1.0 / 1.1);
    let p = d.primal(&tau, &one).unwrap();
    assert!((p.values[0] - 2.0 * e_inv_z.sqrt()).abs() < 1e-9);
    assert!((p.values[0] - 2.0100756).abs() < 1e-7);
    assert!((p.u_prime[0] - e_inv_z.sqrt()).abs() < 1e-8);
    let dd = d.dual_derivative(&tau, &one).unwrap();
    assert!((dd.formula[0] + e_inv_z).abs() < 1e-8);
    assert!((dd.formula[0] + 1.0101010).abs() < 1e-7);
}

#[test]
fn fix_c_dual_is_constant_density() {
    let m = fixtures::fix_c();
    let u = UtilityPair::log();
    let tau = m.space().deterministic_time(0);
    let d = Duality::new(&m, &u).dual(&tau, &m.space().constant(1.0)).unwrap();
    assert!((d.values[0] + 1.0).abs() < 1e-10);
    assert!(d.y_hat.max_abs_diff(&m.space().constant(1.0)) < 1e-8);
}

#[test]
fn log_derivative_examples() {
    let u = UtilityPair::log();
    let m = fixtures::fix_a();
    let tau = m.space().deterministic_time(0);
    let r = Duality::new(&m, &u).dual_derivative(&tau, &m.space().constant(1.0)).unwrap();
    assert!((r.formula[0] + 1.0).abs() < 1e-10);
    assert!((r.finite_difference[0] + 1.0).abs() < 1e-7);
    let m = fixtures::fix_b();
    let r = Duality::new(&m, &u).dual_derivative(&tau, &m.space().constant(2.0)).unwrap();
    assert!((r.formula[0] + 0.5).abs() < 1e-10);
}

#[test]
fn solutions_satisfy_structural_invariants() {
    for (name, m) in all_markets() {
        for u in utilities() {
            let d = Duality::new(&m, &u);
            for t in 0..=m.horizon() {
                let tau = m.space().deterministic_time(t);
                let g = m.space().sigma_at(&tau);
                let one = m.space().constant(1.0);
                let r = d.solve(&tau, &one, &one).unwrap();
                assert!(r.kkt_residual <= 1e-8, "{name} t={t}: kkt {}", r.kkt_residual);
                assert!(r.x_hat.min_value() > 0.0 && r.y_hat.min_value() > 0.0);
                // E[X Y | F_tau] <= 1 for the normalized optimizers
                let xy = r.x_hat.zip_with(&r.y_hat, |a, b| a * b);
                let budget = m.space().atom_expect(&xy, &g);
                assert!(budget.iter().all(|&b| b <= 1.0 + 1e-8), "{name}: {budget:?}");
                // the optimal deflator is a martingale after tau
                for s in t..m.horizon() {
                    let next = m.space().cond_expect(&r.deflator_path[s + 1], &m.space().sigma_at_time(s));
                    assert!(next.max_abs_diff(&r.deflator_path[s]) <= 1e-8, "{name}: D != 1");
                }
            }
        }
    }
}

#[test]
fn dual_relation_holds_on_all_fixtures() {
    for (name, m) in all_markets() {
        for u in utilities() {
            let d = Duality::new(&m, &u);
            for t in [0, m.horizon()] {
                let tau = m.space().deterministic_time(t);
                let r = d.dual_relation_check(&tau, &m.space().constant(1.0)).unwrap();
                assert!(r.residual <= 1e-6, "{name} {} t={t}: {}", u.name(), r.residual);
            }
        }
    }
    let m = fixtures::fix_b();
    let u = UtilityPair::power(0.5).unwrap();
    let r = Duality::new(&m, &u)
        .dual_relation_check(&m.space().deterministic_time(0), &m.space().constant(1.0))
        .unwrap();
    assert!((r.eta[0] - 1.0050378).abs() < 1e-7);
}

#[test]
fn conjugacy_on_fix_a_and_b() {
    let u = UtilityPair::log();
    for m in [fixtures::fix_a(), fixtures::fix_b()] {
        let d = Duality::new(&m, &u);
        let tau = m.space().deterministic_time(0);
        for eta in [1.0, 10.0] {
            let eta = m.space().constant(eta);
            let coarse = d.conjugacy_check(&tau, &eta, 32).unwrap();
            let fine = d.conjugacy_check(&tau, &eta, 128).unwrap();
            assert!(coarse.max_residual <= 2e-3, "{coarse:?}");
            assert!(fine.max_residual <= 2e-4, "{fine:?}");
            assert!(fine.max_residual < coarse.max_residual);
            assert!(fine.max_grid_residual < coarse.max_grid_residual);
        }
    }
}

#[test]
fn locality_splices_exactly() {
    let m = fixtures::trinomial_two_period();
    let u = UtilityPair::log();
    let d = Duality::new(&m, &u);
    let tau = m.space().deterministic_time(1);
    let g = m.space().sigma_at(&tau);
    let e1 = m.space().constant(0.7);
    let e2 = m.space().constant(1.9);
    let mask: Vec<bool> = (0..g.n_atoms()).map(|a| a % 2 == 0).collect();
    let spliced = g.spread(&mask.iter().map(|&b| if b { 0.7 } else { 1.9 }).collect::<Vec<_>>());
    let a = d.dual(&tau, &e1).unwrap();
    let b = d.dual(&tau, &e2).unwrap();
    let s = d.dual(&tau, &spliced).unwrap();
    for (k, &in_a) in mask.iter().enumerate() {
        let expect = if in_a { a.values[k] } else { b.values[k] };
        assert!((s.values[k] - expect).abs() <= 1e-10);
    }
}

#[test]
fn log_scaling_and_monotonicity() {
    let m = fixtures::trinomial_two_period();
    let u = UtilityPair::log();
    let d = Duality::new(&m, &u);
    let tau = m.space().deterministic_time(0);
    let base = d.primal(&tau, &m.space().constant(1.0)).unwrap().values[0];
    let mut prev_u = f64::NEG_INFINITY;
    let mut prev_v = f64::INFINITY;
    for c in [0.25, 0.5, 1.0, 3.0, 7.0] {
        let uc = d.primal(&tau, &m.space().constant(c)).unwrap().values[0];
        assert!((uc - base - c.ln()).abs() < 1e-8);
        assert!(uc > prev_u);
        prev_u = uc;
        let vc = d.dual(&tau, &m.space().constant(c)).unwrap().values[0];
        assert!(vc < prev_v);
        prev_v = vc;
    }
}

#[test]
fn dual_value_is_strictly_convex() {
    let m = fixtures::trinomial_two_period();
    let u = UtilityPair::power(0.5).unwrap();
    let d = Duality::new(&m, &u);
    let tau = m.space().deterministic_time(0);
    let v = |e: f64| d.dual(&tau, &m.space().constant(e)).unwrap().values[0];
    for (a, b) in [(0.5, 1.5), (1.0, 4.0), (0.2, 0.3)] {
        assert!(0.5 * (v(a) + v(b)) - v(0.5 * (a + b)) > 0.0);
    }
}

#[test]
fn dual_minimizer_is_unique() {
    let m = fixtures::trinomial_two_period();
    let u = UtilityPair::log();
    let tau = m.space().deterministic_time(0);
    let eta = m.space().constant(1.3);
    let a = Duality::new(&m, &u).dual(&tau, &eta).unwrap();
    let settings = SolverSettings {
        dual_start: 0.4,
        ..SolverSettings::default()
    };
    let b = Duality::new(&m, &u).with_settings(settings).dual(&tau, &eta).unwrap();
    assert!(a.y_hat.max_abs_diff(&b.y_hat) <= 1e-7);
}

#[test]
fn floored_duals_decrease_to_the_value() {
    for m in [fixtures::fix_c(), fixtures::trinomial_two_period()] {
        let u = UtilityPair::log();
        let tau = m.space().deterministic_time(0);
        let eta = m.space().constant(1.0);
        let v = Duality::new(&m, &u).dual(&tau, &eta).unwrap().values[0];
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6] {
            let s = SolverSettings {
                floor: Some(eps),
                ..SolverSettings::default()
            };
            let ve = Duality::new(&m, &u).with_settings(s).dual(&tau, &eta).unwrap().values[0];
            assert!(ve <= prev + 1e-10 && ve >= v - 1e-10);
            prev = ve;
        }
        assert!((prev - v).abs() <= 1e-6);
    }
}

#[test]
fn value_process_is_a_martingale() {
    let m = fixtures::fix_a();
    let vp = Duality::new(&m, &UtilityPair::log()).value_process(1.0).unwrap();
    assert!(vp.values[0][0].abs() < 1e-10);

    let m = fixtures::fix_b_two_period();
    let vp = Duality::new(&m, &UtilityPair::log()).value_process(1.0).unwrap();
    assert!((vp.values[0][0] + 0.99f64.ln()).abs() < 1e-9);
    assert!(vp.martingale_residual <= 1e-7);
    assert!(vp.consistency_residual <= 1e-7);

    let m = fixtures::trinomial_two_period();
    let vp = Duality::new(&m, &UtilityPair::power(0.5).unwrap()).value_process(2.0).unwrap();
    assert!(vp.martingale_residual <= 1e-7);
}

#[test]
fn brute_force_agrees_with_solver() {
    let u = UtilityPair::log();
    let grid = GridSpec {
        step: 1e-3,
        zoom_levels: 2,
    };
    for m in [fixtures::fix_a(), fixtures::fix_b(), fixtures::fix_c()] {
        let tau = m.space().deterministic_time(0);
        let one = m.space().constant(1.0);
        let bf = Duality::new(&m, &u).brute_force_oracle(&tau, &one, grid).unwrap();
        let sol = Duality::new(&m, &u).primal(&tau, &one).unwrap();
        assert!((bf[0] - sol.values[0]).abs() <= 1e-8, "{bf:?} vs {:?}", sol.values);
    }
    let m = fixtures::fix_b_two_period();
    let tau = m.space().deterministic_time(0);
    let coarse = GridSpec {
        step: 0.1,
        zoom_levels: 3,
    };
    let bf = Duality::new(&m, &u)
        .brute_force_oracle(&tau, &m.space().constant(1.0), coarse)
        .unwrap();
    assert!((bf[0] + 0.99f64.ln()).abs() <= 1e-6);
}

#[test]
fn arbitrage_makes_the_primal_unbounded() {
    let m = fixtures::arbitrage();
    assert!(!m.check_nflvr());
    let u = UtilityPair::log();
    let tau = m.space().deterministic_time(0);
    let err = Duality::new(&m, &u).primal(&tau, &m.space().constant(1.0)).unwrap_err();
    assert!(matches!(err, Error::PrimalUnbounded { atom: 0 }));
}

#[test]
fn rejects_unmeasurable_or_nonpositive_inputs() {
    let m = fixtures::fix_b();
    let u = UtilityPair::log();
    let d = Duality::new(&m, &u);
    let tau = m.space().deterministic_time(0);
    let bad = RandomVariable::new(vec![1.0, 2.0]);
    assert!(matches!(d.primal(&tau, &bad), Err(Error::NotMeasurable { .. })));
    assert!(matches!(d.dual(&tau, &m.space().constant(-1.0)), Err(Error::OutOfRange(_))));
}

#[test]
fn terminal_atoms_are_degenerate() {
    let m = fixtures::trinomial_two_period();
    let u = UtilityPair::log();
    let tau = m.space().deterministic_time(m.horizon());
    let xi = RandomVariable::new((1..=9).map(|k| k as f64).collect());
    let p = Duality::new(&m, &u).primal(&tau, &xi).unwrap();
    for (k, v) in p.values.iter().enumerate() {
        assert!((v - ((k + 1) as f64).ln()).abs() < 1e-15);
    }
    let vp = Duality::new(&m, &u).value_process(1.0).unwrap();
    let terminal = &vp.values[m.horizon()];
    assert!(terminal.max_value().is_finite());
}

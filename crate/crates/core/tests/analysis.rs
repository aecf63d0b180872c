use duality_core::analysis::*;
use duality_core::filtered_space::{Extremum, FilteredSpace, RandomVariable};
use duality_core::fixtures;
use duality_core::market::MarketModel;
use duality_core::utility::UtilityPair;
use duality_core::Error;

fn two_period() -> FilteredSpace {
    fixtures::product_space(&[0.3, 0.7], 2, &["u", "d"])
}

#[test]
fn plimsup_matches_pointwise_limsup_on_long_tails() {
    let s = two_period();
    let cycle = vec![
        RandomVariable::new(vec![1.0, -1.0, 0.5, 2.0]),
        RandomVariable::new(vec![0.0, 3.0, 0.5, -2.0]),
        RandomVariable::new(vec![2.0, 0.0, -4.0, 1.0]),
    ];
    for g in [Vanishing::Harmonic, Vanishing::InverseSquare, Vanishing::AlternatingHarmonic] {
        let seq = TailSequence {
            prefix: vec![s.constant(100.0); 5],
            cycle: cycle.clone(),
            perturbation: Some((RandomVariable::new(vec![1.0, -2.0, 0.5, 3.0]), g)),
        };
        let sup = p_lim_extremum(&seq, LimitMode::Limsup).unwrap();
        let inf = p_lim_extremum(&seq, LimitMode::Liminf).unwrap();
        // pointwise sup/inf over a far window differ from the limits by at most g(N)
        let far = 1_000_000;
        let window: Vec<RandomVariable> = (far..far + 30).map(|n| seq.term(n)).collect();
        for w in 0..4 {
            let hi = window.iter().map(|x| x[w]).fold(f64::NEG_INFINITY, f64::max);
            let lo = window.iter().map(|x| x[w]).fold(f64::INFINITY, f64::min);
            assert!((hi - sup[w]).abs() <= 4.0 / far as f64);
            assert!((lo - inf[w]).abs() <= 4.0 / far as f64);
        }
    }
}

#[test]
fn ky_fan_and_sup_norm_converge_together() {
    let s = two_period();
    let x = RandomVariable::new(vec![0.2, -0.4, 1.5, 3.0]);
    let dir = RandomVariable::new(vec![1.0, -3.0, 0.0, 2.0]);
    let mut last = f64::INFINITY;
    for n in [1usize, 10, 100, 1000, 10_000] {
        let xn = x.zip_with(&dir, |a, d| a + d / n as f64);
        let kf = ky_fan(&s, &xn, &x).unwrap();
        let sup = xn.max_abs_diff(&x);
        assert!(kf <= sup + 1e-15);
        // with all weights >= p_min, sup <= ky_fan / p_min once below 1
        if sup < 1.0 {
            assert!(sup <= kf / 0.09 + 1e-12);
        }
        assert!(kf < last);
        last = kf;
    }
    assert!(last < 1e-3);
    // a jump that never shrinks keeps both away from zero
    let jump = RandomVariable::new(vec![0.0, 0.0, 0.0, 0.5]);
    for n in [1usize, 100, 10_000] {
        let xn = x.zip_with(&jump, |a, j| a + j + 1.0 / n as f64);
        assert!(ky_fan(&s, &xn, &x).unwrap() >= 0.49 * 0.49);
    }
}

#[test]
fn essential_infimum_of_usc_family_is_usc() {
    // X_theta(a) = 1 on {a <= theta_w} else 0, upper semicontinuous in a
    let s = two_period();
    let g = s.sigma_at_time(2);
    let thetas: Vec<Vec<f64>> = vec![
        vec![0.3, 0.5, 0.7, 0.9],
        vec![0.4, 0.2, 0.8, 0.6],
        vec![0.5, 0.5, 0.1, 1.0],
    ];
    let family_at = |a: f64| -> Vec<RandomVariable> {
        thetas
            .iter()
            .map(|th| RandomVariable::new(th.iter().map(|&t| if a <= t { 1.0 } else { 0.0 }).collect()))
            .collect()
    };
    let inf_at = |a: f64| s.essential_extremum(&family_at(a), &g, Extremum::Inf).unwrap();
    for a0 in [0.1, 0.2, 0.3, 0.45, 0.5, 0.6, 0.8] {
        let at = inf_at(a0);
        for k in 1..200 {
            for a in [a0 - 1.0 / k as f64, a0 + 1.0 / k as f64] {
                let v = inf_at(a);
                if k > 100 {
                    // limsup_{a -> a0} E(a) <= E(a0)
                    assert!(v.values().iter().zip(at.values()).all(|(v, a)| v <= a));
                }
            }
        }
    }
}

#[test]
fn conditional_dominated_convergence_and_fatou() {
    let s = two_period();
    let g = s.sigma_at_time(1);
    let limit = RandomVariable::new(vec![1.0, 2.0, 0.5, 4.0]);
    let osc = RandomVariable::new(vec![1.0, -1.0, 1.0, 1.0]);
    let seq = TailSequence {
        prefix: vec![],
        cycle: vec![limit.clone()],
        perturbation: Some((osc.clone(), Vanishing::AlternatingHarmonic)),
    };
    // |X_n| <= |X| + |osc|, E[X_n | G] -> E[X | G]
    let target = s.cond_expect(&limit, &g);
    let gaps: Vec<f64> = [10usize, 100, 1000, 10_000]
        .iter()
        .map(|&n| s.cond_expect(&seq.term(n), &g).max_abs_diff(&target))
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]));
    assert!(gaps[3] <= 1e-4);

    // Fatou: E[liminf X_n | G] <= liminf E[X_n | G] for X_n >= 0
    let a = RandomVariable::new(vec![2.0, 0.0, 1.0, 0.0]);
    let b = RandomVariable::new(vec![0.0, 2.0, 0.0, 1.0]);
    let alt = TailSequence {
        prefix: vec![],
        cycle: vec![a.clone(), b.clone()],
        perturbation: None,
    };
    let lhs = s.cond_expect(&p_lim_extremum(&alt, LimitMode::Liminf).unwrap(), &g);
    let ea = s.cond_expect(&a, &g);
    let eb = s.cond_expect(&b, &g);
    let rhs = ea.zip_with(&eb, f64::min);
    assert!(lhs.values().iter().zip(rhs.values()).all(|(l, r)| l <= r));
    assert!(rhs.values().iter().any(|&r| r > 0.0));
}

fn minimax_fix_c(step: f64, eta: f64) -> MinimaxVerification {
    let m = fixtures::fix_c();
    let tau = m.space().deterministic_time(0);
    conditional_minimax_verify(
        &m,
        &tau,
        &UtilityPair::log(),
        &XSpec::Grid { bound: 5.0, step },
        &YSpec::Deflators {
            eta: m.space().constant(eta),
            step,
        },
    )
    .unwrap()
}

#[test]
fn minimax_singletons_have_zero_gap() {
    let u = UtilityPair::log();
    for m in [fixtures::fix_b(), fixtures::fix_c(), fixtures::fix_b_two_period()] {
        let s = m.space();
        let tau = s.deterministic_time(0);
        let x = RandomVariable::new((0..s.n_scenarios()).map(|w| 0.5 + 0.25 * w as f64).collect());
        let y = RandomVariable::new((0..s.n_scenarios()).map(|w| 0.8 + 0.1 * w as f64).collect());
        let ys = YSpec::Deflators {
            eta: s.constant(1.0),
            step: 0.05,
        };
        let xs = XSpec::Grid { bound: 3.0, step: 0.05 };
        let r = conditional_minimax_verify(&m, &tau, &u, &XSpec::Singleton(x.clone()), &ys).unwrap();
        assert!(r.atoms.iter().all(|a| a.gap == 0.0), "{:?}", r.atoms);
        let r = conditional_minimax_verify(&m, &tau, &u, &xs, &YSpec::Singleton(y.clone())).unwrap();
        assert!(r.atoms.iter().all(|a| a.gap == 0.0), "{:?}", r.atoms);
    }
}

#[test]
fn minimax_fix_c_gap_is_small_and_easy_inequality_holds() {
    for eta in [0.5, 1.0, 1.3] {
        let mut prev = f64::INFINITY;
        for step in [0.02, 0.01] {
            let r = minimax_fix_c(step, eta);
            let a = &r.atoms[0];
            assert!(a.gap >= -1e-12 && a.gap <= 0.05, "eta={eta} step={step}: {a:?}");
            assert!(a.pass);
            assert!(a.gap <= prev + 1e-12);
            prev = a.gap;
        }
    }
    // the grid value is the conjugate at the grid saddle point -ln(eta) - 1
    let r = minimax_fix_c(0.01, 1.0);
    assert!((r.atoms[0].inf_sup + 1.0).abs() <= 1e-12);
}

#[test]
fn minimax_per_atom_decomposition() {
    let m = fixtures::trinomial_two_period();
    let tau = m.space().deterministic_time(1);
    let r = conditional_minimax_verify(
        &m,
        &tau,
        &UtilityPair::log(),
        &XSpec::Grid { bound: 3.0, step: 0.02 },
        &YSpec::Deflators {
            eta: m.space().constant(1.0),
            step: 0.02,
        },
    )
    .unwrap();
    assert_eq!(r.atoms.len(), 3);
    assert!(r.atoms.iter().all(|a| a.gap >= -1e-12 && a.pass));
}

#[test]
fn minimax_refuses_large_grids() {
    let m = fixtures::fix_c();
    let tau = m.space().deterministic_time(0);
    let err = conditional_minimax_verify(
        &m,
        &tau,
        &UtilityPair::log(),
        &XSpec::Grid { bound: 50.0, step: 0.001 },
        &YSpec::Deflators {
            eta: m.space().constant(1.0),
            step: 0.001,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::GridTooLarge(_)));

    let five = fixtures::product_market(&[0.2; 5], &[0.2, 0.1, 0.0, -0.1, -0.2], &[vec![0.0]], &["a", "b", "c", "d", "e"]);
    let tau = five.space().deterministic_time(0);
    let err = conditional_minimax_verify(
        &five,
        &tau,
        &UtilityPair::log(),
        &XSpec::Grid { bound: 1.0, step: 0.5 },
        &YSpec::Deflators {
            eta: five.space().constant(1.0),
            step: 0.5,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::GridTooLarge(_)));
}

#[test]
fn net_certificates_cover_sampled_members() {
    let m: MarketModel = fixtures::trinomial_two_period();
    let s = m.space();
    let g = s.sigma_at_time(1);
    let gens = [
        g.spread(&[0.5, 1.0, 2.0]),
        g.spread(&[1.5, 0.8, 1.2]),
        g.spread(&[1.0, 2.5, 0.7]),
    ];
    let k = ConvexCompactSet::new(g.clone(), &gens, None).unwrap();
    for r in [0.05, 0.2, 0.5] {
        let net = ftau_convex_net(s, &k, r).unwrap();
        let c = net_cover_certificate(s, &k, &net, NetKind::Convex, r, 10_000, 11).unwrap();
        assert_eq!(c.violations, 0);
        let sub = partition_subconvex_net(s, &k, r).unwrap();
        let c = net_cover_certificate(s, &k, &sub, NetKind::PartitionSubconvex, r, 10_000, 11).unwrap();
        assert_eq!(c.violations, 0);
    }
    // a single member sits far from a lone corner
    let corner = vec![k.lower()];
    let c = net_cover_certificate(s, &k, &corner, NetKind::Convex, 0.05, 1000, 3).unwrap();
    assert!(c.violations > 0);
    // certificates are reproducible from the seed
    let a = net_cover_certificate(s, &k, &corner, NetKind::Convex, 0.05, 1000, 3).unwrap();
    assert_eq!(a, c);
}

use duality_core::fixtures;
use duality_core::minimax_bridge::{reconcile_minimax, TRUNCATION_LEVELS};
use duality_core::utility::UtilityPair;

#[test]
fn truncation_is_inactive_on_fix_a() {
    let m = fixtures::fix_a();
    let s = m.space();
    let r = reconcile_minimax(&m, &UtilityPair::log(), &s.deterministic_time(0), &s.constant(1.0), &[0.02, 0.01]).unwrap();
    for b in &r.steps {
        for l in &b.levels {
            assert!((l.truncated_values()[0] + 1.0).abs() <= 1e-12);
            assert_eq!(l.atoms[0].gap, 0.0);
        }
    }
    assert!(r.monotone_in_n && r.easy_inequality && r.converges);
}

#[test]
fn truncation_is_active_at_one_on_fix_b() {
    let m = fixtures::fix_b();
    let s = m.space();
    let eta = 0.5;
    let step = 0.01;
    let r = reconcile_minimax(&m, &UtilityPair::log(), &s.deterministic_time(0), &s.constant(eta), &[step]).unwrap();
    let b = &r.steps[0];
    let vals: Vec<f64> = b.levels.iter().map(|l| l.truncated_values()[0]).collect();
    assert_eq!(b.levels.len(), TRUNCATION_LEVELS.len());
    // x <= 1 caps U at 0, so V^1(y) = -y and the infimum is -eta E[Y] = -eta
    assert!((vals[0] + eta).abs() <= 1e-12, "{vals:?}");
    // optimum x = 1 / (eta Z) <= 2.23 is interior for n = 4 and 16
    let v = -(eta.ln()) - 1.0 - 0.5 * ((0.9f64).ln() + (1.1f64).ln());
    assert!((r.dual_values[0] - v).abs() <= 1e-9);
    for &w in &vals[1..] {
        assert!((w - v).abs() <= 2.0 * step, "{vals:?} vs {v}");
    }
    assert!(vals[0] < vals[1] && (vals[1] - vals[2]).abs() <= 1e-12);
    assert!(r.monotone_in_n && r.easy_inequality && r.converges);
    assert!(r.conjugacy_residual[0] <= 2e-4);
}

#[test]
fn two_period_atoms_reconcile() {
    let m = fixtures::fix_b_two_period();
    let s = m.space();
    let r = reconcile_minimax(&m, &UtilityPair::log(), &s.deterministic_time(1), &s.constant(1.0), &[0.02]).unwrap();
    assert_eq!(r.dual_values.len(), 2);
    assert!(r.monotone_in_n && r.easy_inequality && r.converges);
}

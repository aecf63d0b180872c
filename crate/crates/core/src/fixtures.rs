//! Small reference markets used by tests, examples and the CLI.

use crate::filtered_space::FilteredSpace;
use crate::market::MarketModel;

/// Recombining-free product tree: every node branches with `branch_probs`.
/// Scenario `w` encodes its branch path in base `k`, most significant first.
pub fn product_space(branch_probs: &[f64], periods: usize, labels: &[&str]) -> FilteredSpace {
    let k = branch_probs.len();
    let n = k.pow(periods as u32);
    let mut prob = vec![1.0; n];
    let mut names = vec![String::new(); n];
    for w in 0..n {
        let mut rest = w;
        let mut digits = vec![0; periods];
        for d in digits.iter_mut().rev() {
            *d = rest % k;
            rest /= k;
        }
        for &d in &digits {
            prob[w] *= branch_probs[d];
            names[w].push_str(labels[d]);
        }
    }
    let partitions = (0..=periods)
        .map(|t| {
            let block = k.pow((periods - t) as u32);
            (0..n / block)
                .map(|c| (c * block..(c + 1) * block).collect())
                .collect()
        })
        .collect();
    FilteredSpace::new(names, prob, partitions).expect("product tree is a valid space")
}

pub fn one_period_space(prob: &[f64]) -> FilteredSpace {
    let labels: Vec<String> = (0..prob.len()).map(|i| format!("w{i}")).collect();
    FilteredSpace::new(
        labels,
        prob.to_vec(),
        vec![vec![(0..prob.len()).collect()], (0..prob.len()).map(|i| vec![i]).collect()],
    )
    .expect("one-period space")
}

/// Product tree with the same increments `dm` on every node and drift
/// `lam[t - 1][c]` on cell `c` of `partitions[t - 1]`.
pub fn product_market(
    branch_probs: &[f64],
    dm: &[f64],
    lam: &[Vec<f64>],
    labels: &[&str],
) -> MarketModel {
    let periods = lam.len();
    let space = product_space(branch_probs, periods, labels);
    let dm_cells: Vec<Vec<f64>> = (1..=periods)
        .map(|t| (0..space.n_cells(t)).map(|c| dm[c % dm.len()]).collect())
        .collect();
    MarketModel::from_cells(space, &dm_cells, lam).expect("fixture market")
}

/// One period, `p = (1/2, 1/2)`, `dM = (0.1, -0.1)`, no drift.
pub fn fix_a() -> MarketModel {
    product_market(&[0.5, 0.5], &[0.1, -0.1], &[vec![0.0]], &["u", "d"])
}

/// As [`fix_a`] with `lam = 1`, so `S_1 = (1.11, 0.91)` and `Z_1 = (0.9, 1.1)`.
pub fn fix_b() -> MarketModel {
    product_market(&[0.5, 0.5], &[0.1, -0.1], &[vec![1.0]], &["u", "d"])
}

/// Two periods of [`fix_b`] dynamics.
pub fn fix_b_two_period() -> MarketModel {
    product_market(
        &[0.5, 0.5],
        &[0.1, -0.1],
        &[vec![1.0], vec![1.0, 1.0]],
        &["u", "d"],
    )
}

/// One-period trinomial, `dS = (0.1, 0, -0.1)`, uniform weights, no drift.
pub fn fix_c() -> MarketModel {
    let third = 1.0 / 3.0;
    product_market(
        &[third, third, third],
        &[0.1, 0.0, -0.1],
        &[vec![0.0]],
        &["u", "m", "d"],
    )
}

/// Two-period trinomial with node-dependent drift (an incomplete market).
pub fn trinomial_two_period() -> MarketModel {
    let third = 1.0 / 3.0;
    product_market(
        &[third, third, third],
        &[0.1, 0.0, -0.1],
        &[vec![2.0], vec![2.0, 0.0, -1.0]],
        &["u", "m", "d"],
    )
}

/// One period with `dS = (0.1, 0.2)`: a riskless profit.
pub fn arbitrage() -> MarketModel {
    // dM = (-0.05, 0.05) has mean zero; the drift shifts both increments up.
    let space = one_period_space(&[0.5, 0.5]);
    let qv = 0.05 * 0.05;
    let lam = 0.15 / qv;
    MarketModel::from_cells(space, &[vec![-0.05, 0.05]], &[vec![lam]]).expect("arbitrage market")
}

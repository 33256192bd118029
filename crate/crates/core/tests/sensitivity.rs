use misspec::klsolver::solve;
use misspec::scenario::{random_scenario, Mode, Scenario};
use misspec::sweep::{fd_step, run_sweep, Output, Parameter, SweepSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn delta_sweep(base: Scenario, i: usize, at: f64, outputs: Vec<Output>) -> Vec<f64> {
    let spec = SweepSpec {
        base,
        parameter: Parameter::DeltaI,
        index: i,
        component: 0,
        grid: vec![at],
        outputs,
        portfolio: None,
    };
    run_sweep(&spec).unwrap().rows.remove(0)
}

/// `δΔ̄` for one misspecified source out of two, all precisions 1.
fn two_source(delta1: f64) -> Scenario {
    let mut s = Scenario::baseline(&[1.0, 1.0], &[0], &[delta1]);
    s.learn_covariance = true;
    s.validate().unwrap()
}

fn scaled_metric_slope(delta1: f64) -> f64 {
    let s = two_source(delta1);
    let h = fd_step(delta1);
    let value = |d: f64| {
        let mut t = s.clone();
        t.perceived_bias[0] = d;
        let sol = solve(&t).unwrap();
        sol.delta_factor.unwrap() * sol.delta.metric_scalar()
    };
    (value(delta1 + h) - value(delta1 - h)) / (2.0 * h)
}

/// Closed form of the slope above: `δΔ̄ = (Δ₁/2) / (1 + Δ₁²/2)`.
fn scaled_metric_slope_exact(d: f64) -> f64 {
    0.5 * (1.0 - d * d / 2.0) / (1.0 + d * d / 2.0).powi(2)
}

#[test]
fn scaled_metric_slope_changes_sign_on_a_grid() {
    let grid: Vec<f64> = (1..=16).map(|i| i as f64 * 0.25).collect();
    let slopes: Vec<f64> = grid.iter().map(|&d| scaled_metric_slope(d)).collect();
    assert!(slopes.iter().any(|&s| s > 1e-3));
    assert!(slopes.iter().any(|&s| s < -1e-3));
}

#[test]
fn scaled_metric_slope_frozen_fixtures() {
    let up = scaled_metric_slope(0.5);
    let down = scaled_metric_slope(3.0);
    assert!(up > 0.0 && down < 0.0, "{up} {down}");
    assert!((up - scaled_metric_slope_exact(0.5)).abs() < 1e-6);
    assert!((down - scaled_metric_slope_exact(3.0)).abs() < 1e-6);
}

#[test]
fn delta_factor_fixture_matches_closed_form() {
    for d in [0.5, 1.0, 3.0] {
        let sol = solve(&two_source(d)).unwrap();
        let f = sol.delta_factor.unwrap();
        assert!((f - 1.0 / (1.0 + d * d / 2.0)).abs() < 1e-14);
        assert!((sol.delta.metric_scalar() - d / 2.0).abs() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_slope_is_source_weight(seed in any::<u64>()) {
        let s = random_scenario(Mode::Baseline, &mut ChaCha8Rng::seed_from_u64(seed));
        let nu = s.precisions();
        let total: f64 = s.misspecified.iter().map(|&i| nu[i]).sum();
        for (p, &i) in s.misspecified.iter().enumerate() {
            let at = s.perceived_bias[p] - s.true_bias[i];
            let row = delta_sweep(s.clone(), i, at, vec![Output::Metric]);
            let gamma = nu[i] / (1.0 + total);
            prop_assert!((row[2] - gamma).abs() < 1e-6 * gamma, "{} vs {}", row[2], gamma);
        }
    }
}

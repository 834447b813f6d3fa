use cbm_core::numerics::RandomSource;
use cbm_core::theory::{
    monte_carlo_risks, optimal_risk, risk_independent, risk_standard, LinearSetting, MonteCarloConfig,
    RiskEstimator,
};

fn setting(d: usize, k: usize, sx: f64, sc: f64, sy: f64, seed: u64) -> LinearSetting {
    LinearSetting::random(d, k, sx, sc, sy, &mut RandomSource::new(seed)).unwrap()
}

fn run(s: &LinearSetting, n1: usize, n2: usize, n_std: usize, trials: usize, estimator: RiskEstimator) -> cbm_core::theory::MonteCarloReport {
    monte_carlo_risks(
        s,
        &MonteCarloConfig {
            n1,
            n2,
            n_std,
            trials,
            seed: 17,
            estimator,
        },
    )
    .unwrap()
}

#[test]
fn standard_and_independent_risks_match_closed_forms() {
    let s = setting(10, 2, 1.0, 0.5, 1.0, 1);
    for estimator in [RiskEstimator::Exact, RiskEstimator::HoldOut { n_eval: 200 }] {
        let r = run(&s, 100, 100, 100, 2000, estimator);
        assert!(r.failed_trials.is_empty());
        let std_z = r.standard.z_score(risk_standard(&s, 100).unwrap());
        let ind_z = r.independent.z_score(risk_independent(&s, 100, 100).unwrap());
        assert!(std_z < 3.0, "{estimator:?}: standard z = {std_z}");
        assert!(ind_z < 3.0, "{estimator:?}: independent z = {ind_z}");
    }
}

#[test]
fn true_coefficient_predictor_attains_optimal_risk() {
    let s = setting(10, 2, 1.0, 0.5, 1.0, 2);
    let r = run(&s, 100, 100, 100, 2000, RiskEstimator::HoldOut { n_eval: 100 });
    assert!(r.optimal.z_score(optimal_risk(&s)) < 3.0);
}

#[test]
fn exact_and_holdout_estimators_agree() {
    let s = setting(6, 2, 1.0, 0.7, 0.4, 3);
    let exact = run(&s, 30, 20, 30, 3000, RiskEstimator::Exact);
    let held = run(&s, 30, 20, 30, 3000, RiskEstimator::HoldOut { n_eval: 600 });
    for (a, b) in [(exact.standard, held.standard), (exact.independent, held.independent)] {
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() < 3.0 * se, "{a:?} vs {b:?}");
    }
}

/// At small sample sizes the cross term of the independent risk is large
/// enough that dropping its factor `k` is detectable.
#[test]
fn cross_term_carries_factor_k() {
    let s = LinearSetting::new(
        1.0,
        1.0,
        1.0,
        cbm_core::numerics::random_orthonormal_columns(5, 4, &mut RandomSource::new(4)).unwrap(),
        vec![0.5; 4],
    )
    .unwrap();
    let closed = risk_independent(&s, 10, 8).unwrap();
    assert!((closed - 4.75).abs() < 1e-12);
    let without_k = closed - 3.0 * (0.5 / 3.0) * (5.0 / 4.0);
    assert!((without_k - 4.125).abs() < 1e-12);

    let r = run(&s, 10, 8, 10, 40_000, RiskEstimator::Exact);
    assert!(r.independent.z_score(closed) < 3.0, "{:?} vs {closed}", r.independent);
    assert!(r.independent.z_score(without_k) > 6.0, "{:?} vs {without_k}", r.independent);
}

#[test]
fn standard_errors_shrink_with_trials() {
    let s = setting(8, 2, 1.0, 0.5, 1.0, 5);
    let small = run(&s, 40, 40, 40, 100, RiskEstimator::HoldOut { n_eval: 80 });
    let large = run(&s, 40, 40, 40, 400, RiskEstimator::HoldOut { n_eval: 80 });
    for (a, b) in [(small.standard, large.standard), (small.independent, large.independent)] {
        let ratio = a.std_error / b.std_error;
        // 1/√trials predicts 2; allow for the noise in the SE estimates.
        assert!((1.5..2.7).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn monte_carlo_is_deterministic() {
    let s = setting(5, 2, 1.0, 0.5, 1.0, 6);
    let a = run(&s, 20, 20, 20, 200, RiskEstimator::Exact);
    let b = run(&s, 20, 20, 20, 200, RiskEstimator::Exact);
    assert_eq!(a, b);
}

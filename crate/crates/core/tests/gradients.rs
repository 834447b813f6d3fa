use cbm_core::training::random_gradient_checks;

#[test]
fn analytic_gradients_match_central_differences() {
    let checks = random_gradient_checks(45, 2024).unwrap();
    assert_eq!(checks.len(), 45);
    for c in &checks {
        assert!(c.relative_error < 1e-5, "{} rel err {:e}", c.case, c.relative_error);
    }
    for shape in ["concepts/", "target/", "joint/raw", "joint/logits", "joint/probabilities", "multitask/"] {
        assert!(checks.iter().filter(|c| c.case.starts_with(shape)).count() >= 5, "{shape}");
    }
}

#[test]
fn gradient_checks_are_reproducible() {
    assert_eq!(random_gradient_checks(9, 5).unwrap(), random_gradient_checks(9, 5).unwrap());
}

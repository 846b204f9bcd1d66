//! Reverse-mode gradients checked against central finite differences.

#[path = "support/gradcheck.rs"]
mod gradcheck;

#[test]
fn primitive_ops_match_finite_differences() {
    gradcheck::check_primitive_ops();
}

#[test]
fn total_loss_gradient_matches_finite_differences_for_every_parameter() {
    gradcheck::check_total_loss_gradients();
}

//! Analytic gradients vs. 64-bit central finite differences (h = 1e-3).

mod common;

use common::{full_loss_grad_checks, op_cases, op_error, GRAD_TOL};

#[test]
fn every_graph_op_matches_finite_differences() {
    for c in op_cases() {
        let err = op_error(&c);
        assert!(err < GRAD_TOL, "{}: relative error {err:e}", c.name);
    }
}

#[test]
fn op_cases_cover_each_differentiable_op() {
    let names: Vec<&str> = op_cases().iter().map(|c| c.name).collect();
    for op in ["matmul", "softmax rows", "masked softmax", "layer_norm", "gelu", "cross_entropy", "mse"] {
        assert!(names.contains(&op), "missing {op}");
    }
}

#[test]
fn full_masked_reconstruction_loss_matches_finite_differences() {
    let checks = full_loss_grad_checks();
    for c in &checks {
        assert!(
            c.ok(),
            "{}: analytic {:e} numeric {:e} error {:e}",
            c.name,
            c.analytic_norm,
            c.numeric_norm,
            c.relative_error
        );
    }
    assert!(checks.iter().filter(|c| !c.expected_zero()).count() > 10);
}

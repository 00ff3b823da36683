//! Finite-difference checks of every differentiable operation and of the
//! whole model, in f64.

mod common;

use common::{gradient_suite, tiny_model_grad_error};
use inn_core::CommunicationMode;

const TOL: f64 = 1e-3;

#[test]
fn every_operation_matches_central_differences() {
    let results = gradient_suite();
    let failures: Vec<String> = results
        .iter()
        .filter(|r| r.max_rel_err.is_nan() || r.max_rel_err >= TOL)
        .map(|r| format!("{}: {:.3e}", r.op, r.max_rel_err))
        .collect();
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn tiny_model_end_to_end() {
    for mode in [CommunicationMode::Learned, CommunicationMode::Static, CommunicationMode::None] {
        let err = tiny_model_grad_error(mode);
        assert!(err < TOL, "{mode}: max relative error {err:.3e}");
    }
}

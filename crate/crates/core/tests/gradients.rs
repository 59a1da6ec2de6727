mod common;

use common::gradcheck::{check_op, end_to_end_rel_err, op_cases};

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_cases() {
        let err = check_op(&case);
        if !(err < 1e-4) {
            failures.push(format!("{}: {err:e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn image_to_loss_matches_finite_differences() {
    for seed in [1, 2] {
        let err = end_to_end_rel_err(seed);
        assert!(err < 1e-3, "seed {seed}: {err:e}");
    }
}

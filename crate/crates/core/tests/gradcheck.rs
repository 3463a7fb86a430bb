mod common;

use common::gradcheck::{all, TOL, TRIALS};

#[test]
fn every_op_matches_finite_differences() {
    for (name, worst) in all() {
        eprintln!("{name}: worst relative error {worst:.2e} over {TRIALS} trials");
        assert!(worst < TOL, "{name}: relative error {worst:e}");
    }
}

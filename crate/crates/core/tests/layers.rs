//! Numeric layers against dense loop-based references.

mod common;

use common::checks::*;

const TOL: f64 = 1e-5;
const CASES: usize = 50;

#[test]
fn gat_layer_matches_dense_reference() {
    assert!(gat_error(101, CASES) < TOL);
}

#[test]
fn gru_matches_dense_reference() {
    assert!(gru_error(102, CASES) < TOL);
}

#[test]
fn bilinear_scores_match_reference() {
    assert!(bilinear_error(103, CASES) < TOL);
}

#[test]
fn memory_read_matches_reference() {
    assert!(memory_read_error(104, CASES) < TOL);
}

#[test]
fn prediction_head_matches_reference() {
    assert!(prediction_head_error(105, CASES) < TOL);
}

#[test]
fn encoder_recurrence_matches_reference() {
    assert!(encoder_error(106, CASES) < TOL);
}

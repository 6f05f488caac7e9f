mod common;

use common::*;

#[test]
fn every_layer_matches_finite_differences() {
    for (layer, err) in layer_gradient_errors(11) {
        assert!(err <= LAYER_TOL, "{layer}: worst relative error {err:e}");
    }
}

#[test]
fn residual_blocks_match_finite_differences() {
    let (err, skipped, checked) = block_gradient_error(12);
    assert!(err <= LAYER_TOL, "worst relative error {err:e}");
    // kinks are rare; a large skip count would hide real errors
    assert!(skipped * 20 < checked, "{skipped} of {checked} skipped");
}

#[test]
fn one_block_networks_match_finite_differences() {
    let (err, _) = end_to_end_gradient_error(13);
    assert!(err <= MODEL_TOL, "worst relative error {err:e}");
}

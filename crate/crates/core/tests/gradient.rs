mod common;

use common::gradcheck::{gradient_errors, tiny};
use phendiff::denoiser::DenoiserConfig;

fn check(config: DenoiserConfig, seed: u64) {
    for g in gradient_errors(config, seed) {
        assert!(
            g.relative < 1e-3,
            "{}: analytic {:?} numeric {:?} (relative error {:.2e})",
            g.name,
            g.analytic,
            g.numeric,
            g.relative
        );
    }
}

#[test]
fn single_level_without_attention() {
    check(tiny(false, 1), 1);
}

#[test]
fn single_level_with_attention() {
    check(tiny(true, 1), 2);
}

#[test]
fn two_levels_with_skip_connections() {
    check(tiny(false, 2), 3);
}

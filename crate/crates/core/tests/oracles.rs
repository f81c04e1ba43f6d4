mod common;

use common::checks::{fe_check, fwl_check, tsls_check, wls_check};

const TOL: f64 = 1e-10;
const INSTANCES: u64 = 60;

fn run(name: &str, check: fn(u64) -> f64) {
    for seed in 0..INSTANCES {
        let gap = check(seed);
        assert!(gap <= TOL, "{name} instance {seed}: relative gap {gap:e}");
    }
}

#[test]
fn wls_matches_normal_equations() {
    run("wls", wls_check);
}

#[test]
fn tsls_matches_covariance_ratio() {
    run("2sls", tsls_check);
}

#[test]
fn residualized_regression_matches_joint_regression() {
    run("fwl", fwl_check);
}

#[test]
fn absorbed_effects_match_dummy_expansion() {
    run("fe", fe_check);
}

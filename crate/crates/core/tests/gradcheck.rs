mod common;

use common::gradcheck::{check, check_many, random_instance};

#[test]
fn backward_matches_central_differences() {
    let report = check_many(1000, 60);
    assert!(
        report.failures.is_empty(),
        "{:#?}",
        &report.failures[..report.failures.len().min(10)]
    );
    assert!(
        report.checked > 10 * report.skipped,
        "{} checked, {} skipped",
        report.checked,
        report.skipped
    );
}

#[test]
fn dense_routing_gives_the_gate_a_gradient() {
    // K = M routes densely, so the gate receives a nonzero gradient that must also match
    let mut seed = 0;
    let inst = loop {
        let inst = random_instance(seed);
        if inst.params.config.top_k >= 2 && inst.mask.is_none() {
            break inst;
        }
        seed += 1;
    };
    let report = check(&inst);
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert!(report.checked > 0);
}

use scatter_nn::gradcheck::{worst_over_seeds, CASES, TOL};

#[test]
fn every_op_and_the_frru_pass_over_ten_seeds() {
    let mut failures = Vec::new();
    for (name, case) in CASES {
        let (err, seed) = worst_over_seeds(case, 10);
        if !(err < TOL) {
            failures.push(format!("{name}: seed {seed} error {err:.3e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

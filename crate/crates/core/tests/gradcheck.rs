use transpose_core::gradcheck::run_suite;

#[test]
fn every_operation_matches_central_differences() {
    let results = run_suite(10, None).unwrap();
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<30} max rel err {:.2e} (< {:.0e})", r.name, r.max_rel_error, r.tolerance);
        if !r.passed {
            failed.push(r.name);
        }
    }
    assert!(failed.is_empty(), "gradient mismatch in {failed:?}");
}

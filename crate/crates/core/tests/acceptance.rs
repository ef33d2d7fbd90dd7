use tpshock_core::acceptance::run_all;

#[test]
fn acceptance_criteria() {
    let outcomes = run_all(|o| println!("{o}"));
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert_eq!(outcomes.len(), 11);
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}

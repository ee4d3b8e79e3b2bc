use shadowsim::report::{required_entries, run_entries, Tally};

#[test]
fn shipped_corpus_passes() {
    let results = run_entries(&required_entries()).unwrap();
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn tally_separates_false_positives() {
    let tally = Tally::of(&run_entries(&required_entries()).unwrap());
    assert!(tally.all_passed());
    assert_eq!(tally.false_positives, 1);
    assert!(tally.kernel_true >= 3);
    assert!(tally.application_true >= 5);
}

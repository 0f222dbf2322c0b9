use expstab::acceptance::{Suite, CRITERIA};

#[test]
fn acceptance_criteria() {
    let suite = Suite::new();
    let mut results = Vec::new();
    for id in CRITERIA {
        let r = suite.criterion(id).expect("criterion exists");
        println!("{r}");
        results.push(r);
    }
    println!("acceptance summary:");
    for r in &results {
        println!("  {}", r.line());
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.to_string()).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}

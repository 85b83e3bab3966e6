//! Full acceptance gate: all eleven criteria, run in order, one verdict
//! line each. Expected wall time is ten to fifteen minutes, dominated by
//! the chaos and scaling criteria; run it alone with
//! `cargo test --test acceptance -- --nocapture`.

use push0::harness::verify::{verify_with, VerifyOptions};

#[test]
fn acceptance() {
    let opts = VerifyOptions {
        seed: 7,
        out_dir: Some(std::env::temp_dir().join("push0-acceptance")),
        only: None,
    };
    let mut lines = Vec::new();
    let outcome = verify_with(&opts, |c| {
        let line = c.format_line();
        println!("{line}");
        lines.push(line);
    });
    println!("---");
    for line in &lines {
        println!("{line}");
    }
    assert_eq!(outcome.criteria.len(), 11);
    assert!(
        outcome.passed(),
        "acceptance criteria failed:\n{}",
        lines.join("\n"),
    );
}

//! Runs the ten acceptance criteria in order and prints one PASS/FAIL line
//! each. Criterion ids given on the command line restrict the run, e.g.
//! `cargo test --test acceptance -- 1 9`.

use koopman_deviation::config::RunConfig;
use koopman_deviation::verify::{Verifier, CRITERIA};

fn main() {
    let wanted: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let verifier = Verifier::new(RunConfig::default(), 0, None);
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let outcome = verifier.run(c.id);
        println!("{}", outcome.line());
        if !outcome.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

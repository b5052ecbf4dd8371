//! One PASS/FAIL line per numbered criterion, then the individual checks of
//! any criterion that failed. Exits non-zero when any criterion fails.
//!
//! Set `GOATLAB_SEED` to rerun the statistical criteria under another seed.

use std::process::ExitCode;

use goat_core::verify::DEFAULT_SEED;
use goatlab_acceptance::acceptance_report;

fn main() -> ExitCode {
    let seed = std::env::var("GOATLAB_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED);
    let (lines, passed) = acceptance_report(seed);
    for line in lines {
        println!("{line}");
    }
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

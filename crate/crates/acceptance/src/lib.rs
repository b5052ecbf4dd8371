//! Runs every numbered criterion and renders the acceptance report.

use goat_core::verify::{run_criterion, CRITERIA};

/// Report lines and whether every criterion passed.
pub fn acceptance_report(seed: u64) -> (Vec<String>, bool) {
    let mut lines = vec![format!("acceptance criteria (seed {seed})")];
    let mut details = Vec::new();
    let mut passing = 0;
    for (id, title) in CRITERIA {
        match run_criterion(id, seed) {
            Ok(report) => {
                lines.push(report.summary());
                if report.passed() {
                    passing += 1;
                } else {
                    details.push(format!("\ncriterion {id} ({title}):"));
                    details.extend(report.checks.iter().map(|c| format!("  {c}")));
                }
            }
            Err(err) => lines.push(format!("FAIL criterion {id:>2} ({title}): error {err}")),
        }
    }
    lines.extend(details);
    lines.push(format!("\n{passing}/{} criteria passed", CRITERIA.len()));
    (lines, passing == CRITERIA.len())
}

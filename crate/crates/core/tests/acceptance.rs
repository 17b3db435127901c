//! Runs the full acceptance battery and prints one line per criterion.
//! Pass a criterion number to run just that one.

use std::process::ExitCode;

use hedgefilter::checks::{run_all, run_check, Scale};

fn main() -> ExitCode {
    let scale = Scale::full();
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let outcomes =
        if only.is_empty() { run_all(&scale) } else { only.iter().filter_map(|&id| run_check(id, &scale)).collect() };
    for outcome in &outcomes {
        println!("{outcome}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Compares analytic and finite-difference gradients of every loss term through a tiny
//! network in 64-bit precision.
//!
//! Usage: `cargo run --release --example gradient_check`

use fico::losses::gradcheck::{gradcheck_all, GradcheckOptions, GradcheckReport};

pub fn run_example() -> fico::Result<Vec<GradcheckReport>> {
    let reports = gradcheck_all(0, &GradcheckOptions::default())?;
    for r in &reports {
        println!(
            "{:<8} {:>5} entries, {:>2} at kinks, max relative error {:.2e}, {:.1} s, {}",
            r.label,
            r.entries,
            r.unresolved,
            r.max_rel_error,
            r.seconds,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(reports)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

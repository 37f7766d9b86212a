//! Analytic gradients of every layer and of the composed network against
//! central differences, in 64-bit arithmetic.

use sdd_tta::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> sdd_tta::Result<()> {
    let cfg = GradcheckConfig::default();
    let report = run_gradcheck(&cfg)?;
    for c in &report.checks {
        println!(
            "{:<24} checked {:>6}  skipped {:>4}  max rel err {:.2e}",
            c.name, c.n_checked, c.n_skipped, c.max_rel_err
        );
    }
    println!(
        "{} at h = {:.0e}, tolerance {:.0e}",
        if report.passed { "passed" } else { "FAILED" },
        cfg.h,
        cfg.tolerance
    );
    Ok(())
}

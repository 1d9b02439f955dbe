//! Finite-difference check of every op, the encoder, each head and each loss.

use mtdnn::gradsuite::{run_suite, SuiteConfig};

fn main() -> mtdnn::Result<()> {
    let tol = 1e-4;
    for r in run_suite(&SuiteConfig::default())? {
        println!("{:<22} {:>6} coordinates  max error {:.2e}  {}", r.name, r.checked, r.max_rel_error, if r.passed(tol) { "ok" } else { "FAILED" });
    }
    Ok(())
}

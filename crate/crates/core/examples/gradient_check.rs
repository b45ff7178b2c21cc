//! Finite-difference checks of every learned block, plus a deliberately
//! broken backward pass to show what a failure looks like.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use cdiffdet::detector::{gradcheck_block, BLOCKS};
use cdiffdet::tensor::gradcheck::GradCheckOptions;

fn main() -> cdiffdet::Result<()> {
    let opts = GradCheckOptions::default();
    for &name in BLOCKS {
        let r = gradcheck_block(name, 0, &opts)?;
        let status = if r.passes(1e-4) { "pass" } else { "FAIL" };
        println!(
            "{name:>13}: {:6} coordinates, max rel err {:.2e}  {status}",
            r.coords, r.max_rel_err
        );
    }
    let broken = GradCheckOptions {
        corrupt_scale: 1.01,
        ..opts
    };
    let r = gradcheck_block("caf", 0, &broken)?;
    println!(
        "caf with gradients scaled by 1.01: max rel err {:.2e}",
        r.max_rel_err
    );
    Ok(())
}

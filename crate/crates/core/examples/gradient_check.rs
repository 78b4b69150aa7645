//! Compares every analytic gradient with central finite differences on a
//! handful of seeded random instances, the same check `capl gradcheck` runs.
//!
//! cargo run --release --example gradient_check

use capl_kit::gradcheck::MAX_REL_ERROR;
use capl_kit::verify::{run_suite, Fault, LossKind};

fn main() -> capl_kit::Result<()> {
    let rows = run_suite(&LossKind::ALL, 3, None, 0)?;
    for r in &rows {
        println!("{:<4} worst relative error {:.2e} (limit {MAX_REL_ERROR:.0e})", r.loss.as_str(), r.worst);
    }
    // A flipped Dice gradient must be caught.
    let broken = run_suite(&[LossKind::Dice], 1, Some(Fault::DiceSign), 1)?;
    println!("dice with a sign bug: worst {:.2e}, pass = {}", broken[0].worst, broken[0].pass);
    Ok(())
}

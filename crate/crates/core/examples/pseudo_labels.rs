//! Turns instance predictions into nucleus prototypes and evaluates the
//! prototype loss for a perfect and a perturbed HV prediction.
//!
//! cargo run --example pseudo_labels

use capl_kit::pseudo_label::{build_pseudo_labels, prototype_loss, PSEUDO_MIN_PX};
use capl_kit::synth::{generate_sample, DomainSpec};

fn main() -> capl_kit::Result<()> {
    let s = generate_sample(&DomainSpec::target(), 64, 5)?;
    let pl = build_pseudo_labels(&s.hv_gt, &s.instances)?.discard_small(PSEUDO_MIN_PX).with_id("tile");
    println!("{} prototypes", pl.prototypes.len());
    for p in pl.prototypes.iter().take(4) {
        println!(
            "  nucleus {}: {} px, mean hv ({:+.3}, {:+.3})",
            p.instance_id,
            p.len(),
            p.prototype_vec[0],
            p.prototype_vec[1]
        );
    }
    println!("L_p with the target itself: {:.6}", prototype_loss(&s.hv_gt, &pl)?.value);
    let shifted = s.hv_gt.map(|v| 0.8 * v + 0.1);
    let l = prototype_loss(&shifted, &pl)?;
    let support = l.grad.data().iter().filter(|&&g| g != 0.0).count();
    println!("L_p with a shifted prediction: {:.6}, gradient on {support} px", l.value);
    Ok(())
}

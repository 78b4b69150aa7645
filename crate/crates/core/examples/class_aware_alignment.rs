//! Class masks from an NC prediction, masked prototype features and the
//! weighted per-class adversarial loss. Classes with no predicted pixel are
//! skipped and receive no gradient.
//!
//! cargo run --example class_aware_alignment

use capl_kit::domain_adapt::{
    class_aware_adv_loss, class_mask_from_prediction, prototype_features, Discriminator, DomainLabel, LearnableWeights,
    DISC_HIDDEN,
};
use capl_kit::model::{TinyHoverNet, BRANCH_FEATURES};
use capl_kit::params::Parameterized;
use capl_kit::synth::{generate_sample, DomainSpec};
use capl_kit::{SeedStream, NUM_CLASSES};

fn main() -> capl_kit::Result<()> {
    let mut rng = SeedStream::new(3).rng();
    let net = TinyHoverNet::new(&mut rng);
    let discs: Vec<_> = (0..NUM_CLASSES)
        .map(|_| Discriminator::new(BRANCH_FEATURES, DISC_HIDDEN, &mut rng))
        .collect();
    let weights = LearnableWeights::from_weights(&[2.0, 1.0, 1.0, 0.5, 1.0, 1.0]);

    let s = generate_sample(&DomainSpec::target(), 32, 11)?;
    let out = net.forward(&s.image)?;
    let masks = class_mask_from_prediction(&out.nc)?;
    let protos = masks
        .iter()
        .map(|m| prototype_features(&out.f_nc, m))
        .collect::<capl_kit::Result<Vec<_>>>()?;
    let loss = class_aware_adv_loss(&protos, &discs, &weights, DomainLabel::Target)?;

    println!("total weighted loss {:.4}", loss.value);
    for (k, m) in masks.iter().enumerate() {
        let grad_norm: f64 = loss.grad_discs[k]
            .named()
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        match loss.per_class[k] {
            Some(l) => println!(
                "class {}: {:>4} px, w = {:.2}, loss {l:.4}, |grad D| {grad_norm:.2e}",
                m.class_id,
                m.pixel_count(),
                weights.weight(m.class_id)
            ),
            None => println!("class {}: empty, skipped, |grad D| {grad_norm:.1}", m.class_id),
        }
    }
    Ok(())
}

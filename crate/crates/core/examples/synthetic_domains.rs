//! Generates a few source and target tiles and prints what differs between
//! the domains: mean colour, nucleus count and size, and class mix.
//!
//! cargo run --example synthetic_domains

use capl_kit::synth::{generate_sample, DomainSpec};
use capl_kit::{NucleusClass, NUM_CLASSES};

fn main() -> capl_kit::Result<()> {
    for spec in [DomainSpec::source(), DomainSpec::target()] {
        let mut rgb = [0.0; 3];
        let mut nuclei = 0;
        let mut fg = 0.0;
        let mut per_class = [0usize; NUM_CLASSES];
        let n = 16;
        for seed in 0..n {
            let s = generate_sample(&spec, 64, seed)?;
            let plane = 64 * 64;
            for (c, m) in rgb.iter_mut().enumerate() {
                *m += s.image.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
            }
            let classes = s.instance_classes();
            nuclei += classes.len();
            fg += s.instances.foreground().data().iter().sum::<f64>();
            for c in classes.values() {
                per_class[*c as usize - 1] += 1;
            }
        }
        println!("{} domain, {n} tiles of 64x64", spec.name.as_str());
        println!(
            "  mean rgb {:.3} {:.3} {:.3}",
            rgb[0] / n as f64,
            rgb[1] / n as f64,
            rgb[2] / n as f64
        );
        println!("  {:.1} nuclei per tile, {:.1} px each", nuclei as f64 / n as f64, fg / nuclei.max(1) as f64);
        for (k, count) in per_class.iter().enumerate() {
            let class = NucleusClass::from_id(k as u32 + 1).expect("class id");
            println!("  {:<12} {count:>4}  (prior {:.3})", class.name(), spec.class_priors[k]);
        }
    }
    Ok(())
}

//! Scores a deliberately damaged prediction against ground truth: one
//! nucleus removed and one relabelled with the wrong class.
//!
//! cargo run --example metrics_tour

use capl_kit::inference::ground_truth;
use capl_kit::metrics::{evaluate_image, format_table, MetricReport, DEFAULT_MATCH_RADIUS};
use capl_kit::synth::{generate_sample, DomainSpec};
use capl_kit::InstanceLabelMap;

fn main() -> capl_kit::Result<()> {
    let s = generate_sample(&DomainSpec::target(), 64, 7)?;
    let gt = ground_truth(&s);
    let mut pred = gt.clone();

    let dropped = pred.classes.remove(0).0;
    let labels = pred.instances.labels().iter().map(|&l| if l == dropped { 0 } else { l }).collect();
    pred.instances = InstanceLabelMap::new(s.instances.height(), s.instances.width(), labels)?;
    if let Some(first) = pred.classes.first_mut() {
        first.1 = first.1 % 6 + 1;
    }

    let perfect = evaluate_image(&gt, &gt, DEFAULT_MATCH_RADIUS)?;
    let damaged = evaluate_image(&gt, &pred, DEFAULT_MATCH_RADIUS)?;
    let rows = vec![
        ("perfect".to_string(), MetricReport::from_images(&[perfect])),
        ("damaged".to_string(), MetricReport::from_images(&[damaged])),
    ];
    print!("{}", format_table(&rows));
    Ok(())
}

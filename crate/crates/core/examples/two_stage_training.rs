//! A small run of both training stages on 16 tiles per domain,
//! followed by evaluation on held-out target tiles.
//!
//! cargo run --release --example two_stage_training

use capl_kit::dataset;
use capl_kit::inference::{evaluate_dataset, pseudo_label_all, PseudoTarget};
use capl_kit::metrics::{format_table, DEFAULT_MATCH_RADIUS};
use capl_kit::postprocess::PostprocessConfig;
use capl_kit::synth::DomainSpec;
use capl_kit::trainer::{train_stage1, train_stage2, AlignMode, PseudoSample, TrainConfig};

fn main() -> capl_kit::Result<()> {
    let seed = 9;
    let source = dataset::generate(&DomainSpec::source(), "train", 16, 64, seed)?;
    let target = dataset::generate(&DomainSpec::target(), "train", 16, 64, seed)?;
    let test = dataset::generate(&DomainSpec::target(), "test", 8, 64, seed)?;
    let target_images: Vec<_> = target.samples.iter().map(|s| s.image.clone()).collect();

    let cfg = TrainConfig {
        seed,
        warm_epochs: 2,
        epochs: 16,
        stage2_epochs: 6,
        batch_size: 1,
        lr_decay_at: 0.75,
        align: AlignMode::ClassAware,
        ..TrainConfig::default()
    };
    let pp = PostprocessConfig::default();
    let s1 = train_stage1(&source.samples, &target_images, &cfg, 0)?;
    for h in &s1.history {
        println!("stage 1 epoch {:>2}: L_F {:.4}  L_dis {:.4}", h.epoch, h.l_f.unwrap_or(0.0), h.l_dis.unwrap_or(0.0));
    }
    println!("class weights {:?}", s1.model.weights.weights());

    let sets = pseudo_label_all(&s1.model.net, target.ids(), &target_images, &pp, PseudoTarget::Prediction, 0)?;
    let samples: Vec<_> = sets
        .into_iter()
        .zip(&target_images)
        .map(|(labels, image)| PseudoSample { image: image.clone(), labels })
        .collect();
    let s2 = train_stage2(&s1, &samples, &cfg, 0)?;
    for h in &s2.history {
        println!("stage 2 epoch {:>2}: L_p {:.5}", h.epoch, h.l_p.unwrap_or(0.0));
    }

    let (_, _, r1) = evaluate_dataset(&s1.model.net, &test, &pp, DEFAULT_MATCH_RADIUS, 0)?;
    let (_, _, r2) = evaluate_dataset(&s2.model.net, &test, &pp, DEFAULT_MATCH_RADIUS, 0)?;
    print!("{}", format_table(&[("stage-1".into(), r1), ("stage-2".into(), r2)]));
    Ok(())
}

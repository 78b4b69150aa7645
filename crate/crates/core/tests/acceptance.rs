//! Release acceptance checks. Runs as its own harness so the verdict for
//! every criterion is printed even when all of them pass:
//!
//!     cargo test --release --test acceptance
//!
//! Criteria 6 to 8 train seven full pipelines and take the better part of
//! an hour on one core.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use capl_kit::domain_adapt::{
    adversarial_bce, class_aware_adv_loss, ClassMask, Discriminator, DomainLabel, LearnableWeights, PrototypeFeature,
    DISC_HIDDEN, WEIGHT_MAX, WEIGHT_MIN, WEIGHT_REG,
};
use capl_kit::inference::{pseudo_label_all, PseudoTarget};
use capl_kit::metrics::{aji, panoptic_quality, MetricReport};
use capl_kit::params::Parameterized;
use capl_kit::pipeline::{run_pipeline, PipelineConfig, ROW_AGNOSTIC, ROW_AWARE, ROW_SOURCE_ONLY, ROW_STAGE2};
use capl_kit::postprocess::{extract_instances, PostprocessConfig};
use capl_kit::pseudo_label::prototype_loss;
use capl_kit::synth::{hv_target_from_instances, DomainSpec};
use capl_kit::trainer::{train_stage1, train_stage2, Checkpoint, DomainModel, PseudoSample, TrainConfig};
use capl_kit::{dataset, InstanceLabelMap, SeedStream, Tensor, NUM_CLASSES};
use rand::Rng;

use common::oracles::{aji_oracle, pq_oracle, random_pair};
use common::{p, run, separated_layout, text, touching_layout};

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_checks() -> Verdict {
    let started = Instant::now();
    let out = run(&["gradcheck", "--instances", "100"]);
    let elapsed = started.elapsed();
    let log = text(&out);
    let mut failed = Vec::new();
    for loss in ["ce", "dice", "mse", "hv", "bce", "ca", "lf", "s1", "lp"] {
        let line = log.lines().find(|l| l.split_whitespace().next() == Some(loss));
        match line {
            Some(l) if l.ends_with("PASS") && l.contains("over 100 instances") => {}
            Some(l) => failed.push(l.trim().to_string()),
            None => failed.push(format!("{loss}: no result line")),
        }
    }
    ensure(failed.is_empty(), failed.join("; "))?;
    ensure(out.status.code() == Some(0), format!("capl gradcheck exited with {:?}", out.status.code()))?;
    ensure(elapsed < Duration::from_secs(120), format!("took {:.0}s", elapsed.as_secs_f64()))?;
    Ok(format!("9 losses x 100 seeds within tolerance, exit 0, {:.0}s", elapsed.as_secs_f64()))
}

fn metric_oracles() -> Verdict {
    for seed in 0..1000 {
        let (gt, pred) = random_pair(seed);
        let a = aji(&gt, &pred).map_err(|e| e.to_string())?;
        ensure((a - aji_oracle(&gt, &pred)).abs() <= 1e-12, format!("AJI differs on pair {seed}"))?;
        let pq = panoptic_quality(&gt, &pred).map_err(|e| e.to_string())?;
        let (dq, sq, pqv) = pq_oracle(&gt, &pred);
        ensure(
            (pq.dq - dq).abs() <= 1e-12 && (pq.sq - sq).abs() <= 1e-12 && (pq.pq - pqv).abs() <= 1e-12,
            format!("PQ differs on pair {seed}"),
        )?;
        ensure((pq.pq - pq.dq * pq.sq).abs() <= 1e-12, format!("pq != dq*sq on pair {seed}"))?;
    }

    // 2 GT nuclei, 3 predictions: one exact match, one match of IoU 4/6,
    // one spurious. TP 2, FP 1, FN 0.
    let gt = InstanceLabelMap::new(3, 6, vec![1, 1, 0, 0, 2, 2, 1, 1, 0, 0, 2, 2, 0, 0, 0, 0, 0, 0]).unwrap();
    let pred = InstanceLabelMap::new(3, 6, vec![1, 1, 0, 0, 2, 2, 1, 1, 0, 0, 2, 2, 0, 0, 3, 0, 2, 2]).unwrap();
    let pq = panoptic_quality(&gt, &pred).map_err(|e| e.to_string())?;
    let (dq, sq) = (2.0 / 2.5, (1.0 + 4.0 / 6.0) / 2.0);
    ensure(
        (pq.dq - dq).abs() < 1e-12 && (pq.sq - sq).abs() < 1e-12,
        format!("hand example: dq {} sq {}, expected {dq} {sq}", pq.dq, pq.sq),
    )?;
    // a single GT split in two halves: IoU 0.5 is not a match
    let gt = InstanceLabelMap::new(1, 4, vec![1, 1, 1, 1]).unwrap();
    let pred = InstanceLabelMap::new(1, 4, vec![1, 1, 2, 2]).unwrap();
    let pq = panoptic_quality(&gt, &pred).map_err(|e| e.to_string())?;
    ensure(pq.dq == 0.0 && pq.sq == 1.0 && pq.pq == 0.0, format!("half split: {pq:?}"))?;
    Ok("AJI and PQ equal enumeration on 1000 pairs, hand DQ/SQ exact, pq = dq*sq".into())
}

fn roundtrip(inst: &InstanceLabelMap) -> capl_kit::Result<f64> {
    let out = extract_instances(&inst.foreground(), &hv_target_from_instances(inst), &PostprocessConfig::default())?;
    aji(inst, &out)
}

fn postprocess_roundtrip() -> Verdict {
    let started = Instant::now();
    let (mut worst_sep, mut worst_touch) = (1.0f64, 1.0f64);
    for seed in 0..50 {
        let sep = roundtrip(&separated_layout(seed)).map_err(|e| e.to_string())?;
        let touch = roundtrip(&touching_layout(seed)).map_err(|e| e.to_string())?;
        worst_sep = worst_sep.min(sep);
        worst_touch = worst_touch.min(touch);
    }
    let elapsed = started.elapsed();
    ensure(worst_sep >= 0.95, format!("non-touching AJI {worst_sep:.4} < 0.95"))?;
    ensure(worst_touch >= 0.80, format!("touching AJI {worst_touch:.4} < 0.80"))?;
    ensure(elapsed < Duration::from_secs(60), format!("took {:.0}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "worst AJI {worst_sep:.4} separated, {worst_touch:.4} touching over 50 layouts each, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn empty_class_skip() -> Verdict {
    let (c, h, w) = (4, 5, 5);
    for case in 0..100u64 {
        let mut rng = SeedStream::new(case).named("empty-skip").rng();
        let discs: Vec<_> = (0..NUM_CLASSES).map(|_| Discriminator::new(c, DISC_HIDDEN, &mut rng)).collect();
        let weights: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.gen_range(0.1..5.0)).collect();
        let w_all = LearnableWeights::from_weights(&weights);
        let label = if rng.gen_bool(0.5) { DomainLabel::Source } else { DomainLabel::Target };
        let f = Tensor::random_normal(&[c, h, w], 1.0, &mut rng);
        let protos: Vec<PrototypeFeature> = (0..NUM_CLASSES)
            .map(|k| {
                let keep = rng.gen_bool(0.5);
                let m: Vec<f64> = (0..h * w).map(|_| if keep && rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
                let mask = ClassMask::new(k as u32 + 1, Tensor::new(vec![h, w], m).unwrap());
                capl_kit::domain_adapt::prototype_features(&f, &mask).unwrap()
            })
            .collect();
        let loss = class_aware_adv_loss(&protos, &discs, &w_all, label).map_err(|e| e.to_string())?;

        let mut expected = 0.0;
        for (k, proto) in protos.iter().enumerate() {
            let zero_disc = loss.grad_discs[k].named().iter().all(|(_, t)| t.max_abs() == 0.0);
            if proto.is_empty {
                ensure(
                    loss.per_class[k].is_none()
                        && zero_disc
                        && loss.grad_weights.s.data()[k] == 0.0
                        && loss.grad_features[k].is_none(),
                    format!("case {case}: empty class {} not skipped", k + 1),
                )?;
            } else {
                let probs = discs[k].forward(&proto.features).unwrap().probs;
                let l = adversarial_bce(&probs, label).unwrap().value;
                expected += weights[k] * l + WEIGHT_REG * weights[k].ln();
                ensure(!zero_disc, format!("case {case}: class {} got no gradient", k + 1))?;
            }
        }
        ensure(
            (loss.value - expected).abs() <= 1e-9 * expected.abs().max(1.0),
            format!("case {case}: value {} != {expected}", loss.value),
        )?;

        // the discriminators and weights of empty classes cannot matter
        let mut discs2 = discs.clone();
        let mut weights2 = weights.clone();
        for (k, proto) in protos.iter().enumerate() {
            if proto.is_empty {
                discs2[k] = Discriminator::new(c, DISC_HIDDEN, &mut rng);
                weights2[k] *= 3.0;
            }
        }
        let again = class_aware_adv_loss(&protos, &discs2, &LearnableWeights::from_weights(&weights2), label)
            .map_err(|e| e.to_string())?;
        ensure(again.value == loss.value, format!("case {case}: empty-class parameters changed the value"))?;
    }
    Ok("100 random cases: empty classes add 0 and get no gradient".into())
}

fn stage2_freeze() -> Verdict {
    let seed = 5;
    let source = dataset::generate(&DomainSpec::source(), "train", 4, 32, seed).map_err(|e| e.to_string())?;
    let target = dataset::generate(&DomainSpec::target(), "train", 4, 32, seed).map_err(|e| e.to_string())?;
    let images: Vec<_> = target.samples.iter().map(|s| s.image.clone()).collect();
    let cfg = TrainConfig {
        seed,
        warm_epochs: 1,
        epochs: 3,
        stage2_epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let s1 = train_stage1(&source.samples, &images, &cfg, 1).map_err(|e| e.to_string())?;
    let sets = pseudo_label_all(&s1.model.net, target.ids(), &images, &PostprocessConfig::default(), PseudoTarget::Prediction, 1)
        .map_err(|e| e.to_string())?;
    let samples: Vec<_> = sets
        .iter()
        .cloned()
        .zip(&images)
        .map(|(labels, image)| PseudoSample { image: image.clone(), labels })
        .collect();
    let s2 = train_stage2(&s1, &samples, &cfg, 1).map_err(|e| e.to_string())?;

    let before: BTreeMap<_, _> = s1.model.named().into_iter().collect();
    let (mut frozen, mut moved) = (0, 0);
    for (name, t) in s2.model.named() {
        if DomainModel::is_stage2_param(&name) {
            moved += (t != before[&name]) as usize;
        } else {
            ensure(t == before[&name], format!("{name} changed in stage 2"))?;
            frozen += 1;
        }
    }
    ensure(moved > 0, "no stage-2 parameter moved")?;

    let mut rng = SeedStream::new(seed).named("lp-support").rng();
    let mut pixels = 0;
    for pl in &sets {
        let (h, w) = pl.shape();
        let pred = Tensor::random_uniform(&[2, h, w], -1.0, 1.0, &mut rng);
        let g = prototype_loss(&pred, pl).map_err(|e| e.to_string())?.grad;
        let mut expected = vec![false; h * w];
        for proto in &pl.prototypes {
            for &(r, c) in &proto.pixels {
                expected[r * w + c] = true;
            }
        }
        for i in 0..h * w {
            let nonzero = g.data()[i] != 0.0 || g.data()[h * w + i] != 0.0;
            ensure(nonzero == expected[i], format!("{}: gradient support differs at pixel {i}", pl.image_id))?;
        }
        pixels += expected.iter().filter(|&&e| e).count();
    }
    ensure(pixels > 0, "no pseudo pixels to check")?;
    Ok(format!(
        "{frozen} tensors frozen bit-exact, {moved} trained; L_p gradient support = {pixels} pseudo pixels"
    ))
}

struct SeedRun {
    seed: u64,
    rows: BTreeMap<String, MetricReport>,
    aware: Checkpoint,
    elapsed: Duration,
}

fn run_seed(seed: u64, dir: &Path) -> Result<SeedRun, String> {
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let started = Instant::now();
    let outcome = run_pipeline(&cfg, dir, 0, &mut |_| {}).map_err(|e| format!("seed {seed}: {e}"))?;
    let elapsed = started.elapsed();
    let aware = outcome.stage1.iter().find(|(n, _)| n == ROW_AWARE).expect("class-aware row").1.clone();
    println!("  seed {seed} ({:.0}s)\n{}", elapsed.as_secs_f64(), indent(&outcome.table));
    Ok(SeedRun {
        seed,
        rows: outcome.rows.into_iter().collect(),
        aware,
        elapsed,
    })
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("    {l}\n")).collect()
}

fn ablation_ordering(runs: &[SeedRun]) -> Verdict {
    let mean = |row: &str, f: &dyn Fn(&MetricReport) -> f64| runs.iter().map(|r| f(&r.rows[row])).sum::<f64>() / runs.len() as f64;
    let f = |r: &MetricReport| r.f_avg;
    let (src, agn, aware) = (mean(ROW_SOURCE_ONLY, &f), mean(ROW_AGNOSTIC, &f), mean(ROW_AWARE, &f));
    let d_dice = mean(ROW_STAGE2, &|r| r.dice) - mean(ROW_AWARE, &|r| r.dice);
    let d_aji = mean(ROW_STAGE2, &|r| r.aji) - mean(ROW_AWARE, &|r| r.aji);
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    let summary = format!(
        "mean F_avg {src:.4} / {agn:.4} / {aware:.4}; stage 2 dDice {d_dice:+.4} dAJI {d_aji:+.4}; slowest seed {:.0}s",
        slowest.as_secs_f64()
    );
    ensure(agn - src >= 0.02, format!("class-agnostic not 0.02 above source-only: {summary}"))?;
    ensure(aware - agn >= 0.02, format!("class-aware not 0.02 above class-agnostic: {summary}"))?;
    ensure(d_dice > 0.0 && d_aji > 0.0, format!("stage 2 did not improve Dice and AJI: {summary}"))?;
    ensure(slowest < Duration::from_secs(15 * 60), format!("too slow: {summary}"))?;
    Ok(summary)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run_manifest.json" {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_determinism(root: &Path, checkpoints: &mut Vec<(String, Checkpoint)>) -> Verdict {
    let mut trees = Vec::new();
    for k in 0..2 {
        let dir = root.join(format!("seed42-run{k}"));
        let out = run(&["pipeline", "--seed", "42", "--out", p(&dir)]);
        ensure(out.status.success(), format!("pipeline run {k} failed: {}", text(&out)))?;
        checkpoints.push((format!("seed 42 run {k}"), Checkpoint::load(&dir.join(ROW_AWARE)).map_err(|e| e.to_string())?));
        trees.push(files(&dir));
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.keys().eq(b.keys()), "the two runs wrote different file sets")?;
    let differing: Vec<_> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.clone()).collect();
    ensure(differing.is_empty(), format!("differing files: {}", differing.join(", ")))?;
    let ckpts = a.keys().filter(|k| k.ends_with("checkpoint.caplt")).count();
    ensure(a.contains_key("comparison.txt") && ckpts == 4, "expected a comparison table and four checkpoints")?;
    Ok(format!("{} files byte-identical, including comparison.txt and {ckpts} checkpoints", a.len()))
}

fn weight_bounds(checkpoints: &[(String, Checkpoint)]) -> Verdict {
    ensure(!checkpoints.is_empty(), "no stage-1 runs to inspect")?;
    for (name, ck) in checkpoints {
        let w = ck.model.weights.weights();
        ensure(
            w.iter().all(|&x| (WEIGHT_MIN..=WEIGHT_MAX).contains(&x)),
            format!("{name}: weights {w:?} out of range"),
        )?;
        let moved = w.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max);
        ensure(moved > 1e-3, format!("{name}: no weight moved (max |w - 1| = {moved:.2e})"))?;
    }
    Ok(format!("{} class-aware stage-1 runs: every w in [1e-3, 1e3], one moved by > 1e-3 in each", checkpoints.len()))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut verdicts: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        println!("{} {name}: {}", if v.is_ok() { "PASS" } else { "FAIL" }, v.as_ref().unwrap_or_else(|e| e));
        verdicts.push((name, v));
    };

    report("1 gradient checks", gradient_checks());
    report("2 metric oracles", metric_oracles());
    report("3 post-processing round trip", postprocess_roundtrip());
    report("4 empty-class skip", empty_class_skip());
    report("5 stage-2 freeze and L_p support", stage2_freeze());

    let runs: Result<Vec<SeedRun>, String> = (1..=5).map(|s| run_seed(s, &root.path().join(format!("seed{s}")))).collect();
    let mut checkpoints: Vec<(String, Checkpoint)> = Vec::new();
    match runs {
        Ok(runs) => {
            checkpoints.extend(runs.iter().map(|r| (format!("seed {}", r.seed), r.aware.clone())));
            report("6 ablation ordering", ablation_ordering(&runs));
        }
        Err(e) => report("6 ablation ordering", Err(e)),
    }
    report("7 pipeline determinism", cli_determinism(root.path(), &mut checkpoints));
    report("8 class weights", weight_bounds(&checkpoints));

    let failed: Vec<_> = verdicts.iter().filter(|(_, v)| v.is_err()).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria pass", verdicts.len() - failed.len(), verdicts.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

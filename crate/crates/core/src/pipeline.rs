//! Directory-level workflow: evaluation of prediction folders, run
//! manifests, and the end-to-end experiment.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::caplt;
use crate::dataset::{self, Dataset};
use crate::error::{CaplError, Result};
use crate::inference::{class_map, evaluate_dataset, pseudo_label_all, PseudoTarget};
use crate::metrics::{evaluate_image, format_table, ClassifiedInstances, ImageEval, MetricReport};
use crate::parallel::par_map;
use crate::postprocess::PostprocessConfig;
use crate::pseudo_label::{read_pseudo_labels, write_pseudo_labels, PseudoLabelSet};
use crate::synth::{instance_classes, DomainSpec};
use crate::trainer::{train_stage1, train_stage2, AlignMode, Checkpoint, PseudoSample, TrainConfig};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const AGGREGATE: &str = "aggregate.json";
pub const TABLE: &str = "table.txt";
pub const PSEUDO_INDEX: &str = "pseudo_index.json";

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Provenance record written by every command into its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Prediction files of one sample: instances and the per-pixel class map.
pub fn prediction_paths(dir: &Path, id: &str) -> [PathBuf; 2] {
    let [_, inst, classes, _, _] = dataset::sample_paths(dir, id);
    [inst, classes]
}

pub fn write_predictions(dir: &Path, ids: &[String], preds: &[ClassifiedInstances]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, p) in ids.iter().zip(preds) {
        let [inst, classes] = prediction_paths(dir, id);
        caplt::write_instances(&inst, &p.instances)?;
        caplt::write_classes(&classes, &class_map(p)?)?;
    }
    Ok(())
}

fn read_classified(dir: &Path, id: &str) -> Result<ClassifiedInstances> {
    let [inst, classes] = prediction_paths(dir, id);
    let instances = caplt::read_instances(&inst)?;
    let classes = caplt::read_classes(&classes)?;
    if !classes.consistent_with(&instances) {
        return Err(CaplError::Format(format!("class map of '{id}' in {} disagrees with its instances", dir.display())));
    }
    Ok(ClassifiedInstances {
        classes: instance_classes(&instances, &classes).into_iter().collect(),
        instances,
    })
}

/// Sample ids of `gt_dir` whose prediction files are absent from `pred_dir`.
pub fn missing_predictions(pred_dir: &Path, ids: &[String]) -> Vec<String> {
    ids.iter()
        .filter(|id| prediction_paths(pred_dir, id).iter().any(|p| !p.exists()))
        .cloned()
        .collect()
}

/// Scores every sample listed in the manifest of `gt_dir` against the
/// prediction files of the same id in `pred_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, radius: f64, threads: usize) -> Result<(Vec<String>, Vec<ImageEval>, MetricReport)> {
    let ids = dataset::read_manifest(gt_dir)?.sample_ids;
    let missing = missing_predictions(pred_dir, &ids);
    if !missing.is_empty() {
        return Err(CaplError::invalid(format!(
            "{} has no predictions for {} sample(s): {}",
            pred_dir.display(),
            missing.len(),
            missing.join(", ")
        )));
    }
    let evals = par_map(&ids, threads, |_, id| -> Result<ImageEval> {
        evaluate_image(&read_classified(gt_dir, id)?, &read_classified(pred_dir, id)?, radius)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_images(&evals);
    Ok((ids, evals, report))
}

/// Writes `per_image/{id}.json`, the aggregate report and a one-row table.
pub fn write_report(dir: &Path, label: &str, ids: &[String], evals: &[ImageEval], report: &MetricReport) -> Result<()> {
    let per = dir.join("per_image");
    fs::create_dir_all(&per)?;
    for (id, e) in ids.iter().zip(evals) {
        fs::write(per.join(format!("{id}.json")), serde_json::to_string_pretty(e)?)?;
    }
    fs::write(dir.join(AGGREGATE), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join(TABLE), format_table(&[(label.to_string(), report.clone())]))?;
    Ok(())
}

/// Writes one pseudo-label set per image plus an index of the ids.
pub fn write_pseudo_dir(dir: &Path, sets: &[PseudoLabelSet]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for pl in sets {
        write_pseudo_labels(dir, pl)?;
    }
    let ids: Vec<&str> = sets.iter().map(|p| p.image_id.as_str()).collect();
    fs::write(dir.join(PSEUDO_INDEX), serde_json::to_string_pretty(&ids)?)?;
    Ok(())
}

/// Loads the pseudo-labels of every image of a target dataset directory.
pub fn read_pseudo_samples(target_dir: &Path, pseudo_dir: &Path) -> Result<Vec<PseudoSample>> {
    let (manifest, images) = dataset::read_images(target_dir)?;
    manifest
        .sample_ids
        .iter()
        .zip(images)
        .map(|(id, image)| {
            let labels = read_pseudo_labels(pseudo_dir, id)?;
            let (_, h, w) = image.chw()?;
            if labels.shape() != (h, w) {
                return Err(CaplError::shape(&[h, w], &[labels.shape().0, labels.shape().1]));
            }
            Ok(PseudoSample { image, labels })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub train: TrainConfig,
    pub post: PostprocessConfig,
    pub radius: f64,
    pub pseudo_target: PseudoTarget,
    pub skip_stage2: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            n_train: 64,
            n_test: 32,
            size: crate::synth::DEFAULT_TILE,
            train: TrainConfig::default(),
            post: PostprocessConfig::default(),
            radius: crate::metrics::DEFAULT_MATCH_RADIUS,
            pseudo_target: PseudoTarget::default(),
            skip_stage2: false,
        }
    }
}

pub const ROW_SOURCE_ONLY: &str = "source-only";
pub const ROW_AGNOSTIC: &str = "class-agnostic";
pub const ROW_AWARE: &str = "class-aware";
pub const ROW_STAGE2: &str = "stage-2";
pub const COMPARISON_TABLE: &str = "comparison.txt";
pub const COMPARISON_JSON: &str = "comparison.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    /// Target test-split reports in table order.
    pub rows: Vec<(String, MetricReport)>,
    pub table: String,
    /// Stage-1 checkpoints by row name.
    pub stage1: Vec<(String, Checkpoint)>,
    pub stage2: Option<Checkpoint>,
}

impl PipelineOutcome {
    pub fn report(&self, row: &str) -> Option<&MetricReport> {
        self.rows.iter().find(|(n, _)| n == row).map(|(_, r)| r)
    }
}

/// Data generation, the three stage-1 variants, pseudo-labelling, stage 2
/// and evaluation on the target test split. Every intermediate artifact is
/// kept under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, threads: usize, log: &mut dyn FnMut(&str)) -> Result<PipelineOutcome> {
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    train_cfg.validate()?;
    cfg.post.validate()?;
    let data = out.join("data");
    let gen = |spec: DomainSpec, split: &str, n: usize| -> Result<Dataset> {
        let ds = dataset::generate(&spec, split, n, cfg.size, cfg.seed)?;
        dataset::write(&data.join(format!("{}-{split}", spec.name.as_str())), &ds)?;
        Ok(ds)
    };
    let source = gen(DomainSpec::source(), "train", cfg.n_train)?;
    let target = gen(DomainSpec::target(), "train", cfg.n_train)?;
    let test = gen(DomainSpec::target(), "test", cfg.n_test)?;
    let target_images: Vec<_> = target.samples.iter().map(|s| s.image.clone()).collect();
    log(&format!("generated {} + {} training and {} test tiles", source.len(), target.len(), test.len()));

    let mut rows = Vec::new();
    let mut stage1 = Vec::new();
    let evaluate = |name: &str, ck: &Checkpoint, rows: &mut Vec<(String, MetricReport)>, log: &mut dyn FnMut(&str)| -> Result<()> {
        let (preds, evals, report) = evaluate_dataset(&ck.model.net, &test, &cfg.post, cfg.radius, threads)?;
        let dir = out.join("eval").join(name);
        write_predictions(&dir.join("predictions"), test.ids(), &preds)?;
        write_report(&dir, name, test.ids(), &evals, &report)?;
        log(&format!("{name}: F_avg {:.4} Dice {:.4} AJI {:.4}", report.f_avg, report.dice, report.aji));
        rows.push((name.to_string(), report));
        Ok(())
    };
    for (name, mode) in [
        (ROW_SOURCE_ONLY, AlignMode::SourceOnly),
        (ROW_AGNOSTIC, AlignMode::ClassAgnostic),
        (ROW_AWARE, AlignMode::ClassAware),
    ] {
        let started = Instant::now();
        let c = TrainConfig {
            align: mode,
            ..train_cfg.clone()
        };
        let ck = train_stage1(&source.samples, &target_images, &c, threads)?;
        ck.save(&out.join(name))?;
        log(&format!("{name}: stage 1 trained in {:.1}s", started.elapsed().as_secs_f64()));
        evaluate(name, &ck, &mut rows, log)?;
        stage1.push((name.to_string(), ck));
    }

    let mut stage2 = None;
    if !cfg.skip_stage2 {
        let started = Instant::now();
        let aware = &stage1.last().expect("three stage-1 runs").1;
        let sets = pseudo_label_all(&aware.model.net, target.ids(), &target_images, &cfg.post, cfg.pseudo_target, threads)?;
        write_pseudo_dir(&out.join("pseudo"), &sets)?;
        let samples: Vec<PseudoSample> = sets
            .into_iter()
            .zip(&target_images)
            .map(|(labels, image)| PseudoSample {
                image: image.clone(),
                labels,
            })
            .collect();
        let ck = train_stage2(aware, &samples, &train_cfg, threads)?;
        ck.save(&out.join(ROW_STAGE2))?;
        log(&format!("{ROW_STAGE2}: trained in {:.1}s", started.elapsed().as_secs_f64()));
        evaluate(ROW_STAGE2, &ck, &mut rows, log)?;
        stage2 = Some(ck);
    }

    let table = format_table(&rows);
    fs::write(out.join(COMPARISON_TABLE), &table)?;
    fs::write(out.join(COMPARISON_JSON), serde_json::to_string_pretty(&rows)?)?;
    Ok(PipelineOutcome {
        rows,
        table,
        stage1,
        stage2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::ground_truth;

    #[test]
    fn self_evaluation_is_perfect_and_missing_ids_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let gt = dir.path().join("gt");
        let ds = dataset::generate(&DomainSpec::source(), "test", 3, 32, 1).unwrap();
        dataset::write(&gt, &ds).unwrap();
        let (ids, evals, r) = evaluate_dirs(&gt, &gt, 6.0, 2).unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!((r.dice, r.aji, r.pq, r.det_f1, r.f_avg), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(r.class_f1.iter().all(|&f| f == 1.0));
        write_report(&dir.path().join("rep"), "self", &ids, &evals, &r).unwrap();
        assert!(dir.path().join("rep/per_image/s00002.json").exists());

        let pred = dir.path().join("pred");
        let preds: Vec<_> = ds.samples.iter().map(ground_truth).collect();
        write_predictions(&pred, &ds.ids()[..2], &preds[..2]).unwrap();
        let err = evaluate_dirs(&pred, &gt, 6.0, 1).unwrap_err().to_string();
        assert!(err.contains("s00002") && !err.contains("s00001"), "{err}");
        write_predictions(&pred, &ds.ids()[2..], &preds[2..]).unwrap();
        assert_eq!(evaluate_dirs(&pred, &gt, 6.0, 1).unwrap().2, r);
    }
}

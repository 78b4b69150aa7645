use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use capl_kit::dataset;
use capl_kit::inference::{evaluate_dataset, pseudo_label_all, PseudoTarget};
use capl_kit::metrics::DEFAULT_MATCH_RADIUS;
use capl_kit::parallel::resolve_threads;
use capl_kit::pipeline::{self, PipelineConfig, RunManifest};
use capl_kit::postprocess::PostprocessConfig;
use capl_kit::synth::{DomainName, DomainSpec, DEFAULT_TILE};
use capl_kit::trainer::{train_stage1, train_stage2, AlignMode, Checkpoint, Stage, TrainConfig};
use capl_kit::verify::{self, Fault, LossKind};
use capl_kit::CaplError;

/// Category-aware domain-adaptive nuclei segmentation on synthetic tiles.
///
/// Exit codes: 0 success, 1 verification or training failure, 2 bad input.
#[derive(Parser, Debug)]
#[command(name = "capl", version, propagate_version = true)]
struct Cli {
    /// Worker threads for per-image work; 0 uses every available core.
    /// Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset split.
    Gen(GenArgs),
    /// Train stage 1 (warm-up, then feature alignment).
    TrainStage1(Stage1Args),
    /// Build target pseudo-labels from a stage-1 checkpoint.
    PseudoLabel(PseudoArgs),
    /// Train stage 2 on target pseudo-labels.
    TrainStage2(Stage2Args),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the whole experiment and print the comparison table.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct SeedArg {
    /// Master seed.
    #[arg(long, env = "CAPL_SEED", default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    /// source or target.
    #[arg(long, default_value = "source")]
    domain: DomainName,
    /// Split name; different splits draw disjoint samples.
    #[arg(long, default_value = "train")]
    split: String,
    /// Number of tiles.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Tile side in pixels.
    #[arg(long, default_value_t = DEFAULT_TILE)]
    size: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainArgs {
    /// Adam learning rate.
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    /// Stage-1 epochs that train the decoders only.
    #[arg(long, default_value_t = TrainConfig::default().warm_epochs)]
    warm_epochs: usize,
    /// Stage-1 epochs that train every layer.
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    /// Stage-2 epochs.
    #[arg(long, default_value_t = TrainConfig::default().stage2_epochs)]
    stage2_epochs: usize,
    /// Images per optimizer step.
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// Gradient reversal coefficient.
    #[arg(long, default_value_t = TrainConfig::default().lambda_grl)]
    lambda_grl: f64,
    /// Learning-rate multiplier for discriminators and class weights.
    #[arg(long, default_value_t = TrainConfig::default().adversary_lr_scale)]
    adversary_lr_scale: f64,
    /// Fraction of a stage's epochs after which the learning rate decays.
    #[arg(long, default_value_t = TrainConfig::default().lr_decay_at)]
    lr_decay_at: f64,
    /// Learning-rate multiplier applied at the decay point.
    #[arg(long, default_value_t = TrainConfig::default().lr_decay)]
    lr_decay: f64,
    /// Disable flip and rotation augmentation.
    #[arg(long)]
    no_augment: bool,
}

impl TrainArgs {
    fn config(&self, seed: u64, align: AlignMode) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warm_epochs: self.warm_epochs,
            epochs: self.epochs,
            stage2_epochs: self.stage2_epochs,
            batch_size: self.batch_size,
            seed,
            lambda_grl: self.lambda_grl,
            adversary_lr_scale: self.adversary_lr_scale,
            lr_decay_at: self.lr_decay_at,
            lr_decay: self.lr_decay,
            align,
            augment: !self.no_augment,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct PostArgs {
    /// Nucleus probability threshold.
    #[arg(long, default_value_t = PostprocessConfig::default().np_threshold)]
    np_threshold: f64,
    /// Boundary energy below which foreground pixels seed markers.
    #[arg(long, default_value_t = PostprocessConfig::default().energy_threshold)]
    energy_threshold: f64,
    /// Instances smaller than this are removed.
    #[arg(long, default_value_t = PostprocessConfig::default().min_instance_px)]
    min_instance_px: usize,
}

impl PostArgs {
    fn config(&self) -> PostprocessConfig {
        PostprocessConfig {
            np_threshold: self.np_threshold,
            energy_threshold: self.energy_threshold,
            min_instance_px: self.min_instance_px,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct Stage1Args {
    /// Labelled source dataset directory.
    #[arg(long)]
    source: PathBuf,
    /// Target dataset directory; only its images are read.
    #[arg(long)]
    target: PathBuf,
    /// source-only, class-agnostic or class-aware.
    #[arg(long, default_value = "class-aware")]
    mode: AlignMode,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    seed: SeedArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PseudoArgs {
    /// Stage-1 checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target dataset directory; only its images are read.
    #[arg(long)]
    target: PathBuf,
    /// HV targets: the stage-1 prediction or the pseudo-instance geometry.
    #[arg(long, default_value = "prediction")]
    pseudo_target: PseudoTarget,
    #[command(flatten)]
    post: PostArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct Stage2Args {
    /// Stage-1 checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Directory written by `pseudo-label`.
    #[arg(long)]
    pseudo: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    seed: SeedArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Ground-truth dataset directory.
    #[arg(long)]
    gt: PathBuf,
    /// Prediction directory with `{id}.instances.caplt` and
    /// `{id}.classes.caplt` per sample.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pred: Option<PathBuf>,
    /// Predict the ground-truth images with this checkpoint instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Centroid match radius in pixels.
    #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS)]
    radius: f64,
    #[command(flatten)]
    post: PostArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// Losses to check (repeatable): ce, dice, mse, hv, bce, ca, lf, s1, lp.
    /// All when omitted.
    #[arg(long = "loss")]
    losses: Vec<LossKind>,
    /// Seeded random instances per loss.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Optional directory for the JSON report and run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args, Debug, Serialize)]
struct PipelineArgs {
    #[command(flatten)]
    seed: SeedArg,
    /// Training tiles per domain.
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    /// Target test tiles.
    #[arg(long, default_value_t = 32)]
    n_test: usize,
    /// Tile side in pixels.
    #[arg(long, default_value_t = DEFAULT_TILE)]
    size: usize,
    /// Stop after stage 1.
    #[arg(long)]
    skip_stage2: bool,
    /// HV targets for stage 2: prediction or geometry.
    #[arg(long, default_value = "prediction")]
    pseudo_target: PseudoTarget,
    /// Centroid match radius in pixels.
    #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS)]
    radius: f64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    post: PostArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Verification(String),
    Error(CaplError),
}

impl From<CaplError> for Failure {
    fn from(e: CaplError) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn manifest(command: &str, seed: Option<u64>, config: &impl Serialize, inputs: &[&Path], out: &Path, started: Instant) -> Outcome {
    RunManifest {
        command: command.to_string(),
        version: pipeline::version(),
        seed,
        config: serde_json::to_value(config).map_err(CaplError::from)?,
        inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        outputs: vec![out.to_path_buf()],
        duration_secs: started.elapsed().as_secs_f64(),
    }
    .write(out)?;
    Ok(())
}

fn gen(a: &GenArgs) -> Outcome {
    let started = Instant::now();
    let ds = dataset::generate(&DomainSpec::for_domain(a.domain), &a.split, a.n, a.size, a.seed.seed)?;
    dataset::write(&a.out, &ds)?;
    println!("wrote {} {} tiles to {}", ds.len(), a.domain.as_str(), a.out.display());
    manifest("gen", Some(a.seed.seed), a, &[], &a.out, started)
}

fn stage1(a: &Stage1Args, threads: usize) -> Outcome {
    let started = Instant::now();
    let source = dataset::read(&a.source)?;
    let (_, target) = dataset::read_images(&a.target)?;
    let cfg = a.train.config(a.seed.seed, a.mode);
    let ck = train_stage1(&source.samples, &target, &cfg, threads)?;
    ck.save(&a.out)?;
    print_history(&ck);
    manifest("train-stage1", Some(a.seed.seed), &cfg, &[&a.source, &a.target], &a.out, started)
}

fn print_history(ck: &Checkpoint) {
    for h in &ck.history {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
        println!("epoch {:>3}  L_F {}  L_dis {}  L_p {}", h.epoch, f(h.l_f), f(h.l_dis), f(h.l_p));
    }
}

fn pseudo(a: &PseudoArgs, threads: usize) -> Outcome {
    let started = Instant::now();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (manifest_t, images) = dataset::read_images(&a.target)?;
    let sets = pseudo_label_all(&ck.model.net, &manifest_t.sample_ids, &images, &a.post.config(), a.pseudo_target, threads)?;
    pipeline::write_pseudo_dir(&a.out, &sets)?;
    let n: usize = sets.iter().map(|s| s.prototypes.len()).sum();
    println!("{n} pseudo-instances over {} images", sets.len());
    manifest("pseudo-label", None, a, &[&a.checkpoint, &a.target], &a.out, started)
}

fn stage2(a: &Stage2Args, threads: usize) -> Outcome {
    let started = Instant::now();
    let s1 = Checkpoint::load(&a.checkpoint)?;
    if s1.stage != Stage::Stage1 {
        return Err(CaplError::InvalidInput(format!("{} is not a stage-1 checkpoint", a.checkpoint.display())).into());
    }
    let data = pipeline::read_pseudo_samples(&a.target, &a.pseudo)?;
    let cfg = a.train.config(a.seed.seed, s1.config.align);
    let ck = train_stage2(&s1, &data, &cfg, threads)?;
    ck.save(&a.out)?;
    print_history(&ck);
    manifest("train-stage2", Some(a.seed.seed), &cfg, &[&a.checkpoint, &a.target, &a.pseudo], &a.out, started)
}

fn eval(a: &EvalArgs, threads: usize) -> Outcome {
    let started = Instant::now();
    let (ids, evals, report, input) = match (&a.pred, &a.checkpoint) {
        (Some(pred), _) => {
            let (ids, evals, report) = pipeline::evaluate_dirs(pred, &a.gt, a.radius, threads)?;
            (ids, evals, report, pred.clone())
        }
        (None, Some(ckpt)) => {
            let ck = Checkpoint::load(ckpt)?;
            let ds = dataset::read(&a.gt)?;
            let (preds, evals, report) = evaluate_dataset(&ck.model.net, &ds, &a.post.config(), a.radius, threads)?;
            pipeline::write_predictions(&a.out.join("predictions"), ds.ids(), &preds)?;
            (ds.ids().to_vec(), evals, report, ckpt.clone())
        }
        (None, None) => unreachable!("clap requires one of --pred and --checkpoint"),
    };
    pipeline::write_report(&a.out, "eval", &ids, &evals, &report)?;
    print!("{}", capl_kit::metrics::format_table(&[("eval".to_string(), report)]));
    manifest("eval", None, a, &[&a.gt, &input], &a.out, started)
}

fn gradcheck(a: &GradcheckArgs, threads: usize) -> Outcome {
    let started = Instant::now();
    let kinds = if a.losses.is_empty() { LossKind::ALL.to_vec() } else { a.losses.clone() };
    let rows = verify::run_suite(&kinds, a.instances, a.inject_fault, threads)?;
    for r in &rows {
        println!(
            "{:<5} {:<42} worst rel err {:.3e} (seed {}) over {} instances  {}",
            r.loss.as_str(),
            r.loss.describe(),
            r.worst,
            r.worst_seed,
            r.instances,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(CaplError::from)?;
        std::fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&rows).map_err(CaplError::from)?)
            .map_err(CaplError::from)?;
        manifest("gradcheck", None, a, &[], out, started)?;
    }
    match rows.iter().filter(|r| !r.pass).count() {
        0 => Ok(()),
        n => Err(Failure::Verification(format!("{n} loss(es) exceed the gradient tolerance"))),
    }
}

fn run_pipeline(a: &PipelineArgs, threads: usize) -> Outcome {
    let started = Instant::now();
    let cfg = PipelineConfig {
        seed: a.seed.seed,
        n_train: a.n_train,
        n_test: a.n_test,
        size: a.size,
        train: a.train.config(a.seed.seed, AlignMode::ClassAware),
        post: a.post.config(),
        radius: a.radius,
        pseudo_target: a.pseudo_target,
        skip_stage2: a.skip_stage2,
    };
    let outcome = pipeline::run_pipeline(&cfg, &a.out, threads, &mut |m| eprintln!("{m}"))?;
    print!("{}", outcome.table);
    manifest("pipeline", Some(a.seed.seed), &cfg, &[], &a.out, started)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = resolve_threads(cli.threads);
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::TrainStage1(a) => stage1(a, threads),
        Command::PseudoLabel(a) => pseudo(a, threads),
        Command::TrainStage2(a) => stage2(a, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Gradcheck(a) => gradcheck(a, threads),
        Command::Pipeline(a) => run_pipeline(a, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                CaplError::Diverged { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

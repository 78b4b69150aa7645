//! Two-stage training of [`TinyHoverNet`]: supervised warm-up and
//! adversarial feature alignment on labelled source plus unlabelled target
//! data, then HV self-training on target pseudo-labels.

mod checkpoint;
pub mod objective;

pub use checkpoint::{Checkpoint, EpochLog, Stage, CHECKPOINT_BLOBS, CHECKPOINT_INDEX, LOSS_HISTORY};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::domain_adapt::{Discriminator, LearnableWeights, DISC_HIDDEN};
use crate::error::{CaplError, Result};
use crate::gradcheck;
use crate::labels::{InstanceLabelMap, NUM_CLASSES};
use crate::losses::SupervisedConfig;
use crate::model::{TinyHoverNet, BRANCH_FEATURES};
use crate::parallel::par_map;
use crate::params::{join, Parameterized};
use crate::pseudo_label::PseudoLabelSet;
use crate::rng::SeedStream;
use crate::synth::{augment, transform_hv, transform_labels, transform_planes, AugmentOp, SyntheticSample};
use crate::tensor::Tensor;

use objective::{stage1_pair, stage1_pair_terms, stage2_image, stage2_image_frozen};

/// Which discriminators take part in stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// Supervised source training only.
    SourceOnly,
    /// One discriminator per branch on the whole feature map.
    ClassAgnostic,
    /// NP and HV discriminators plus one per class on masked NC features.
    ClassAware,
}

impl AlignMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignMode::SourceOnly => "source-only",
            AlignMode::ClassAgnostic => "class-agnostic",
            AlignMode::ClassAware => "class-aware",
        }
    }
}

impl std::str::FromStr for AlignMode {
    type Err = CaplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source-only" => Ok(AlignMode::SourceOnly),
            "class-agnostic" => Ok(AlignMode::ClassAgnostic),
            "class-aware" => Ok(AlignMode::ClassAware),
            other => Err(CaplError::invalid(format!("unknown alignment mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Stage-1 epochs that update the decoders only.
    pub warm_epochs: usize,
    /// Stage-1 epochs that update every layer.
    pub epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_grl: f64,
    /// Discriminators and class weights step at `lr * adversary_lr_scale`.
    pub adversary_lr_scale: f64,
    /// Fraction of a stage's epochs after which the rate is multiplied by
    /// `lr_decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub align: AlignMode,
    /// When false the discriminators and class weights stay at their
    /// initial values.
    pub train_discriminators: bool,
    /// Random flips and right-angle rotations of every training image.
    pub augment: bool,
    pub supervised: SupervisedConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warm_epochs: 5,
            epochs: 25,
            stage2_epochs: 20,
            batch_size: 4,
            seed: 0,
            lambda_grl: 1.0,
            adversary_lr_scale: 1.0,
            lr_decay_at: 0.5,
            lr_decay: 0.1,
            align: AlignMode::ClassAware,
            train_discriminators: true,
            augment: true,
            supervised: SupervisedConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CaplError::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.warm_epochs + self.epochs == 0 || self.stage2_epochs == 0 {
            return Err(CaplError::invalid("every stage needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(CaplError::invalid("batch size must be at least 1"));
        }
        if !(self.lambda_grl >= 0.0 && self.lambda_grl.is_finite()) {
            return Err(CaplError::invalid(format!("lambda_grl must be >= 0, got {}", self.lambda_grl)));
        }
        if !(self.adversary_lr_scale > 0.0 && self.adversary_lr_scale.is_finite()) {
            return Err(CaplError::invalid(format!(
                "adversary_lr_scale must be positive, got {}",
                self.adversary_lr_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CaplError::invalid("lr decay point must lie in [0, 1] and factor in (0, 1]"));
        }
        Ok(())
    }

    /// Learning rate of epoch `epoch` (0-based) out of `total`.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        if (epoch as f64) >= self.lr_decay_at * total as f64 {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

/// The network together with every discriminator and the class weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainModel {
    pub net: TinyHoverNet,
    pub disc_np: Discriminator,
    pub disc_hv: Discriminator,
    /// Class-agnostic discriminator of the NC features.
    pub disc_nc: Discriminator,
    /// One per class, in class-id order.
    pub disc_class: Vec<Discriminator>,
    pub weights: LearnableWeights,
}

impl DomainModel {
    pub fn new(seed: u64) -> Self {
        let s = SeedStream::new(seed);
        let mut rng = s.named("discriminators").rng();
        let mut disc = || Discriminator::new(BRANCH_FEATURES, DISC_HIDDEN, &mut rng);
        DomainModel {
            net: TinyHoverNet::new(&mut s.named("network").rng()),
            disc_np: disc(),
            disc_hv: disc(),
            disc_nc: disc(),
            disc_class: (0..NUM_CLASSES).map(|_| disc()).collect(),
            weights: LearnableWeights::ones(NUM_CLASSES),
        }
    }

    pub fn is_net_param(name: &str) -> bool {
        name.starts_with("net.")
    }

    /// Stage-2 trainable set: the shared encoder and the HV decoder.
    pub fn is_stage2_param(name: &str) -> bool {
        name.strip_prefix("net.").is_some_and(|n| {
            TinyHoverNet::is_encoder_param(n) || TinyHoverNet::is_branch_param(n, crate::model::Branch::Hv)
        })
    }

    /// Decoders of all three branches.
    pub fn is_decoder_param(name: &str) -> bool {
        name.strip_prefix("net.").is_some_and(|n| !TinyHoverNet::is_encoder_param(n))
    }

    /// Discriminator and weight parameters that `mode` trains.
    pub fn is_adversary_param(name: &str, mode: AlignMode) -> bool {
        match mode {
            AlignMode::SourceOnly => false,
            AlignMode::ClassAgnostic => ["disc_np.", "disc_hv.", "disc_nc."].iter().any(|p| name.starts_with(p)),
            AlignMode::ClassAware => ["disc_np.", "disc_hv.", "disc_class.", "weights."]
                .iter()
                .any(|p| name.starts_with(p)),
        }
    }
}

impl Parameterized for DomainModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.net.visit(&join(prefix, "net"), f);
        self.disc_np.visit(&join(prefix, "disc_np"), f);
        self.disc_hv.visit(&join(prefix, "disc_hv"), f);
        self.disc_nc.visit(&join(prefix, "disc_nc"), f);
        self.disc_class.visit(&join(prefix, "disc_class"), f);
        self.weights.visit(&join(prefix, "weights"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.net.visit_mut(&join(prefix, "net"), f);
        self.disc_np.visit_mut(&join(prefix, "disc_np"), f);
        self.disc_hv.visit_mut(&join(prefix, "disc_hv"), f);
        self.disc_nc.visit_mut(&join(prefix, "disc_nc"), f);
        self.disc_class.visit_mut(&join(prefix, "disc_class"), f);
        self.weights.visit_mut(&join(prefix, "weights"), f);
    }
}

/// Identity plus the five geometric augmentations.
fn draw_op(rng: &mut impl Rng) -> Option<AugmentOp> {
    let k = rng.gen_range(0..=AugmentOp::ALL.len());
    (k > 0).then(|| AugmentOp::ALL[k - 1])
}

fn permutation(n: usize, stream: SeedStream) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.rng());
    order
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn diverged(epoch: usize, what: &str, value: f64) -> CaplError {
    CaplError::Diverged {
        epoch,
        detail: format!("{what} became {value}"),
    }
}

/// Sums per-item gradients in order and scales by `1 / n`.
fn average(mut parts: impl Iterator<Item = DomainModel>, n: usize) -> Option<DomainModel> {
    let mut acc = parts.next()?;
    for g in parts {
        acc.add_scaled(&g, 1.0);
    }
    acc.scale(1.0 / n as f64);
    Some(acc)
}

/// Stage 1: `warm_epochs` of supervised decoder training followed by
/// `epochs` of all-layer training on `L_F + L_dis` with gradient reversal.
/// `target_images` may be empty only in [`AlignMode::SourceOnly`].
pub fn train_stage1(
    source: &[SyntheticSample],
    target_images: &[Tensor],
    cfg: &TrainConfig,
    threads: usize,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(CaplError::invalid("stage 1 needs labelled source samples"));
    }
    let adapt = cfg.align != AlignMode::SourceOnly;
    if adapt && target_images.is_empty() {
        return Err(CaplError::invalid("feature alignment needs target images"));
    }
    let seeds = SeedStream::new(cfg.seed);
    let mut model = DomainModel::new(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut history = Vec::new();
    let total = cfg.warm_epochs + cfg.epochs;
    for epoch in 0..total {
        let warm = epoch < cfg.warm_epochs;
        let lr = cfg.lr_at(epoch, total);
        let order = permutation(source.len(), seeds.named("source-order").split(epoch as u64));
        let t_order = permutation(target_images.len(), seeds.named("target-order").split(epoch as u64));
        let (mut lf, mut ld) = (Vec::new(), Vec::new());
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<(usize, Option<usize>)> = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let t = (adapt && !warm).then(|| t_order[(b * cfg.batch_size + k) % t_order.len()]);
                    (i, t)
                })
                .collect();
            let results = par_map(&items, threads, |_, &(i, t)| -> Result<objective::PairLoss> {
                let mut s = source[i].clone();
                let mut timg = t.map(|t| target_images[t].clone());
                if cfg.augment {
                    let aug = seeds.named("augment").split(epoch as u64);
                    if let Some(op) = draw_op(&mut aug.named("source").split(i as u64).rng()) {
                        s = augment(&s, op)?;
                    }
                    if let (Some(t), Some(img)) = (t, timg.as_mut()) {
                        if let Some(op) = draw_op(&mut aug.named("target").split(t as u64).rng()) {
                            *img = transform_planes(img, op);
                        }
                    }
                }
                stage1_pair(&model, cfg.align, &s, timg.as_ref(), &cfg.supervised, cfg.lambda_grl)
            });
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;
            for r in &results {
                lf.push(r.l_f);
                ld.push(r.l_dis);
            }
            let n = results.len();
            let grads = average(results.into_iter().map(|r| r.grads), n).expect("non-empty batch");
            let batch_loss = mean(&lf[lf.len() - n..]) + mean(&ld[ld.len() - n..]);
            if !batch_loss.is_finite() {
                return Err(diverged(epoch + 1, "L_s1", batch_loss));
            }
            adam.begin_step();
            let train_adv = adapt && !warm && cfg.train_discriminators;
            let net_part = |name: &str| {
                if warm {
                    DomainModel::is_decoder_param(name)
                } else {
                    DomainModel::is_net_param(name)
                }
            };
            adam.update_where("", &mut model, &grads, lr, net_part);
            if train_adv {
                let adv_lr = lr * cfg.adversary_lr_scale;
                adam.update_where("", &mut model, &grads, adv_lr, |name| DomainModel::is_adversary_param(name, cfg.align));
            }
            let bad = model.named().into_iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n);
            if let Some(name) = bad {
                return Err(CaplError::Diverged {
                    epoch: epoch + 1,
                    detail: format!("parameter {name} became non-finite"),
                });
            }
        }
        history.push(EpochLog {
            epoch: epoch + 1,
            l_f: Some(mean(&lf)),
            l_dis: Some(mean(&ld)),
            l_p: None,
        });
    }
    Ok(Checkpoint {
        stage: Stage::Stage1,
        config: cfg.clone(),
        model,
        adam,
        history,
    })
}

/// One unlabelled target image with its pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSample {
    pub image: Tensor,
    pub labels: PseudoLabelSet,
}

/// Applies `op` to the image and to the pseudo-label geometry, including the
/// direction of the target HV vectors.
pub fn augment_pseudo(p: &PseudoSample, op: AugmentOp) -> Result<PseudoSample> {
    let (h, w) = p.labels.shape();
    let labels = transform_labels(p.labels.instance_map.labels(), h, w, op);
    let (_, h2, w2) = transform_planes(&p.image, op).chw()?;
    let map = InstanceLabelMap::new(h2, w2, labels)?;
    let target = transform_hv(&p.labels.dense_target(), op);
    Ok(PseudoSample {
        image: transform_planes(&p.image, op),
        labels: PseudoLabelSet::from_dense(&p.labels.image_id, map, &target)?,
    })
}

/// Stage 2: starting from `stage1` with a fresh optimizer, minimizes the
/// prototype loss on target images. Only the shared encoder and the HV
/// decoder are updated; batches without any pseudo-instance are skipped.
pub fn train_stage2(stage1: &Checkpoint, data: &[PseudoSample], cfg: &TrainConfig, threads: usize) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CaplError::invalid("stage 2 needs target images with pseudo-labels"));
    }
    let seeds = SeedStream::new(cfg.seed).named("stage2");
    let mut model = stage1.model.clone();
    let mut adam = Adam::new(cfg.adam);
    let mut history = Vec::new();
    for epoch in 0..cfg.stage2_epochs {
        let lr = cfg.lr_at(epoch, cfg.stage2_epochs);
        let order = permutation(data.len(), seeds.named("order").split(epoch as u64));
        let mut lp = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let results = par_map(batch, threads, |_, &i| -> Result<(f64, DomainModel, bool)> {
                let mut p = data[i].clone();
                if cfg.augment {
                    let mut rng = seeds.named("augment").split(epoch as u64).split(i as u64).rng();
                    if let Some(op) = draw_op(&mut rng) {
                        p = augment_pseudo(&p, op)?;
                    }
                }
                let (v, g, _) = stage2_image(&model, &p.image, &p.labels)?;
                Ok((v, g, !p.labels.prototypes.is_empty()))
            });
            let results = results.into_iter().collect::<Result<Vec<_>>>()?;
            let any = results.iter().any(|r| r.2);
            let n = results.len();
            lp.extend(results.iter().map(|r| r.0));
            let batch_loss = mean(&lp[lp.len() - n..]);
            if !batch_loss.is_finite() {
                return Err(diverged(epoch + 1, "L_p", batch_loss));
            }
            if !any {
                continue;
            }
            let grads = average(results.into_iter().map(|r| r.1), n).expect("non-empty batch");
            adam.begin_step();
            adam.update_where("", &mut model, &grads, lr, DomainModel::is_stage2_param);
        }
        history.push(EpochLog {
            epoch: epoch + 1,
            l_f: None,
            l_dis: None,
            l_p: Some(mean(&lp)),
        });
    }
    Ok(Checkpoint {
        stage: Stage::Stage2,
        config: cfg.clone(),
        model,
        adam,
        history,
    })
}

/// The objective a [`backward_check`] differentiates.
#[derive(Clone, Debug)]
pub enum CheckedLoss<'a> {
    /// Supervised loss of one labelled sample.
    Supervised(&'a SyntheticSample),
    /// `L_F + L_dis` of a source sample and a target image, with the
    /// reversal replaced by the identity.
    Stage1 {
        source: &'a SyntheticSample,
        target: &'a Tensor,
        mode: AlignMode,
    },
    /// Prototype loss of a target image.
    Prototype { image: &'a Tensor, labels: &'a PseudoLabelSet },
}

/// Worst relative error between the analytic gradient of `loss` and central
/// differences, over every parameter (`stride = 1`) or every `stride`-th one
/// starting at `offset`.
pub fn backward_check(model: &DomainModel, loss: &CheckedLoss<'_>, stride: usize, offset: usize) -> Result<f64> {
    let sup = SupervisedConfig::default();
    type Terms<'b> = Box<dyn Fn(&DomainModel) -> Result<Vec<f64>> + 'b>;
    let (analytic, terms): (DomainModel, Terms<'_>) = match loss {
        CheckedLoss::Supervised(s) => {
            let r = stage1_pair(model, AlignMode::SourceOnly, s, None, &sup, -1.0)?;
            let freeze = r.freeze;
            (r.grads, Box::new(move |m| stage1_pair_terms(m, s, None, &sup, &freeze)))
        }
        CheckedLoss::Stage1 { source, target, mode } => {
            let r = stage1_pair(model, *mode, source, Some(target), &sup, -1.0)?;
            let freeze = r.freeze;
            (r.grads, Box::new(move |m| stage1_pair_terms(m, source, Some(target), &sup, &freeze)))
        }
        CheckedLoss::Prototype { image, labels } => {
            let (_, g, patterns) = stage2_image(model, image, labels)?;
            (g, Box::new(move |m| Ok(vec![stage2_image_frozen(m, image, labels, &patterns)?])))
        }
    };
    let flat = |m: &DomainModel| -> Vec<f64> { m.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect() };
    let all_a = flat(&analytic);
    let stride = stride.max(1);
    let picked: Vec<usize> = (offset % stride..all_a.len()).step_by(stride).collect();
    let base = flat(model);
    let x = Tensor::from_vec(picked.iter().map(|&i| base[i]).collect());
    let a = Tensor::from_vec(picked.iter().map(|&i| all_a[i]).collect());
    let mut failure = None;
    let err = gradcheck::check_terms(&x, &a, |v| {
        let mut values = base.clone();
        for (k, &i) in picked.iter().enumerate() {
            values[i] = v.data()[k];
        }
        let mut m = model.clone();
        let mut pos = 0;
        m.visit_mut("", &mut |_, t| {
            let len = t.len();
            t.data_mut().copy_from_slice(&values[pos..pos + len]);
            pos += len;
        });
        terms(&m).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            vec![f64::NAN]
        })
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

//! The gradient verification suite: every loss, on seeded random
//! instances, against central finite differences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain_adapt::{
    adversarial_term, adversarial_value_frozen, class_aware_adv_loss, class_aware_value_frozen, prototype_features,
    ClassMask, Discriminator, DomainLabel, LearnableWeights, DISC_HIDDEN,
};
use crate::error::{CaplError, Result};
use crate::gradcheck::{check, MAX_REL_ERROR};
use crate::labels::{ClassLabelMap, InstanceLabelMap, NUM_CLASSES};
use crate::losses::{cross_entropy, dice_loss, hv_gradient_loss, mse_loss};
use crate::model::softmax_channels;
use crate::parallel::par_map;
use crate::params::Parameterized;
use crate::pseudo_label::build_pseudo_labels;
use crate::rng::SeedStream;
use crate::synth::{hv_target_from_instances, SyntheticSample};
use crate::tensor::Tensor;
use crate::trainer::{backward_check, AlignMode, CheckedLoss, DomainModel};

/// Every `PARAM_STRIDE`-th network parameter is perturbed per instance,
/// starting at an offset that rotates with the seed, so a run over many
/// seeds covers the whole parameter vector.
pub const PARAM_STRIDE: usize = 37;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Dice,
    Mse,
    Hv,
    Bce,
    Ca,
    Lf,
    S1,
    Lp,
}

impl LossKind {
    pub const ALL: [LossKind; 9] = [
        LossKind::Ce,
        LossKind::Dice,
        LossKind::Mse,
        LossKind::Hv,
        LossKind::Bce,
        LossKind::Ca,
        LossKind::Lf,
        LossKind::S1,
        LossKind::Lp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Dice => "dice",
            LossKind::Mse => "mse",
            LossKind::Hv => "hv",
            LossKind::Bce => "bce",
            LossKind::Ca => "ca",
            LossKind::Lf => "lf",
            LossKind::S1 => "s1",
            LossKind::Lp => "lp",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            LossKind::Ce => "cross-entropy",
            LossKind::Dice => "soft Dice",
            LossKind::Mse => "mean squared error",
            LossKind::Hv => "HV-gradient",
            LossKind::Bce => "adversarial BCE through a discriminator",
            LossKind::Ca => "class-aware adversarial",
            LossKind::Lf => "supervised network loss",
            LossKind::S1 => "stage-1 network loss",
            LossKind::Lp => "prototype network loss",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = CaplError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CaplError::invalid(format!("unknown loss '{s}'")))
    }
}

/// Deliberate gradient bugs, for checking that the suite catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negates the analytic Dice gradient.
    DiceSign,
}

impl std::str::FromStr for Fault {
    type Err = CaplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice-sign" => Ok(Fault::DiceSign),
            other => Err(CaplError::invalid(format!("unknown fault '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub loss: LossKind,
    pub instances: usize,
    pub worst: f64,
    pub worst_seed: u64,
    pub pass: bool,
}

// Softmax of moderate logits. Wider logits push some probabilities below
// 1e-3, where a 1e-5 central difference of ln p has truncation error near
// h^2 / 3p^2 and no longer says anything about the analytic gradient.
fn random_probs(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    softmax_channels(&Tensor::random_uniform(&[c, h, w], -1.5, 1.5, rng))
}

fn random_onehot(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(&[c, h, w]);
    for i in 0..h * w {
        let k = rng.gen_range(0..c);
        t.data_mut()[k * h * w + i] = 1.0;
    }
    t
}

fn random_instances(h: usize, w: usize, rng: &mut impl Rng) -> InstanceLabelMap {
    let mut labels = vec![0u32; h * w];
    for id in 1..=rng.gen_range(1..=3u32) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (dh, dw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        for r in r0..(r0 + dh).min(h) {
            for c in c0..(c0 + dw).min(w) {
                labels[r * w + c] = id;
            }
        }
    }
    InstanceLabelMap::new(h, w, labels).expect("extents match").relabel_canonical()
}

/// A small labelled sample with random pixels and up to three rectangular
/// nuclei of random classes.
pub fn random_sample(h: usize, w: usize, rng: &mut impl Rng) -> SyntheticSample {
    let image = Tensor::random_uniform(&[3, h, w], 0.0, 1.0, rng);
    let inst = random_instances(h, w, rng);
    let classes_of: Vec<u32> = (0..=inst.max_label()).map(|_| rng.gen_range(1..=NUM_CLASSES as u32)).collect();
    let classes = inst.labels().iter().map(|&l| if l == 0 { 0 } else { classes_of[l as usize] }).collect();
    SyntheticSample::from_labels(image, inst.clone(), ClassLabelMap::new(h, w, classes).expect("extents match"))
}

/// Flattened finite-difference check over every tensor of `p`.
fn check_params<P: Parameterized + Clone>(p: &P, grad: &P, f: impl Fn(&P) -> f64) -> f64 {
    let flat = |m: &P| Tensor::from_vec(m.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect());
    check(&flat(p), &flat(grad), |v| {
        let mut m = p.clone();
        let mut pos = 0;
        m.visit_mut("", &mut |_, t| {
            let len = t.len();
            t.data_mut().copy_from_slice(&v.data()[pos..pos + len]);
            pos += len;
        });
        f(&m)
    })
}

/// Worst relative error of one loss on the instance drawn from `seed`.
pub fn check_instance(kind: LossKind, seed: u64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = SeedStream::new(seed).named(kind.as_str()).rng();
    let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
    Ok(match kind {
        LossKind::Ce => {
            let c = rng.gen_range(2..=NUM_CLASSES + 1);
            let p = random_probs(c, h, w, &mut rng);
            let t = random_onehot(c, h, w, &mut rng);
            let g = cross_entropy(&p, &t)?.grad;
            check(&p, &g, |x| crate::losses::cross_entropy_unchecked(x, &t).expect("shapes").value)
        }
        LossKind::Dice => {
            let p = Tensor::random_uniform(&[1, h, w], 0.01, 0.99, &mut rng);
            let t = Tensor::from_fn(&[1, h, w], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let mut g = dice_loss(&p, &t)?.grad;
            if fault == Some(Fault::DiceSign) {
                g = g.scale(-1.0);
            }
            check(&p, &g, |x| dice_loss(x, &t).expect("shapes").value)
        }
        LossKind::Mse => {
            let p = Tensor::random_normal(&[2, h, w], 1.0, &mut rng);
            let t = Tensor::random_normal(&[2, h, w], 1.0, &mut rng);
            check(&p, &mse_loss(&p, &t)?.grad, |x| mse_loss(x, &t).expect("shapes").value)
        }
        LossKind::Hv => {
            let (h, w) = (h + 2, w + 2);
            let inst = random_instances(h, w, &mut rng);
            let t = hv_target_from_instances(&inst);
            let p = Tensor::random_uniform(&[2, h, w], -1.0, 1.0, &mut rng);
            let mask = rng.gen_bool(0.5).then(|| inst.foreground());
            let g = hv_gradient_loss(&p, &t, mask.as_ref())?.grad;
            check(&p, &g, |x| hv_gradient_loss(x, &t, mask.as_ref()).expect("shapes").value)
        }
        LossKind::Bce => {
            let c = rng.gen_range(1..6);
            let label = if rng.gen_bool(0.5) { DomainLabel::Source } else { DomainLabel::Target };
            let disc = Discriminator::new(c, DISC_HIDDEN, &mut rng);
            let f = Tensor::random_normal(&[c, h, w], 1.0, &mut rng);
            let t = adversarial_term(&f, &disc, label, 1.0)?;
            let on_features = check(&f, &t.grad_features, |x| {
                adversarial_value_frozen(x, &disc, label, &t.pattern).expect("shapes")
            });
            let on_params = check_params(&disc, &t.grad_disc, |d| {
                adversarial_value_frozen(&f, d, label, &t.pattern).expect("shapes")
            });
            on_features.max(on_params)
        }
        LossKind::Ca => {
            let c = rng.gen_range(1..5);
            let label = if rng.gen_bool(0.5) { DomainLabel::Source } else { DomainLabel::Target };
            let discs: Vec<Discriminator> = (0..NUM_CLASSES).map(|_| Discriminator::new(c, DISC_HIDDEN, &mut rng)).collect();
            let weights = LearnableWeights {
                s: Tensor::random_normal(&[NUM_CLASSES], 0.7, &mut rng),
            };
            let f = Tensor::random_normal(&[c, h, w], 1.0, &mut rng);
            let masks: Vec<ClassMask> = (1..=NUM_CLASSES as u32)
                .map(|k| {
                    let empty = rng.gen_bool(0.3);
                    ClassMask::new(k, Tensor::from_fn(&[h, w], |_| if !empty && rng.gen_bool(0.5) { 1.0 } else { 0.0 }))
                })
                .collect();
            let protos = |f: &Tensor| masks.iter().map(|m| prototype_features(f, m).expect("shapes")).collect::<Vec<_>>();
            let l = class_aware_adv_loss(&protos(&f), &discs, &weights, label)?;
            let pats = l.patterns.clone();
            let mut grad_f = Tensor::zeros_like(&f);
            for (g, m) in l.grad_features.iter().zip(&masks) {
                if let Some(g) = g {
                    grad_f.add_scaled(&crate::tensor::hadamard(g, &m.mask)?, 1.0)?;
                }
            }
            let value = |f: &Tensor, d: &[Discriminator], w: &LearnableWeights| {
                class_aware_value_frozen(&protos(f), d, w, label, &pats).expect("shapes")
            };
            let e_f = check(&f, &grad_f, |x| value(x, &discs, &weights));
            let e_w = check(&weights.s, &l.grad_weights.s, |x| value(&f, &discs, &LearnableWeights { s: x.clone() }));
            let e_d = check_params(&discs, &l.grad_discs, |d| value(&f, d, &weights));
            e_f.max(e_w).max(e_d)
        }
        LossKind::Lf | LossKind::S1 | LossKind::Lp => {
            let mut model = DomainModel::new(seed);
            model.weights = LearnableWeights {
                s: Tensor::random_normal(&[NUM_CLASSES], 0.5, &mut rng),
            };
            let (h, w) = (h + 2, w + 2);
            let s = random_sample(h, w, &mut rng);
            let offset = (seed as usize) % PARAM_STRIDE;
            match kind {
                LossKind::Lf => backward_check(&model, &CheckedLoss::Supervised(&s), PARAM_STRIDE, offset)?,
                LossKind::S1 => {
                    let target = Tensor::random_uniform(&[3, h, w], 0.0, 1.0, &mut rng);
                    let mode = if seed % 2 == 0 { AlignMode::ClassAware } else { AlignMode::ClassAgnostic };
                    let loss = CheckedLoss::Stage1 {
                        source: &s,
                        target: &target,
                        mode,
                    };
                    backward_check(&model, &loss, PARAM_STRIDE, offset)?
                }
                _ => {
                    let hv = Tensor::random_uniform(&[2, h, w], -1.0, 1.0, &mut rng);
                    let labels = build_pseudo_labels(&hv, &s.instances)?;
                    let loss = CheckedLoss::Prototype {
                        image: &s.image,
                        labels: &labels,
                    };
                    backward_check(&model, &loss, PARAM_STRIDE, offset)?
                }
            }
        }
    })
}

/// Runs `instances` seeded checks per loss and reports the worst error.
pub fn run_suite(kinds: &[LossKind], instances: usize, fault: Option<Fault>, threads: usize) -> Result<Vec<CheckRow>> {
    kinds
        .iter()
        .map(|&kind| {
            let seeds: Vec<u64> = (0..instances as u64).collect();
            let errs = par_map(&seeds, threads, |_, &s| check_instance(kind, s, fault))
                .into_iter()
                .collect::<Result<Vec<f64>>>()?;
            let (worst_seed, worst) = errs
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |acc, (i, &e)| if e > acc.1 || e.is_nan() { (i, e) } else { acc });
            Ok(CheckRow {
                loss: kind,
                instances,
                worst,
                worst_seed: worst_seed as u64,
                pass: worst < MAX_REL_ERROR,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_on_a_few_instances() {
        let rows = run_suite(&LossKind::ALL, 4, None, 2).unwrap();
        for r in &rows {
            assert!(r.pass, "{:?}", r);
        }
    }

    #[test]
    fn injected_dice_bug_is_caught_and_only_there() {
        let rows = run_suite(&[LossKind::Dice, LossKind::Mse], 3, Some(Fault::DiceSign), 1).unwrap();
        assert!(!rows[0].pass && rows[0].worst > 1.0);
        assert!(rows[1].pass);
        assert_eq!("s1".parse::<LossKind>().unwrap(), LossKind::S1);
        assert!("x".parse::<LossKind>().is_err());
    }
}

//! Feature-level domain alignment: class masks, prototype features,
//! per-class discriminators with learnable weights, and the adversarial loss
//! aggregates of the first training stage.
//!
//! Adversarial training uses gradient reversal: discriminators minimize the
//! domain loss directly, while the gradient reaching the features they
//! consume is multiplied by `-lambda` (see [`gradient_reversal`]).

mod discriminator;

pub use discriminator::{DiscForward, Discriminator, DISC_HIDDEN};

use serde::{Deserialize, Serialize};

use crate::error::{CaplError, Result};
use crate::losses::{check_normalized, LossValue};
use crate::tensor::{hadamard, Tensor};
use crate::tensor_params;

/// Clamp range of the learnable class weights.
pub const WEIGHT_MIN: f64 = 1e-3;
pub const WEIGHT_MAX: f64 = 1e3;
/// Coefficient of the `sum s_c` regularizer over non-empty classes.
pub const WEIGHT_REG: f64 = 0.01;

/// Binary map of the pixels predicted as one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMask {
    pub class_id: u32,
    /// `(H, W)` with values in {0, 1}.
    pub mask: Tensor,
    pub is_empty: bool,
}

impl ClassMask {
    pub fn new(class_id: u32, mask: Tensor) -> Self {
        let is_empty = mask.data().iter().all(|&v| v == 0.0);
        ClassMask {
            class_id,
            mask,
            is_empty,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Splits an `(N + 1, H, W)` class-probability map into N per-class binary
/// masks. A pixel belongs to class `c` when `c` is its argmax channel; ties
/// go to the lowest channel, and channel 0 (background) belongs to no mask.
pub fn class_mask_from_prediction(p_nc: &Tensor) -> Result<Vec<ClassMask>> {
    check_normalized(p_nc)?;
    let (channels, h, w) = p_nc.chw()?;
    let plane = h * w;
    let mut masks = vec![vec![0.0; plane]; channels - 1];
    for i in 0..plane {
        let mut best = 0;
        for ch in 1..channels {
            if p_nc.data()[ch * plane + i] > p_nc.data()[best * plane + i] {
                best = ch;
            }
        }
        if best > 0 {
            masks[best - 1][i] = 1.0;
        }
    }
    Ok(masks
        .into_iter()
        .enumerate()
        .map(|(k, m)| ClassMask::new(k as u32 + 1, Tensor::from_parts(vec![h, w], m)))
        .collect())
}

/// NC-branch features restricted to the pixels of one predicted class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeFeature {
    pub class_id: u32,
    /// `(C, H, W)`, zero wherever the generating mask is zero.
    pub features: Tensor,
    pub is_empty: bool,
}

pub fn prototype_features(f_nc: &Tensor, m: &ClassMask) -> Result<PrototypeFeature> {
    Ok(PrototypeFeature {
        class_id: m.class_id,
        features: hadamard(f_nc, &m.mask)?,
        is_empty: m.is_empty,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    /// Encoded label: source = 1, target = 0.
    pub fn value(self) -> f64 {
        match self {
            DomainLabel::Source => 1.0,
            DomainLabel::Target => 0.0,
        }
    }
}

/// Mean binary cross-entropy of discriminator outputs against a constant
/// domain label. The gradient is with respect to `d_out`.
pub fn adversarial_bce(d_out: &Tensor, label: DomainLabel) -> Result<LossValue> {
    if let Some(bad) = d_out.data().iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(CaplError::invalid(format!(
            "discriminator output {bad} outside (0, 1)"
        )));
    }
    let y = label.value();
    let n = d_out.len() as f64;
    let value = -d_out
        .data()
        .iter()
        .map(|&p| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        .sum::<f64>()
        / n;
    let grad = d_out.map(|p| -(y / p - (1.0 - y) / (1.0 - p)) / n);
    Ok(LossValue { value, grad })
}

/// Per-class trade-off weights `w_c = clamp(exp(s_c), 1e-3, 1e3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableWeights {
    /// Unconstrained log-weights, one per class.
    pub s: Tensor,
}

tensor_params!(LearnableWeights { s });

impl LearnableWeights {
    /// All weights equal to one.
    pub fn ones(classes: usize) -> Self {
        LearnableWeights {
            s: Tensor::zeros(&[classes]),
        }
    }

    pub fn from_weights(weights: &[f64]) -> Self {
        LearnableWeights {
            s: Tensor::from_vec(weights.iter().map(|w| w.ln()).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Weight of class `c` (1-based).
    pub fn weight(&self, class_id: u32) -> f64 {
        self.s.data()[class_id as usize - 1].exp().clamp(WEIGHT_MIN, WEIGHT_MAX)
    }

    pub fn weights(&self) -> Vec<f64> {
        (1..=self.len() as u32).map(|c| self.weight(c)).collect()
    }

    /// `d w_c / d s_c`; zero while the clamp is active.
    pub fn weight_derivative(&self, class_id: u32) -> f64 {
        let raw = self.s.data()[class_id as usize - 1].exp();
        if raw > WEIGHT_MIN && raw < WEIGHT_MAX {
            raw
        } else {
            0.0
        }
    }
}

/// Result of a single-discriminator adversarial term.
#[derive(Clone, Debug)]
pub struct AdvTerm {
    pub value: f64,
    pub grad_disc: Discriminator,
    /// Gradient with respect to the discriminator input, before reversal.
    pub grad_features: Tensor,
    pub pattern: Vec<bool>,
}

/// `adversarial_bce(D(features), label)` with gradients for `D` and the
/// features, scaled by `weight`.
pub fn adversarial_term(
    features: &Tensor,
    disc: &Discriminator,
    label: DomainLabel,
    weight: f64,
) -> Result<AdvTerm> {
    let fwd = disc.forward(features)?;
    let bce = adversarial_bce(&fwd.probs, label)?;
    let (grad_disc, grad_features) = disc.backward(features, &fwd, &bce.grad.scale(weight));
    Ok(AdvTerm {
        value: bce.value,
        grad_disc,
        grad_features,
        pattern: fwd.pattern,
    })
}

/// Value of [`adversarial_term`] with the discriminator's hidden branch
/// pattern frozen; the forward-only route used by finite differences.
pub fn adversarial_value_frozen(
    features: &Tensor,
    disc: &Discriminator,
    label: DomainLabel,
    pattern: &[bool],
) -> Result<f64> {
    let fwd = disc.forward_frozen(features, pattern)?;
    Ok(adversarial_bce(&fwd.probs, label)?.value)
}

/// Weighted sum of per-class adversarial losses.
#[derive(Clone, Debug)]
pub struct ClassAwareLoss {
    pub value: f64,
    /// Unweighted adversarial loss per class, `None` for skipped classes.
    pub per_class: Vec<Option<f64>>,
    /// Gradient for each discriminator (zero for skipped classes).
    pub grad_discs: Vec<Discriminator>,
    /// Gradient of the learnable log-weights.
    pub grad_weights: LearnableWeights,
    /// Gradient with respect to each input prototype (`None` when skipped),
    /// before reversal.
    pub grad_features: Vec<Option<Tensor>>,
    /// Hidden branch patterns per prototype, for frozen re-evaluation.
    pub patterns: Vec<Option<Vec<bool>>>,
}

fn check_class_count(prototypes: &[PrototypeFeature], discs: &[Discriminator], w: &LearnableWeights) -> Result<()> {
    if discs.len() != w.len() {
        return Err(CaplError::invalid(format!(
            "{} discriminators but {} class weights",
            discs.len(),
            w.len()
        )));
    }
    if let Some(p) = prototypes
        .iter()
        .find(|p| p.class_id == 0 || p.class_id as usize > discs.len())
    {
        return Err(CaplError::invalid(format!(
            "prototype class {} has no discriminator ({} available)",
            p.class_id,
            discs.len()
        )));
    }
    Ok(())
}

/// `sum_c w_c L_adv(D_c(F_c), label) + 0.01 sum_c s_c` over the non-empty
/// prototypes. Empty prototypes are skipped: they add nothing to the value
/// and produce no gradient for `D_c` or `s_c`.
pub fn class_aware_adv_loss(
    prototypes: &[PrototypeFeature],
    discs: &[Discriminator],
    w: &LearnableWeights,
    label: DomainLabel,
) -> Result<ClassAwareLoss> {
    use crate::params::Parameterized;
    check_class_count(prototypes, discs, w)?;
    let mut out = ClassAwareLoss {
        value: 0.0,
        per_class: vec![None; discs.len()],
        grad_discs: discs.iter().map(|d| d.zeros_like()).collect(),
        grad_weights: w.zeros_like(),
        grad_features: Vec::with_capacity(prototypes.len()),
        patterns: Vec::with_capacity(prototypes.len()),
    };
    for proto in prototypes {
        if proto.is_empty {
            out.grad_features.push(None);
            out.patterns.push(None);
            continue;
        }
        let k = proto.class_id as usize - 1;
        let weight = w.weight(proto.class_id);
        let term = adversarial_term(&proto.features, &discs[k], label, weight)?;
        out.value += weight * term.value + WEIGHT_REG * w.s.data()[k];
        *out.per_class[k].get_or_insert(0.0) += term.value;
        out.grad_discs[k].add_scaled(&term.grad_disc, 1.0);
        out.grad_weights.s.data_mut()[k] += term.value * w.weight_derivative(proto.class_id) + WEIGHT_REG;
        out.grad_features.push(Some(term.grad_features));
        out.patterns.push(Some(term.pattern));
    }
    Ok(out)
}

/// Forward-only value of [`class_aware_adv_loss`] with frozen hidden patterns.
pub fn class_aware_value_frozen(
    prototypes: &[PrototypeFeature],
    discs: &[Discriminator],
    w: &LearnableWeights,
    label: DomainLabel,
    patterns: &[Option<Vec<bool>>],
) -> Result<f64> {
    check_class_count(prototypes, discs, w)?;
    let mut value = 0.0;
    for (proto, pattern) in prototypes.iter().zip(patterns) {
        let (false, Some(pattern)) = (proto.is_empty, pattern) else {
            continue;
        };
        let k = proto.class_id as usize - 1;
        let l = adversarial_value_frozen(&proto.features, &discs[k], label, pattern)?;
        value += w.weight(proto.class_id) * l + WEIGHT_REG * w.s.data()[k];
    }
    Ok(value)
}

/// `L_dis = L_nc_ca + L_np_adv + L_hv_adv`.
pub fn total_discriminator_loss(nc_ca: f64, np_adv: f64, hv_adv: f64) -> f64 {
    nc_ca + np_adv + hv_adv
}

/// `L_s1 = L_F + L_dis`.
pub fn stage1_loss(supervised: f64, discriminator: f64) -> f64 {
    supervised + discriminator
}

/// Backward rule of the reversal layer: `-lambda * upstream`. The forward
/// pass is the identity.
pub fn gradient_reversal(upstream_grad: &Tensor, lambda: f64) -> Tensor {
    upstream_grad.scale(-lambda)
}

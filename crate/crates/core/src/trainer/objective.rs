//! Per-image objectives of both stages, each with an analytic gradient and a
//! forward-only twin that replays frozen rectifier patterns and class masks.

use crate::domain_adapt::{
    adversarial_term, adversarial_value_frozen, class_aware_adv_loss, class_aware_value_frozen,
    class_mask_from_prediction, gradient_reversal, prototype_features, ClassMask, DomainLabel, WEIGHT_REG,
};
use crate::error::Result;
use crate::losses::{supervised_total, BranchPredictions, BranchTargets, SupervisedConfig, SupervisedLoss};
use crate::model::{BranchGrads, BranchOutputs, NetPatterns};
use crate::params::Parameterized;
use crate::pseudo_label::{prototype_loss, PseudoLabelSet};
use crate::synth::SyntheticSample;
use crate::tensor::{hadamard, Tensor};

use super::{AlignMode, DomainModel};

/// Supervised objective of one labelled sample.
pub fn supervised_loss(out: &BranchOutputs, s: &SyntheticSample, cfg: &SupervisedConfig) -> Result<SupervisedLoss> {
    let nc = s.classes.one_hot();
    supervised_total(
        BranchPredictions {
            np: &out.np,
            hv: &out.hv,
            nc: &out.nc,
        },
        BranchTargets {
            np: &s.np_gt,
            hv: &s.hv_gt,
            nc: &nc,
        },
        cfg,
    )
}

/// Adversarial losses of one image against one domain label.
#[derive(Clone, Debug)]
pub struct AdversarialSide {
    pub value: f64,
    /// Discriminator and class-weight gradients; the network part is zero.
    pub grads: DomainModel,
    /// Gradients reaching the branch features, before reversal.
    pub f_np: Tensor,
    pub f_hv: Tensor,
    pub f_nc: Tensor,
    pub freeze: SideFreeze,
}

/// Everything an adversarial evaluation depends on besides the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SideFreeze {
    pub np: Vec<bool>,
    pub hv: Vec<bool>,
    pub nc: NcFreeze,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NcFreeze {
    Agnostic(Vec<bool>),
    Aware {
        masks: Vec<ClassMask>,
        patterns: Vec<Option<Vec<bool>>>,
    },
}

/// Adversarial terms of the branch features of `out`. `mode` must not be
/// [`AlignMode::SourceOnly`].
pub fn adversarial_side(model: &DomainModel, mode: AlignMode, out: &BranchOutputs, label: DomainLabel) -> Result<AdversarialSide> {
    let mut grads = model.zeros_like();
    let np = adversarial_term(&out.f_np, &model.disc_np, label, 1.0)?;
    let hv = adversarial_term(&out.f_hv, &model.disc_hv, label, 1.0)?;
    grads.disc_np = np.grad_disc;
    grads.disc_hv = hv.grad_disc;
    let mut value = np.value + hv.value;
    let (f_nc, nc_freeze) = match mode {
        AlignMode::ClassAgnostic | AlignMode::SourceOnly => {
            let t = adversarial_term(&out.f_nc, &model.disc_nc, label, 1.0)?;
            value += t.value;
            grads.disc_nc = t.grad_disc;
            (t.grad_features, NcFreeze::Agnostic(t.pattern))
        }
        AlignMode::ClassAware => {
            let masks = class_mask_from_prediction(&out.nc)?;
            let protos = masks
                .iter()
                .map(|m| prototype_features(&out.f_nc, m))
                .collect::<Result<Vec<_>>>()?;
            let ca = class_aware_adv_loss(&protos, &model.disc_class, &model.weights, label)?;
            value += ca.value;
            grads.disc_class = ca.grad_discs;
            grads.weights = ca.grad_weights;
            let mut g = Tensor::zeros_like(&out.f_nc);
            for (gf, m) in ca.grad_features.iter().zip(&masks) {
                if let Some(gf) = gf {
                    g.add_scaled(&hadamard(gf, &m.mask)?, 1.0)?;
                }
            }
            (g, NcFreeze::Aware { masks, patterns: ca.patterns })
        }
    };
    Ok(AdversarialSide {
        value,
        grads,
        f_np: np.grad_features,
        f_hv: hv.grad_features,
        f_nc,
        freeze: SideFreeze {
            np: np.pattern,
            hv: hv.pattern,
            nc: nc_freeze,
        },
    })
}

/// Value of [`adversarial_side`] under a recorded freeze.
pub fn adversarial_side_frozen(
    model: &DomainModel,
    out: &BranchOutputs,
    label: DomainLabel,
    freeze: &SideFreeze,
) -> Result<f64> {
    let mut value = adversarial_value_frozen(&out.f_np, &model.disc_np, label, &freeze.np)?
        + adversarial_value_frozen(&out.f_hv, &model.disc_hv, label, &freeze.hv)?;
    value += match &freeze.nc {
        NcFreeze::Agnostic(p) => adversarial_value_frozen(&out.f_nc, &model.disc_nc, label, p)?,
        NcFreeze::Aware { masks, patterns } => {
            let protos = masks
                .iter()
                .map(|m| prototype_features(&out.f_nc, m))
                .collect::<Result<Vec<_>>>()?;
            class_aware_value_frozen(&protos, &model.disc_class, &model.weights, label, patterns)?
        }
    };
    Ok(value)
}

/// The terms of [`adversarial_side_frozen`] before summation: one per
/// discriminator, and for each non-empty class its weighted loss and its
/// regularizer separately.
pub fn adversarial_side_terms(
    model: &DomainModel,
    out: &BranchOutputs,
    label: DomainLabel,
    freeze: &SideFreeze,
) -> Result<Vec<f64>> {
    let mut terms = vec![
        adversarial_value_frozen(&out.f_np, &model.disc_np, label, &freeze.np)?,
        adversarial_value_frozen(&out.f_hv, &model.disc_hv, label, &freeze.hv)?,
    ];
    match &freeze.nc {
        NcFreeze::Agnostic(p) => terms.push(adversarial_value_frozen(&out.f_nc, &model.disc_nc, label, p)?),
        NcFreeze::Aware { masks, patterns } => {
            for (m, p) in masks.iter().zip(patterns) {
                let (false, Some(p)) = (m.is_empty, p) else {
                    continue;
                };
                let proto = prototype_features(&out.f_nc, m)?;
                let k = m.class_id as usize - 1;
                let l = adversarial_value_frozen(&proto.features, &model.disc_class[k], label, p)?;
                terms.push(model.weights.weight(m.class_id) * l);
                terms.push(WEIGHT_REG * model.weights.s.data()[k]);
            }
        }
    }
    Ok(terms)
}

/// Rectifier patterns and adversarial freezes of one source/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFreeze {
    pub source_net: NetPatterns,
    pub target_net: Option<NetPatterns>,
    pub source: Option<SideFreeze>,
    pub target: Option<SideFreeze>,
}

/// Stage-1 losses and gradients of one source sample and one unlabelled
/// target image.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub l_f: f64,
    pub l_dis: f64,
    pub grads: DomainModel,
    pub freeze: PairFreeze,
}

impl PairLoss {
    pub fn total(&self) -> f64 {
        crate::domain_adapt::stage1_loss(self.l_f, self.l_dis)
    }
}

/// `L_F(source) + L_dis(source, target)`. Feature gradients from the
/// discriminators pass through a reversal layer with coefficient `reversal`;
/// `reversal = -1` turns it into the identity. `target = None` (or
/// [`AlignMode::SourceOnly`]) drops the adversarial part.
pub fn stage1_pair(
    model: &DomainModel,
    mode: AlignMode,
    source: &SyntheticSample,
    target: Option<&Tensor>,
    sup: &SupervisedConfig,
    reversal: f64,
) -> Result<PairLoss> {
    let out_s = model.net.forward(&source.image)?;
    let l = supervised_loss(&out_s, source, sup)?;
    let mut grads = model.zeros_like();
    let mut g_s = BranchGrads {
        np: Some(l.grad_np),
        hv: Some(l.grad_hv),
        nc: Some(l.grad_nc),
        ..Default::default()
    };
    let mut l_dis = 0.0;
    let mut freeze = PairFreeze {
        source_net: out_s.patterns.clone(),
        target_net: None,
        source: None,
        target: None,
    };
    let adapt = mode != AlignMode::SourceOnly;
    if let (true, Some(target)) = (adapt, target) {
        let side_s = adversarial_side(model, mode, &out_s, DomainLabel::Source)?;
        g_s.f_np = Some(gradient_reversal(&side_s.f_np, reversal));
        g_s.f_hv = Some(gradient_reversal(&side_s.f_hv, reversal));
        g_s.f_nc = Some(gradient_reversal(&side_s.f_nc, reversal));
        grads.add_scaled(&side_s.grads, 1.0);

        let out_t = model.net.forward(target)?;
        let side_t = adversarial_side(model, mode, &out_t, DomainLabel::Target)?;
        let g_t = BranchGrads {
            f_np: Some(gradient_reversal(&side_t.f_np, reversal)),
            f_hv: Some(gradient_reversal(&side_t.f_hv, reversal)),
            f_nc: Some(gradient_reversal(&side_t.f_nc, reversal)),
            ..Default::default()
        };
        grads.add_scaled(&side_t.grads, 1.0);
        grads.net.add_scaled(&model.net.backward(&out_t, &g_t), 1.0);
        l_dis = side_s.value + side_t.value;
        freeze.target_net = Some(out_t.patterns.clone());
        freeze.source = Some(side_s.freeze);
        freeze.target = Some(side_t.freeze);
    }
    grads.net.add_scaled(&model.net.backward(&out_s, &g_s), 1.0);
    Ok(PairLoss {
        l_f: l.value,
        l_dis,
        grads,
        freeze,
    })
}

/// `(L_F, L_dis)` of [`stage1_pair`] with everything in `freeze` replayed.
pub fn stage1_pair_frozen(
    model: &DomainModel,
    source: &SyntheticSample,
    target: Option<&Tensor>,
    sup: &SupervisedConfig,
    freeze: &PairFreeze,
) -> Result<(f64, f64)> {
    let out_s = model.net.forward_frozen(&source.image, &freeze.source_net)?;
    let l_f = supervised_loss(&out_s, source, sup)?.value;
    let mut l_dis = 0.0;
    if let (Some(target), Some(tp), Some(fs), Some(ft)) = (target, &freeze.target_net, &freeze.source, &freeze.target) {
        let out_t = model.net.forward_frozen(target, tp)?;
        l_dis = adversarial_side_frozen(model, &out_s, DomainLabel::Source, fs)?
            + adversarial_side_frozen(model, &out_t, DomainLabel::Target, ft)?;
    }
    Ok((l_f, l_dis))
}

/// Every summand of [`stage1_pair_frozen`]: the supervised components
/// followed by the adversarial terms of both images.
pub fn stage1_pair_terms(
    model: &DomainModel,
    source: &SyntheticSample,
    target: Option<&Tensor>,
    sup: &SupervisedConfig,
    freeze: &PairFreeze,
) -> Result<Vec<f64>> {
    let out_s = model.net.forward_frozen(&source.image, &freeze.source_net)?;
    let c = supervised_loss(&out_s, source, sup)?.components;
    let mut terms = vec![c.np_ce, c.np_dice, c.hv_mse, c.hv_grad, c.nc_ce, c.nc_dice];
    if let (Some(target), Some(tp), Some(fs), Some(ft)) = (target, &freeze.target_net, &freeze.source, &freeze.target) {
        let out_t = model.net.forward_frozen(target, tp)?;
        terms.extend(adversarial_side_terms(model, &out_s, DomainLabel::Source, fs)?);
        terms.extend(adversarial_side_terms(model, &out_t, DomainLabel::Target, ft)?);
    }
    Ok(terms)
}

/// Stage-2 prototype loss of one target image. Only the HV head receives an
/// upstream gradient, so the NP and NC decoders get exact zeros.
pub fn stage2_image(model: &DomainModel, image: &Tensor, pl: &PseudoLabelSet) -> Result<(f64, DomainModel, NetPatterns)> {
    let out = model.net.forward(image)?;
    let lp = prototype_loss(&out.hv, pl)?;
    let mut grads = model.zeros_like();
    if !pl.prototypes.is_empty() {
        grads.net = model.net.backward(
            &out,
            &BranchGrads {
                hv: Some(lp.grad),
                ..Default::default()
            },
        );
    }
    Ok((lp.value, grads, out.patterns))
}

pub fn stage2_image_frozen(model: &DomainModel, image: &Tensor, pl: &PseudoLabelSet, patterns: &NetPatterns) -> Result<f64> {
    let out = model.net.forward_frozen(image, patterns)?;
    Ok(prototype_loss(&out.hv, pl)?.value)
}

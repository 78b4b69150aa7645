//! Supervised segmentation losses with analytic gradients.
//!
//! Every loss returns a [`LossValue`]: the scalar value and its gradient with
//! respect to the prediction argument.

use serde::{Deserialize, Serialize};

use crate::error::{CaplError, Result};
use crate::sobel::{self, Axis};
use crate::tensor::Tensor;

/// Clamp applied inside the logarithm of the cross-entropy.
pub const LOG_EPS: f64 = 1e-12;
/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-3;
/// Tolerance on per-pixel probability sums.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

impl LossValue {
    pub fn zero_like(pred: &Tensor) -> Self {
        LossValue {
            value: 0.0,
            grad: Tensor::zeros_like(pred),
        }
    }
}

/// Checks that the channels of a `(C, H, W)` tensor sum to one per pixel.
pub fn check_normalized(probs: &Tensor) -> Result<()> {
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    let d = probs.data();
    for i in 0..plane {
        let s: f64 = (0..c).map(|ch| d[ch * plane + i]).sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(CaplError::invalid(format!(
                "probabilities at pixel {i} sum to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Pixel-averaged categorical cross-entropy,
/// `-(1/N) sum_pixels sum_c t log(max(p, eps))`, with `N = H * W`.
pub fn cross_entropy(pred_probs: &Tensor, target_onehot: &Tensor) -> Result<LossValue> {
    check_normalized(pred_probs)?;
    cross_entropy_unchecked(pred_probs, target_onehot)
}

/// [`cross_entropy`] without the normalization check, for callers that
/// perturb individual probabilities (finite differences).
pub fn cross_entropy_unchecked(pred_probs: &Tensor, target_onehot: &Tensor) -> Result<LossValue> {
    let (_, h, w) = pred_probs.chw()?;
    target_onehot.expect_shape(pred_probs.shape())?;
    let n = (h * w) as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros_like(pred_probs);
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred_probs.data())
        .zip(target_onehot.data())
    {
        if t == 0.0 {
            continue;
        }
        let clamped = p.max(LOG_EPS);
        value -= t * clamped.ln();
        if p > LOG_EPS {
            *g = -t / (p * n);
        }
    }
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

/// Global soft Dice loss over all elements:
/// `1 - (2 sum(p q) + s) / (sum p + sum q + s)`.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    target.expect_shape(pred.shape())?;
    let inter: f64 = pred.dot(target)?;
    let sum_p = pred.sum();
    let sum_q = target.sum();
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_q + DICE_SMOOTH;
    let value = 1.0 - num / den;
    // d/dp_i of -(num/den) = -(2 q_i den - num) / den^2
    let den2 = den * den;
    let grad = target.map(|q| -(2.0 * q * den - num) / den2);
    Ok(LossValue { value, grad })
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<LossValue> {
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok(LossValue {
        value,
        grad: diff.scale(2.0 / n),
    })
}

/// How the two directional terms of the HV-gradient loss are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HvSign {
    /// Horizontal term plus vertical term.
    #[default]
    Sum,
    /// Horizontal term minus vertical term, as the formula is sometimes
    /// printed. Not a valid training objective; kept for exactness tests.
    PrintedMinus,
}

/// Squared error between Sobel derivatives of predicted and target HV maps.
///
/// Channel 0 is the horizontal map and is differentiated along x, channel 1
/// is the vertical map and is differentiated along y. Only interior pixels
/// contribute; with a `mask` (`(H, W)`, nonzero = nucleus) only interior mask
/// pixels do. Both terms are averaged over the same contributing count `M`;
/// with `M = 0` the loss is zero.
pub fn hv_gradient_loss(pred_hv: &Tensor, target_hv: &Tensor, mask: Option<&Tensor>) -> Result<LossValue> {
    hv_gradient_loss_with(pred_hv, target_hv, mask, HvSign::Sum)
}

pub fn hv_gradient_loss_with(
    pred_hv: &Tensor,
    target_hv: &Tensor,
    mask: Option<&Tensor>,
    sign: HvSign,
) -> Result<LossValue> {
    let (c, h, w) = pred_hv.chw()?;
    if c != 2 {
        return Err(CaplError::invalid(format!("HV maps need 2 channels, got {c}")));
    }
    if h < 3 || w < 3 {
        return Err(CaplError::invalid(format!("HV maps must be at least 3x3, got {h}x{w}")));
    }
    target_hv.expect_shape(pred_hv.shape())?;
    if let Some(m) = mask {
        if m.hw()? != (h, w) {
            return Err(CaplError::shape(&[h, w], m.shape()));
        }
    }
    let contributes = |i: usize| {
        sobel::is_interior(i / w, i % w, h, w) && mask.map_or(true, |m| m.data()[i] != 0.0)
    };
    let m_count = (0..h * w).filter(|&i| contributes(i)).count();
    let mut grad = Tensor::zeros_like(pred_hv);
    if m_count == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let m = m_count as f64;
    let mut value = 0.0;
    for (ch, axis, weight) in [
        (0, Axis::Horizontal, 1.0),
        (1, Axis::Vertical, if sign == HvSign::Sum { 1.0 } else { -1.0 }),
    ] {
        let gp = sobel::response(pred_hv.channel(ch), h, w, axis);
        let gq = sobel::response(target_hv.channel(ch), h, w, axis);
        let mut upstream = vec![0.0; h * w];
        let mut term = 0.0;
        for i in (0..h * w).filter(|&i| contributes(i)) {
            let d = gp[i] - gq[i];
            term += d * d;
            upstream[i] = weight * 2.0 * d / m;
        }
        value += weight * term / m;
        sobel::accumulate_adjoint(&upstream, h, w, axis, grad.channel_mut(ch));
    }
    Ok(LossValue { value, grad })
}

/// Options shared by the supervised objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    /// Restrict the HV-gradient term to nucleus pixels.
    pub hv_masked: bool,
    pub hv_sign: HvSign,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            hv_masked: true,
            hv_sign: HvSign::Sum,
        }
    }
}

/// Ground truth of one image in the layout the branch heads predict.
#[derive(Clone, Copy, Debug)]
pub struct BranchTargets<'a> {
    /// Binary nucleus mask, `(H, W)`.
    pub np: &'a Tensor,
    /// `(2, H, W)` normalized centroid offsets.
    pub hv: &'a Tensor,
    /// One-hot classes, `(N + 1, H, W)`, channel 0 = background.
    pub nc: &'a Tensor,
}

/// Predictions of one image: NP probabilities `(2, H, W)`, HV `(2, H, W)`,
/// NC probabilities `(N + 1, H, W)`.
#[derive(Clone, Copy, Debug)]
pub struct BranchPredictions<'a> {
    pub np: &'a Tensor,
    pub hv: &'a Tensor,
    pub nc: &'a Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedComponents {
    pub np_ce: f64,
    pub np_dice: f64,
    pub hv_mse: f64,
    pub hv_grad: f64,
    pub nc_ce: f64,
    pub nc_dice: f64,
}

impl SupervisedComponents {
    pub fn total(&self) -> f64 {
        (self.np_ce + self.np_dice) + (self.hv_mse + self.hv_grad) + (self.nc_ce + self.nc_dice)
    }
}

/// Supervised objective of one image with a gradient per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedLoss {
    pub value: f64,
    pub components: SupervisedComponents,
    pub grad_np: Tensor,
    pub grad_hv: Tensor,
    pub grad_nc: Tensor,
}

/// `L_np + L_hover + L_nc` with `L_np = CE + Dice` on the NP head,
/// `L_hover = MSE + HV-gradient` and `L_nc = CE + Dice` on the NC head.
///
/// The NP Dice term compares the foreground channel with the nucleus mask;
/// the NC Dice term compares the class channels `1..=N` (background excluded)
/// with the one-hot classes.
pub fn supervised_total(
    pred: BranchPredictions<'_>,
    gt: BranchTargets<'_>,
    cfg: &SupervisedConfig,
) -> Result<SupervisedLoss> {
    check_normalized(pred.np)?;
    check_normalized(pred.nc)?;
    supervised_total_unchecked(pred, gt, cfg)
}

/// [`supervised_total`] without the probability normalization checks.
pub fn supervised_total_unchecked(
    pred: BranchPredictions<'_>,
    gt: BranchTargets<'_>,
    cfg: &SupervisedConfig,
) -> Result<SupervisedLoss> {
    let (np_c, h, w) = pred.np.chw()?;
    if np_c != 2 {
        return Err(CaplError::invalid(format!("NP head needs 2 channels, got {np_c}")));
    }
    let (nc_c, nh, nw) = pred.nc.chw()?;
    if (nh, nw) != (h, w) || nc_c < 2 {
        return Err(CaplError::shape(&[nc_c.max(2), h, w], pred.nc.shape()));
    }
    pred.hv.expect_shape(&[2, h, w])?;
    if gt.np.hw()? != (h, w) {
        return Err(CaplError::shape(&[h, w], gt.np.shape()));
    }
    gt.nc.expect_shape(pred.nc.shape())?;

    let plane = h * w;
    let np_onehot = {
        let mut d = Vec::with_capacity(2 * plane);
        d.extend(gt.np.data().iter().map(|&m| 1.0 - m));
        d.extend_from_slice(gt.np.data());
        Tensor::from_parts(vec![2, h, w], d)
    };
    let np_ce = cross_entropy_unchecked(pred.np, &np_onehot)?;
    let np_fg = pred.np.channels(1..2);
    let np_dice = dice_loss(&np_fg, &np_onehot.channels(1..2))?;
    let mut grad_np = np_ce.grad;
    for (g, d) in grad_np.channel_mut(1).iter_mut().zip(np_dice.grad.data()) {
        *g += d;
    }

    let hv_mse = mse_loss(pred.hv, gt.hv)?;
    let mask = cfg.hv_masked.then_some(gt.np);
    let hv_grad = hv_gradient_loss_with(pred.hv, gt.hv, mask, cfg.hv_sign)?;
    let grad_hv = hv_mse.grad.add(&hv_grad.grad)?;

    let nc_ce = cross_entropy_unchecked(pred.nc, gt.nc)?;
    let nc_dice = dice_loss(&pred.nc.channels(1..nc_c), &gt.nc.channels(1..nc_c))?;
    let mut grad_nc = nc_ce.grad;
    for (g, d) in grad_nc.data_mut()[plane..].iter_mut().zip(nc_dice.grad.data()) {
        *g += d;
    }

    let components = SupervisedComponents {
        np_ce: np_ce.value,
        np_dice: np_dice.value,
        hv_mse: hv_mse.value,
        hv_grad: hv_grad.value,
        nc_ce: nc_ce.value,
        nc_dice: nc_dice.value,
    };
    Ok(SupervisedLoss {
        value: components.total(),
        components,
        grad_np,
        grad_hv,
        grad_nc,
    })
}

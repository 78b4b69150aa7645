use rand::Rng;

use crate::activation::{leaky, leaky_backward, sigmoid, LOGIT_CLAMP};
use crate::error::{CaplError, Result};
use crate::tensor::Tensor;
use crate::tensor_params;

pub const DISC_HIDDEN: usize = 16;

/// Per-pixel domain classifier: `sigmoid(w2 . leaky(W1 x + b1) + b2)` applied
/// independently at every pixel of a `(C, H, W)` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    /// `(hidden, C)`
    pub w1: Tensor,
    /// `(hidden,)`
    pub b1: Tensor,
    /// `(hidden,)`
    pub w2: Tensor,
    /// `(1,)`
    pub b2: Tensor,
}

tensor_params!(Discriminator { w1, b1, w2, b2 });

/// Cached forward state needed by [`Discriminator::backward`].
#[derive(Clone, Debug)]
pub struct DiscForward {
    /// Domain probability per pixel, `(H, W)`, strictly inside (0, 1).
    pub probs: Tensor,
    pub logits: Vec<f64>,
    /// Hidden activations, `hidden x pixels`.
    hidden: Vec<f64>,
    /// Leaky branch pattern of the hidden layer.
    pub pattern: Vec<bool>,
}

impl Discriminator {
    /// He-style initialization.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, hidden: usize, rng: &mut R) -> Self {
        Discriminator {
            w1: Tensor::random_normal(&[hidden, in_channels], (2.0 / in_channels as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::random_normal(&[hidden], (1.0 / hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[1]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscForward> {
        self.forward_impl(x, None)
    }

    /// Forward pass with the hidden-layer branch pattern imposed.
    pub fn forward_frozen(&self, x: &Tensor, pattern: &[bool]) -> Result<DiscForward> {
        self.forward_impl(x, Some(pattern))
    }

    fn forward_impl(&self, x: &Tensor, frozen: Option<&[bool]>) -> Result<DiscForward> {
        let (c, h, w) = x.chw()?;
        if c != self.in_channels() {
            return Err(CaplError::invalid(format!(
                "discriminator expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let plane = h * w;
        let hid = self.hidden();
        let mut pre = vec![0.0; hid * plane];
        for j in 0..hid {
            let row = &mut pre[j * plane..(j + 1) * plane];
            row.fill(self.b1.data()[j]);
            for ch in 0..c {
                let wv = self.w1.data()[j * c + ch];
                for (r, &xv) in row.iter_mut().zip(x.channel(ch)) {
                    *r += wv * xv;
                }
            }
        }
        let (hidden, pattern) = leaky(&pre, frozen);
        let mut logits = vec![self.b2.data()[0]; plane];
        for j in 0..hid {
            let wv = self.w2.data()[j];
            for (l, &a) in logits.iter_mut().zip(&hidden[j * plane..(j + 1) * plane]) {
                *l += wv * a;
            }
        }
        let probs = Tensor::from_parts(vec![h, w], logits.iter().map(|&z| sigmoid(z)).collect());
        Ok(DiscForward {
            probs,
            logits,
            hidden,
            pattern,
        })
    }

    /// Backpropagates `grad_probs` (`(H, W)`, dL/dp). Returns the parameter
    /// gradient and the gradient with respect to the input features.
    pub fn backward(&self, x: &Tensor, fwd: &DiscForward, grad_probs: &Tensor) -> (Discriminator, Tensor) {
        let (c, _, _) = x.chw().expect("checked in forward");
        let plane = fwd.logits.len();
        let hid = self.hidden();
        let dlogit: Vec<f64> = fwd
            .logits
            .iter()
            .zip(fwd.probs.data())
            .zip(grad_probs.data())
            .map(|((&z, &p), &g)| if z.abs() >= LOGIT_CLAMP { 0.0 } else { g * p * (1.0 - p) })
            .collect();
        let mut grad = self.zeros_like_params();
        grad.b2.data_mut()[0] = dlogit.iter().sum();
        let mut dpre = vec![0.0; hid * plane];
        for j in 0..hid {
            let a = &fwd.hidden[j * plane..(j + 1) * plane];
            grad.w2.data_mut()[j] = a.iter().zip(&dlogit).map(|(x, y)| x * y).sum();
            let wv = self.w2.data()[j];
            for (d, &g) in dpre[j * plane..(j + 1) * plane].iter_mut().zip(&dlogit) {
                *d = wv * g;
            }
        }
        leaky_backward(&mut dpre, &fwd.pattern);
        let mut grad_x = Tensor::zeros_like(x);
        for j in 0..hid {
            let dz = &dpre[j * plane..(j + 1) * plane];
            grad.b1.data_mut()[j] = dz.iter().sum();
            for ch in 0..c {
                grad.w1.data_mut()[j * c + ch] = dz.iter().zip(x.channel(ch)).map(|(a, b)| a * b).sum();
                let wv = self.w1.data()[j * c + ch];
                for (gx, &d) in grad_x.channel_mut(ch).iter_mut().zip(dz) {
                    *gx += wv * d;
                }
            }
        }
        (grad, grad_x)
    }

    fn zeros_like_params(&self) -> Discriminator {
        Discriminator {
            w1: Tensor::zeros_like(&self.w1),
            b1: Tensor::zeros_like(&self.b1),
            w2: Tensor::zeros_like(&self.w2),
            b2: Tensor::zeros_like(&self.b2),
        }
    }
}

//! A miniature three-branch network with hand-written backpropagation.
//!
//! Shared encoder: two 3x3 convolutions (3 -> 8 -> 16) with leaky
//! rectifiers. Each branch: a 3x3 convolution 16 -> 8 with a leaky rectifier
//! (the branch features consumed by discriminators), then a 3x3 head. NP and
//! NC heads end in a softmax over channels, the HV head in `tanh`.

use rand::Rng;

use crate::activation::{leaky, leaky_backward};
use crate::error::{CaplError, Result};
use crate::params::{join, Parameterized};
use crate::tensor::Tensor;
use crate::tensor_params;
use crate::NUM_CLASSES;

pub const IN_CHANNELS: usize = 3;
pub const ENC1: usize = 8;
pub const ENC2: usize = 16;
/// Channels of every branch feature map.
pub const BRANCH_FEATURES: usize = 8;
pub const NP_OUT: usize = 2;
pub const HV_OUT: usize = 2;
pub const NC_OUT: usize = NUM_CLASSES + 1;
/// HV logits are clamped here so that `tanh` stays strictly inside (-1, 1).
pub const HV_LOGIT_CLAMP: f64 = 18.0;

/// 3x3 convolution with zero padding and unit stride.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3 {
    /// `(out, in, 3, 3)`
    pub w: Tensor,
    /// `(out,)`
    pub b: Tensor,
}

tensor_params!(Conv3 { w, b });

impl Conv3 {
    /// He-style initialization for a rectifier that follows.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        Conv3 {
            w: Tensor::random_normal(&[cout, cin, 3, 3], std, rng),
            b: Tensor::zeros(&[cout]),
        }
    }

    pub fn cin(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (cin, h, w) = x.chw()?;
        if cin != self.cin() {
            return Err(CaplError::invalid(format!("convolution expects {} channels, got {cin}", self.cin())));
        }
        let cout = self.cout();
        let xp = pad(x.data(), cin, h, w);
        let (pw, span) = (w + 2, h * (w + 2) - 2);
        let pplane = (h + 2) * pw;
        let wd = self.w.data();
        // output rows use the padded row stride; the last two columns of
        // each row are scratch and dropped afterwards
        let mut wide = vec![0.0; cout * h * pw];
        for o in 0..cout {
            let op = &mut wide[o * h * pw..o * h * pw + span];
            op.fill(self.b.data()[o]);
            for i in 0..cin {
                let ip = &xp[i * pplane..(i + 1) * pplane];
                let base = (o * cin + i) * 9;
                taps9(op, ip, &wd[base..base + 9], [0, 1, 2, pw, pw + 1, pw + 2, 2 * pw, 2 * pw + 1, 2 * pw + 2]);
            }
        }
        Ok(Tensor::from_parts(vec![cout, h, w], narrow(&wide, cout, h, w)))
    }

    /// Parameter gradient and, when `need_input`, the input gradient.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, need_input: bool) -> (Conv3, Option<Tensor>) {
        let (cin, h, w) = x.chw().expect("checked in forward");
        let cout = self.cout();
        let xp = pad(x.data(), cin, h, w);
        let (pw, span) = (w + 2, h * (w + 2) - 2);
        let pplane = (h + 2) * pw;
        let gwide = widen(grad_out.data(), cout, h, w);
        let wd = self.w.data();
        let mut gw = vec![0.0; self.w.len()];
        let mut gb = vec![0.0; cout];
        let lead = 2 * pw + 2;
        let mut gxp = need_input.then(|| vec![0.0; cin * pplane]);
        // the upstream gradient shifted right by `lead`, so the input
        // gradient is again a forward correlation with offsets `lead - off`
        let mut shifted = vec![0.0; pplane + lead];
        let back = [lead, lead - 1, lead - 2, lead - pw, lead - pw - 1, lead - pw - 2, 2, 1, 0];
        for o in 0..cout {
            let go = &gwide[o * h * pw..o * h * pw + span];
            gb[o] = go.iter().sum();
            for i in 0..cin {
                let ip = &xp[i * pplane..(i + 1) * pplane];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let off = dy * pw + dx;
                        gw[(o * cin + i) * 9 + dy * 3 + dx] += dot(go, &ip[off..off + span]);
                    }
                }
            }
            if let Some(gxp) = gxp.as_mut() {
                shifted[lead..lead + span].copy_from_slice(go);
                for i in 0..cin {
                    let base = (o * cin + i) * 9;
                    taps9(&mut gxp[i * pplane..(i + 1) * pplane], &shifted, &wd[base..base + 9], back);
                }
            }
        }
        (
            Conv3 {
                w: Tensor::from_parts(self.w.shape().to_vec(), gw),
                b: Tensor::from_parts(vec![cout], gb),
            },
            gxp.map(|g| Tensor::from_parts(vec![cin, h, w], unpad(&g, cin, h, w))),
        )
    }
}

/// `dst[j] += sum_t k[t] * src[j + off[t]]` for every `j` in `dst`.
#[inline]
fn taps9(dst: &mut [f64], src: &[f64], k: &[f64], off: [usize; 9]) {
    let n = dst.len();
    let s: [&[f64]; 9] = off.map(|o| &src[o..o + n]);
    let k: [f64; 9] = k.try_into().expect("nine taps");
    for j in 0..n {
        dst[j] += k[0] * s[0][j]
            + k[1] * s[1][j]
            + k[2] * s[2][j]
            + k[3] * s[3][j]
            + k[4] * s[4][j]
            + k[5] * s[5][j]
            + k[6] * s[6][j]
            + k[7] * s[7][j]
            + k[8] * s[8][j];
    }
}

/// Dot product with eight independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Copies `(c, h, w)` into a zero border of one pixel.
fn pad(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = vec![0.0; c * (h + 2) * pw];
    for ch in 0..c {
        for r in 0..h {
            let dst = (ch * (h + 2) + r + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(&x[(ch * h + r) * w..(ch * h + r + 1) * w]);
        }
    }
    out
}

fn unpad(xp: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in 0..h {
            let src = (ch * (h + 2) + r + 1) * pw + 1;
            out.extend_from_slice(&xp[src..src + w]);
        }
    }
    out
}

/// `(c, h, w)` rows laid out with stride `w + 2`, scratch columns zero.
fn widen(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = vec![0.0; c * h * pw];
    for row in 0..c * h {
        out[row * pw..row * pw + w].copy_from_slice(&x[row * w..(row + 1) * w]);
    }
    out
}

fn narrow(wide: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = w + 2;
    let mut out = Vec::with_capacity(c * h * w);
    for row in 0..c * h {
        out.extend_from_slice(&wide[row * pw..row * pw + w]);
    }
    out
}

/// Which branches a gradient or update touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Np,
    Hv,
    Nc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyHoverNet {
    pub enc1: Conv3,
    pub enc2: Conv3,
    pub np_dec: Conv3,
    pub np_head: Conv3,
    pub hv_dec: Conv3,
    pub hv_head: Conv3,
    pub nc_dec: Conv3,
    pub nc_head: Conv3,
}

impl TinyHoverNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let head = |cout: usize, rng: &mut R| {
            let mut c = Conv3::new(BRANCH_FEATURES, cout, rng);
            c.w = c.w.scale((0.5f64).sqrt());
            c
        };
        TinyHoverNet {
            enc1: Conv3::new(IN_CHANNELS, ENC1, rng),
            enc2: Conv3::new(ENC1, ENC2, rng),
            np_dec: Conv3::new(ENC2, BRANCH_FEATURES, rng),
            np_head: head(NP_OUT, rng),
            hv_dec: Conv3::new(ENC2, BRANCH_FEATURES, rng),
            hv_head: head(HV_OUT, rng),
            nc_dec: Conv3::new(ENC2, BRANCH_FEATURES, rng),
            nc_head: head(NC_OUT, rng),
        }
    }

    const PARTS: [&'static str; 8] = ["enc1", "enc2", "np_dec", "np_head", "hv_dec", "hv_head", "nc_dec", "nc_head"];

    fn parts(&self) -> [&Conv3; 8] {
        [
            &self.enc1,
            &self.enc2,
            &self.np_dec,
            &self.np_head,
            &self.hv_dec,
            &self.hv_head,
            &self.nc_dec,
            &self.nc_head,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Conv3; 8] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.np_dec,
            &mut self.np_head,
            &mut self.hv_dec,
            &mut self.hv_head,
            &mut self.nc_dec,
            &mut self.nc_head,
        ]
    }

    /// Whether a parameter name (as produced by [`Parameterized::named`])
    /// belongs to the decoder of `branch`.
    pub fn is_branch_param(name: &str, branch: Branch) -> bool {
        let p = match branch {
            Branch::Np => "np_",
            Branch::Hv => "hv_",
            Branch::Nc => "nc_",
        };
        name.starts_with(p)
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc")
    }

    pub fn forward(&self, image: &Tensor) -> Result<BranchOutputs> {
        self.forward_impl(image, None)
    }

    /// Forward pass with every rectifier's branch pattern imposed.
    pub fn forward_frozen(&self, image: &Tensor, patterns: &NetPatterns) -> Result<BranchOutputs> {
        self.forward_impl(image, Some(patterns))
    }

    fn forward_impl(&self, image: &Tensor, frozen: Option<&NetPatterns>) -> Result<BranchOutputs> {
        let (c, h, w) = image.chw()?;
        if c != IN_CHANNELS {
            return Err(CaplError::invalid(format!("image needs {IN_CHANNELS} channels, got {c}")));
        }
        let act = |conv: &Conv3, x: &Tensor, p: Option<&Vec<bool>>| -> Result<(Tensor, Vec<bool>)> {
            let pre = conv.forward(x)?;
            let shape = pre.shape().to_vec();
            let (a, pat) = leaky(pre.data(), p.map(|v| v.as_slice()));
            Ok((Tensor::from_parts(shape, a), pat))
        };
        let (a1, p1) = act(&self.enc1, image, frozen.map(|f| &f.enc1))?;
        let (a2, p2) = act(&self.enc2, &a1, frozen.map(|f| &f.enc2))?;
        let (f_np, pn) = act(&self.np_dec, &a2, frozen.map(|f| &f.np))?;
        let (f_hv, ph) = act(&self.hv_dec, &a2, frozen.map(|f| &f.hv))?;
        let (f_nc, pc) = act(&self.nc_dec, &a2, frozen.map(|f| &f.nc))?;
        let np = softmax_channels(&self.np_head.forward(&f_np)?);
        let hv = self.hv_head.forward(&f_hv)?.map(|z| z.clamp(-HV_LOGIT_CLAMP, HV_LOGIT_CLAMP).tanh());
        let nc = softmax_channels(&self.nc_head.forward(&f_nc)?);
        debug_assert_eq!(np.shape(), &[NP_OUT, h, w]);
        Ok(BranchOutputs {
            np,
            hv,
            nc,
            f_np,
            f_hv,
            f_nc,
            image: image.clone(),
            a1,
            a2,
            patterns: NetPatterns {
                enc1: p1,
                enc2: p2,
                np: pn,
                hv: ph,
                nc: pc,
            },
        })
    }

    /// Backpropagates branch-output and branch-feature gradients to every
    /// parameter. Branches without any upstream gradient are skipped and
    /// receive exact zeros.
    pub fn backward(&self, out: &BranchOutputs, g: &BranchGrads) -> TinyHoverNet {
        let mut grad = self.zeros_like();
        let mut d_a2: Option<Tensor> = None;
        let branches: [(Branch, &Conv3, &Conv3, &Tensor, &Vec<bool>, Option<Tensor>, Option<&Tensor>); 3] = [
            (
                Branch::Np,
                &self.np_dec,
                &self.np_head,
                &out.f_np,
                &out.patterns.np,
                g.np.as_ref().map(|d| softmax_backward(&out.np, d)),
                g.f_np.as_ref(),
            ),
            (
                Branch::Hv,
                &self.hv_dec,
                &self.hv_head,
                &out.f_hv,
                &out.patterns.hv,
                g.hv.as_ref().map(|d| tanh_backward(&out.hv, d)),
                g.f_hv.as_ref(),
            ),
            (
                Branch::Nc,
                &self.nc_dec,
                &self.nc_head,
                &out.f_nc,
                &out.patterns.nc,
                g.nc.as_ref().map(|d| softmax_backward(&out.nc, d)),
                g.f_nc.as_ref(),
            ),
        ];
        for (branch, dec, head, feat, pattern, d_logits, d_feat) in branches {
            if d_logits.is_none() && d_feat.is_none() {
                continue;
            }
            let mut d_f = Tensor::zeros_like(feat);
            if let Some(dz) = d_logits {
                let (gh, gf) = head.backward(feat, &dz, true);
                *grad.head_mut(branch) = gh;
                d_f = gf.expect("requested");
            }
            if let Some(extra) = d_feat {
                d_f.add_scaled(extra, 1.0).expect("feature gradient shape");
            }
            let mut d_pre = d_f.into_data();
            leaky_backward(&mut d_pre, pattern);
            let d_pre = Tensor::from_parts(feat.shape().to_vec(), d_pre);
            let (gd, ga) = dec.backward(&out.a2, &d_pre, true);
            *grad.dec_mut(branch) = gd;
            let ga = ga.expect("requested");
            match d_a2.as_mut() {
                Some(acc) => acc.add_scaled(&ga, 1.0).expect("same shape"),
                None => d_a2 = Some(ga),
            }
        }
        let Some(d_a2) = d_a2 else {
            return grad;
        };
        let mut d = d_a2.into_data();
        leaky_backward(&mut d, &out.patterns.enc2);
        let d = Tensor::from_parts(out.a2.shape().to_vec(), d);
        let (g2, ga1) = self.enc2.backward(&out.a1, &d, true);
        grad.enc2 = g2;
        let mut d = ga1.expect("requested").into_data();
        leaky_backward(&mut d, &out.patterns.enc1);
        let d = Tensor::from_parts(out.a1.shape().to_vec(), d);
        grad.enc1 = self.enc1.backward(&out.image, &d, false).0;
        grad
    }

    fn head_mut(&mut self, b: Branch) -> &mut Conv3 {
        match b {
            Branch::Np => &mut self.np_head,
            Branch::Hv => &mut self.hv_head,
            Branch::Nc => &mut self.nc_head,
        }
    }

    fn dec_mut(&mut self, b: Branch) -> &mut Conv3 {
        match b {
            Branch::Np => &mut self.np_dec,
            Branch::Hv => &mut self.hv_dec,
            Branch::Nc => &mut self.nc_dec,
        }
    }
}

impl Parameterized for TinyHoverNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (name, part) in Self::PARTS.iter().zip(self.parts()) {
            part.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, part) in Self::PARTS.iter().zip(self.parts_mut()) {
            part.visit_mut(&join(prefix, name), f);
        }
    }
}

/// Rectifier branch patterns of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NetPatterns {
    pub enc1: Vec<bool>,
    pub enc2: Vec<bool>,
    pub np: Vec<bool>,
    pub hv: Vec<bool>,
    pub nc: Vec<bool>,
}

/// Predictions, branch features and the cached activations of one image.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    /// `(2, H, W)` probabilities.
    pub np: Tensor,
    /// `(2, H, W)` in (-1, 1).
    pub hv: Tensor,
    /// `(N + 1, H, W)` probabilities, channel 0 = background.
    pub nc: Tensor,
    /// `(8, H, W)` features before each head.
    pub f_np: Tensor,
    pub f_hv: Tensor,
    pub f_nc: Tensor,
    image: Tensor,
    a1: Tensor,
    a2: Tensor,
    pub patterns: NetPatterns,
}

impl BranchOutputs {
    pub fn np_foreground(&self) -> Tensor {
        let (_, h, w) = self.np.chw().expect("rank 3");
        Tensor::from_parts(vec![h, w], self.np.channel(1).to_vec())
    }
}

/// Upstream gradients of one image's outputs; `None` means zero.
#[derive(Clone, Debug, Default)]
pub struct BranchGrads {
    pub np: Option<Tensor>,
    pub hv: Option<Tensor>,
    pub nc: Option<Tensor>,
    pub f_np: Option<Tensor>,
    pub f_hv: Option<Tensor>,
    pub f_nc: Option<Tensor>,
}

/// Softmax over the channel axis of `(C, H, W)` logits.
pub fn softmax_channels(z: &Tensor) -> Tensor {
    let (c, h, w) = z.chw().expect("rank 3");
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for i in 0..plane {
        let m = (0..c).map(|k| z.data()[k * plane + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for k in 0..c {
            let e = (z.data()[k * plane + i] - m).exp();
            out[k * plane + i] = e;
            s += e;
        }
        for k in 0..c {
            out[k * plane + i] /= s;
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

/// Logit gradient from a probability gradient: `p_k (g_k - sum_j p_j g_j)`.
pub fn softmax_backward(p: &Tensor, g: &Tensor) -> Tensor {
    let (c, h, w) = p.chw().expect("rank 3");
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for i in 0..plane {
        let dot: f64 = (0..c).map(|k| p.data()[k * plane + i] * g.data()[k * plane + i]).sum();
        for k in 0..c {
            out[k * plane + i] = p.data()[k * plane + i] * (g.data()[k * plane + i] - dot);
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

fn tanh_backward(y: &Tensor, g: &Tensor) -> Tensor {
    // saturated (clamped) logits pass no gradient
    let limit = HV_LOGIT_CLAMP.tanh();
    y.zip_map(g, |y, g| if y.abs() >= limit { 0.0 } else { g * (1.0 - y * y) })
        .expect("same shape")
}

#[cfg(test)]
mod tests;

use rand::Rng;

use super::*;
use crate::gradcheck;
use crate::rng::SeedStream;

fn net(seed: u64) -> TinyHoverNet {
    TinyHoverNet::new(&mut SeedStream::new(seed).rng())
}

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::random_uniform(&[3, h, w], 0.0, 1.0, &mut SeedStream::new(seed).rng())
}

#[test]
fn zero_image_gives_normalized_outputs() {
    let out = net(1).forward(&Tensor::zeros(&[3, 6, 5])).unwrap();
    for t in [&out.np, &out.nc] {
        let (c, h, w) = t.chw().unwrap();
        for i in 0..h * w {
            let s: f64 = (0..c).map(|k| t.data()[k * h * w + i]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
    assert!(out.hv.is_finite() && out.hv.data().iter().all(|v| v.abs() < 1.0));
    assert_eq!(out.nc.shape(), &[7, 6, 5]);
    assert_eq!(out.f_nc.shape(), &[8, 6, 5]);
    assert!(net(1).forward(&Tensor::zeros(&[2, 6, 5])).is_err());
}

#[test]
fn forward_is_deterministic() {
    let n = net(4);
    let x = image(9, 9, 2);
    let (a, b) = (n.forward(&x).unwrap(), n.forward(&x).unwrap());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.np), bits(&b.np));
    assert_eq!(bits(&a.hv), bits(&b.hv));
    assert_eq!(bits(&a.nc), bits(&b.nc));
    assert_eq!(net(4), net(4));
    assert_ne!(net(4), net(5));
}

/// Straight-line 3x3 zero-padded convolution.
fn conv_ref(c: &Conv3, x: &Tensor) -> Tensor {
    let (cin, h, w) = x.chw().unwrap();
    let cout = c.cout();
    let mut out = Tensor::zeros(&[cout, h, w]);
    for o in 0..cout {
        for r in 0..h as isize {
            for col in 0..w as isize {
                let mut acc = c.b.data()[o];
                for i in 0..cin {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (sr, sc) = (r + dy, col + dx);
                            if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                                continue;
                            }
                            let wi = ((o * cin + i) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize;
                            acc += c.w.data()[wi] * x.data()[(i * h + sr as usize) * w + sc as usize];
                        }
                    }
                }
                out.data_mut()[(o * h + r as usize) * w + col as usize] = acc;
            }
        }
    }
    out
}

fn leaky_ref(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { 0.1 * v })
}

fn softmax_ref(z: &Tensor) -> Tensor {
    let (c, h, w) = z.chw().unwrap();
    let mut out = z.clone();
    for i in 0..h * w {
        let s: f64 = (0..c).map(|k| z.data()[k * h * w + i].exp()).sum();
        for k in 0..c {
            out.data_mut()[k * h * w + i] = z.data()[k * h * w + i].exp() / s;
        }
    }
    out
}

#[test]
fn forward_matches_layer_by_layer_reference() {
    for seed in 0..5 {
        let n = net(seed);
        let x = image(5, 7, seed + 100);
        let out = n.forward(&x).unwrap();
        let a2 = leaky_ref(&conv_ref(&n.enc2, &leaky_ref(&conv_ref(&n.enc1, &x))));
        let f_np = leaky_ref(&conv_ref(&n.np_dec, &a2));
        let f_hv = leaky_ref(&conv_ref(&n.hv_dec, &a2));
        let f_nc = leaky_ref(&conv_ref(&n.nc_dec, &a2));
        let close = |a: &Tensor, b: &Tensor| a.sub(b).unwrap().max_abs() < 1e-12;
        assert!(close(&out.f_np, &f_np) && close(&out.f_hv, &f_hv) && close(&out.f_nc, &f_nc));
        assert!(close(&out.np, &softmax_ref(&conv_ref(&n.np_head, &f_np))));
        assert!(close(&out.hv, &conv_ref(&n.hv_head, &f_hv).map(f64::tanh)));
        assert!(close(&out.nc, &softmax_ref(&conv_ref(&n.nc_head, &f_nc))));
    }
}

#[test]
fn conv_backward_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = SeedStream::new(seed).rng();
        let c = Conv3::new(rng.gen_range(1..4), rng.gen_range(1..4), &mut rng);
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let x = Tensor::random_normal(&[c.cin(), h, w], 1.0, &mut rng);
        let up = Tensor::random_normal(&[c.cout(), h, w], 1.0, &mut rng);
        let (g, gx) = c.backward(&x, &up, true);
        let err = gradcheck::check(&x, &gx.unwrap(), |x| c.forward(x).unwrap().dot(&up).unwrap());
        assert!(err < gradcheck::MAX_REL_ERROR, "input {err}");
        let err = gradcheck::check(&c.w, &g.w, |wt| {
            Conv3 { w: wt.clone(), b: c.b.clone() }.forward(&x).unwrap().dot(&up).unwrap()
        });
        assert!(err < gradcheck::MAX_REL_ERROR, "weights {err}");
        let err = gradcheck::check(&c.b, &g.b, |bt| {
            Conv3 { w: c.w.clone(), b: bt.clone() }.forward(&x).unwrap().dot(&up).unwrap()
        });
        assert!(err < gradcheck::MAX_REL_ERROR, "bias {err}");
    }
}

/// Random linear functional of every output and feature map.
struct Probe {
    np: Tensor,
    hv: Tensor,
    nc: Tensor,
    f_np: Tensor,
    f_hv: Tensor,
    f_nc: Tensor,
}

impl Probe {
    fn new(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let mut t = |c: usize| Tensor::random_normal(&[c, h, w], 1.0, rng);
        Probe {
            np: t(2),
            hv: t(2),
            nc: t(7),
            f_np: t(8),
            f_hv: t(8),
            f_nc: t(8),
        }
    }

    fn value(&self, o: &BranchOutputs) -> f64 {
        o.np.dot(&self.np).unwrap()
            + o.hv.dot(&self.hv).unwrap()
            + o.nc.dot(&self.nc).unwrap()
            + o.f_np.dot(&self.f_np).unwrap()
            + o.f_hv.dot(&self.f_hv).unwrap()
            + o.f_nc.dot(&self.f_nc).unwrap()
    }

    fn grads(&self) -> BranchGrads {
        BranchGrads {
            np: Some(self.np.clone()),
            hv: Some(self.hv.clone()),
            nc: Some(self.nc.clone()),
            f_np: Some(self.f_np.clone()),
            f_hv: Some(self.f_hv.clone()),
            f_nc: Some(self.f_nc.clone()),
        }
    }
}

#[test]
fn network_backward_matches_finite_differences() {
    for seed in 0..3 {
        let n = net(seed);
        let x = image(4, 5, seed + 7);
        let mut rng = SeedStream::new(seed + 99).rng();
        let probe = Probe::new(4, 5, &mut rng);
        let out = n.forward(&x).unwrap();
        let grad = n.backward(&out, &probe.grads());
        let patterns = out.patterns.clone();
        let analytic: Vec<f64> = grad.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let flat = Tensor::from_vec(n.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect());
        let err = gradcheck::check(&flat, &Tensor::from_vec(analytic), |v| {
            let mut m = n.clone();
            let mut k = 0;
            m.visit_mut("", &mut |_, t| {
                let len = t.len();
                t.data_mut().copy_from_slice(&v.data()[k..k + len]);
                k += len;
            });
            probe.value(&m.forward_frozen(&x, &patterns).unwrap())
        });
        assert!(err < gradcheck::MAX_REL_ERROR, "seed {seed}: {err}");
    }
}

#[test]
fn hv_only_gradient_leaves_other_decoders_zero() {
    let n = net(3);
    let out = n.forward(&image(6, 6, 1)).unwrap();
    let g = n.backward(
        &out,
        &BranchGrads {
            hv: Some(Tensor::full(&[2, 6, 6], 0.3)),
            ..Default::default()
        },
    );
    for (name, t) in g.named() {
        let touched = TinyHoverNet::is_branch_param(&name, Branch::Hv) || TinyHoverNet::is_encoder_param(&name);
        if !touched {
            assert_eq!(t.max_abs(), 0.0, "{name}");
        }
    }
    assert!(g.hv_head.w.max_abs() > 0.0 && g.enc1.w.max_abs() > 0.0);
}

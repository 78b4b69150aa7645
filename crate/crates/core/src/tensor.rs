//! Dense row-major tensors of `f64`.
//!
//! Image-like tensors are laid out channel-first, `(C, H, W)`, with the last
//! axis contiguous. Every module in the crate relies on this ordering.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CaplError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(CaplError::invalid(format!(
                "tensor extents must be >= 1 with rank >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CaplError::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an invalid shape; for internal callers whose shapes are
    /// known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(C, H, W)` extents of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(CaplError::invalid(format!(
                "expected a (C,H,W) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(H, W)` extents of a rank-2 tensor, or of a single-channel rank-3 one.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] | [1, h, w] => Ok((h, w)),
            _ => Err(CaplError::invalid(format!(
                "expected an (H,W) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Channel `c` of a `(C, H, W)` tensor as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1..].iter().product::<usize>();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape[1..].iter().product::<usize>();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Copies channels `range` of a `(C, H, W)` tensor.
    pub fn channels(&self, range: std::ops::Range<usize>) -> Tensor {
        let plane = self.shape[1..].iter().product::<usize>();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Tensor::from_parts(shape, self.data[range.start * plane..range.end * plane].to_vec())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape())?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    /// `self += k * other`, in place.
    pub fn add_scaled(&mut self, other: &Tensor, k: f64) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(CaplError::shape(shape, &self.shape));
        }
        Ok(())
    }
}

/// Elementwise product.
///
/// `b` may either match `a` exactly or be a single-channel mask (`(H, W)` or
/// `(1, H, W)`) that is broadcast across the channel axis of a `(C, H, W)`
/// tensor `a`.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| x * y);
    }
    let (c, h, w) = a.chw().map_err(|_| CaplError::shape(a.shape(), b.shape()))?;
    let mask_ok = matches!(b.shape(), [bh, bw] | [1, bh, bw] if *bh == h && *bw == w);
    if !mask_ok {
        return Err(CaplError::shape(a.shape(), b.shape()));
    }
    let plane = h * w;
    let mut out = a.data().to_vec();
    for ch in 0..c {
        for (v, &m) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(b.data()) {
            *v *= m;
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn hadamard_examples() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let ones = Tensor::from_vec(vec![1.0; 3]);
        let zeros = Tensor::from_vec(vec![0.0; 3]);
        assert_eq!(hadamard(&a, &ones).unwrap(), a);
        assert_eq!(hadamard(&a, &zeros).unwrap(), zeros);

        let a = Tensor::from_vec(vec![2.0, -1.0, 4.0]);
        let b = Tensor::from_vec(vec![0.5, 2.0, 0.0]);
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[1.0, -2.0, 0.0]);
    }

    #[test]
    fn hadamard_broadcasts_single_channel_mask() {
        let a = Tensor::from_fn(&[2, 2, 2], |i| i as f64 + 1.0);
        let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = hadamard(&a, &mask).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 4.0, 5.0, 0.0, 0.0, 8.0]);
        let mask3 = mask.clone().reshape(&[1, 2, 2]).unwrap();
        assert_eq!(hadamard(&a, &mask3).unwrap(), out);
    }

    #[test]
    fn hadamard_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3, 3]);
        assert!(hadamard(&a, &Tensor::zeros(&[3, 2])).is_err());
        assert!(hadamard(&a, &Tensor::zeros(&[2, 3, 2])).is_err());
        assert!(hadamard(&Tensor::zeros(&[3]), &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn seeded_fill_is_reproducible() {
        let a = Tensor::random_normal(&[3, 4, 4], 1.0, &mut SeedStream::new(9).rng());
        let b = Tensor::random_normal(&[3, 4, 4], 1.0, &mut SeedStream::new(9).rng());
        assert_eq!(a, b);
        let c = Tensor::random_normal(&[3, 4, 4], 1.0, &mut SeedStream::new(10).rng());
        assert_ne!(a, c);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-100.0..100.0f64, n)
        }

        proptest! {
            #[test]
            fn hadamard_commutes_and_associates((a, b, c) in (1usize..20).prop_flat_map(|n| (vec3(n), vec3(n), vec3(n)))) {
                let (a, b, c) = (Tensor::from_vec(a), Tensor::from_vec(b), Tensor::from_vec(c));
                prop_assert_eq!(hadamard(&a, &b).unwrap(), hadamard(&b, &a).unwrap());
                // Products of three reals can round differently by association,
                // so compare within one ulp-scale tolerance.
                let l = hadamard(&hadamard(&a, &b).unwrap(), &c).unwrap();
                let r = hadamard(&a, &hadamard(&b, &c).unwrap()).unwrap();
                for (x, y) in l.data().iter().zip(r.data()) {
                    prop_assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0) * 4.0);
                }
            }
        }
    }
}

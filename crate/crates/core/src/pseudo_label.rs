//! Nuclei-level HV prototypes built from stage-1 predictions, and the
//! prototype loss used for self-training on the target domain.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caplt;
use crate::error::{CaplError, Result};
use crate::labels::InstanceLabelMap;
use crate::losses::LossValue;
use crate::tensor::Tensor;

/// Pseudo-instances smaller than this are treated as watershed speckle.
pub const PSEUDO_MIN_PX: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NucleusPrototype {
    pub instance_id: u32,
    /// `(row, col)` in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// `(2, n)` target HV values at `pixels`, in [-1, 1].
    pub target_hv: Tensor,
    /// Mean of `target_hv` over the pixels.
    pub prototype_vec: [f64; 2],
}

impl NucleusPrototype {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub image_id: String,
    pub instance_map: InstanceLabelMap,
    /// One per instance, in ascending id order.
    pub prototypes: Vec<NucleusPrototype>,
}

/// Records the stage-1 HV prediction, clamped to [-1, 1], at the pixels of
/// every stage-1 instance.
pub fn build_pseudo_labels(stage1_hv: &Tensor, stage1_instances: &InstanceLabelMap) -> Result<PseudoLabelSet> {
    let (h, w) = (stage1_instances.height(), stage1_instances.width());
    stage1_hv.expect_shape(&[2, h, w])?;
    let plane = h * w;
    let mut sets: Vec<(u32, Vec<usize>)> = stage1_instances.pixel_sets().into_iter().collect();
    sets.sort_unstable_by_key(|(l, _)| *l);
    let prototypes = sets
        .into_iter()
        .map(|(id, mut idx)| {
            idx.sort_unstable();
            let n = idx.len();
            let mut target = Vec::with_capacity(2 * n);
            for ch in 0..2 {
                target.extend(idx.iter().map(|&i| stage1_hv.data()[ch * plane + i].clamp(-1.0, 1.0)));
            }
            let mean = |ch: usize| target[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64;
            let prototype_vec = [mean(0), mean(1)];
            NucleusPrototype {
                instance_id: id,
                pixels: idx.iter().map(|&i| (i / w, i % w)).collect(),
                target_hv: Tensor::from_parts(vec![2, n], target),
                prototype_vec,
            }
        })
        .collect();
    Ok(PseudoLabelSet {
        image_id: String::new(),
        instance_map: stage1_instances.clone(),
        prototypes,
    })
}

impl PseudoLabelSet {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.image_id = id.into();
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.instance_map.height(), self.instance_map.width())
    }

    /// Drops prototypes smaller than `min_px` pixels, clearing them from the
    /// instance map as well, and relabels canonically.
    pub fn discard_small(&self, min_px: usize) -> PseudoLabelSet {
        let (h, w) = self.shape();
        let mut labels = self.instance_map.labels().to_vec();
        let mut kept = Vec::new();
        for p in &self.prototypes {
            if p.len() < min_px {
                for &(r, c) in &p.pixels {
                    labels[r * w + c] = 0;
                }
            } else {
                kept.push(p.clone());
            }
        }
        let map = InstanceLabelMap::new(h, w, labels).expect("same extents");
        let canonical = map.relabel_canonical();
        for p in kept.iter_mut() {
            let (r, c) = p.pixels[0];
            p.instance_id = canonical.get(r, c);
        }
        kept.sort_by_key(|p| p.instance_id);
        PseudoLabelSet {
            image_id: self.image_id.clone(),
            instance_map: canonical,
            prototypes: kept,
        }
    }

    /// Dense `(2, H, W)` map of all target HV values, zero elsewhere.
    pub fn dense_target(&self) -> Tensor {
        let (h, w) = self.shape();
        let plane = h * w;
        let mut out = Tensor::zeros(&[2, h, w]);
        for p in &self.prototypes {
            let n = p.len();
            for (k, &(r, c)) in p.pixels.iter().enumerate() {
                out.data_mut()[r * w + c] = p.target_hv.data()[k];
                out.data_mut()[plane + r * w + c] = p.target_hv.data()[n + k];
            }
        }
        out
    }

    /// Rebuilds the set from an instance map and a dense target map.
    pub fn from_dense(image_id: &str, instance_map: InstanceLabelMap, target: &Tensor) -> Result<Self> {
        Ok(build_pseudo_labels(target, &instance_map)?.with_id(image_id))
    }
}

/// `(1/P) sum_p (1/|p|) sum_{i in p} |pred_hv(i) - y_i|^2` over the P
/// prototypes; zero with an analytic zero gradient when there are none.
pub fn prototype_loss(pred_hv: &Tensor, pl: &PseudoLabelSet) -> Result<LossValue> {
    let (h, w) = pl.shape();
    pred_hv.expect_shape(&[2, h, w])?;
    let plane = h * w;
    let mut grad = Tensor::zeros_like(pred_hv);
    let count = pl.prototypes.len();
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let mut value = 0.0;
    for p in &pl.prototypes {
        let n = p.len();
        let scale = 1.0 / (count as f64 * n as f64);
        let mut acc = 0.0;
        for (k, &(r, c)) in p.pixels.iter().enumerate() {
            for ch in 0..2 {
                let i = ch * plane + r * w + c;
                let d = pred_hv.data()[i] - p.target_hv.data()[ch * n + k];
                acc += d * d;
                grad.data_mut()[i] = 2.0 * d * scale;
            }
        }
        value += acc / n as f64;
    }
    Ok(LossValue {
        value: value / count as f64,
        grad,
    })
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    id: u32,
    pixels: usize,
    prototype: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    image_id: String,
    height: usize,
    width: usize,
    instances: Vec<SidecarEntry>,
}

fn paths(dir: &Path, id: &str) -> [std::path::PathBuf; 3] {
    [
        dir.join(format!("{id}.instances.caplt")),
        dir.join(format!("{id}.target_hv.caplt")),
        dir.join(format!("{id}.json")),
    ]
}

/// Writes the instance map, the dense target HV map and a JSON sidecar of
/// per-instance pixel counts and prototype vectors.
pub fn write_pseudo_labels(dir: &Path, pl: &PseudoLabelSet) -> Result<()> {
    if pl.image_id.is_empty() {
        return Err(CaplError::invalid("pseudo-label set has no image id"));
    }
    fs::create_dir_all(dir)?;
    let [inst, hv, json] = paths(dir, &pl.image_id);
    caplt::write_instances(&inst, &pl.instance_map)?;
    caplt::write_tensor(&hv, &pl.dense_target())?;
    let (height, width) = pl.shape();
    let sidecar = Sidecar {
        image_id: pl.image_id.clone(),
        height,
        width,
        instances: pl
            .prototypes
            .iter()
            .map(|p| SidecarEntry {
                id: p.instance_id,
                pixels: p.len(),
                prototype: p.prototype_vec,
            })
            .collect(),
    };
    fs::write(json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_pseudo_labels(dir: &Path, id: &str) -> Result<PseudoLabelSet> {
    let [inst, hv, json] = paths(dir, id);
    for p in [&inst, &hv, &json] {
        if !p.exists() {
            return Err(CaplError::MissingData(p.clone()));
        }
    }
    let map = caplt::read_instances(&inst)?;
    let target = caplt::read_tensor(&hv)?;
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&json)?)?;
    let pl = PseudoLabelSet::from_dense(id, map, &target)?;
    let counts: Vec<(u32, usize)> = pl.prototypes.iter().map(|p| (p.instance_id, p.len())).collect();
    let listed: Vec<(u32, usize)> = sidecar.instances.iter().map(|e| (e.id, e.pixels)).collect();
    if counts != listed || sidecar.image_id != id {
        return Err(CaplError::Format(format!("pseudo-label sidecar for '{id}' disagrees with its instance map")));
    }
    Ok(pl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use proptest::prelude::*;
    use rand::Rng;

    fn inst(h: usize, w: usize, l: &[u32]) -> InstanceLabelMap {
        InstanceLabelMap::new(h, w, l.to_vec()).unwrap()
    }

    fn hv_at(h: usize, w: usize, vals: &[(usize, f64, f64)]) -> Tensor {
        let mut t = Tensor::zeros(&[2, h, w]);
        for &(i, a, b) in vals {
            t.data_mut()[i] = a;
            t.data_mut()[h * w + i] = b;
        }
        t
    }

    #[test]
    fn build_examples() {
        let m = inst(2, 2, &[0, 1, 0, 0]);
        let pl = build_pseudo_labels(&hv_at(2, 2, &[(1, 0.2, -0.3)]), &m).unwrap();
        assert_eq!(pl.prototypes.len(), 1);
        assert_eq!(pl.prototypes[0].prototype_vec, [0.2, -0.3]);
        assert_eq!(pl.prototypes[0].pixels, vec![(0, 1)]);

        let empty = build_pseudo_labels(&Tensor::zeros(&[2, 3, 3]), &InstanceLabelMap::empty(3, 3)).unwrap();
        assert!(empty.prototypes.is_empty());

        let m = inst(1, 4, &[1, 1, 2, 2]);
        let hv = hv_at(1, 4, &[(0, 0.5, 0.1), (1, -0.1, 0.3), (2, 1.0, -1.0), (3, 0.0, 0.2)]);
        let pl = build_pseudo_labels(&hv, &m).unwrap();
        assert_eq!(pl.prototypes[0].prototype_vec, [(0.5 - 0.1) / 2.0, (0.1 + 0.3) / 2.0]);
        assert_eq!(pl.prototypes[1].prototype_vec, [0.5, -0.4]);
        assert!(build_pseudo_labels(&Tensor::zeros(&[2, 1, 3]), &m).is_err());
    }

    #[test]
    fn targets_are_clamped() {
        let m = inst(1, 2, &[1, 1]);
        let pl = build_pseudo_labels(&hv_at(1, 2, &[(0, 1.5, -2.0), (1, 0.0, 0.0)]), &m).unwrap();
        assert_eq!(pl.prototypes[0].target_hv.data(), &[1.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn loss_examples() {
        let m = inst(2, 3, &[1, 1, 0, 0, 2, 2]);
        let hv = Tensor::from_fn(&[2, 2, 3], |i| (i as f64 * 0.13).sin());
        let pl = build_pseudo_labels(&hv, &m).unwrap();
        let l = prototype_loss(&hv, &pl).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad.max_abs(), 0.0);

        let m = inst(1, 3, &[0, 1, 0]);
        let pl = build_pseudo_labels(&Tensor::zeros(&[2, 1, 3]), &m).unwrap();
        let pred = hv_at(1, 3, &[(1, 0.3, 0.4)]);
        assert!((prototype_loss(&pred, &pl).unwrap().value - 0.25).abs() < 1e-15);

        let none = build_pseudo_labels(&Tensor::zeros(&[2, 2, 2]), &InstanceLabelMap::empty(2, 2)).unwrap();
        let l = prototype_loss(&Tensor::full(&[2, 2, 2], 0.7), &none).unwrap();
        assert_eq!((l.value, l.grad.max_abs()), (0.0, 0.0));
        assert!(prototype_loss(&Tensor::zeros(&[2, 3, 2]), &none).is_err());
    }

    fn random_case(seed: u64) -> (Tensor, PseudoLabelSet) {
        let mut rng = crate::rng::SeedStream::new(seed).rng();
        let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
        let labels: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..4)).collect();
        let m = InstanceLabelMap::new(h, w, labels).unwrap().keep_largest_components().relabel_canonical();
        let target = Tensor::random_uniform(&[2, h, w], -1.0, 1.0, &mut rng);
        let pred = Tensor::random_uniform(&[2, h, w], -1.5, 1.5, &mut rng);
        (pred, build_pseudo_labels(&target, &m).unwrap())
    }

    /// Direct summation over the dense maps, one object at a time.
    fn oracle(pred: &Tensor, pl: &PseudoLabelSet) -> f64 {
        let target = pl.dense_target();
        let (h, w) = pl.shape();
        let ids = pl.instance_map.instance_ids();
        if ids.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for id in &ids {
            let (mut s, mut n) = (0.0, 0.0);
            for i in 0..h * w {
                if pl.instance_map.labels()[i] == *id {
                    n += 1.0;
                    for ch in 0..2 {
                        let d = pred.data()[ch * h * w + i] - target.data()[ch * h * w + i];
                        s += d * d;
                    }
                }
            }
            total += s / n;
        }
        total / ids.len() as f64
    }

    #[test]
    fn loss_matches_summation_oracle_and_fd() {
        for seed in 0..100 {
            let (pred, pl) = random_case(seed);
            let l = prototype_loss(&pred, &pl).unwrap();
            assert!((l.value - oracle(&pred, &pl)).abs() < 1e-12, "seed {seed}");
            let err = gradcheck::check(&pred, &l.grad, |x| prototype_loss(x, &pl).unwrap().value);
            assert!(err < gradcheck::MAX_REL_ERROR, "seed {seed}: {err}");
        }
    }

    #[test]
    fn discard_small_relabels() {
        let m = inst(1, 7, &[1, 0, 2, 2, 2, 0, 3]);
        let pl = build_pseudo_labels(&Tensor::full(&[2, 1, 7], 0.1), &m).unwrap().with_id("a");
        let kept = pl.discard_small(PSEUDO_MIN_PX);
        assert_eq!(kept.instance_map.labels(), &[0, 0, 1, 1, 1, 0, 0]);
        assert_eq!(kept.prototypes.len(), 1);
        assert_eq!(kept.prototypes[0].instance_id, 1);
        assert_eq!(kept.image_id, "a");
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, pl) = random_case(5);
        let pl = pl.with_id("t00003");
        write_pseudo_labels(dir.path(), &pl).unwrap();
        assert_eq!(read_pseudo_labels(dir.path(), "t00003").unwrap(), pl);
        assert!(matches!(read_pseudo_labels(dir.path(), "nope"), Err(CaplError::MissingData(_))));
        assert!(write_pseudo_labels(dir.path(), &pl.clone().with_id("")).is_err());
    }

    proptest! {
        #[test]
        fn gradient_support_is_instance_pixels(seed in 0u64..5000) {
            let (pred, pl) = random_case(seed);
            let l = prototype_loss(&pred, &pl).unwrap();
            let plane = pred.len() / 2;
            for (i, &lab) in pl.instance_map.labels().iter().enumerate() {
                if lab == 0 {
                    prop_assert_eq!(l.grad.data()[i], 0.0);
                    prop_assert_eq!(l.grad.data()[plane + i], 0.0);
                }
            }
        }

        #[test]
        fn duplicated_instance_keeps_value(err_h in -1.0f64..1.0, err_v in -1.0f64..1.0, n in 1usize..4) {
            // one object of n pixels vs two disjoint copies with the same error
            let w = 2 * n + 1;
            let one: Vec<u32> = (0..w).map(|c| u32::from(c < n)).collect();
            let two: Vec<u32> = (0..w).map(|c| if c < n { 1 } else if c > n { 2 } else { 0 }).collect();
            let target = Tensor::full(&[2, 1, w], 0.2);
            let pred = Tensor::from_fn(&[2, 1, w], |i| 0.2 + if i < w { err_h } else { err_v });
            let a = prototype_loss(&pred, &build_pseudo_labels(&target, &inst(1, w, &one)).unwrap()).unwrap();
            let b = prototype_loss(&pred, &build_pseudo_labels(&target, &inst(1, w, &two)).unwrap()).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-12);
        }
    }
}

//! Deterministic two-domain synthetic nuclei tiles with full ground truth.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{CaplError, Result};
use crate::labels::{ClassLabelMap, InstanceLabelMap, NucleusClass, NUM_CLASSES};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Nucleus counts per class of the source and target corpora, in class-id
/// order (eosinophil, epithelial, lymphocyte, plasma, neutrophil,
/// connective).
pub const SOURCE_CLASS_COUNTS: [f64; NUM_CLASSES] = [1_349.0, 70_789.0, 49_932.0, 11_352.0, 2_262.0, 32_826.0];
pub const TARGET_CLASS_COUNTS: [f64; NUM_CLASSES] = [1_255.0, 99_124.0, 27_634.0, 9_363.0, 1_673.0, 49_994.0];

pub const DEFAULT_TILE: usize = 64;
pub const MIN_TILE: usize = 32;
/// A candidate nucleus is rejected when more than this fraction of its
/// pixels is already occupied.
pub const MAX_OVERLAP: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainName {
    Source,
    Target,
}

impl DomainName {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainName::Source => "source",
            DomainName::Target => "target",
        }
    }
}

impl std::str::FromStr for DomainName {
    type Err = CaplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainName::Source),
            "target" => Ok(DomainName::Target),
            other => Err(CaplError::invalid(format!("unknown domain '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: DomainName,
    /// Class probabilities in class-id order.
    pub class_priors: [f64; NUM_CLASSES],
    /// Added to every RGB value after rendering.
    pub intensity_shift: f64,
    /// Hue rotation in degrees about the grey axis.
    pub hue_rotation: f64,
    /// Multiplier on nucleus semi-axes.
    pub nucleus_scale: f64,
    /// Expected nuclei per 64x64 tile.
    pub density: f64,
}

fn normalize(counts: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let total: f64 = counts.iter().sum();
    counts.map(|c| c / total)
}

impl DomainSpec {
    pub fn source() -> Self {
        DomainSpec {
            name: DomainName::Source,
            class_priors: normalize(&SOURCE_CLASS_COUNTS),
            intensity_shift: 0.0,
            hue_rotation: 0.0,
            nucleus_scale: 1.0,
            density: 14.0,
        }
    }

    /// The source appearance shifted by +0.15 intensity, 25 degrees of hue
    /// and 1.2x nucleus size, with the target class priors.
    pub fn target() -> Self {
        DomainSpec {
            name: DomainName::Target,
            class_priors: normalize(&TARGET_CLASS_COUNTS),
            intensity_shift: 0.15,
            hue_rotation: 25.0,
            nucleus_scale: 1.2,
            density: 14.0,
        }
    }

    pub fn for_domain(name: DomainName) -> Self {
        match name {
            DomainName::Source => Self::source(),
            DomainName::Target => Self::target(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_priors.iter().any(|&p| !(p >= 0.0)) {
            return Err(CaplError::invalid("class priors must be non-negative"));
        }
        let total: f64 = self.class_priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CaplError::invalid(format!("class priors sum to {total}, not 1")));
        }
        if !(self.density > 0.0) {
            return Err(CaplError::invalid("density must be positive"));
        }
        if !(self.nucleus_scale > 0.0) {
            return Err(CaplError::invalid("nucleus scale must be positive"));
        }
        Ok(())
    }
}

/// One rendered tile and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `(3, H, W)` RGB in [0, 1].
    pub image: Tensor,
    pub instances: InstanceLabelMap,
    pub classes: ClassLabelMap,
    /// `(2, H, W)` normalized centroid offsets, zero on background.
    pub hv_gt: Tensor,
    /// `(H, W)` binary nucleus mask.
    pub np_gt: Tensor,
}

impl SyntheticSample {
    /// Assembles a sample from an image and its label maps, deriving the HV
    /// and NP targets.
    pub fn from_labels(image: Tensor, instances: InstanceLabelMap, classes: ClassLabelMap) -> Self {
        let hv_gt = hv_target_from_instances(&instances);
        let np_gt = instances.foreground();
        SyntheticSample {
            image,
            instances,
            classes,
            hv_gt,
            np_gt,
        }
    }

    /// Class of every instance, by instance id.
    pub fn instance_classes(&self) -> BTreeMap<u32, u32> {
        instance_classes(&self.instances, &self.classes)
    }
}

/// Class of every instance, read from its first pixel.
pub fn instance_classes(instances: &InstanceLabelMap, classes: &ClassLabelMap) -> BTreeMap<u32, u32> {
    let mut out = BTreeMap::new();
    for (&l, &c) in instances.labels().iter().zip(classes.classes()) {
        if l > 0 {
            out.entry(l).or_insert(c);
        }
    }
    out
}

/// Horizontal and vertical distances of every nucleus pixel to its instance
/// centroid, each normalized by the instance's largest absolute offset along
/// that axis (zero when the instance is one pixel wide along it).
///
/// Offsets are formed in integer arithmetic as `n * x - sum(x)` before the
/// single division, so flips and rotations of the instance map transform the
/// result exactly.
pub fn hv_target_from_instances(inst: &InstanceLabelMap) -> Tensor {
    let (h, w) = (inst.height(), inst.width());
    let plane = h * w;
    let mut out = Tensor::zeros(&[2, h, w]);
    let mut sets: Vec<(u32, Vec<usize>)> = inst.pixel_sets().into_iter().collect();
    sets.sort_unstable_by_key(|(l, _)| *l);
    for (_, pixels) in sets {
        let n = pixels.len() as i64;
        let sum_c: i64 = pixels.iter().map(|&i| (i % w) as i64).sum();
        let sum_r: i64 = pixels.iter().map(|&i| (i / w) as i64).sum();
        let off_c = |i: usize| n * (i % w) as i64 - sum_c;
        let off_r = |i: usize| n * (i / w) as i64 - sum_r;
        let max_c = pixels.iter().map(|&i| off_c(i).abs()).max().unwrap_or(0);
        let max_r = pixels.iter().map(|&i| off_r(i).abs()).max().unwrap_or(0);
        let d = out.data_mut();
        for &i in &pixels {
            if max_c > 0 {
                d[i] = off_c(i) as f64 / max_c as f64;
            }
            if max_r > 0 {
                d[plane + i] = off_r(i) as f64 / max_r as f64;
            }
        }
    }
    out
}

/// Appearance and shape of one nucleus class.
struct ClassLook {
    color: [f64; 3],
    major: (f64, f64),
    minor: (f64, f64),
}

fn look(class: NucleusClass) -> ClassLook {
    match class {
        NucleusClass::Eosinophil => ClassLook { color: [0.78, 0.22, 0.38], major: (2.6, 3.2), minor: (2.2, 2.6) },
        NucleusClass::Epithelial => ClassLook { color: [0.38, 0.16, 0.52], major: (3.2, 4.2), minor: (2.3, 3.0) },
        NucleusClass::Lymphocyte => ClassLook { color: [0.12, 0.10, 0.36], major: (1.9, 2.4), minor: (1.8, 2.3) },
        NucleusClass::Plasma => ClassLook { color: [0.22, 0.34, 0.70], major: (2.4, 3.0), minor: (2.0, 2.5) },
        NucleusClass::Neutrophil => ClassLook { color: [0.62, 0.18, 0.72], major: (2.4, 3.0), minor: (1.9, 2.4) },
        NucleusClass::Connective => ClassLook { color: [0.48, 0.36, 0.22], major: (3.4, 4.4), minor: (1.2, 1.6) },
    }
}

const BACKGROUND: [f64; 3] = [0.92, 0.80, 0.86];

fn sample_class<R: Rng + ?Sized>(priors: &[f64; NUM_CLASSES], rng: &mut R) -> NucleusClass {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = NucleusClass::Connective;
    for (k, &p) in priors.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = NucleusClass::ALL[k];
        acc += p;
        if u < acc {
            return last;
        }
    }
    last
}

/// Pixel indices inside an ellipse.
fn rasterize_ellipse(size: usize, center: (f64, f64), axes: (f64, f64), angle: f64) -> Vec<usize> {
    let (cr, cc) = center;
    let (a, b) = axes;
    let (sin, cos) = angle.sin_cos();
    let reach = a.max(b).ceil() as isize + 1;
    let mut out = Vec::new();
    for r in (cr.round() as isize - reach)..=(cr.round() as isize + reach) {
        for c in (cc.round() as isize - reach)..=(cc.round() as isize + reach) {
            if r < 0 || c < 0 || r >= size as isize || c >= size as isize {
                continue;
            }
            let (dy, dx) = (r as f64 - cr, c as f64 - cc);
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                out.push(r as usize * size + c as usize);
            }
        }
    }
    out
}

/// Rotation about the grey axis `(1, 1, 1)` by `degrees`.
fn hue_rotate(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    if degrees == 0.0 {
        return rgb;
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0;
    let sq = (1.0f64 / 3.0).sqrt();
    let m = [
        [c + (1.0 - c) * k, k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s],
        [k * (1.0 - c) + sq * s, c + k * (1.0 - c), k * (1.0 - c) - sq * s],
        [k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s, c + k * (1.0 - c)],
    ];
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(&m) {
        *o = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
    }
    out
}

/// Renders one tile of `size x size` pixels.
pub fn generate_sample(spec: &DomainSpec, size: usize, seed: u64) -> Result<SyntheticSample> {
    spec.validate()?;
    if size < MIN_TILE {
        return Err(CaplError::invalid(format!("tile size {size} below minimum {MIN_TILE}")));
    }
    let mut rng = SeedStream::new(seed).rng();
    let area_scale = (size * size) as f64 / (DEFAULT_TILE * DEFAULT_TILE) as f64;
    let expected = spec.density * area_scale;
    let count = if expected < 1e-9 {
        0
    } else {
        Poisson::new(expected)
            .map_err(|e| CaplError::invalid(e.to_string()))?
            .sample(&mut rng) as usize
    };

    let mut labels = vec![0u32; size * size];
    let mut nuclei: Vec<(NucleusClass, [f64; 3])> = Vec::new();
    let colour_jitter = Normal::new(0.0, 0.035).unwrap();
    for _ in 0..count {
        let class = sample_class(&spec.class_priors, &mut rng);
        let lk = look(class);
        let a = rng.gen_range(lk.major.0..lk.major.1) * spec.nucleus_scale;
        let b = rng.gen_range(lk.minor.0..lk.minor.1) * spec.nucleus_scale;
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let colour = lk.color.map(|v| v + colour_jitter.sample(&mut rng));
        let margin = 2.0;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let center = (
                rng.gen_range(margin..size as f64 - margin),
                rng.gen_range(margin..size as f64 - margin),
            );
            let pixels = rasterize_ellipse(size, center, (a, b), angle);
            if pixels.is_empty() {
                continue;
            }
            let taken = pixels.iter().filter(|&&i| labels[i] != 0).count();
            if taken as f64 > MAX_OVERLAP * pixels.len() as f64 {
                continue;
            }
            nuclei.push((class, colour));
            let id = nuclei.len() as u32;
            for i in pixels {
                if labels[i] == 0 {
                    labels[i] = id;
                }
            }
            break;
        }
    }

    let raw = InstanceLabelMap::new(size, size, labels)?.keep_largest_components();
    let instances = raw.relabel_canonical();
    let mut classes = vec![0u32; size * size];
    let mut colours: Vec<Option<[f64; 3]>> = vec![None; size * size];
    for (i, &l) in raw.labels().iter().enumerate() {
        if l > 0 {
            let (class, colour) = nuclei[l as usize - 1];
            classes[i] = class.id();
            colours[i] = Some(colour);
        }
    }
    let classes = ClassLabelMap::new(size, size, classes)?;

    let plane = size * size;
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut image = Tensor::zeros(&[3, size, size]);
    for i in 0..plane {
        let base = colours[i].unwrap_or(BACKGROUND);
        let jittered = base.map(|v| v + noise.sample(&mut rng));
        let shifted = hue_rotate(jittered, spec.hue_rotation);
        for ch in 0..3 {
            image.data_mut()[ch * plane + i] = (shifted[ch] + spec.intensity_shift).clamp(0.0, 1.0);
        }
    }

    Ok(SyntheticSample::from_labels(image, instances, classes))
}

/// Geometric augmentations. Rotations are counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentOp {
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::FlipH,
        AugmentOp::FlipV,
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
    ];

    /// Output extents for an `h x w` input.
    fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            AugmentOp::Rot90 | AugmentOp::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source pixel `(r, c)` of output pixel `(r2, c2)`.
    fn source(self, r2: usize, c2: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            AugmentOp::FlipH => (r2, w - 1 - c2),
            AugmentOp::FlipV => (h - 1 - r2, c2),
            AugmentOp::Rot180 => (h - 1 - r2, w - 1 - c2),
            // (r, c) -> (w - 1 - c, r)
            AugmentOp::Rot90 => (c2, w - 1 - r2),
            // (r, c) -> (c, h - 1 - r)
            AugmentOp::Rot270 => (h - 1 - c2, r2),
        }
    }

    /// New `(horizontal, vertical)` offsets from the old ones.
    fn hv(self, hor: f64, ver: f64) -> (f64, f64) {
        let neg = |x: f64| -x + 0.0;
        match self {
            AugmentOp::FlipH => (neg(hor), ver),
            AugmentOp::FlipV => (hor, neg(ver)),
            AugmentOp::Rot180 => (neg(hor), neg(ver)),
            AugmentOp::Rot90 => (ver, neg(hor)),
            AugmentOp::Rot270 => (neg(ver), hor),
        }
    }
}

/// Applies `op` to every plane of a `(C, H, W)` tensor.
pub fn transform_planes(t: &Tensor, op: AugmentOp) -> Tensor {
    let (c, h, w) = t.chw().expect("image-like tensor");
    let (h2, w2) = op.out_dims(h, w);
    Tensor::from_fn(&[c, h2, w2], |k| {
        let (ch, r2, c2) = (k / (h2 * w2), (k / w2) % h2, k % w2);
        let (r, col) = op.source(r2, c2, h, w);
        t.data()[(ch * h + r) * w + col]
    })
}

/// Applies `op` to an `h x w` label plane.
pub fn transform_labels(labels: &[u32], h: usize, w: usize, op: AugmentOp) -> Vec<u32> {
    let (h2, w2) = op.out_dims(h, w);
    (0..h2 * w2)
        .map(|k| {
            let (r, c) = op.source(k / w2, k % w2, h, w);
            labels[r * w + c]
        })
        .collect()
}

/// Moves a `(2, H, W)` HV field with `op`, re-signing and swapping the
/// channels so each vector keeps pointing along the transformed axes.
pub fn transform_hv(hv: &Tensor, op: AugmentOp) -> Tensor {
    let moved = transform_planes(hv, op);
    let (_, h2, w2) = moved.chw().expect("rank 3");
    let plane = h2 * w2;
    let mut out = Tensor::zeros(&[2, h2, w2]);
    for i in 0..plane {
        let (a, b) = op.hv(moved.data()[i], moved.data()[plane + i]);
        out.data_mut()[i] = a;
        out.data_mut()[plane + i] = b;
    }
    out
}

/// Applies a flip or rotation to every channel of a sample, re-signing and
/// swapping the HV channels so they stay the exact centroid offsets of the
/// transformed instances.
pub fn augment(s: &SyntheticSample, op: AugmentOp) -> Result<SyntheticSample> {
    let (h, w) = (s.instances.height(), s.instances.width());
    if matches!(op, AugmentOp::Rot90 | AugmentOp::Rot270) && h != w {
        return Err(CaplError::invalid(format!("rotation needs a square sample, got {h}x{w}")));
    }
    let (h2, w2) = op.out_dims(h, w);
    let image = transform_planes(&s.image, op);
    let instances = InstanceLabelMap::new(h2, w2, transform_labels(s.instances.labels(), h, w, op))?.relabel_canonical();
    let classes = ClassLabelMap::new(h2, w2, transform_labels(s.classes.classes(), h, w, op))?;
    let hv_gt = transform_hv(&s.hv_gt, op);
    let np_gt = transform_planes(&s.np_gt.clone().reshape(&[1, h, w])?, op).reshape(&[h2, w2])?;
    Ok(SyntheticSample {
        image,
        instances,
        classes,
        hv_gt,
        np_gt,
    })
}

//! Segmentation, detection and classification metrics with corpus pooling.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CaplError, Result};
use crate::labels::{InstanceLabelMap, NucleusClass, NUM_CLASSES};
use crate::tensor::Tensor;

/// Default centroid match radius in pixels.
pub const DEFAULT_MATCH_RADIUS: f64 = 6.0;

fn check_binary(t: &Tensor) -> Result<()> {
    match t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(CaplError::invalid(format!("mask value {v} is not binary"))),
        None => Ok(()),
    }
}

/// `2|P & G| / (|P| + |G|)`, 1.0 when both masks are empty.
pub fn dice_coefficient(pred_fg: &Tensor, gt_fg: &Tensor) -> Result<f64> {
    pred_fg.expect_shape(gt_fg.shape())?;
    check_binary(pred_fg)?;
    check_binary(gt_fg)?;
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &g) in pred_fg.data().iter().zip(gt_fg.data()) {
        inter += p * g;
        total += p + g;
    }
    Ok(if total == 0.0 { 1.0 } else { 2.0 * inter / total })
}

/// Pixel areas of every instance and of every overlapping (gt, pred) pair.
struct Overlaps {
    gt_area: BTreeMap<u32, usize>,
    pred_area: BTreeMap<u32, usize>,
    inter: HashMap<(u32, u32), usize>,
}

impl Overlaps {
    fn new(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<Self> {
        if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
            return Err(CaplError::shape(&[gt.height(), gt.width()], &[pred.height(), pred.width()]));
        }
        let mut o = Overlaps {
            gt_area: BTreeMap::new(),
            pred_area: BTreeMap::new(),
            inter: HashMap::new(),
        };
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g > 0 {
                *o.gt_area.entry(g).or_default() += 1;
            }
            if p > 0 {
                *o.pred_area.entry(p).or_default() += 1;
            }
            if g > 0 && p > 0 {
                *o.inter.entry((g, p)).or_default() += 1;
            }
        }
        Ok(o)
    }

    fn inter(&self, g: u32, p: u32) -> usize {
        self.inter.get(&(g, p)).copied().unwrap_or(0)
    }

    fn union(&self, g: u32, p: u32) -> usize {
        self.gt_area[&g] + self.pred_area[&p] - self.inter(g, p)
    }

    fn iou(&self, g: u32, p: u32) -> f64 {
        self.inter(g, p) as f64 / self.union(g, p) as f64
    }
}

/// Aggregated Jaccard index. Ground-truth instances are visited in ascending
/// label order and each takes the unused prediction with the highest IoU
/// (lowest label on ties); a ground truth without any overlapping unused
/// prediction stays unmatched.
pub fn aji(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<f64> {
    let o = Overlaps::new(gt, pred)?;
    let mut used: BTreeMap<u32, bool> = o.pred_area.keys().map(|&p| (p, false)).collect();
    let (mut num, mut den) = (0usize, 0usize);
    for (&g, &area) in &o.gt_area {
        let mut best: Option<(u32, f64)> = None;
        for (&p, &taken) in &used {
            if taken || o.inter(g, p) == 0 {
                continue;
            }
            let iou = o.iou(g, p);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((p, iou));
            }
        }
        match best {
            Some((p, _)) => {
                used.insert(p, true);
                num += o.inter(g, p);
                den += o.union(g, p);
            }
            None => den += area,
        }
    }
    den += used
        .iter()
        .filter(|(_, &taken)| !taken)
        .map(|(p, _)| o.pred_area[p])
        .sum::<usize>();
    Ok(if den == 0 { 1.0 } else { num as f64 / den as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PanopticQuality {
    fn from_counts(tp: usize, fp: usize, fn_: usize, iou_sum: f64) -> Self {
        let dq = if tp + fp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64)
        };
        let sq = if tp == 0 { 1.0 } else { iou_sum / tp as f64 };
        PanopticQuality {
            dq,
            sq,
            pq: dq * sq,
            tp,
            fp,
            fn_,
        }
    }
}

/// Detection, segmentation and panoptic quality over IoU > 0.5 matches.
/// With no instances on either side all three are 1.0; with no true
/// positives SQ is 1.0.
pub fn panoptic_quality(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> Result<PanopticQuality> {
    let o = Overlaps::new(gt, pred)?;
    let mut tp = 0;
    let mut iou_sum = 0.0;
    let mut pairs: Vec<_> = o.inter.keys().copied().collect();
    pairs.sort_unstable();
    for (g, p) in pairs {
        let iou = o.iou(g, p);
        if iou > 0.5 {
            tp += 1;
            iou_sum += iou;
        }
    }
    Ok(PanopticQuality::from_counts(
        tp,
        o.pred_area.len() - tp,
        o.gt_area.len() - tp,
        iou_sum,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub row: f64,
    pub col: f64,
    pub class: u32,
}

/// Mass centre and class of every instance, in ascending label order.
/// Instances missing from `classes` get class 0.
pub fn centroids(inst: &InstanceLabelMap, classes: &[(u32, u32)]) -> Vec<Centroid> {
    let lookup: HashMap<u32, u32> = classes.iter().copied().collect();
    let w = inst.width();
    let mut acc: BTreeMap<u32, (f64, f64, f64)> = BTreeMap::new();
    for (i, &l) in inst.labels().iter().enumerate() {
        if l > 0 {
            let e = acc.entry(l).or_default();
            e.0 += (i / w) as f64;
            e.1 += (i % w) as f64;
            e.2 += 1.0;
        }
    }
    acc.into_iter()
        .map(|(l, (r, c, n))| Centroid {
            row: r / n,
            col: c / n,
            class: lookup.get(&l).copied().unwrap_or(0),
        })
        .collect()
}

/// One-to-one centroid matching.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CentroidMatching {
    /// `(gt index, pred index)`
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

/// Pairs within `radius` are accepted greedily by ascending distance (ties by
/// gt index, then pred index), each centroid used at most once.
pub fn match_centroids(gt: &[Centroid], pred: &[Centroid], radius: f64) -> Result<CentroidMatching> {
    if !(radius > 0.0) {
        return Err(CaplError::invalid(format!("match radius {radius} must be positive")));
    }
    let mut cands = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let d = (g.row - p.row).hypot(g.col - p.col);
            if d <= radius {
                cands.push((d, i, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut m = CentroidMatching::default();
    for (_, i, j) in cands {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            m.pairs.push((i, j));
        }
    }
    m.unmatched_gt = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    m.unmatched_pred = (0..pred.len()).filter(|&j| !pred_used[j]).collect();
    Ok(m)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        1.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// `2TP / (2TP + FP + FN)` of the centroid matching; 1.0 when both lists are
/// empty.
pub fn detection_f1(gt: &[Centroid], pred: &[Centroid], radius: f64) -> Result<f64> {
    let m = match_centroids(gt, pred, radius)?;
    Ok(f1(m.pairs.len(), m.unmatched_pred.len(), m.unmatched_gt.len()))
}

/// True positives, false positives and false negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }

    /// Whether the class occurs on either side.
    pub fn occurs(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn check_class(c: u32) -> Result<()> {
    if NucleusClass::from_id(c).is_none() {
        return Err(CaplError::invalid(format!("unknown class id {c}")));
    }
    Ok(())
}

/// Per-class counts from a detection matching. `unmatched_gt[k]` and
/// `unmatched_pred[k]` count unmatched centroids of class `k + 1`.
pub fn class_counts(
    matched_pairs: &[(u32, u32)],
    unmatched_gt: &[usize; NUM_CLASSES],
    unmatched_pred: &[usize; NUM_CLASSES],
    t: u32,
) -> Result<Counts> {
    check_class(t)?;
    let mut c = Counts {
        tp: 0,
        fp: unmatched_pred[t as usize - 1],
        fn_: unmatched_gt[t as usize - 1],
    };
    for &(g, p) in matched_pairs {
        check_class(g)?;
        check_class(p)?;
        match (g == t, p == t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// F1 for class `t`; 1.0 when the class occurs on neither side.
pub fn classification_f1(
    matched_pairs: &[(u32, u32)],
    unmatched_gt: &[usize; NUM_CLASSES],
    unmatched_pred: &[usize; NUM_CLASSES],
    t: u32,
) -> Result<f64> {
    Ok(class_counts(matched_pairs, unmatched_gt, unmatched_pred, t)?.f1())
}

/// An instance map with the class of each instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifiedInstances {
    pub instances: InstanceLabelMap,
    /// `(instance id, class id)`
    pub classes: Vec<(u32, u32)>,
}

/// Raw per-image results before corpus pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub dice: f64,
    pub aji: f64,
    pub panoptic: PanopticQuality,
    pub detection: Counts,
    pub per_class: [Counts; NUM_CLASSES],
}

pub fn evaluate_image(gt: &ClassifiedInstances, pred: &ClassifiedInstances, radius: f64) -> Result<ImageEval> {
    let dice = dice_coefficient(&pred.instances.foreground(), &gt.instances.foreground())?;
    let aji = aji(&gt.instances, &pred.instances)?;
    let panoptic = panoptic_quality(&gt.instances, &pred.instances)?;
    let gc = centroids(&gt.instances, &gt.classes);
    let pc = centroids(&pred.instances, &pred.classes);
    let m = match_centroids(&gc, &pc, radius)?;
    let pairs: Vec<(u32, u32)> = m.pairs.iter().map(|&(i, j)| (gc[i].class, pc[j].class)).collect();
    let tally = |list: &[usize], cs: &[Centroid]| -> Result<[usize; NUM_CLASSES]> {
        let mut out = [0; NUM_CLASSES];
        for &i in list {
            check_class(cs[i].class)?;
            out[cs[i].class as usize - 1] += 1;
        }
        Ok(out)
    };
    let ug = tally(&m.unmatched_gt, &gc)?;
    let up = tally(&m.unmatched_pred, &pc)?;
    let mut per_class = [Counts::default(); NUM_CLASSES];
    for (k, c) in per_class.iter_mut().enumerate() {
        *c = class_counts(&pairs, &ug, &up, k as u32 + 1)?;
    }
    Ok(ImageEval {
        dice,
        aji,
        panoptic,
        detection: Counts {
            tp: m.pairs.len(),
            fp: m.unmatched_pred.len(),
            fn_: m.unmatched_gt.len(),
        },
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub det_f1: f64,
    /// Eosinophil, epithelial, lymphocyte, plasma, neutrophil, connective.
    pub class_f1: [f64; NUM_CLASSES],
    /// Mean F1 over the classes that occur in the corpus.
    pub f_avg: f64,
    pub images: usize,
}

impl MetricReport {
    /// Dice, AJI, DQ and SQ are averaged over images and PQ is their DQ x SQ;
    /// detection and class F1 come from counts pooled over the corpus.
    pub fn from_images(evals: &[ImageEval]) -> Self {
        let n = evals.len();
        let mean = |f: &dyn Fn(&ImageEval) -> f64| {
            if n == 0 {
                1.0
            } else {
                evals.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let mut det = Counts::default();
        let mut per_class = [Counts::default(); NUM_CLASSES];
        for e in evals {
            det.add(&e.detection);
            for (a, b) in per_class.iter_mut().zip(&e.per_class) {
                a.add(b);
            }
        }
        let class_f1 = per_class.map(|c| c.f1());
        let present: Vec<f64> = per_class
            .iter()
            .zip(class_f1)
            .filter(|(c, _)| c.occurs())
            .map(|(_, f)| f)
            .collect();
        let f_avg = if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let dq = mean(&|e| e.panoptic.dq);
        let sq = mean(&|e| e.panoptic.sq);
        MetricReport {
            dice: mean(&|e| e.dice),
            aji: mean(&|e| e.aji),
            dq,
            sq,
            pq: dq * sq,
            det_f1: det.f1(),
            class_f1,
            f_avg,
            images: n,
        }
    }
}

const TABLE_COLUMNS: [&str; 13] = [
    "Dice", "AJI", "DQ", "SQ", "PQ", "Det", "F1c_Eos", "F1c_Epi", "F1c_Lym", "F1c_Pla", "F1c_Neu", "F1c_Con", "F_avg",
];

/// Plain-text table, one row per labelled report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<name_w$}", "Method");
    for c in TABLE_COLUMNS {
        let _ = write!(s, " {c:>8}");
    }
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "{name:<name_w$}");
        let vals = [r.dice, r.aji, r.dq, r.sq, r.pq, r.det_f1]
            .into_iter()
            .chain(r.class_f1)
            .chain([r.f_avg]);
        for v in vals {
            let _ = write!(s, " {v:>8.4}");
        }
        s.push('\n');
    }
    s
}

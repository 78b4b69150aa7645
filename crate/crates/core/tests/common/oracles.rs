//! Brute-force AJI and PQ over every admissible instance assignment.

use std::collections::{BTreeMap, BTreeSet};

use capl_kit::InstanceLabelMap;
use rand::Rng;

fn sets(m: &InstanceLabelMap) -> BTreeMap<u32, BTreeSet<usize>> {
    let mut out: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (i, &l) in m.labels().iter().enumerate() {
        if l > 0 {
            out.entry(l).or_default().insert(i);
        }
    }
    out
}

fn inter(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> usize {
    a.intersection(b).count()
}

fn uni(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> usize {
    a.union(b).count()
}

/// Every assignment of each GT to a distinct overlapping prediction or to
/// nothing, in GT order.
fn assignments(g: &[BTreeSet<usize>], p: &[BTreeSet<usize>]) -> Vec<Vec<Option<usize>>> {
    fn rec(
        k: usize,
        g: &[BTreeSet<usize>],
        p: &[BTreeSet<usize>],
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if k == g.len() {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        rec(k + 1, g, p, used, cur, out);
        cur.pop();
        for j in 0..p.len() {
            if !used[j] && inter(&g[k], &p[j]) > 0 {
                used[j] = true;
                cur.push(Some(j));
                rec(k + 1, g, p, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, g, p, &mut vec![false; p.len()], &mut Vec::new(), &mut out);
    out
}

/// AJI from the assignment whose IoU sequence (in GT order) is
/// lexicographically largest, lower prediction index first on ties, and
/// which leaves no GT unmatched while an overlapping prediction is free.
pub fn aji_oracle(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> f64 {
    let g: Vec<_> = sets(gt).into_values().collect();
    let p: Vec<_> = sets(pred).into_values().collect();
    if g.is_empty() && p.is_empty() {
        return 1.0;
    }
    let key = |a: &Vec<Option<usize>>| -> Vec<(f64, i64)> {
        a.iter()
            .enumerate()
            .map(|(k, m)| match m {
                Some(j) => (inter(&g[k], &p[*j]) as f64 / uni(&g[k], &p[*j]) as f64, -(*j as i64)),
                None => (0.0, i64::MIN),
            })
            .collect()
    };
    let maximal = |a: &Vec<Option<usize>>| {
        a.iter().enumerate().all(|(k, m)| {
            m.is_some()
                || (0..p.len()).all(|j| {
                    inter(&g[k], &p[j]) == 0 || a[..k].contains(&Some(j))
                })
        })
    };
    let best = assignments(&g, &p)
        .into_iter()
        .filter(maximal)
        .max_by(|a, b| key(a).partial_cmp(&key(b)).unwrap())
        .unwrap();
    let (mut num, mut den) = (0, 0);
    let mut used = vec![false; p.len()];
    for (k, m) in best.iter().enumerate() {
        match m {
            Some(j) => {
                used[*j] = true;
                num += inter(&g[k], &p[*j]);
                den += uni(&g[k], &p[*j]);
            }
            None => den += g[k].len(),
        }
    }
    den += (0..p.len()).filter(|&j| !used[j]).map(|j| p[j].len()).sum::<usize>();
    num as f64 / den as f64
}

/// PQ from the largest assignment using only IoU > 0.5 pairs.
pub fn pq_oracle(gt: &InstanceLabelMap, pred: &InstanceLabelMap) -> (f64, f64, f64) {
    let g: Vec<_> = sets(gt).into_values().collect();
    let p: Vec<_> = sets(pred).into_values().collect();
    let iou = |k: usize, j: usize| inter(&g[k], &p[j]) as f64 / uni(&g[k], &p[j]) as f64;
    let best = assignments(&g, &p)
        .into_iter()
        .filter(|a| a.iter().enumerate().all(|(k, m)| m.map_or(true, |j| iou(k, j) > 0.5)))
        .max_by_key(|a| a.iter().filter(|m| m.is_some()).count())
        .unwrap();
    let tp = best.iter().filter(|m| m.is_some()).count();
    let (fp, fn_) = (p.len() - tp, g.len() - tp);
    let iou_sum: f64 = best
        .iter()
        .enumerate()
        .filter_map(|(k, m)| m.map(|j| iou(k, j)))
        .sum();
    let dq = if tp + fp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64)
    };
    let sq = if tp == 0 { 1.0 } else { iou_sum / tp as f64 };
    (dq, sq, dq * sq)
}

/// Random map of at most `k` instances grown from random seeds.
fn random_map<R: Rng>(h: usize, w: usize, k: u32, rng: &mut R) -> InstanceLabelMap {
    let mut l = vec![0u32; h * w];
    let n = rng.gen_range(0..=k);
    for id in 1..=n {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (dh, dw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        for r in r0..(r0 + dh).min(h) {
            for c in c0..(c0 + dw).min(w) {
                if rng.gen_bool(0.85) {
                    l[r * w + c] = id;
                }
            }
        }
    }
    InstanceLabelMap::new(h, w, l).unwrap().keep_largest_components().relabel_canonical()
}

pub fn random_pair(seed: u64) -> (InstanceLabelMap, InstanceLabelMap) {
    let mut rng = capl_kit::SeedStream::new(seed).rng();
    let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    (random_map(h, w, 3, &mut rng), random_map(h, w, 3, &mut rng))
}


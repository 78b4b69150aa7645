//! Marker-controlled watershed turning NP/HV/NC maps into classified
//! instances.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::error::{CaplError, Result};
use crate::labels::{connected_components, neighbours4, InstanceLabelMap};
use crate::sobel::{self, Axis};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub np_threshold: f64,
    pub energy_threshold: f64,
    pub min_instance_px: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            np_threshold: 0.5,
            energy_threshold: 0.4,
            min_instance_px: 3,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("np_threshold", self.np_threshold), ("energy_threshold", self.energy_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CaplError::invalid(format!("{name} = {v} is outside (0, 1)")));
            }
        }
        Ok(())
    }
}

fn check_hv(hv: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = hv.chw()?;
    if c != 2 {
        return Err(CaplError::invalid(format!("HV map needs 2 channels, got {c}")));
    }
    if h < 3 || w < 3 {
        return Err(CaplError::invalid(format!("HV map {h}x{w} is smaller than 3x3")));
    }
    Ok((h, w))
}

fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for x in v.iter_mut() {
            *x = (*x - lo) / (hi - lo);
        }
    }
}

/// Horizontal Sobel of the horizontal map and vertical Sobel of the vertical
/// map, zero on the border, each min-max normalized to [0, 1] when its range
/// is nonzero.
pub fn sobel_pair(hv: &Tensor) -> Result<Tensor> {
    let (h, w) = check_hv(hv)?;
    let mut gx = sobel::response(hv.channel(0), h, w, Axis::Horizontal);
    let mut gy = sobel::response(hv.channel(1), h, w, Axis::Vertical);
    min_max_normalize(&mut gx);
    min_max_normalize(&mut gy);
    gx.extend(gy);
    Tensor::new(vec![2, h, w], gx)
}

/// Largest HV drop between 4-neighbours inside one marker.
const MARKER_MAX_FALL: f64 = 0.5;

/// Largest Sobel magnitude of a map with values in [-1, 1].
const SOBEL_RANGE: f64 = 8.0;

/// Boundary energy in [0, 1] per pixel.
///
/// Inside an instance the HV maps increase along their axis, so their Sobel
/// responses are non-negative; they turn negative only where one instance
/// ends and the next begins (or at the outer rim). The energy keeps the
/// negative part of each response on a fixed scale, which separates
/// instances equally well for small and large nuclei.
pub fn boundary_energy(hv: &Tensor) -> Result<Tensor> {
    let (h, w) = check_hv(hv)?;
    let gx = sobel::response(hv.channel(0), h, w, Axis::Horizontal);
    let gy = sobel::response(hv.channel(1), h, w, Axis::Vertical);
    let e = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| (-a / SOBEL_RANGE).clamp(0.0, 1.0).max((-b / SOBEL_RANGE).clamp(0.0, 1.0)))
        .collect();
    Tensor::new(vec![h, w], e)
}

/// Thresholds NP, seeds markers in low-energy foreground, floods the energy
/// landscape with a priority-queue watershed and drops small instances.
pub fn extract_instances(np_prob: &Tensor, hv: &Tensor, cfg: &PostprocessConfig) -> Result<InstanceLabelMap> {
    cfg.validate()?;
    let (h, w) = check_hv(hv)?;
    np_prob.expect_shape(&[h, w])?;
    let fg: Vec<bool> = np_prob.data().iter().map(|&p| p > cfg.np_threshold).collect();
    let energy = boundary_energy(hv)?;
    let e = energy.data();

    // Within one instance the HV ramps increase along their axis, so a step
    // where a ramp falls is likely crossing into a neighbour. Sobel smoothing
    // can leave a short contact below the energy threshold; markers still
    // must not grow across it.
    let (hor, ver) = (hv.channel(0), hv.channel(1));
    let fall = |from: usize, to: usize| {
        let rise = if from / w == to / w {
            (hor[to] - hor[from]) * if to > from { 1.0 } else { -1.0 }
        } else {
            (ver[to] - ver[from]) * if to > from { 1.0 } else { -1.0 }
        };
        (-rise).max(0.0)
    };
    let seeds = connected_components(
        h,
        w,
        |i| fg[i] && e[i] < cfg.energy_threshold,
        |i, j| fall(i, j) <= MARKER_MAX_FALL,
    );
    let mut labels = seeds.labels;
    let mut next = seeds.count;
    // a foreground blob with no low-energy pixel still becomes one instance
    let blobs = connected_components(h, w, |i| fg[i], |_, _| true);
    let mut seeded = vec![false; blobs.count as usize + 1];
    for (i, &b) in blobs.labels.iter().enumerate() {
        if labels[i] != 0 {
            seeded[b as usize] = true;
        }
    }
    let mut extra = vec![0u32; blobs.count as usize + 1];
    for (i, &b) in blobs.labels.iter().enumerate() {
        if b != 0 && !seeded[b as usize] {
            if extra[b as usize] == 0 {
                next += 1;
                extra[b as usize] = next;
            }
            labels[i] = extra[b as usize];
        }
    }

    // Equal-energy contests go to the step with the smaller fall.
    let mut heap = BinaryHeap::new();
    let push_neighbours = |heap: &mut BinaryHeap<_>, labels: &[u32], i: usize| {
        for j in neighbours4(i / w, i % w, h, w) {
            if fg[j] && labels[j] == 0 {
                heap.push(Reverse((OrderedFloat(e[j]), OrderedFloat(fall(i, j)), j, labels[i])));
            }
        }
    };
    for i in 0..h * w {
        if labels[i] != 0 {
            push_neighbours(&mut heap, &labels, i);
        }
    }
    while let Some(Reverse((_, _, i, label))) = heap.pop() {
        if labels[i] != 0 {
            continue;
        }
        labels[i] = label;
        push_neighbours(&mut heap, &labels, i);
    }

    let mut sizes = vec![0usize; next as usize + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    for l in labels.iter_mut() {
        if *l != 0 && sizes[*l as usize] < cfg.min_instance_px {
            *l = 0;
        }
    }
    Ok(InstanceLabelMap::new(h, w, labels)?.relabel_canonical())
}

/// Majority argmax class over each instance's pixels, ignoring background
/// votes; ties go to the lowest class id. An instance whose pixels all vote
/// background takes the class with the largest summed probability.
pub fn classify_instances(inst: &InstanceLabelMap, p_nc: &Tensor) -> Result<Vec<(u32, u32)>> {
    let (channels, h, w) = p_nc.chw()?;
    if (h, w) != (inst.height(), inst.width()) {
        return Err(CaplError::shape(
            &[channels, inst.height(), inst.width()],
            p_nc.shape(),
        ));
    }
    if channels < 2 {
        return Err(CaplError::invalid("class map needs a background and at least one class"));
    }
    let plane = h * w;
    let max = inst.max_label() as usize;
    let mut votes = vec![vec![0usize; channels]; max + 1];
    let mut mass = vec![vec![0.0f64; channels]; max + 1];
    for (i, &l) in inst.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let mut best = 0;
        for ch in 1..channels {
            if p_nc.data()[ch * plane + i] > p_nc.data()[best * plane + i] {
                best = ch;
            }
            mass[l as usize][ch] += p_nc.data()[ch * plane + i];
        }
        votes[l as usize][best] += 1;
    }
    let pick = |scores: &[f64]| {
        let mut best = 1;
        for ch in 2..channels {
            if scores[ch] > scores[best] {
                best = ch;
            }
        }
        best as u32
    };
    Ok(inst
        .instance_ids()
        .into_iter()
        .map(|id| {
            let v = &votes[id as usize];
            let class = if v[1..].iter().any(|&n| n > 0) {
                pick(&v.iter().map(|&n| n as f64).collect::<Vec<_>>())
            } else {
                pick(&mass[id as usize])
            };
            (id, class)
        })
        .collect())
}

//! Instance and class label maps.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{CaplError, Result};
use crate::tensor::Tensor;

/// Number of nucleus classes (background excluded).
pub const NUM_CLASSES: usize = 6;

/// Nucleus categories. The numeric id is the class index used everywhere
/// (0 is background) and follows the column order of the usual F1 tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NucleusClass {
    Eosinophil = 1,
    Epithelial = 2,
    Lymphocyte = 3,
    Plasma = 4,
    Neutrophil = 5,
    Connective = 6,
}

impl NucleusClass {
    pub const ALL: [NucleusClass; NUM_CLASSES] = [
        NucleusClass::Eosinophil,
        NucleusClass::Epithelial,
        NucleusClass::Lymphocyte,
        NucleusClass::Plasma,
        NucleusClass::Neutrophil,
        NucleusClass::Connective,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get((id as usize).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            NucleusClass::Eosinophil => "eosinophil",
            NucleusClass::Epithelial => "epithelial",
            NucleusClass::Lymphocyte => "lymphocyte",
            NucleusClass::Plasma => "plasma",
            NucleusClass::Neutrophil => "neutrophil",
            NucleusClass::Connective => "connective",
        }
    }
}

/// Per-pixel instance ids, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

/// Per-pixel class ids in `0..=NUM_CLASSES`, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassLabelMap {
    height: usize,
    width: usize,
    classes: Vec<u32>,
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 || height * width != len {
        return Err(CaplError::invalid(format!(
            "label map {height}x{width} cannot hold {len} pixels"
        )));
    }
    Ok(())
}

impl InstanceLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        check_dims(height, width, labels.len())?;
        Ok(InstanceLabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        InstanceLabelMap {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.width + c]
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Distinct positive labels, ascending.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Pixel indices of every positive label, keyed by label.
    pub fn pixel_sets(&self) -> HashMap<u32, Vec<usize>> {
        let mut sets: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                sets.entry(l).or_default().push(i);
            }
        }
        sets
    }

    /// Binary foreground mask as an `(H, W)` tensor.
    pub fn foreground(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| if l > 0 { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Renumbers positive labels to `1..=K` in row-major first-occurrence order.
    pub fn relabel_canonical(&self) -> InstanceLabelMap {
        let mut map: HashMap<u32, u32> = HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    let next = map.len() as u32 + 1;
                    *map.entry(l).or_insert(next)
                }
            })
            .collect();
        InstanceLabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    pub fn is_canonical(&self) -> bool {
        *self == self.relabel_canonical()
    }

    /// Splits every label into its 4-connected components, keeping only the
    /// largest one; smaller fragments become background.
    pub fn keep_largest_components(&self) -> InstanceLabelMap {
        let comps = connected_components(self.height, self.width, |i| self.labels[i] > 0, |a, b| {
            self.labels[a] == self.labels[b]
        });
        let mut best: HashMap<u32, (usize, u32)> = HashMap::new();
        let mut sizes: HashMap<u32, usize> = HashMap::new();
        for &c in comps.labels.iter().filter(|&&c| c > 0) {
            *sizes.entry(c).or_default() += 1;
        }
        for (i, &c) in comps.labels.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let owner = self.labels[i];
            let size = sizes[&c];
            let e = best.entry(owner).or_insert((size, c));
            if size > e.0 || (size == e.0 && c < e.1) {
                *e = (size, c);
            }
        }
        let labels = self
            .labels
            .iter()
            .zip(&comps.labels)
            .map(|(&l, &c)| if l > 0 && best[&l].1 == c { l } else { 0 })
            .collect();
        InstanceLabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

impl ClassLabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u32>) -> Result<Self> {
        check_dims(height, width, classes.len())?;
        if let Some(&bad) = classes.iter().find(|&&c| c as usize > NUM_CLASSES) {
            return Err(CaplError::invalid(format!("class id {bad} out of range")));
        }
        Ok(ClassLabelMap {
            height,
            width,
            classes,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        ClassLabelMap {
            height,
            width,
            classes: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// One-hot `(NUM_CLASSES + 1, H, W)` encoding, channel 0 = background.
    pub fn one_hot(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0; (NUM_CLASSES + 1) * plane];
        for (i, &c) in self.classes.iter().enumerate() {
            data[c as usize * plane + i] = 1.0;
        }
        Tensor::from_parts(vec![NUM_CLASSES + 1, self.height, self.width], data)
    }

    /// Checks that background instance pixels carry class 0.
    pub fn consistent_with(&self, inst: &InstanceLabelMap) -> bool {
        self.height == inst.height
            && self.width == inst.width
            && self
                .classes
                .iter()
                .zip(inst.labels())
                .all(|(&c, &l)| l > 0 || c == 0)
    }
}

/// Result of a 4-connected component labelling.
pub(crate) struct Components {
    pub labels: Vec<u32>,
    pub count: u32,
}

/// 4-connected component labelling of the pixels accepted by `include`, where
/// two neighbours join only when `same(a, b)` holds. Components are numbered
/// in row-major order of their first pixel.
pub(crate) fn connected_components(
    height: usize,
    width: usize,
    include: impl Fn(usize) -> bool,
    same: impl Fn(usize, usize) -> bool,
) -> Components {
    let mut labels = vec![0u32; height * width];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..height * width {
        if labels[start] != 0 || !include(start) {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / width, i % width);
            for j in neighbours4(r, c, height, width) {
                if labels[j] == 0 && include(j) && same(i, j) {
                    labels[j] = count;
                    queue.push_back(j);
                }
            }
        }
    }
    Components { labels, count }
}

/// Row-major 4-neighbourhood of `(r, c)`: up, left, right, down.
pub(crate) fn neighbours4(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let up = (r > 0).then(|| (r - 1) * w + c);
    let left = (c > 0).then(|| r * w + c - 1);
    let right = (c + 1 < w).then(|| r * w + c + 1);
    let down = (r + 1 < h).then(|| (r + 1) * w + c);
    [up, left, right, down].into_iter().flatten()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, l: &[u32]) -> InstanceLabelMap {
        InstanceLabelMap::new(h, w, l.to_vec()).unwrap()
    }

    #[test]
    fn relabel_examples() {
        assert_eq!(map(1, 4, &[0, 5, 5, 9]).relabel_canonical().labels(), &[0, 1, 1, 2]);
        assert_eq!(map(2, 2, &[0; 4]).relabel_canonical().labels(), &[0; 4]);
        assert_eq!(map(1, 3, &[7, 0, 3]).relabel_canonical().labels(), &[1, 0, 2]);
    }

    #[test]
    fn keeps_largest_fragment() {
        // label 4 has a 3-px and a 1-px piece
        let m = map(2, 4, &[4, 4, 0, 4, 4, 0, 0, 0]);
        assert_eq!(m.keep_largest_components().labels(), &[4, 4, 0, 0, 4, 0, 0, 0]);
    }

    #[test]
    fn class_ids_round_trip() {
        for c in NucleusClass::ALL {
            assert_eq!(NucleusClass::from_id(c.id()), Some(c));
        }
        assert_eq!(NucleusClass::from_id(0), None);
        assert_eq!(NucleusClass::from_id(7), None);
        assert_eq!(NucleusClass::Epithelial.id(), 2);
    }

    #[test]
    fn one_hot_layout() {
        let cls = ClassLabelMap::new(1, 2, vec![0, 3]).unwrap();
        let oh = cls.one_hot();
        assert_eq!(oh.shape(), &[7, 1, 2]);
        assert_eq!(oh.channel(0), &[1.0, 0.0]);
        assert_eq!(oh.channel(3), &[0.0, 1.0]);
        assert!(ClassLabelMap::new(1, 1, vec![7]).is_err());
    }

    proptest! {
        #[test]
        fn relabel_is_idempotent(labels in prop::collection::vec(0u32..6, 1..40)) {
            let m = map(1, labels.len(), &labels);
            let once = m.relabel_canonical();
            prop_assert_eq!(once.relabel_canonical(), once.clone());
            prop_assert!(once.is_canonical());
            // background preserved
            for (a, b) in m.labels().iter().zip(once.labels()) {
                prop_assert_eq!(*a == 0, *b == 0);
            }
        }
    }
}

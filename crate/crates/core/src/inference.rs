//! Running a trained network: instance predictions, corpus evaluation and
//! pseudo-label generation.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{CaplError, Result};
use crate::labels::{ClassLabelMap, InstanceLabelMap};
use crate::metrics::{evaluate_image, ClassifiedInstances, ImageEval, MetricReport};
use crate::model::TinyHoverNet;
use crate::parallel::par_map;
use crate::postprocess::{classify_instances, extract_instances, PostprocessConfig};
use crate::pseudo_label::{build_pseudo_labels, PseudoLabelSet, PSEUDO_MIN_PX};
use crate::synth::{hv_target_from_instances, SyntheticSample};
use crate::tensor::Tensor;

/// Instances and their classes predicted for one image.
pub fn predict(net: &TinyHoverNet, image: &Tensor, pp: &PostprocessConfig) -> Result<ClassifiedInstances> {
    let out = net.forward(image)?;
    let instances = extract_instances(&out.np_foreground(), &out.hv, pp)?;
    let classes = classify_instances(&instances, &out.nc)?;
    Ok(ClassifiedInstances { instances, classes })
}

/// Paints every instance with its class.
pub fn class_map(c: &ClassifiedInstances) -> Result<ClassLabelMap> {
    let (h, w) = (c.instances.height(), c.instances.width());
    let lookup: std::collections::HashMap<u32, u32> = c.classes.iter().copied().collect();
    let data = c
        .instances
        .labels()
        .iter()
        .map(|&l| match l {
            0 => Ok(0),
            l => lookup
                .get(&l)
                .copied()
                .ok_or_else(|| CaplError::invalid(format!("instance {l} has no class"))),
        })
        .collect::<Result<Vec<_>>>()?;
    ClassLabelMap::new(h, w, data)
}

pub fn ground_truth(s: &SyntheticSample) -> ClassifiedInstances {
    ClassifiedInstances {
        instances: s.instances.clone(),
        classes: s.instance_classes().into_iter().collect(),
    }
}

/// Predicts every sample of `ds` and scores it against its ground truth.
pub fn evaluate_dataset(
    net: &TinyHoverNet,
    ds: &Dataset,
    pp: &PostprocessConfig,
    radius: f64,
    threads: usize,
) -> Result<(Vec<ClassifiedInstances>, Vec<ImageEval>, MetricReport)> {
    let results = par_map(&ds.samples, threads, |_, s| -> Result<(ClassifiedInstances, ImageEval)> {
        let pred = predict(net, &s.image, pp)?;
        let e = evaluate_image(&ground_truth(s), &pred, radius)?;
        Ok((pred, e))
    });
    let (preds, evals): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let report = MetricReport::from_images(&evals);
    Ok((preds, evals, report))
}

/// Where stage-2 targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoTarget {
    /// The stage-1 HV prediction inside each pseudo-instance.
    #[default]
    Prediction,
    /// The HV map implied by the pseudo-instance shapes themselves.
    Geometry,
}

impl std::str::FromStr for PseudoTarget {
    type Err = CaplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prediction" => Ok(PseudoTarget::Prediction),
            "geometry" => Ok(PseudoTarget::Geometry),
            other => Err(CaplError::invalid(format!("unknown pseudo target '{other}'"))),
        }
    }
}

/// Stage-1 instances of one unlabelled image turned into prototypes;
/// instances under [`PSEUDO_MIN_PX`] pixels are dropped.
pub fn pseudo_label_image(
    net: &TinyHoverNet,
    id: &str,
    image: &Tensor,
    pp: &PostprocessConfig,
    target: PseudoTarget,
) -> Result<PseudoLabelSet> {
    let out = net.forward(image)?;
    let inst: InstanceLabelMap = extract_instances(&out.np_foreground(), &out.hv, pp)?;
    let hv = match target {
        PseudoTarget::Prediction => out.hv,
        PseudoTarget::Geometry => hv_target_from_instances(&inst),
    };
    Ok(build_pseudo_labels(&hv, &inst)?.discard_small(PSEUDO_MIN_PX).with_id(id))
}

pub fn pseudo_label_all(
    net: &TinyHoverNet,
    ids: &[String],
    images: &[Tensor],
    pp: &PostprocessConfig,
    target: PseudoTarget,
    threads: usize,
) -> Result<Vec<PseudoLabelSet>> {
    if ids.len() != images.len() {
        return Err(CaplError::invalid(format!("{} ids for {} images", ids.len(), images.len())));
    }
    par_map(images, threads, |i, img| pseudo_label_image(net, &ids[i], img, pp, target))
        .into_iter()
        .collect()
}

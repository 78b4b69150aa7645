//! On-disk synthetic datasets: one CAPLT file per map and sample, plus a
//! `manifest.json` listing the sample ids.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::caplt;
use crate::error::{CaplError, Result};
use crate::rng::SeedStream;
use crate::synth::{generate_sample, DomainName, DomainSpec, SyntheticSample};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: DomainName,
    pub split: String,
    pub seed: u64,
    pub size: usize,
    pub spec: DomainSpec,
    pub sample_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.manifest.sample_ids
    }
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Seed of sample `i`; distinct domains and splits draw from disjoint streams.
pub fn sample_seed(seed: u64, domain: DomainName, split: &str, i: usize) -> u64 {
    SeedStream::new(seed)
        .named(domain.as_str())
        .named(split)
        .split(i as u64)
        .seed()
}

pub fn generate(spec: &DomainSpec, split: &str, n: usize, size: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(CaplError::invalid("a dataset needs at least one sample"));
    }
    let samples = (0..n)
        .map(|i| generate_sample(spec, size, sample_seed(seed, spec.name, split, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            domain: spec.name,
            split: split.to_string(),
            seed,
            size,
            spec: spec.clone(),
            sample_ids: (0..n).map(sample_id).collect(),
        },
        samples,
    })
}

/// Files of one sample, in the order image, instances, classes, hv, np.
pub fn sample_paths(dir: &Path, id: &str) -> [PathBuf; 5] {
    ["image", "instances", "classes", "hv", "np"].map(|k| dir.join(format!("{id}.{k}.caplt")))
}

pub fn write(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, s) in ds.manifest.sample_ids.iter().zip(&ds.samples) {
        let [image, inst, classes, hv, np] = sample_paths(dir, id);
        caplt::write_tensor(&image, &s.image)?;
        caplt::write_instances(&inst, &s.instances)?;
        caplt::write_classes(&classes, &s.classes)?;
        caplt::write_tensor(&hv, &s.hv_gt)?;
        caplt::write_tensor(&np, &s.np_gt)?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&ds.manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CaplError::MissingData(path));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn read_sample(dir: &Path, id: &str) -> Result<SyntheticSample> {
    let paths = sample_paths(dir, id);
    if let Some(p) = paths.iter().find(|p| !p.exists()) {
        return Err(CaplError::MissingData(p.clone()));
    }
    let [image, inst, classes, _, _] = &paths;
    let s = SyntheticSample::from_labels(
        caplt::read_tensor(image)?,
        caplt::read_instances(inst)?,
        caplt::read_classes(classes)?,
    );
    let (_, h, w) = s.image.chw()?;
    if (h, w) != (s.instances.height(), s.instances.width()) || !s.classes.consistent_with(&s.instances) {
        return Err(CaplError::Format(format!("sample '{id}' has inconsistent maps")));
    }
    Ok(s)
}

pub fn read(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .sample_ids
        .iter()
        .map(|id| read_sample(dir, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

/// Images only; the route for unlabelled target data.
pub fn read_images(dir: &Path) -> Result<(DatasetManifest, Vec<crate::Tensor>)> {
    let manifest = read_manifest(dir)?;
    let images = manifest
        .sample_ids
        .iter()
        .map(|id| {
            let p = &sample_paths(dir, id)[0];
            if !p.exists() {
                return Err(CaplError::MissingData(p.clone()));
            }
            caplt::read_tensor(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_stream_separation() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&DomainSpec::target(), "train", 3, 32, 5).unwrap();
        write(dir.path(), &ds).unwrap();
        assert_eq!(read(dir.path()).unwrap(), ds);
        let (m, images) = read_images(dir.path()).unwrap();
        assert_eq!(m.sample_ids, ["s00000", "s00001", "s00002"]);
        assert_eq!(images[2], ds.samples[2].image);

        let test = generate(&DomainSpec::target(), "test", 1, 32, 5).unwrap();
        assert_ne!(test.samples[0], ds.samples[0]);
        assert_ne!(sample_seed(5, DomainName::Source, "train", 0), sample_seed(5, DomainName::Target, "train", 0));

        fs::remove_file(&sample_paths(dir.path(), "s00001")[2]).unwrap();
        assert!(matches!(read(dir.path()), Err(CaplError::MissingData(_))));
        assert!(matches!(read(&dir.path().join("nope")), Err(CaplError::MissingData(_))));
    }
}

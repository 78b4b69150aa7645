use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::caplt;
use crate::error::{CaplError, Result};
use crate::params::Parameterized;
use crate::tensor::Tensor;

use super::{DomainModel, TrainConfig};

pub const CHECKPOINT_BLOBS: &str = "checkpoint.caplt";
pub const CHECKPOINT_INDEX: &str = "checkpoint.json";
pub const LOSS_HISTORY: &str = "loss_history.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// Epoch means of the losses a stage optimizes; `None` where a loss is not
/// part of the stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_f: Option<f64>,
    pub l_dis: Option<f64>,
    pub l_p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub model: DomainModel,
    pub adam: Adam,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    offset: usize,
    len: usize,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    stage: Stage,
    config: TrainConfig,
    adam_config: AdamConfig,
    adam_step: u64,
    history: Vec<EpochLog>,
    entries: Vec<IndexEntry>,
}

const MODEL: &str = "model.";
const FIRST: &str = "adam.first.";
const SECOND: &str = "adam.second.";

impl Checkpoint {
    /// Writes the blob file, its JSON index and the loss history into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut named: Vec<(String, &Tensor)> = self
            .model
            .named()
            .into_iter()
            .map(|(n, t)| (format!("{MODEL}{n}"), t))
            .collect();
        named.extend(self.adam.first.iter().map(|(k, t)| (format!("{FIRST}{k}"), t)));
        named.extend(self.adam.second.iter().map(|(k, t)| (format!("{SECOND}{k}"), t)));
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(named.len());
        for (name, t) in named {
            let bytes = caplt::encode_tensor(t)?;
            entries.push(IndexEntry {
                name,
                offset: blob.len(),
                len: bytes.len(),
                shape: t.shape().to_vec(),
            });
            blob.extend_from_slice(&bytes);
        }
        let index = Index {
            stage: self.stage,
            config: self.config.clone(),
            adam_config: self.adam.config,
            adam_step: self.adam.step,
            history: self.history.clone(),
            entries,
        };
        fs::write(dir.join(CHECKPOINT_BLOBS), blob)?;
        fs::write(dir.join(CHECKPOINT_INDEX), serde_json::to_string_pretty(&index)?)?;
        fs::write(dir.join(LOSS_HISTORY), history_csv(&self.history))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let (ip, bp) = (dir.join(CHECKPOINT_INDEX), dir.join(CHECKPOINT_BLOBS));
        for p in [&ip, &bp] {
            if !p.exists() {
                return Err(CaplError::MissingData(p.clone()));
            }
        }
        let index: Index = serde_json::from_str(&fs::read_to_string(ip)?)?;
        let blob = fs::read(bp)?;
        let mut tensors = BTreeMap::new();
        let mut adam = Adam::new(index.adam_config);
        adam.step = index.adam_step;
        for e in index.entries {
            let bytes = blob
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| CaplError::Format(format!("entry {} lies outside the blob file", e.name)))?;
            let t = caplt::decode_tensor(bytes)?;
            if t.shape() != e.shape.as_slice() {
                return Err(CaplError::shape(&e.shape, t.shape()));
            }
            if let Some(n) = e.name.strip_prefix(MODEL) {
                tensors.insert(n.to_string(), t);
            } else if let Some(n) = e.name.strip_prefix(FIRST) {
                adam.first.insert(n.to_string(), t);
            } else if let Some(n) = e.name.strip_prefix(SECOND) {
                adam.second.insert(n.to_string(), t);
            } else {
                return Err(CaplError::Format(format!("unknown checkpoint entry {}", e.name)));
            }
        }
        let mut model = DomainModel::new(0);
        let bad = model.load_map(&tensors);
        if !bad.is_empty() || tensors.len() != model.named().len() {
            return Err(CaplError::Format(format!("checkpoint parameters do not match the model: {bad:?}")));
        }
        Ok(Checkpoint {
            stage: index.stage,
            config: index.config,
            model,
            adam,
            history: index.history,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn history_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,L_F,L_dis,L_p\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.epoch, cell(h.l_f), cell(h.l_dis), cell(h.l_p)));
    }
    out
}

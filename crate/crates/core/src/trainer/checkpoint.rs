//! Checkpoint directories: `checkpoint.json` plus one tensor file per array.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::{tensor_io, Dataset, Flavor};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::numeric::Tensor;
use crate::trainer::optimizer::OptimizerState;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSignature {
    pub flavor: Flavor,
    pub attributes: usize,
    pub feature_shape: [usize; 3],
}

impl DatasetSignature {
    pub fn of(dataset: &Dataset) -> Self {
        DatasetSignature {
            flavor: dataset.flavor(),
            attributes: dataset.attributes(),
            feature_shape: dataset.feature_shape(),
        }
    }

    /// Errors unless `dataset` has the attribute count and feature shape the model was trained on.
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        let other = DatasetSignature::of(dataset);
        if self.attributes != other.attributes || self.feature_shape != other.feature_shape {
            return Err(Error::Dimension {
                op: "checkpoint",
                detail: format!(
                    "checkpoint expects {} attributes and features {:?}, dataset has {} attributes and features {:?}",
                    self.attributes, self.feature_shape, other.attributes, other.feature_shape
                ),
            });
        }
        Ok(())
    }
}

/// Position of the episode generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Manifest(format!("unreadable generator state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub mode: Mode,
    /// Episodes completed.
    pub episode: usize,
    pub train: TrainConfig,
    pub dataset: DatasetSignature,
    /// Seen identities, in classifier-row order.
    pub seen_identities: Vec<String>,
    pub rng: RngState,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
    pub optimizer: OptimizerState,
}

fn file_name(name: &str) -> String {
    format!("{name}.mft")
}

impl Checkpoint {
    /// Writes the checkpoint into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = self.meta.clone();
        meta.tensors.clear();
        meta.optimizer_step = self.optimizer.step;
        let params = self.model.params();
        let mut arrays: Vec<(String, &Tensor<f32>)> = params.iter().map(|(n, t)| (n.to_string(), *t)).collect();
        for (i, (name, _)) in params.iter().enumerate() {
            arrays.push((format!("adam.m.{name}"), &self.optimizer.first[i]));
            arrays.push((format!("adam.v.{name}"), &self.optimizer.second[i]));
        }
        for (name, tensor) in arrays {
            let file = file_name(&name);
            tensor_io::write(&dir.join(&file), tensor)?;
            meta.tensors.push(TensorEntry {
                name,
                file,
                shape: tensor.shape().to_vec(),
            });
        }
        let path = dir.join(CHECKPOINT_FILE);
        let mut text = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "{}: checkpoint format {} (expected {FORMAT_VERSION})",
                path.display(),
                meta.format_version
            )));
        }
        let mut params = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for entry in &meta.tensors {
            let tensor = tensor_io::read(&dir.join(&entry.file))?;
            if tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Manifest(format!(
                    "{}: shape {:?} differs from recorded {:?}",
                    entry.file,
                    tensor.shape(),
                    entry.shape
                )));
            }
            if let Some(name) = entry.name.strip_prefix("adam.m.") {
                first.push((name.to_string(), tensor));
            } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
                second.push((name.to_string(), tensor));
            } else {
                params.push((entry.name.clone(), tensor));
            }
        }
        let model = Model::from_params(meta.mode, params)?;
        let order: Vec<&str> = model.params().iter().map(|(n, _)| *n).collect();
        let arrange = |mut list: Vec<(String, Tensor<f32>)>, kind: &str| -> Result<Vec<Tensor<f32>>> {
            order
                .iter()
                .map(|name| {
                    let pos = list
                        .iter()
                        .position(|(n, _)| n == name)
                        .ok_or_else(|| Error::Manifest(format!("optimizer {kind} moment of {name} is missing")))?;
                    Ok(list.swap_remove(pos).1)
                })
                .collect()
        };
        let optimizer = OptimizerState {
            step: meta.optimizer_step,
            first: arrange(first, "first")?,
            second: arrange(second, "second")?,
        };
        for ((name, p), (m, v)) in model.params().iter().zip(optimizer.first.iter().zip(&optimizer.second)) {
            if p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::Manifest(format!("optimizer moments of {name} do not match its shape")));
            }
        }
        if model.mode == Mode::Classifier
            && model.fc.as_ref().map(|f| f.rows()) != Some(meta.seen_identities.len())
        {
            return Err(Error::Manifest("classifier rows differ from the seen identity count".into()));
        }
        Ok(Checkpoint { meta, model, optimizer })
    }
}

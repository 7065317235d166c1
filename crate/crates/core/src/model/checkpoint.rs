use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

/// Student and teacher parameters with the configuration they were built
/// for. Values are stored at 64-bit so 32-bit parameters round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub student: ModelParams<f64>,
    pub teacher: ModelParams<f64>,
}

#[derive(Serialize, Deserialize)]
struct ArrayFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u64,
    model_config: ModelConfig,
    step: u64,
    student: BTreeMap<String, ArrayFile>,
    teacher: BTreeMap<String, ArrayFile>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u64,
}

fn to_arrays(params: &ModelParams<f64>) -> BTreeMap<String, ArrayFile> {
    params
        .iter()
        .map(|(k, t)| {
            (
                k.clone(),
                ArrayFile {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect()
}

fn from_arrays(config: &ModelConfig, arrays: BTreeMap<String, ArrayFile>) -> Result<ModelParams<f64>, ModelError> {
    let tensors = arrays
        .into_iter()
        .map(|(k, a)| {
            Tensor::new(a.shape, a.data)
                .map(|t| (k.clone(), t))
                .map_err(|e| ModelError::ShapeMismatch(format!("{k}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    ModelParams::from_map(config, tensors)
}

impl Checkpoint {
    pub fn new<T: Real>(config: &ModelConfig, step: u64, student: &ModelParams<T>, teacher: &ModelParams<T>) -> Self {
        Checkpoint {
            config: config.clone(),
            step,
            student: student.cast(),
            teacher: teacher.cast(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let file = CheckpointFile {
            version: CHECKPOINT_FORMAT_VERSION,
            model_config: self.config.clone(),
            step: self.step,
            student: to_arrays(&self.student),
            teacher: to_arrays(&self.teacher),
        };
        let text = serde_json::to_string(&file).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }

    /// Reads a checkpoint; when `expected` is given its shapes must agree
    /// with the stored configuration.
    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        let probe: VersionProbe =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        if probe.version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Version {
                found: probe.version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        file.model_config.validate()?;
        let config = file.model_config;
        let student = from_arrays(&config, file.student)?;
        let teacher = from_arrays(&config, file.teacher)?;
        if let Some(want) = expected {
            // every shape-determining field has to agree
            if super::param_shapes(want) != super::param_shapes(&config) {
                return Err(ModelError::ShapeMismatch(format!(
                    "checkpoint built for {config:?}, expected {want:?}"
                )));
            }
        }
        Ok(Checkpoint {
            config,
            step: file.step,
            student,
            teacher,
        })
    }
}

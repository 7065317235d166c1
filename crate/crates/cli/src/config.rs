use std::fs;
use std::path::{Path, PathBuf};

use boxseg::model::ModelConfig;
use boxseg::scene::SceneConfig;
use boxseg::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "config_resolved.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run depends on. Resolution order: built-in defaults, then
/// the config file, then command-line flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.scene.num_classes {
            return Err(CliError::Config(format!(
                "model.num_classes {} differs from scene.num_classes {}",
                self.model.num_classes, self.scene.num_classes
            )));
        }
        if self.model.num_queries < self.scene.instances.1 {
            return Err(CliError::Config(format!(
                "model.num_queries {} is below the largest instance count {}",
                self.model.num_queries, self.scene.instances.1
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Flag value if given, else the config's, else an error naming the flag.
pub fn require_path(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| CliError::Config(format!("--{name} not given and paths.{name} unset in config")))
}

use boxseg::eval::EvalError;
use boxseg::losses::LossError;
use boxseg::model::ModelError;
use boxseg::pseudolabel::PseudoLabelError;
use boxseg::scene::SceneError;
use boxseg::training::TrainError;

/// Every failure the driver reports, each kind with its own exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Training(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Training(_) => "training",
        }
    }

    /// 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Data(_) => 5,
            CliError::Checkpoint(_) => 6,
            CliError::Training(_) => 7,
        }
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Io { .. } => CliError::Io(e.to_string()),
            SceneError::Config(_) | SceneError::OverlapUnreachable { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Io(e.to_string()),
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Version { .. } | ModelError::ShapeMismatch(_) | ModelError::Checkpoint(_) => {
                CliError::Checkpoint(e.to_string())
            }
            _ => CliError::Training(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Loss(LossError::Weights(_)) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Training(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Scene(s) => s.into(),
            EvalError::PseudoLabel(p) => p.into(),
        }
    }
}

impl From<PseudoLabelError> for CliError {
    fn from(e: PseudoLabelError) -> Self {
        match e {
            PseudoLabelError::Model(m) => m.into(),
            _ => CliError::Training(e.to_string()),
        }
    }
}

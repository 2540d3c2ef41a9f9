use dissent_core::blending::BlendError;
use dissent_core::corpus::CorpusError;
use dissent_core::evaluation::EvalError;
use dissent_core::model::ModelError;
use dissent_core::specialization::SpecializationError;
use dissent_core::synthesis::SynthesisError;
use dissent_core::training::TrainingError;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Runtime,
    Provider,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
            ErrorKind::Provider => 3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Validation, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.into() }
    }

    pub fn provider(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Provider, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Ridge(_) => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite(_) | ModelError::Io(_) => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::InvalidConfig(_) | TrainingError::MissingProfile(_) => Self::validation(e.to_string()),
            TrainingError::Model(m) => m.into(),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::MissingProfile(_) | EvalError::UnknownValue { .. } | EvalError::TooFewReplicates { .. } => {
                Self::validation(e.to_string())
            }
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<SpecializationError> for CliError {
    fn from(e: SpecializationError) -> Self {
        match e {
            SpecializationError::MissingProfile(_) => Self::validation(e.to_string()),
            SpecializationError::Model(m) => m.into(),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::Io { .. } | SynthesisError::KMeans(_) => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<BlendError> for CliError {
    fn from(e: BlendError) -> Self {
        match e {
            BlendError::Training(t) => t.into(),
            BlendError::KMeans(_) => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

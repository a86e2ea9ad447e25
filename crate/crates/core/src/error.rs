//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid ontology: {0}")]
    InvalidOntology(String),

    #[error("invalid knowledge base: {0}")]
    InvalidKb(String),

    #[error("invalid dialog {id}: {reason}")]
    InvalidDialog { id: String, reason: String },

    #[error("consistency judgement unavailable: record {0} carries no gold KB")]
    JudgeUnavailable(String),

    #[error("KB entity `{value}` ({etype}) is outside the model vocabulary")]
    KbEntityOutOfVocab { value: String, etype: String },

    #[error("invalid stage order `{0}`: completion must follow insertion and stages may not repeat")]
    InvalidStageOrder(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("training diverged in {stage}: {reason}")]
    Diverged { stage: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config mismatch: artifact `{artifact}` was produced under config {found}, expected {expected}")]
    ConfigMismatch {
        artifact: String,
        found: String,
        expected: String,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl CoreError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        CoreError::Json {
            context: context.into(),
            source,
        }
    }
}

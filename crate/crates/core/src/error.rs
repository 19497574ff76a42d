use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::embeddings::EmbeddingError;
use crate::eval::EvalError;
use crate::features::FeatureError;
use crate::llm::LlmError;
use crate::prompt::PromptError;
use crate::scene::IngestError;
use crate::selector::SelectError;
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Ingest(e) => match e {
                IngestError::MalformedManifest { .. } => "MalformedManifest",
                IngestError::NonRigidPose { .. } => "NonRigidPose",
                IngestError::MissingFile { .. } => "MissingFile",
                IngestError::DimensionMismatch { .. } => "DimensionMismatch",
                IngestError::UnsupportedDepthEncoding(_) => "UnsupportedDepthEncoding",
                IngestError::UnsupportedColorEncoding(_) => "UnsupportedColorEncoding",
                IngestError::UnknownFrame(_) => "UnknownFrame",
                IngestError::Io { .. } => "Io",
            },
            Error::Feature(FeatureError::ImageTooSmall { .. }) => "ImageTooSmall",
            Error::Feature(FeatureError::Ingest(_)) => "Ingest",
            Error::Feature(FeatureError::Cache { .. }) => "FeatureCache",
            Error::Embedding(e) => match e {
                EmbeddingError::HeaderMismatch(_) => "HeaderMismatch",
                EmbeddingError::FrameCoverageError { .. } => "FrameCoverageError",
                EmbeddingError::NonFiniteEmbedding { .. } => "NonFiniteEmbedding",
                EmbeddingError::ZeroEmbedding { .. } => "ZeroEmbedding",
                EmbeddingError::UnknownFrame(_) => "UnknownFrame",
                EmbeddingError::Io { .. } => "Io",
            },
            Error::Select(e) => match e {
                SelectError::EmptyInput => "EmptyInput",
                SelectError::DegenerateStats => "DegenerateStats",
                SelectError::SingularCovariance => "SingularCovariance",
                SelectError::DuplicateFrame(_) => "DuplicateFrame",
                SelectError::MissingEmbedding(_) => "MissingEmbedding",
                SelectError::TooManyFrames { .. } => "TooManyFrames",
                SelectError::InvalidConfig(_) => "InvalidConfig",
            },
            Error::Prompt(e) => match e {
                PromptError::EmptyInput => "EmptyInput",
                PromptError::EmptyQuery => "EmptyQuery",
                PromptError::UnknownFrame(_) => "UnknownFrame",
                PromptError::Ingest(_) => "Ingest",
                PromptError::Encode(_) => "Encode",
                PromptError::Malformed(_) => "MalformedPrompt",
            },
            Error::Llm(e) => match e {
                LlmError::BackendUnavailable { .. } => "BackendUnavailable",
                LlmError::MissingApiKey { .. } => "MissingApiKey",
                LlmError::ReplayMiss { .. } => "ReplayMiss",
                LlmError::ProviderError { .. } => "ProviderError",
                LlmError::ReplayFile { .. } => "ReplayFile",
            },
            Error::Eval(e) => match e {
                EvalError::Dataset(_) => "Dataset",
                EvalError::EmptyBank => "EmptyBank",
                EvalError::Incomplete { .. } => "Incomplete",
            },
            Error::Synth(_) => "Synth",
            Error::Io { .. } => "Io",
            Error::Invalid(_) => "Invalid",
        }
    }
}

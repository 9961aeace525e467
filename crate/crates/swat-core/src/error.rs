//! Crate-wide error type.

use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, SwatError>;

/// Everything that can go wrong across the pipeline, with enough context to
/// point at the offending file, concept, or configuration key.
#[derive(Debug)]
pub enum SwatError {
    /// I/O failure tagged with the path that was being touched.
    Io { path: PathBuf, source: io::Error },
    /// Malformed JSON/JSONL payload (path + line where applicable).
    Parse { path: PathBuf, line: Option<usize>, message: String },
    /// Configuration rejected (unknown key, bad value, missing section).
    Config { message: String },
    /// Two corpus records share an id.
    DuplicateRecordId { id: String },
    /// A vocabulary entry is unusable (no synonyms, no prompts, duplicate concept).
    Vocabulary { message: String },
    /// Two embeddings (or an embedding and a parameter matrix) disagree in length.
    DimensionMismatch { context: String, expected: usize, got: usize },
    /// An operation parameter is out of its documented range.
    InvalidParameter { name: String, message: String },
    /// A concept does not have enough examples for the requested split.
    NotEnoughExamples { concept: String, requested: usize, available: usize },
    /// Pools that must share a concept vocabulary do not.
    PoolMismatch { message: String },
    /// An operation needs a model in a particular stage.
    WrongStage { expected: String, found: String },
    /// Training produced a non-finite loss; aborted.
    NonFiniteLoss { stage: String, epoch: usize, batch: usize },
    /// The domain-gap probe preconditions are not met.
    Probe { message: String },
    /// A checkpoint file is corrupt or from an incompatible version.
    Checkpoint { message: String },
    /// A dataset that must be non-empty is empty.
    EmptyData { context: String },
    /// An encoder was fed the wrong input kind (features vs. images).
    InputKind { expected: String, got: String },
}

impl fmt::Display for SwatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SwatError::Io { path, source } => {
                write!(f, "io error on {}: {}", path.display(), source)
            }
            SwatError::Parse { path, line: Some(line), message } => {
                write!(f, "parse error in {} line {}: {}", path.display(), line, message)
            }
            SwatError::Parse { path, line: None, message } => {
                write!(f, "parse error in {}: {}", path.display(), message)
            }
            SwatError::Config { message } => write!(f, "config error: {}", message),
            SwatError::DuplicateRecordId { id } => {
                write!(f, "duplicate corpus record id {:?}", id)
            }
            SwatError::Vocabulary { message } => write!(f, "vocabulary error: {}", message),
            SwatError::DimensionMismatch { context, expected, got } => {
                write!(f, "dimension mismatch in {}: expected {}, got {}", context, expected, got)
            }
            SwatError::InvalidParameter { name, message } => {
                write!(f, "invalid parameter {}: {}", name, message)
            }
            SwatError::NotEnoughExamples { concept, requested, available } => {
                write!(
                    f,
                    "concept {:?} has only {} examples, {} requested",
                    concept, available, requested
                )
            }
            SwatError::PoolMismatch { message } => write!(f, "pool mismatch: {}", message),
            SwatError::WrongStage { expected, found } => {
                write!(f, "model stage is {:?}, operation requires {:?}", found, expected)
            }
            SwatError::NonFiniteLoss { stage, epoch, batch } => {
                write!(f, "non-finite loss in {} at epoch {} batch {}; aborting", stage, epoch, batch)
            }
            SwatError::Probe { message } => write!(f, "domain-gap probe: {}", message),
            SwatError::Checkpoint { message } => write!(f, "checkpoint error: {}", message),
            SwatError::EmptyData { context } => write!(f, "empty dataset: {}", context),
            SwatError::InputKind { expected, got } => {
                write!(f, "encoder expected {} input, got {}", expected, got)
            }
        }
    }
}

impl std::error::Error for SwatError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SwatError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl SwatError {
    /// Attach a path to a raw `io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        SwatError::Io { path: path.into(), source }
    }

    pub fn config(message: impl Into<String>) -> Self {
        SwatError::Config { message: message.into() }
    }

    pub fn invalid(name: impl Into<String>, message: impl Into<String>) -> Self {
        SwatError::InvalidParameter { name: name.into(), message: message.into() }
    }
}

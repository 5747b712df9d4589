use std::path::PathBuf;

use thiserror::Error;

use crate::chain::ChainTrace;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("invalid label scheme: {0}")]
    InvalidScheme(String),
    #[error("sample field `{0}` must be non-empty")]
    EmptyField(&'static str),
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template for step {found:?} used where {expected:?} is required")]
    TemplateMismatch { expected: crate::prompt::Step, found: crate::prompt::Step },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("failed to read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse template {path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no yes/no judgment in {0:?}")]
    JudgmentUnparsed(String),
    #[error("no if-then rule or unique label in {0:?}")]
    IfThenUnparsed(String),
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("environment variable {0} holding the API key is not set")]
    AuthMissing(String),
    #[error("provider returned HTTP {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no mock fixture for request {0}")]
    MockMiss(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("cache record at line {0} is unreadable")]
    CacheCorrupt(usize),
    #[error("cache i/o: {0}")]
    CacheIo(#[from] std::io::Error),
}

impl LlmError {
    /// Transport-level failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Timeout | LlmError::Transport(_) => true,
            LlmError::ProviderError { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("invalid chain config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("pipeline aborted on sample {}: {source}", .trace.sample_id)]
    PipelineAbort {
        trace: Box<ChainTrace>,
        #[source]
        source: LlmError,
    },
    #[error("every sample failed ({failed} of {total})")]
    BatchAbort { failed: usize, total: usize },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid UTF-8 at byte {offset}")]
    Encoding { offset: usize },
    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("unmapped label {raw:?} at row {row}")]
    LabelUnmapped { raw: String, row: usize },
    #[error("duplicate id {id:?} at row {row}")]
    DuplicateId { id: String, row: usize },
    #[error("unknown target {0:?}")]
    UnknownTarget(String),
    #[error("source and destination target are both {0:?}")]
    SameTarget(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid column map: {0}")]
    InvalidColumnMap(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("gold and prediction lists differ in length ({golds} vs {preds})")]
    LengthMismatch { golds: usize, preds: usize },
    #[error("no samples to score")]
    EmptyInput,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no reports to render")]
    NoReports,
}

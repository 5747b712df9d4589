//! Zero-shot stance detection with a three-step, if-then chain of thought.
//!
//! A sample first goes through an evidence judgment. When the text alone is
//! not enough, the model writes a `QUERY [...]` call that a second model
//! answers. The final step asks for an `[IF (reason) then (the attitude is
//! label)]` rule, and the rule's label becomes the prediction.

pub mod chain;
pub mod corpus;
pub mod domain;
pub mod error;
pub mod llmio;
pub mod metrics;
pub mod outparse;
pub mod prompt;
pub mod run;

pub use chain::{resolve_label, ChainConfig, ChainTrace, Pipeline, Providers, Resolution};
pub use domain::{canonical_surface, normalize_label, Dataset, LabelScheme, Split, StanceLabel, StanceSample};
pub use error::{ChainError, CorpusError, DomainError, LlmError, MetricsError, ParseError, PromptError};

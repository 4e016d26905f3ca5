//! Localized VQA scoring of attribute confusion in multi-garment
//! text-to-image generation.
//!
//! Pipeline: a [`StructuredPrompt`] yields reflection and leakage
//! [`Question`]s; each question is asked of a VQA model against a
//! [`LocalizedView`] of its subject entity; answers fold into
//! [`ConfusionCounts`] and then into scores that can be correlated with
//! human judgments collected by the [`study`] service.

pub mod backend;
pub mod correlation;
pub mod localization;
pub mod probing;
pub mod prompt;
pub mod scoring;
pub mod study;

pub use backend::{BackendError, RetryPolicy};
pub use correlation::{correlate, CorrelationReport, CorrelationResult, ItemScores};
pub use localization::{localize, BBox, LocalizeParams, LocalizedView, Mask, Strategy};
pub use probing::{
    build_questions, evaluate_item, evaluate_items, AnswerRecord, EvalConfig, Outcome, Question, QuestionKind,
};
pub use prompt::{EvalItem, EvalItemRecord, StructuredPrompt};
pub use scoring::{ConfusionCounts, MetricKind, ScoreReport};

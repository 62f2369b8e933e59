//! Extraction of vaccine adjuvant names from clinical-trial records and
//! article abstracts with prompted chat-completion models, plus the
//! evaluation machinery that scores those extractions against gold
//! annotations.
//!
//! The pipeline, module by module:
//!
//! - [`corpus`]: tab-separated loaders for trials, abstracts, gold
//!   annotations and the synonym dictionary.
//! - [`prompt`]: zero- and few-shot prompt rendering, with or without the
//!   substances/interventions context block.
//! - [`gateway`]: dispatch to a live HTTP backend, a replay store or a
//!   scripted mock, with bounded batch concurrency.
//! - [`postprocess`]: recovery of `(id, name)` rows from raw model text.
//! - [`scoring`]: case-insensitive dictionary matching, counting and the
//!   precision/recall/F1 family, generic over the scalar type.
//! - [`adjudication`]: the two-reviewer plus tie-breaker workflow, its
//!   append-only log and the review HTTP API.
//! - [`experiment`]: the model × shots × context matrix, the
//!   run-consistency filter and tabular reports.
//!
//! Metric arithmetic is written once against [`scoring::Scalar`]; the
//! aliases below fix the two instantiations the crate uses.

pub mod adjudication;
pub mod corpus;
pub mod experiment;
pub mod gateway;
pub mod postprocess;
pub mod prompt;
pub mod reference;
pub mod scoring;

/// Floating-point metric type used for display and ad-hoc computation.
pub type Metric = f64;

/// Exact rational metric type; scored cells are computed in this type so
/// that half-up rounding to two decimals is exact.
pub type ExactMetric = num_rational::Rational64;

pub use corpus::{DocumentKind, DocumentRecord, GoldSet, SynonymDictionary};
pub use postprocess::{Extraction, ParseResult};
pub use scoring::{MatchClass, MatchOutcome, MetricCounts};

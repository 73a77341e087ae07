//! Layered guardrails for retrieval-augmented chat pipelines.
//!
//! The crate is organized as independently testable stages that compose into
//! five pipeline variants of increasing strictness:
//!
//! - [`model`] — sessions, turns, verdicts, and the rolling audit window
//! - [`detect`] — lexical/encoding injection scanners and the output leak scan
//! - [`intent`] — the tourism/self/other intent router
//! - [`retrieval`] — embedding, cosine top-k retrieval, and the relevance gate
//! - [`grounded`] — model-backend abstraction and evidence-only summarization
//! - [`pipeline`] — per-turn composition of the stages into variants V0..V4
//! - [`telemetry`] — the append-only critical-prompt-event log
//! - [`eval`] — corpus loading, batch evaluation, and confusion-matrix metrics
//! - [`corpus`] — deterministic generator for the bundled synthetic fixtures

pub mod corpus;
pub mod detect;
pub mod eval;
pub mod grounded;
pub mod intent;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod telemetry;

pub use detect::{scan_injection, scan_leak, DetectorHit, LeakScanConfig, PatternSet};
pub use eval::{compute_metrics, load_corpus, AttackSample, ConfusionCounts};
pub use intent::{classify_intent, Intent, IntentRouterConfig};
pub use model::{
    AttackCategory, Clock, CpeTag, GuardAction, GuardVerdict, PipelineVariant, Role, Session, Turn,
};
pub use pipeline::{Pipeline, PipelineConfig};
pub use retrieval::{cosine, Chunk, ChunkKind, ChunkStore, GateConfig, GateDecision, GateRoute};
pub use telemetry::{CpeEvent, CpeFilter, CpeLog};

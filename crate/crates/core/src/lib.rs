//! Point-entity prompting harness for LLM-based named entity recognition.
//!
//! The pipeline runs in this order:
//!
//! 1. [`corpus`] ingests sentences with typed gold mentions and derives
//!    per-type entity pools.
//! 2. [`embed`] turns entity surfaces into unit vectors through a pluggable
//!    [`embed::Encoder`].
//! 3. [`select`] picks representative point entities per type (K-Means
//!    centers decoded to their most similar real entity, plus random and
//!    ablation variants).
//! 4. [`prompt`] renders zero-shot, few-shot and point-entity prompts.
//! 5. [`llm`] drives a chat-completion endpoint (or a test double) with
//!    greedy decoding, retries and a response cache.
//! 6. [`parse`] recovers a JSON prediction from raw model text.
//! 7. [`score`] computes entity-level micro precision/recall/F1.
//! 8. [`runner`] ties everything together for seeded runs and sweeps.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod corpus;
pub mod embed;
pub mod exec;
pub mod llm;
pub mod parse;
pub mod prompt;
pub mod runner;
pub mod score;
pub mod seed;
pub mod select;
pub mod synthetic;

pub use corpus::{Dataset, Demonstration, EntityPool, EntityType, GoldMention, Schema, Sentence};
pub use embed::{EmbeddedEntity, Embedder, Encoder, HashedTrigramEncoder};
pub use exec::Execution;
pub use llm::{ChatBackend, CompletionClient, CompletionRequest, CompletionResult};
pub use parse::{ParseStatus, Prediction};
pub use prompt::{PromptBundle, PromptConfig};
pub use runner::{ExperimentConfig, Method, RunResult};
pub use score::ScoreReport;
pub use select::{PointSelection, SelectionMethod};

//! Contrastive two-hypothesis adjudication harness.
//!
//! Two specialist agents each argue for one of two mutually exclusive
//! diagnoses; a judge grounds both evidence sets in the image and decides.
//! The crate provides the shared domain types, three model backends (HTTP
//! chat-completion, transcript replay and a seeded simulator), dataset
//! curation, the five evaluation pipelines and the paired statistics used to
//! compare them.

pub mod backend;
pub mod canonical;
pub mod curation;
pub mod exec;
pub mod orchestrator;
pub mod stats;
pub mod template;
pub mod types;

pub use backend::{BackendError, ModelBackend, ModelRequest, ModelResponse, Provenance};
pub use canonical::{canonical_hash, to_canonical_json};
pub use template::{render_prompt, TemplateError};
pub use types::*;

//! The model-call contract and its three implementations.

use serde::{Deserialize, Serialize};

use crate::canonical::canonical_hash;
use crate::template::TemplateError;
use crate::types::{ImagePayload, Role, SamplingParams};

pub mod http;
pub mod sim;
pub mod transcript;

pub use crate::types::Provenance;
pub use http::{HttpBackend, HttpConfig, HttpReply, HttpTransport, RetryPolicy, UreqTransport};
pub use sim::{SimConfig, SimConfigError, SimulatorBackend};
pub use transcript::{ReplayBackend, TranscriptEntry, TranscriptStore};

/// Where a call sits in the run. Not part of the cache key; only the
/// simulator reads it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallContext {
    pub study_id: String,
    pub call_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub role: Role,
    pub prompt: String,
    pub images: Vec<ImagePayload>,
    pub sampling: SamplingParams,
    pub context: CallContext,
}

impl ModelRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        let t = self.sampling.temperature;
        if !(0.0..=2.0).contains(&t) {
            return Err(BackendError::InvalidRequest(format!("temperature {t} outside [0, 2]")));
        }
        if self.sampling.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String, TemplateError> {
        canonical_hash(self.role, &self.prompt, &self.images, &self.sampling)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    pub provenance: Provenance,
    /// Transport attempts, including the successful one.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): status {status:?}: {message}")]
    Transport {
        status: Option<u16>,
        message: String,
        attempts: u32,
    },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("malformed upstream reply: {0}")]
    Malformed(String),
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("transcript store: {0}")]
    Store(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. } | BackendError::RateLimited { .. })
    }
}

/// Anything that can answer a model request.
pub trait ModelBackend: Send + Sync {
    /// Stable identity stamped into run manifests.
    fn id(&self) -> String;

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError>;

    /// True when responses are a pure function of the request.
    fn is_deterministic(&self) -> bool {
        false
    }
}

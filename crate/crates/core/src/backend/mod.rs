//! Streaming generation backends.
//!
//! Every backend turns a [`GenRequest`] into an ordered stream of
//! [`StreamChunk`]s that ends with exactly one finish reason. Resuming
//! after an interruption is expressed through `assistant_prefix`: the
//! backend continues that partial assistant message.

mod http;
mod mock;
pub mod sse;
mod stop;

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpConfig, HttpSseBackend, PrefillMode};
pub use mock::{
    parse_constraint, CompliantBackend, MockConfig, NoisyBackend, NoisyConfig, ScriptConfig,
    ScriptedBackend,
};
pub use stop::{RawDelta, StopFilter};

use crate::feedback::PromptBundle;
use crate::units::Counter;

pub const DEFAULT_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("connection error: {0}")]
    Connection(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("upstream returned HTTP {status}{}: {body}", if *retryable { " (retryable)" } else { "" })]
    Status {
        status: u16,
        retryable: bool,
        body: String,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cannot parse a length constraint from the prompt: {0}")]
    UnparseableConstraint(String),
    #[error("script error: {0}")]
    Script(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Connection(_) => true,
            BackendError::Status { retryable, .. } => *retryable,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn new(role: Role, text: impl Into<String>) -> Message {
        Message {
            role,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub context: Vec<Message>,
    pub sampling: Sampling,
    pub stop_sequences: Vec<String>,
    /// Partial assistant message the reply continues from.
    pub assistant_prefix: String,
}

impl GenRequest {
    pub fn new(context: Vec<Message>) -> GenRequest {
        GenRequest {
            context,
            sampling: Sampling::default(),
            stop_sequences: Vec::new(),
            assistant_prefix: String::new(),
        }
    }

    pub fn from_prompt(prompt: &PromptBundle) -> GenRequest {
        let mut context = Vec::with_capacity(2);
        if !prompt.system_text.is_empty() {
            context.push(Message::new(Role::System, prompt.system_text.clone()));
        }
        context.push(Message::new(Role::User, prompt.user_text.clone()));
        GenRequest::new(context)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let s = &self.sampling;
        if s.temperature.is_nan() || s.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest("top_p must be in (0, 1]".into()));
        }
        if s.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        if self.stop_sequences.iter().any(String::is_empty) {
            return Err(BackendError::InvalidRequest("empty stop sequence".into()));
        }
        Ok(())
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.context
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopSequence,
    Eos,
    LengthCap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamChunk {
    pub text_delta: String,
    pub finish: Option<FinishReason>,
    pub matched_stop: Option<String>,
}

impl StreamChunk {
    pub fn delta(text: impl Into<String>) -> StreamChunk {
        StreamChunk {
            text_delta: text.into(),
            finish: None,
            matched_stop: None,
        }
    }
}

pub type ChunkStream = Box<dyn Iterator<Item = Result<StreamChunk, BackendError>> + Send>;

pub trait Backend: Send + Sync {
    fn start_stream(&self, request: &GenRequest) -> Result<ChunkStream, BackendError>;

    fn name(&self) -> &str;
}

/// Collected result of a whole stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub finish: FinishReason,
    pub matched_stop: Option<String>,
}

/// Drains a stream, checking that exactly one finish arrives and that it
/// is the last chunk.
pub fn collect_stream(stream: ChunkStream) -> Result<Completion, BackendError> {
    let mut text = String::new();
    let mut finish = None;
    for chunk in stream {
        let chunk = chunk?;
        if finish.is_some() {
            return Err(BackendError::Protocol("chunk after finish".into()));
        }
        text.push_str(&chunk.text_delta);
        if let Some(f) = chunk.finish {
            finish = Some((f, chunk.matched_stop));
        }
    }
    let (finish, matched_stop) =
        finish.ok_or_else(|| BackendError::Protocol("stream ended without a finish".into()))?;
    Ok(Completion {
        text,
        finish,
        matched_stop,
    })
}

pub fn complete(backend: &dyn Backend, request: &GenRequest) -> Result<Completion, BackendError> {
    collect_stream(backend.start_stream(request)?)
}

/// Backend selection as it appears in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    HttpSse(HttpConfig),
    Scripted(ScriptConfig),
    Compliant(MockConfig),
    Noisy(NoisyConfig),
}

pub fn build_backend(kind: &BackendKind, counter: &Counter) -> Result<Arc<dyn Backend>, BackendError> {
    Ok(match kind {
        BackendKind::HttpSse(cfg) => Arc::new(HttpSseBackend::new(cfg.clone())?),
        BackendKind::Scripted(cfg) => Arc::new(ScriptedBackend::from_config(cfg, counter.clone())),
        BackendKind::Compliant(cfg) => Arc::new(CompliantBackend::new(*cfg, counter.clone())),
        BackendKind::Noisy(cfg) => Arc::new(NoisyBackend::new(*cfg, counter.clone())),
    })
}

/// Wraps a backend and keeps every request it receives.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    requests: Mutex<Vec<GenRequest>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> RecordingBackend {
        RecordingBackend {
            inner,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<GenRequest> {
        self.requests.lock().expect("poisoned").clone()
    }
}

impl Backend for RecordingBackend {
    fn start_stream(&self, request: &GenRequest) -> Result<ChunkStream, BackendError> {
        self.requests.lock().expect("poisoned").push(request.clone());
        self.inner.start_stream(request)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

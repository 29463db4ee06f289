//! OpenAI-compatible chat endpoint in front of any backend.
//!
//! Requests carrying `length_unit` and `length_target` run through the
//! controller; the client receives only clean text. Requests without them
//! are forwarded as they are, with markers scrubbed from the reply.

use std::convert::Infallible;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use lenctl_core::backend::{Backend, BackendError, FinishReason, GenRequest, Message, Role, Sampling};
use lenctl_core::controller::{run_session_with, ControllerConfig, ControllerError, SessionHooks};
use lenctl_core::feedback::{build_prompt_with, MarkerScrubber, TemplateSet};
use lenctl_core::{Counter, LengthConstraint, LengthUnit, PromptMode};
use serde_json::{json, Value};
use tokio::sync::{mpsc, OwnedSemaphorePermit, Semaphore};

use crate::commands::Context;
use crate::config::PerUnit;
use crate::{CliError, CliResult};

pub struct ProxyState {
    pub backend: Arc<dyn Backend>,
    pub counter: Counter,
    pub templates: Arc<TemplateSet>,
    pub controller: ControllerConfig,
    pub epsilon: PerUnit<usize>,
    permits: Arc<Semaphore>,
    next_id: AtomicU64,
}

impl ProxyState {
    pub fn new(
        backend: Arc<dyn Backend>,
        counter: Counter,
        templates: Arc<TemplateSet>,
        controller: ControllerConfig,
        epsilon: PerUnit<usize>,
        parallelism: usize,
    ) -> ProxyState {
        ProxyState {
            backend,
            counter,
            templates,
            controller,
            epsilon,
            permits: Arc::new(Semaphore::new(parallelism.max(1))),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn from_context(ctx: &Context) -> CliResult<ProxyState> {
        Ok(ProxyState::new(
            ctx.backend()?,
            ctx.counter.clone(),
            ctx.templates.clone(),
            ctx.config.controller,
            ctx.config.epsilon.clone(),
            ctx.config.parallelism,
        ))
    }
}

/// A parse failure that becomes a 400 naming the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct BadRequest {
    pub param: &'static str,
    pub message: String,
}

fn bad(param: &'static str, message: impl Into<String>) -> BadRequest {
    BadRequest {
        param,
        message: message.into(),
    }
}

/// The parts of a chat request the proxy acts on.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub stream: bool,
    pub context: Vec<Message>,
    /// Text of a trailing assistant message, continued rather than repeated.
    pub assistant_prefix: String,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
    pub stop: Vec<String>,
    pub length: Option<(LengthUnit, usize)>,
}

fn content_text(v: &Value) -> Result<String, BadRequest> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Null => Ok(String::new()),
        Value::Array(parts) => parts
            .iter()
            .map(|p| match (p.get("type").and_then(Value::as_str), p.get("text").and_then(Value::as_str)) {
                (Some("text"), Some(t)) => Ok(t),
                _ => Err(bad("messages", "only text content parts are supported")),
            })
            .collect(),
        _ => Err(bad("messages", "content must be a string or a list of text parts")),
    }
}

fn opt_f64(body: &Value, key: &'static str) -> Result<Option<f64>, BadRequest> {
    match body.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| bad(key, "must be a number")),
    }
}

pub fn parse_chat_request(raw: &[u8]) -> Result<ChatRequest, BadRequest> {
    let body: Value = serde_json::from_slice(raw).map_err(|e| bad("body", format!("invalid JSON: {e}")))?;
    if !body.is_object() {
        return Err(bad("body", "expected a JSON object"));
    }
    let messages = body
        .get("messages")
        .and_then(Value::as_array)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| bad("messages", "must be a non-empty array"))?;
    let mut context = Vec::with_capacity(messages.len());
    for m in messages {
        let role = match m.get("role").and_then(Value::as_str) {
            Some("system") | Some("developer") => Role::System,
            Some("user") => Role::User,
            Some("assistant") => Role::Assistant,
            other => return Err(bad("messages", format!("unsupported role {other:?}"))),
        };
        context.push(Message::new(role, content_text(m.get("content").unwrap_or(&Value::Null))?));
    }
    let assistant_prefix = match context.last() {
        Some(m) if m.role == Role::Assistant => context.pop().map(|m| m.text).unwrap_or_default(),
        _ => String::new(),
    };
    if !context.iter().any(|m| m.role == Role::User) {
        return Err(bad("messages", "no user message"));
    }

    let stream = match body.get("stream") {
        None | Some(Value::Null) => false,
        Some(v) => v.as_bool().ok_or_else(|| bad("stream", "must be a boolean"))?,
    };
    let max_tokens = match body.get("max_completion_tokens").or_else(|| body.get("max_tokens")) {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .filter(|&n| n > 0 && n <= u64::from(u32::MAX))
                .ok_or_else(|| bad("max_tokens", "must be a positive integer"))? as u32,
        ),
    };
    let stop = match body.get("stop") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(items)) => items
            .iter()
            .map(|s| s.as_str().map(str::to_string).ok_or_else(|| bad("stop", "must hold strings")))
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(bad("stop", "must be a string or a list of strings")),
    };
    if stop.iter().any(String::is_empty) {
        return Err(bad("stop", "empty stop sequence"));
    }

    let unit = match body.get("length_unit") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_str()
                .and_then(|s| s.parse::<LengthUnit>().ok())
                .ok_or_else(|| bad("length_unit", "must be one of token, word, sentence, character"))?,
        ),
    };
    let target = match body.get("length_target") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .filter(|&n| n > 0)
                .ok_or_else(|| bad("length_target", "must be a positive integer"))? as usize,
        ),
    };
    let length = match (unit, target) {
        (Some(u), Some(t)) => Some((u, t)),
        (None, None) => None,
        (Some(_), None) => return Err(bad("length_target", "required with length_unit")),
        (None, Some(_)) => return Err(bad("length_unit", "required with length_target")),
    };
    if length.is_some() {
        let turns = context.iter().filter(|m| m.role != Role::System).count();
        if turns != 1 || !assistant_prefix.is_empty() {
            return Err(bad(
                "messages",
                "length-controlled requests take system messages and exactly one user message",
            ));
        }
    }

    Ok(ChatRequest {
        model: body.get("model").and_then(Value::as_str).unwrap_or("lenctl").to_string(),
        stream,
        context,
        assistant_prefix,
        temperature: opt_f64(&body, "temperature")?,
        top_p: opt_f64(&body, "top_p")?,
        max_tokens,
        stop,
        length,
    })
}

impl ChatRequest {
    fn sampling(&self, base: Sampling) -> Result<Sampling, BadRequest> {
        let s = Sampling {
            temperature: self.temperature.unwrap_or(base.temperature),
            top_p: self.top_p.unwrap_or(base.top_p),
            max_new_tokens: self.max_tokens.unwrap_or(base.max_new_tokens),
        };
        if s.temperature.is_nan() || s.temperature < 0.0 {
            return Err(bad("temperature", "must be >= 0"));
        }
        if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return Err(bad("top_p", "must be in (0, 1]"));
        }
        Ok(s)
    }
}

enum Msg {
    Text(String),
    Finish {
        reason: &'static str,
        stop_reason: Option<String>,
        control: Option<Value>,
    },
    Fail(String),
}

fn error_body(status: StatusCode, kind: &str, message: &str, param: Option<&str>) -> Response {
    (
        status,
        Json(json!({"error": {"message": message, "type": kind, "param": param}})),
    )
        .into_response()
}

pub fn router(state: Arc<ProxyState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

async fn chat_completions(State(state): State<Arc<ProxyState>>, body: Bytes) -> Response {
    let req = match parse_chat_request(&body) {
        Ok(r) => r,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, "invalid_request_error", &e.message, Some(e.param)),
    };
    let sampling = match req.sampling(state.controller.sampling) {
        Ok(s) => s,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, "invalid_request_error", &e.message, Some(e.param)),
    };
    let Ok(permit) = state.permits.clone().acquire_owned().await else {
        return error_body(StatusCode::SERVICE_UNAVAILABLE, "server_error", "shutting down", None);
    };
    let id = format!("chatcmpl-lenctl-{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let (tx, mut rx) = mpsc::channel::<Msg>(64);
    let stream = req.stream;
    let model = req.model.clone();
    let worker_state = state.clone();
    tokio::task::spawn_blocking(move || match req.length {
        Some((unit, target)) => run_controlled(&worker_state, req, unit, target, sampling, tx, permit),
        None => run_passthrough(&worker_state, req, sampling, tx, permit),
    });

    let first = match rx.recv().await {
        Some(Msg::Fail(message)) => return error_body(StatusCode::BAD_GATEWAY, "upstream_error", &message, None),
        Some(m) => m,
        None => return error_body(StatusCode::INTERNAL_SERVER_ERROR, "server_error", "worker stopped", None),
    };
    let reply = Reply {
        id,
        model,
        created: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    if stream {
        reply.stream(first, rx).into_response()
    } else {
        reply.collect(first, rx).await
    }
}

struct Reply {
    id: String,
    model: String,
    created: u64,
}

impl Reply {
    fn chunk(&self, delta: Value, finish: Option<&str>, stop_reason: Option<&str>, control: Option<&Value>) -> Value {
        let mut v = json!({
            "id": self.id,
            "object": "chat.completion.chunk",
            "created": self.created,
            "model": self.model,
            "choices": [{"index": 0, "delta": delta, "finish_reason": finish, "stop_reason": stop_reason}],
        });
        if let Some(c) = control {
            v["length_control"] = c.clone();
        }
        v
    }

    fn stream(self, first: Msg, rx: mpsc::Receiver<Msg>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
        enum Step {
            Head,
            Body,
            Done,
            End,
        }
        let events = stream::unfold(
            (self, Some(first), rx, Step::Head),
            |(reply, mut pending, mut rx, step)| async move {
                let (data, next) = match step {
                    Step::End => return None,
                    Step::Head => (
                        reply.chunk(json!({"role": "assistant", "content": ""}), None, None, None).to_string(),
                        Step::Body,
                    ),
                    Step::Done => ("[DONE]".to_string(), Step::End),
                    Step::Body => {
                        let msg = match pending.take() {
                            Some(m) => m,
                            None => rx.recv().await?,
                        };
                        match msg {
                            Msg::Text(t) => (reply.chunk(json!({"content": t}), None, None, None).to_string(), Step::Body),
                            Msg::Finish {
                                reason,
                                stop_reason,
                                control,
                            } => (
                                reply
                                    .chunk(json!({}), Some(reason), stop_reason.as_deref(), control.as_ref())
                                    .to_string(),
                                Step::Done,
                            ),
                            Msg::Fail(message) => (
                                json!({"error": {"message": message, "type": "upstream_error"}}).to_string(),
                                Step::End,
                            ),
                        }
                    }
                };
                Some((Ok(Event::default().data(data)), (reply, pending, rx, next)))
            },
        );
        Sse::new(events)
    }

    async fn collect(self, first: Msg, mut rx: mpsc::Receiver<Msg>) -> Response {
        let mut text = String::new();
        let mut next = Some(first);
        loop {
            let msg = match next.take() {
                Some(m) => m,
                None => match rx.recv().await {
                    Some(m) => m,
                    None => {
                        return error_body(StatusCode::INTERNAL_SERVER_ERROR, "server_error", "worker stopped", None)
                    }
                },
            };
            match msg {
                Msg::Text(t) => text.push_str(&t),
                Msg::Fail(message) => return error_body(StatusCode::BAD_GATEWAY, "upstream_error", &message, None),
                Msg::Finish {
                    reason,
                    stop_reason,
                    control,
                } => {
                    let mut v = json!({
                        "id": self.id,
                        "object": "chat.completion",
                        "created": self.created,
                        "model": self.model,
                        "choices": [{
                            "index": 0,
                            "message": {"role": "assistant", "content": text},
                            "finish_reason": reason,
                            "stop_reason": stop_reason,
                        }],
                    });
                    if let Some(c) = control {
                        v["length_control"] = c;
                    }
                    return Json(v).into_response();
                }
            }
        }
    }
}

fn run_controlled(
    state: &ProxyState,
    req: ChatRequest,
    unit: LengthUnit,
    target: usize,
    sampling: Sampling,
    tx: mpsc::Sender<Msg>,
    _permit: OwnedSemaphorePermit,
) {
    let constraint = LengthConstraint::new(unit, target).with_tolerance(*state.epsilon.get(unit));
    let user = req
        .context
        .iter()
        .find(|m| m.role == Role::User)
        .map(|m| m.text.as_str())
        .unwrap_or_default();
    let mut prompt = match build_prompt_with(&state.templates, user, constraint, PromptMode::Feedback, None) {
        Ok(p) => p,
        Err(e) => {
            let _ = tx.blocking_send(Msg::Fail(format!("prompt: {e}")));
            return;
        }
    };
    let client_system: Vec<&str> = req
        .context
        .iter()
        .filter(|m| m.role == Role::System)
        .map(|m| m.text.as_str())
        .collect();
    if !client_system.is_empty() {
        match state.templates.tool_paragraph(&constraint) {
            Ok(tool) => prompt.system_text = format!("{}\n\n{tool}", client_system.join("\n\n")),
            Err(e) => {
                let _ = tx.blocking_send(Msg::Fail(format!("prompt: {e}")));
                return;
            }
        }
    }
    let mut config = state.controller;
    config.sampling = sampling;

    let cancel = Arc::new(AtomicBool::new(false));
    let commit_tx = tx.clone();
    let commit_cancel = cancel.clone();
    let hooks = SessionHooks {
        on_commit: Some(Box::new(move |text: &str| {
            if !text.is_empty() && commit_tx.blocking_send(Msg::Text(text.to_string())).is_err() {
                commit_cancel.store(true, Ordering::Relaxed);
            }
        })),
        cancel: Some(cancel),
    };
    let result = run_session_with(state.backend.as_ref(), &prompt, &config, &state.counter, hooks);
    let (session, error) = match &result {
        Ok(s) => (s, None),
        Err(e) => (e.state.as_ref(), Some(&e.error)),
    };
    let control = json!({
        "unit": unit,
        "target": target,
        "count": state.counter.count_value(&session.clean_text, unit),
        "feedback_events": session.events.len(),
        "resume_count": session.resume_count,
        "status": session.status,
    });
    let msg = match error {
        None => Msg::Finish {
            reason: "stop",
            stop_reason: None,
            control: Some(control),
        },
        Some(e) if e.is_limit() => Msg::Finish {
            reason: "length",
            stop_reason: None,
            control: Some(control),
        },
        Some(ControllerError::Cancelled) => return,
        Some(e) => Msg::Fail(e.to_string()),
    };
    let _ = tx.blocking_send(msg);
}

fn run_passthrough(
    state: &ProxyState,
    req: ChatRequest,
    sampling: Sampling,
    tx: mpsc::Sender<Msg>,
    _permit: OwnedSemaphorePermit,
) {
    let mut request = GenRequest::new(req.context);
    request.sampling = sampling;
    request.stop_sequences = req.stop;
    request.assistant_prefix = req.assistant_prefix;
    let outcome = (|| -> Result<Option<Msg>, BackendError> {
        request.validate()?;
        let mut scrubber = MarkerScrubber::new();
        for chunk in state.backend.start_stream(&request)? {
            let chunk = chunk?;
            let clean = scrubber.push(&chunk.text_delta);
            if !clean.is_empty() && tx.blocking_send(Msg::Text(clean)).is_err() {
                return Ok(None);
            }
            if let Some(finish) = chunk.finish {
                let tail = scrubber.finish();
                if !tail.is_empty() && tx.blocking_send(Msg::Text(tail)).is_err() {
                    return Ok(None);
                }
                let (reason, stop_reason) = match finish {
                    FinishReason::Eos => ("stop", None),
                    FinishReason::StopSequence => ("stop", chunk.matched_stop),
                    FinishReason::LengthCap => ("length", None),
                };
                return Ok(Some(Msg::Finish {
                    reason,
                    stop_reason,
                    control: None,
                }));
            }
        }
        Err(BackendError::Protocol("stream ended without a finish".into()))
    })();
    let msg = match outcome {
        Ok(Some(m)) => m,
        Ok(None) => return,
        Err(e) => Msg::Fail(e.to_string()),
    };
    let _ = tx.blocking_send(msg);
}

/// Serves until `shutdown` resolves, then lets in-flight streams finish.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<ProxyState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Binds `addr` and runs the proxy on a fresh runtime until Ctrl-C.
pub fn serve_blocking(ctx: Context, addr: &str) -> CliResult<()> {
    let addr: SocketAddr = addr
        .parse()
        .map_err(|e| CliError::usage(format!("--listen `{addr}`: {e}")))?;
    let state = Arc::new(ProxyState::from_context(&ctx)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")
        .map_err(CliError::config)?;
    // The blocking HTTP client must not be dropped inside the runtime, so the
    // last reference is released after `block_on` returns.
    let keep = state.clone();
    let result = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))
            .map_err(CliError::config)?;
        tracing::info!(%addr, backend = state.backend.name(), "proxy listening");
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down; draining open streams");
        })
        .await
        .context("serving")
        .map_err(CliError::backend)
    });
    drop(runtime);
    drop(keep);
    result
}

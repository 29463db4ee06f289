use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::sse::SseDeltaStream;
use super::{Backend, BackendError, ChunkStream, GenRequest, Role, StopFilter};

/// How a partially generated assistant message is handed back upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillMode {
    /// Trailing assistant message plus vLLM's `continue_final_message`.
    #[default]
    ContinueFinalMessage,
    /// Trailing assistant message only.
    AssistantMessage,
    /// `/completions` with the transcript flattened into one prompt, for
    /// servers that reject assistant prefill.
    RawCompletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL including the API version, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub prefill: PrefillMode,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    300
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> HttpConfig {
        HttpConfig {
            endpoint: endpoint.into(),
            model: String::new(),
            api_key: None,
            prefill: PrefillMode::default(),
            timeout_secs: default_timeout(),
        }
    }
}

pub struct HttpSseBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpSseBackend {
    pub fn new(config: HttpConfig) -> Result<HttpSseBackend, BackendError> {
        if config.endpoint.trim().is_empty() {
            return Err(BackendError::InvalidRequest("http_sse backend requires an endpoint".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Connection(e.to_string()))?;
        Ok(HttpSseBackend { config, client })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.endpoint.trim_end_matches('/'))
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

/// Flattened transcript for raw completion endpoints.
pub fn render_transcript(request: &GenRequest) -> String {
    let mut out = String::new();
    for m in &request.context {
        out.push_str(&format!("<|{}|>\n{}\n", role_name(m.role), m.text));
    }
    out.push_str("<|assistant|>\n");
    out.push_str(&request.assistant_prefix);
    out
}

/// Request body for the configured prefill mode. Returns the path and body.
pub fn request_body(config: &HttpConfig, request: &GenRequest) -> (&'static str, Value) {
    let mut body = json!({
        "model": config.model,
        "temperature": request.sampling.temperature,
        "top_p": request.sampling.top_p,
        "max_tokens": request.sampling.max_new_tokens,
        "stream": true,
    });
    if !request.stop_sequences.is_empty() {
        body["stop"] = json!(request.stop_sequences);
    }
    if config.prefill == PrefillMode::RawCompletion {
        body["prompt"] = json!(render_transcript(request));
        return ("completions", body);
    }
    let mut messages: Vec<Value> = request
        .context
        .iter()
        .map(|m| json!({"role": role_name(m.role), "content": m.text}))
        .collect();
    if !request.assistant_prefix.is_empty() {
        messages.push(json!({"role": "assistant", "content": request.assistant_prefix}));
        if config.prefill == PrefillMode::ContinueFinalMessage {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
    }
    body["messages"] = json!(messages);
    ("chat/completions", body)
}

pub fn classify_status(status: u16, body: String) -> BackendError {
    match status {
        401 | 403 => BackendError::Auth { status },
        408 | 409 | 429 | 500..=599 => BackendError::Status {
            status,
            retryable: true,
            body,
        },
        _ => BackendError::Status {
            status,
            retryable: false,
            body,
        },
    }
}

impl Backend for HttpSseBackend {
    fn start_stream(&self, request: &GenRequest) -> Result<ChunkStream, BackendError> {
        request.validate()?;
        let (path, body) = request_body(&self.config, request);
        let mut req = self
            .client
            .post(self.url(path))
            .header("Accept", "text/event-stream")
            .json(&body);
        if let Some(key) = self.config.api_key.as_deref().filter(|k| !k.is_empty()) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Connection(e.to_string()))?;
        let status = resp.status().as_u16();
        if !resp.status().is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(classify_status(status, text));
        }
        let stops = request.stop_sequences.clone();
        let raw = SseDeltaStream::new(resp, stops.clone());
        Ok(Box::new(StopFilter::new(raw, stops)))
    }

    fn name(&self) -> &str {
        "http_sse"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Message;

    fn request() -> GenRequest {
        let mut r = GenRequest::new(vec![
            Message::new(Role::System, "sys"),
            Message::new(Role::User, "hi"),
        ]);
        r.stop_sequences = vec!["<used_".into()];
        r.assistant_prefix = "One.<used_tokens=1> ".into();
        r
    }

    #[test]
    fn chat_body_with_prefill() {
        let cfg = HttpConfig::new("http://x/v1");
        let (path, body) = request_body(&cfg, &request());
        assert_eq!(path, "chat/completions");
        assert_eq!(body["stream"], json!(true));
        assert_eq!(body["temperature"], json!(0.8));
        assert_eq!(body["top_p"], json!(0.95));
        assert_eq!(body["stop"], json!(["<used_"]));
        assert_eq!(body["messages"][2]["role"], json!("assistant"));
        assert_eq!(body["continue_final_message"], json!(true));
    }

    #[test]
    fn raw_completion_body() {
        let mut cfg = HttpConfig::new("http://x/v1");
        cfg.prefill = PrefillMode::RawCompletion;
        let (path, body) = request_body(&cfg, &request());
        assert_eq!(path, "completions");
        let prompt = body["prompt"].as_str().unwrap();
        assert!(prompt.ends_with("<|assistant|>\nOne.<used_tokens=1> "));
        assert!(body.get("messages").is_none());
    }

    #[test]
    fn status_classes() {
        assert_eq!(classify_status(401, String::new()), BackendError::Auth { status: 401 });
        assert!(classify_status(503, String::new()).is_retryable());
        assert!(classify_status(429, String::new()).is_retryable());
        assert!(!classify_status(400, String::new()).is_retryable());
    }

    #[test]
    fn empty_endpoint_rejected() {
        assert!(HttpSseBackend::new(HttpConfig::new("")).is_err());
    }

    #[test]
    fn connection_refused_is_connection_error() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let backend = HttpSseBackend::new(HttpConfig::new(format!("http://{addr}/v1"))).unwrap();
        let err = backend.start_stream(&request()).err().unwrap();
        assert!(matches!(err, BackendError::Connection(_)), "{err:?}");
    }
}

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use lenctl_core::backend::{
    complete, Backend, BackendError, FinishReason, GenRequest, HttpConfig, HttpSseBackend, Message, PrefillMode, Role,
};
use serde_json::{json, Value};

/// Serves one canned HTTP response per connection and hands back each
/// request body.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, Value)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut content_length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; content_length];
            reader.read_exact(&mut buf).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            tx.send((path, serde_json::from_slice(&buf).unwrap())).unwrap();
            let head = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: text/event-stream\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                body.len()
            );
            stream.write_all(head.as_bytes()).unwrap();
            stream.write_all(body.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), rx)
}

fn sse(deltas: &[&str], finish: Value, done: bool) -> String {
    let mut out = String::new();
    for d in deltas {
        let chunk = json!({"choices": [{"index": 0, "delta": {"content": d}, "finish_reason": null}]});
        out.push_str(&format!("data: {chunk}\n\n"));
    }
    out.push_str(&format!("data: {}\n\n", json!({"choices": [{"index": 0, "delta": {}, "finish_reason": finish}]})));
    if done {
        out.push_str("data: [DONE]\n\n");
    }
    out
}

fn request() -> GenRequest {
    let mut r = GenRequest::new(vec![Message::new(Role::User, "Say hi.")]);
    r.stop_sequences = vec!["<used_".into()];
    r
}

#[test]
fn streams_deltas_and_sends_honored_fields() {
    let (endpoint, rx) = serve(vec![(200, sse(&["Hel", "lo."], json!("stop"), true))]);
    let mut cfg = HttpConfig::new(endpoint);
    cfg.model = "m1".into();
    let backend = HttpSseBackend::new(cfg).unwrap();
    let mut req = request();
    req.assistant_prefix = "Pre.".into();
    let chunks: Vec<_> = backend.start_stream(&req).unwrap().collect::<Result<_, _>>().unwrap();
    let text: String = chunks.iter().map(|c| c.text_delta.as_str()).collect();
    assert_eq!(text, "Hello.");
    assert_eq!(chunks.last().unwrap().finish, Some(FinishReason::Eos));
    let (path, body) = rx.recv().unwrap();
    assert_eq!(path, "/v1/chat/completions");
    assert_eq!(body["model"], "m1");
    assert_eq!(body["stream"], true);
    assert_eq!(body["stop"], json!(["<used_"]));
    assert_eq!(body["max_tokens"], 4096);
    assert_eq!(body["messages"][1], json!({"role": "assistant", "content": "Pre."}));
}

#[test]
fn upstream_stop_reason_maps_to_stop_sequence() {
    let body = {
        let mut s = sse(&["One."], json!(null), false);
        s.push_str(&format!(
            "data: {}\n\ndata: [DONE]\n\n",
            json!({"choices": [{"delta": {}, "finish_reason": "stop", "stop_reason": "<used_"}]})
        ));
        s
    };
    let (endpoint, _rx) = serve(vec![(200, body)]);
    let backend = HttpSseBackend::new(HttpConfig::new(endpoint)).unwrap();
    let done = complete(&backend, &request()).unwrap();
    assert_eq!(done.text, "One.");
    assert_eq!(done.finish, FinishReason::StopSequence);
    assert_eq!(done.matched_stop.as_deref(), Some("<used_"));
}

#[test]
fn client_side_stop_when_upstream_ignores_stop() {
    let (endpoint, _rx) = serve(vec![(200, sse(&["One. <us", "ed_words=2> Two."], json!("stop"), true))]);
    let backend = HttpSseBackend::new(HttpConfig::new(endpoint)).unwrap();
    let done = complete(&backend, &request()).unwrap();
    assert_eq!(done.text, "One. ");
    assert_eq!(done.finish, FinishReason::StopSequence);
}

#[test]
fn length_finish_and_missing_done() {
    let (endpoint, _rx) = serve(vec![
        (200, sse(&["a"], json!("length"), true)),
        (200, "data: {\"choices\":[{\"delta\":{\"content\":\"x\"}}]}\n\n".to_string()),
    ]);
    let backend = HttpSseBackend::new(HttpConfig::new(endpoint)).unwrap();
    assert_eq!(complete(&backend, &request()).unwrap().finish, FinishReason::LengthCap);
    assert!(matches!(complete(&backend, &request()), Err(BackendError::Protocol(_))));
}

#[test]
fn status_errors_are_distinct() {
    let (endpoint, _rx) = serve(vec![(401, "no".into()), (503, "busy".into()), (400, "bad".into())]);
    let backend = HttpSseBackend::new(HttpConfig::new(endpoint)).unwrap();
    assert_eq!(complete(&backend, &request()).unwrap_err(), BackendError::Auth { status: 401 });
    let e = complete(&backend, &request()).unwrap_err();
    assert!(e.is_retryable(), "{e:?}");
    let e = complete(&backend, &request()).unwrap_err();
    assert!(!e.is_retryable(), "{e:?}");
}

#[test]
fn raw_completion_fallback_uses_text_endpoint() {
    let body = {
        let mut s = String::new();
        for t in ["Two", "."] {
            s.push_str(&format!("data: {}\n\n", json!({"choices": [{"text": t, "finish_reason": null}]})));
        }
        s.push_str(&format!("data: {}\n\ndata: [DONE]\n\n", json!({"choices": [{"text": "", "finish_reason": "stop"}]})));
        s
    };
    let (endpoint, rx) = serve(vec![(200, body)]);
    let mut cfg = HttpConfig::new(endpoint);
    cfg.prefill = PrefillMode::RawCompletion;
    let backend = HttpSseBackend::new(cfg).unwrap();
    let mut req = request();
    req.assistant_prefix = "One.<used_sentences=1> ".into();
    assert_eq!(complete(&backend, &req).unwrap().text, "Two.");
    let (path, body) = rx.recv().unwrap();
    assert_eq!(path, "/v1/completions");
    assert!(body["prompt"].as_str().unwrap().ends_with("One.<used_sentences=1> "));
}

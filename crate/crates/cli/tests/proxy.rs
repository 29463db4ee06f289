mod common;

use std::sync::Arc;

use common::{stream_text, Proxy};
use lenctl_core::backend::{
    BackendError, CompliantBackend, HttpConfig, HttpSseBackend, MockConfig, RecordingBackend, ScriptedBackend,
};
use lenctl_core::feedback::contains_marker;
use lenctl_core::units::count_words;
use lenctl_core::{Counter, LengthUnit};
use serde_json::{json, Value};

fn compliant() -> Arc<CompliantBackend> {
    Arc::new(CompliantBackend::new(MockConfig::default(), Counter::default()))
}

fn post(url: &str, body: Value) -> (u16, String) {
    let resp = reqwest::blocking::Client::new().post(url).json(&body).send().unwrap();
    (resp.status().as_u16(), resp.text().unwrap())
}

#[test]
fn controlled_stream_has_three_sentences_and_no_markers() {
    let proxy = Proxy::start(compliant(), 4);
    let (status, body) = post(
        &proxy.url(),
        json!({
            "model": "m",
            "stream": true,
            "messages": [{"role": "user", "content": "Lighthouses and their keepers."}],
            "length_unit": "sentence",
            "length_target": 3,
        }),
    );
    assert_eq!(status, 200, "{body}");
    assert!(!body.contains("<used_"), "{body}");
    let (text, last) = stream_text(&body);
    assert_eq!(Counter::default().count_value(&text, LengthUnit::Sentence), 3, "{text}");
    assert_eq!(last["choices"][0]["finish_reason"], "stop");
    assert_eq!(last["length_control"]["count"], 3);
    assert!(last["length_control"]["feedback_events"].as_u64().unwrap() >= 2);
}

#[test]
fn controlled_non_stream_reply() {
    let proxy = Proxy::start(compliant(), 2);
    let (status, body) = post(
        &proxy.url(),
        json!({
            "messages": [
                {"role": "system", "content": "Be plain."},
                {"role": "user", "content": [{"type": "text", "text": "Glaciers retreating."}]}
            ],
            "length_unit": "words",
            "length_target": 60,
        }),
    );
    assert_eq!(status, 200, "{body}");
    let v: Value = serde_json::from_str(&body).unwrap();
    let text = v["choices"][0]["message"]["content"].as_str().unwrap();
    assert!(!contains_marker(text));
    assert_eq!(count_words(text), 60);
    assert_eq!(v["object"], "chat.completion");
}

#[test]
fn client_system_text_replaces_default_and_keeps_tool_paragraph() {
    let rec = Arc::new(RecordingBackend::new(compliant()));
    let proxy = Proxy::start(rec.clone(), 1);
    let (status, _) = post(
        &proxy.url(),
        json!({
            "messages": [{"role": "system", "content": "Answer as a sailor."}, {"role": "user", "content": "Tides."}],
            "length_unit": "sentence",
            "length_target": 2,
        }),
    );
    assert_eq!(status, 200);
    let first = &rec.requests()[0];
    let system = &first.context[0].text;
    assert!(system.starts_with("Answer as a sailor."), "{system}");
    assert!(system.contains("<used_sentences="), "{system}");
    assert!(first.context[1].text.contains("exactly 2 sentences"));
}

#[test]
fn passthrough_forwards_without_control() {
    let rec = Arc::new(RecordingBackend::new(Arc::new(ScriptedBackend::replay([
        "Plain ",
        "reply <used_words=2>",
        " here.",
    ]))));
    let proxy = Proxy::start(rec.clone(), 1);
    let (status, body) = post(
        &proxy.url(),
        json!({"stream": true, "messages": [{"role": "user", "content": "Hi."}], "max_tokens": 77}),
    );
    assert_eq!(status, 200, "{body}");
    let (text, last) = stream_text(&body);
    assert_eq!(text, "Plain reply  here.");
    assert!(last.get("length_control").is_none());
    let reqs = rec.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].context.len(), 1);
    assert_eq!(reqs[0].context[0].text, "Hi.");
    assert_eq!(reqs[0].sampling.max_new_tokens, 77);
}

#[test]
fn passthrough_reports_matched_stop() {
    let proxy = Proxy::start(Arc::new(ScriptedBackend::replay(["One. <used_words=1> Two."])), 1);
    let (status, body) = post(
        &proxy.url(),
        json!({"messages": [{"role": "user", "content": "x"}], "stop": ["<used_"]}),
    );
    assert_eq!(status, 200);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["choices"][0]["message"]["content"], "One. ");
    assert_eq!(v["choices"][0]["stop_reason"], "<used_");
}

#[test]
fn invalid_extension_fields_are_400() {
    let proxy = Proxy::start(compliant(), 1);
    let msgs = json!([{"role": "user", "content": "x"}]);
    for (body, param) in [
        (json!({"messages": msgs, "length_unit": "paragraph", "length_target": 3}), "length_unit"),
        (json!({"messages": msgs, "length_unit": "word", "length_target": 0}), "length_target"),
        (json!({"messages": msgs, "length_unit": "word", "length_target": "5"}), "length_target"),
        (json!({"messages": msgs, "length_unit": "word"}), "length_target"),
        (json!({"messages": msgs, "length_target": 4}), "length_unit"),
        (json!({"messages": []}), "messages"),
        (json!({"messages": msgs, "top_p": 2.0}), "top_p"),
    ] {
        let (status, text) = post(&proxy.url(), body.clone());
        assert_eq!(status, 400, "{body}");
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["error"]["param"], param, "{body}");
    }
    let resp = reqwest::blocking::Client::new()
        .post(proxy.url())
        .body("{not json")
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
}

#[test]
fn upstream_failure_before_output_is_502() {
    let failing = ScriptedBackend::from_fn(|_| Err(BackendError::Connection("upstream down".into())));
    let proxy = Proxy::start(Arc::new(failing), 1);
    for extra in [json!({}), json!({"length_unit": "word", "length_target": 10, "stream": true})] {
        let mut body = json!({"messages": [{"role": "user", "content": "x"}]});
        for (k, v) in extra.as_object().unwrap() {
            body[k] = v.clone();
        }
        let (status, text) = post(&proxy.url(), body);
        assert_eq!(status, 502, "{text}");
        assert!(text.contains("upstream down"));
    }
}

#[test]
fn chained_proxy_over_http_backend() {
    // The inner proxy acts as a plain OpenAI-compatible server over the
    // compliant mock; the outer one drives it through the HTTP client.
    let inner = Proxy::start(compliant(), 8);
    let http = HttpSseBackend::new(HttpConfig::new(inner.base.clone())).unwrap();
    let outer = Proxy::start(Arc::new(http), 8);
    let (status, body) = post(
        &outer.url(),
        json!({
            "stream": true,
            "messages": [{"role": "user", "content": "Orchards in winter."}],
            "length_unit": "sentence",
            "length_target": 4,
        }),
    );
    assert_eq!(status, 200, "{body}");
    let (text, last) = stream_text(&body);
    assert!(!contains_marker(&text));
    assert_eq!(Counter::default().count_value(&text, LengthUnit::Sentence), 4, "{text}");
    assert!(last["length_control"]["resume_count"].as_u64().unwrap() >= 3);
}

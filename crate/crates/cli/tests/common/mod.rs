#![allow(dead_code)]

use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

use lenctl::config::AppConfig;
use lenctl::proxy::{serve, ProxyState};
use lenctl_core::backend::Backend;
use lenctl_core::feedback::TemplateSet;
use lenctl_core::Counter;
use serde_json::Value;

/// A proxy running on its own runtime; dropping it shuts the server down
/// and waits for open streams to drain.
pub struct Proxy {
    pub base: String,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Proxy {
    pub fn start(backend: Arc<dyn Backend>, parallelism: usize) -> Proxy {
        let cfg = AppConfig::default();
        let state = Arc::new(ProxyState::new(
            backend,
            Counter::default(),
            TemplateSet::shared_default(),
            cfg.controller,
            cfg.epsilon,
            parallelism,
        ));
        let (addr_tx, addr_rx) = mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let keep = state.clone();
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(listener, state, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
            drop(rt);
            drop(keep);
        });
        let addr = addr_rx.recv().unwrap();
        Proxy {
            base: format!("http://{addr}/v1"),
            shutdown: Some(stop_tx),
            thread: Some(thread),
        }
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.base)
    }
}

impl Drop for Proxy {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// `data:` payloads of an SSE body, in order.
pub fn sse_payloads(body: &str) -> Vec<String> {
    body.lines()
        .filter_map(|l| l.strip_prefix("data:"))
        .map(|d| d.trim_start().to_string())
        .collect()
}

/// Concatenated delta content and the final chunk of a streamed reply.
pub fn stream_text(body: &str) -> (String, Value) {
    let payloads = sse_payloads(body);
    assert_eq!(payloads.last().map(String::as_str), Some("[DONE]"), "{body}");
    let mut text = String::new();
    let mut last = Value::Null;
    for p in &payloads[..payloads.len() - 1] {
        let v: Value = serde_json::from_str(p).unwrap();
        if let Some(t) = v["choices"][0]["delta"]["content"].as_str() {
            text.push_str(t);
        }
        last = v;
    }
    (text, last)
}

//! Server-sent events in the OpenAI-compatible streaming dialect:
//! `data: {json}` events separated by blank lines, terminated by
//! `data: [DONE]`.

use serde::Deserialize;
use serde_json::Value;

use super::{BackendError, FinishReason, RawDelta};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SseEvent {
    Data(String),
    Done,
}

/// Incremental line parser. Feed bytes as they arrive; complete events
/// come back in order.
#[derive(Debug, Default)]
pub struct SseParser {
    line: Vec<u8>,
    data: Vec<String>,
    done: bool,
}

impl SseParser {
    pub fn new() -> SseParser {
        SseParser::default()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn feed(&mut self, bytes: &[u8]) -> Result<Vec<SseEvent>, BackendError> {
        let mut events = Vec::new();
        for &b in bytes {
            if self.done {
                break;
            }
            if b == b'\n' {
                let mut line = std::mem::take(&mut self.line);
                if line.last() == Some(&b'\r') {
                    line.pop();
                }
                let line = String::from_utf8(line)
                    .map_err(|_| BackendError::Protocol("event stream is not UTF-8".into()))?;
                if let Some(ev) = self.line_done(&line) {
                    events.push(ev);
                }
            } else {
                self.line.push(b);
            }
        }
        Ok(events)
    }

    /// Flushes a final event that was not followed by a blank line.
    pub fn finish(&mut self) -> Result<Vec<SseEvent>, BackendError> {
        let mut events = Vec::new();
        if !self.line.is_empty() {
            events.extend(self.feed(b"\n")?);
        }
        if let Some(ev) = self.dispatch() {
            events.push(ev);
        }
        Ok(events)
    }

    fn line_done(&mut self, line: &str) -> Option<SseEvent> {
        if line.is_empty() {
            return self.dispatch();
        }
        if line.starts_with(':') {
            return None;
        }
        let (field, value) = match line.find(':') {
            Some(i) => {
                let v = &line[i + 1..];
                (&line[..i], v.strip_prefix(' ').unwrap_or(v))
            }
            None => (line, ""),
        };
        if field == "data" {
            self.data.push(value.to_string());
        }
        None
    }

    fn dispatch(&mut self) -> Option<SseEvent> {
        if self.data.is_empty() {
            return None;
        }
        let data = std::mem::take(&mut self.data).join("\n");
        if data.trim() == "[DONE]" {
            self.done = true;
            return Some(SseEvent::Done);
        }
        Some(SseEvent::Data(data))
    }
}

#[derive(Debug, Deserialize)]
struct ChunkBody {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    error: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    delta: Option<Delta>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    finish_reason: Option<String>,
    /// vLLM reports the matched stop string here.
    #[serde(default)]
    stop_reason: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct Delta {
    #[serde(default)]
    content: Option<String>,
}

/// Decodes one `data:` payload of a chat or text completion chunk.
pub fn decode_chunk(data: &str, stops: &[String]) -> Result<RawDelta, BackendError> {
    let body: ChunkBody = serde_json::from_str(data)
        .map_err(|e| BackendError::Protocol(format!("bad chunk JSON: {e}")))?;
    if let Some(err) = body.error {
        return Err(BackendError::Protocol(format!("upstream error event: {err}")));
    }
    let Some(choice) = body.choices.into_iter().next() else {
        // usage-only or keep-alive chunks
        return Ok(RawDelta::text(""));
    };
    let text = choice
        .delta
        .and_then(|d| d.content)
        .or(choice.text)
        .unwrap_or_default();
    let finish = match choice.finish_reason.as_deref() {
        None => None,
        Some("length") => Some((FinishReason::LengthCap, None)),
        Some(_) => match choice.stop_reason {
            Some(Value::String(s)) if stops.contains(&s) => Some((FinishReason::StopSequence, Some(s))),
            _ => Some((FinishReason::Eos, None)),
        },
    };
    Ok(RawDelta { text, finish })
}

/// Turns a byte stream into raw deltas. The finish reason, when the
/// upstream sends one, is carried on the last delta before `[DONE]`.
pub struct SseDeltaStream<R> {
    reader: R,
    parser: SseParser,
    stops: Vec<String>,
    queue: std::collections::VecDeque<SseEvent>,
    finished: bool,
    eof: bool,
}

impl<R: std::io::Read> SseDeltaStream<R> {
    pub fn new(reader: R, stops: Vec<String>) -> SseDeltaStream<R> {
        SseDeltaStream {
            reader,
            parser: SseParser::new(),
            stops,
            queue: Default::default(),
            finished: false,
            eof: false,
        }
    }

    fn fill(&mut self) -> Result<(), BackendError> {
        let mut buf = [0u8; 4096];
        while self.queue.is_empty() && !self.eof {
            let n = self
                .reader
                .read(&mut buf)
                .map_err(|e| BackendError::Connection(e.to_string()))?;
            if n == 0 {
                self.eof = true;
                self.queue.extend(self.parser.finish()?);
            } else {
                self.queue.extend(self.parser.feed(&buf[..n])?);
            }
        }
        Ok(())
    }
}

impl<R: std::io::Read> Iterator for SseDeltaStream<R> {
    type Item = Result<RawDelta, BackendError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if let Err(e) = self.fill() {
            self.finished = true;
            return Some(Err(e));
        }
        match self.queue.pop_front() {
            Some(SseEvent::Data(data)) => {
                let delta = decode_chunk(&data, &self.stops);
                if matches!(&delta, Ok(d) if d.finish.is_some()) || delta.is_err() {
                    self.finished = true;
                }
                Some(delta)
            }
            Some(SseEvent::Done) => {
                // [DONE] without an explicit finish_reason
                self.finished = true;
                Some(Ok(RawDelta::finish("", FinishReason::Eos)))
            }
            None => {
                self.finished = true;
                Some(Err(BackendError::Protocol("event stream closed before [DONE]".into())))
            }
        }
    }
}

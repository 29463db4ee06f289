use super::{BackendError, FinishReason, StreamChunk};

/// Raw upstream output before stop-sequence handling. `finish` is set on
/// the last piece only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDelta {
    pub text: String,
    pub finish: Option<(FinishReason, Option<String>)>,
}

impl RawDelta {
    pub fn text(text: impl Into<String>) -> RawDelta {
        RawDelta {
            text: text.into(),
            finish: None,
        }
    }

    pub fn finish(text: impl Into<String>, reason: FinishReason) -> RawDelta {
        RawDelta {
            text: text.into(),
            finish: Some((reason, None)),
        }
    }
}

/// Applies stop sequences client-side. Text that could be the start of a
/// stop sequence is held back until it is disambiguated, so emitted text
/// never contains a stop sequence.
pub struct StopFilter<I> {
    inner: I,
    stops: Vec<String>,
    held: String,
    done: bool,
}

impl<I> StopFilter<I>
where
    I: Iterator<Item = Result<RawDelta, BackendError>>,
{
    pub fn new(inner: I, stops: Vec<String>) -> StopFilter<I> {
        StopFilter {
            inner,
            stops: stops.into_iter().filter(|s| !s.is_empty()).collect(),
            held: String::new(),
            done: false,
        }
    }

    /// Earliest match in `held`; ties go to the longest stop sequence.
    fn find_stop(&self) -> Option<(usize, usize)> {
        self.stops
            .iter()
            .enumerate()
            .filter_map(|(i, s)| self.held.find(s.as_str()).map(|p| (p, i)))
            .min_by(|a, b| a.0.cmp(&b.0).then(self.stops[b.1].len().cmp(&self.stops[a.1].len())))
    }

    fn partial_len(&self) -> usize {
        let mut best = 0;
        for stop in &self.stops {
            for (n, _) in stop.char_indices().skip(1) {
                if n > best && self.held.ends_with(&stop[..n]) {
                    best = n;
                }
            }
        }
        best
    }
}

impl<I> Iterator for StopFilter<I>
where
    I: Iterator<Item = Result<RawDelta, BackendError>>,
{
    type Item = Result<StreamChunk, BackendError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let raw = match self.inner.next() {
                Some(Ok(raw)) => raw,
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                None => {
                    self.done = true;
                    return Some(Err(BackendError::Protocol(
                        "stream ended without a finish reason".into(),
                    )));
                }
            };
            self.held.push_str(&raw.text);
            if let Some((pos, idx)) = self.find_stop() {
                self.done = true;
                self.held.truncate(pos);
                return Some(Ok(StreamChunk {
                    text_delta: std::mem::take(&mut self.held),
                    finish: Some(FinishReason::StopSequence),
                    matched_stop: Some(self.stops[idx].clone()),
                }));
            }
            if let Some((reason, matched)) = raw.finish {
                self.done = true;
                let matched_stop = match reason {
                    FinishReason::StopSequence => matched,
                    _ => None,
                };
                return Some(Ok(StreamChunk {
                    text_delta: std::mem::take(&mut self.held),
                    finish: Some(reason),
                    matched_stop,
                }));
            }
            let emit = self.held.len() - self.partial_len();
            if emit > 0 {
                let text: String = self.held.drain(..emit).collect();
                return Some(Ok(StreamChunk::delta(text)));
            }
        }
        None
    }
}

//! Length-feedback markers: `<used_{unit}={count}>`.
//!
//! Markers are control-channel only. They are excluded from every count,
//! stripped from user-visible output, and never escaped: literal text in
//! model output that matches the grammar is treated as a marker.

mod prompt;

pub use prompt::{
    build_prompt, build_prompt_with, PromptBundle, PromptMode, Template, TemplateError,
    TemplateSet,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::LengthUnit;

pub const MARKER_PREFIX: &str = "<used_";

/// Unclosed `<used_` openings longer than this are not treated as markers
/// by [`MarkerScrubber`].
pub const SCRUB_LIMIT: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeedbackError {
    #[error("malformed feedback marker at byte {offset}: {reason}")]
    MalformedMarker { offset: usize, reason: &'static str },
    #[error("feedback event at offset {offset} is out of order or not on a character boundary")]
    InvalidEvent { offset: usize },
    #[error("prompt mode `{0}` requires a demonstration")]
    MissingDemo(PromptMode),
    #[error("prompt mode `{0}` does not take a demonstration")]
    UnexpectedDemo(PromptMode),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// One injected marker, positioned in clean-text coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub unit: LengthUnit,
    pub count: usize,
    pub insertion_offset: usize,
}

impl FeedbackEvent {
    pub fn new(unit: LengthUnit, count: usize, insertion_offset: usize) -> FeedbackEvent {
        FeedbackEvent {
            unit,
            count,
            insertion_offset,
        }
    }

    pub fn rendered(&self) -> String {
        render_feedback(self.unit, self.count)
    }
}

pub fn render_feedback(unit: LengthUnit, count: usize) -> String {
    format!("{MARKER_PREFIX}{}={count}>", unit.plural())
}

/// Parses one marker at the start of `s` (which begins with `<used_`).
/// Returns the unit, the count and the marker's byte length.
fn parse_marker(s: &str) -> Result<(LengthUnit, usize, usize), &'static str> {
    let rest = &s[MARKER_PREFIX.len()..];
    let eq = rest.find('=').ok_or("missing `=`")?;
    let unit = LengthUnit::from_plural(&rest[..eq]).ok_or("unknown unit")?;
    let digits_start = eq + 1;
    let digits_len = rest[digits_start..]
        .bytes()
        .take_while(u8::is_ascii_digit)
        .count();
    if digits_len == 0 {
        return Err("missing count");
    }
    let digits = &rest[digits_start..digits_start + digits_len];
    if digits.len() > 1 && digits.starts_with('0') {
        return Err("zero-padded count");
    }
    let count: usize = digits.parse().map_err(|_| "count overflows")?;
    match rest[digits_start + digits_len..].chars().next() {
        Some('>') => Ok((
            unit,
            count,
            MARKER_PREFIX.len() + digits_start + digits_len + 1,
        )),
        Some(_) => Err("unexpected character in marker"),
        None => Err("marker never closes with `>`"),
    }
}

/// Removes every marker from `text`. Event offsets refer to the returned
/// clean text.
pub fn strip_feedback(text: &str) -> Result<(String, Vec<FeedbackEvent>), FeedbackError> {
    let mut clean = String::with_capacity(text.len());
    let mut events = Vec::new();
    let mut rest = text;
    let mut consumed = 0;
    while let Some(pos) = rest.find(MARKER_PREFIX) {
        clean.push_str(&rest[..pos]);
        let (unit, count, len) =
            parse_marker(&rest[pos..]).map_err(|reason| FeedbackError::MalformedMarker {
                offset: consumed + pos,
                reason,
            })?;
        events.push(FeedbackEvent::new(unit, count, clean.len()));
        consumed += pos + len;
        rest = &rest[pos + len..];
    }
    clean.push_str(rest);
    Ok((clean, events))
}

/// Re-inserts markers into clean text. Events must be ordered by offset;
/// several events may share an offset.
pub fn insert_feedback(clean: &str, events: &[FeedbackEvent]) -> Result<String, FeedbackError> {
    let mut out = String::with_capacity(clean.len() + events.len() * 20);
    let mut last = 0;
    for e in events {
        let at = e.insertion_offset;
        if at < last || at > clean.len() || !clean.is_char_boundary(at) {
            return Err(FeedbackError::InvalidEvent { offset: at });
        }
        out.push_str(&clean[last..at]);
        out.push_str(&e.rendered());
        last = at;
    }
    out.push_str(&clean[last..]);
    Ok(out)
}

pub fn contains_marker(text: &str) -> bool {
    text.contains(MARKER_PREFIX)
}

/// Streaming filter that drops marker-shaped text from model output.
///
/// A `<used_` opening is dropped through the next `>` when that `>` lies
/// within [`SCRUB_LIMIT`] bytes; otherwise only the six-byte opening is
/// dropped. Output is independent of how the input is chunked.
#[derive(Debug, Default, Clone)]
pub struct MarkerScrubber {
    pending: String,
}

impl MarkerScrubber {
    pub fn new() -> MarkerScrubber {
        MarkerScrubber::default()
    }

    pub fn push(&mut self, chunk: &str) -> String {
        self.pending.push_str(chunk);
        self.drain(false)
    }

    pub fn finish(&mut self) -> String {
        self.drain(true)
    }

    fn drain(&mut self, eof: bool) -> String {
        let mut from = 0;
        loop {
            let Some(p) = self.pending[from..].find(MARKER_PREFIX).map(|i| i + from) else {
                let hold = if eof { 0 } else { partial_prefix_len(&self.pending) };
                return self.emit(self.pending.len() - hold);
            };
            let window = (self.pending.len() - p).min(SCRUB_LIMIT);
            let close = self.pending.as_bytes()[p..p + window]
                .iter()
                .position(|&b| b == b'>');
            match close {
                Some(q) => self.pending.replace_range(p..=p + q, ""),
                None if eof || self.pending.len() - p >= SCRUB_LIMIT => {
                    self.pending.replace_range(p..p + MARKER_PREFIX.len(), "")
                }
                None => {
                    // Text before the opening may still join with what
                    // follows the marker once it is removed.
                    let hold = partial_prefix_len(&self.pending[..p]);
                    return self.emit(p - hold);
                }
            }
            // A removal can splice a new opening together across the gap.
            from = p.saturating_sub(MARKER_PREFIX.len() - 1);
            while !self.pending.is_char_boundary(from) {
                from -= 1;
            }
        }
    }

    fn emit(&mut self, upto: usize) -> String {
        self.pending.drain(..upto).collect()
    }
}

/// Length of the longest suffix of `s` that is a proper prefix of `<used_`.
fn partial_prefix_len(s: &str) -> usize {
    (1..MARKER_PREFIX.len())
        .rev()
        .find(|&n| s.ends_with(&MARKER_PREFIX[..n]))
        .unwrap_or(0)
}

pub fn scrub_markers(text: &str) -> String {
    let mut s = MarkerScrubber::new();
    let mut out = s.push(text);
    out.push_str(&s.finish());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn render_forms() {
        assert_eq!(render_feedback(LengthUnit::Token, 123), "<used_tokens=123>");
        assert_eq!(render_feedback(LengthUnit::Sentence, 0), "<used_sentences=0>");
        assert_eq!(render_feedback(LengthUnit::Word, 57), "<used_words=57>");
        assert_eq!(render_feedback(LengthUnit::Character, 9), "<used_characters=9>");
        let (clean, events) = strip_feedback("<used_words=57>").unwrap();
        assert_eq!(clean, "");
        assert_eq!(events, vec![FeedbackEvent::new(LengthUnit::Word, 57, 0)]);
    }

    #[test]
    fn strip_single_marker() {
        let (clean, events) = strip_feedback("Hi.<used_tokens=2> Bye.").unwrap();
        assert_eq!(clean, "Hi. Bye.");
        assert_eq!(events, vec![FeedbackEvent::new(LengthUnit::Token, 2, 3)]);
        assert_eq!(strip_feedback("no markers").unwrap(), ("no markers".to_string(), vec![]));
    }

    #[test]
    fn malformed_markers_report_offset() {
        for (text, offset) in [
            ("abc <used_tokens=12", 4),
            ("<used_tokens=>", 0),
            ("x<used_lines=3>", 1),
            ("ok <used_words=007>", 3),
            ("<used_words=5 >", 0),
            ("<used_words=99999999999999999999999>", 0),
            ("Hi.<used_tokens=2> <used_", 19),
        ] {
            match strip_feedback(text) {
                Err(FeedbackError::MalformedMarker { offset: o, .. }) => assert_eq!(o, offset, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn insert_rejects_bad_offsets() {
        let ev = |o| FeedbackEvent::new(LengthUnit::Token, 1, o);
        assert!(insert_feedback("héllo", &[ev(2)]).is_err());
        assert!(insert_feedback("abc", &[ev(4)]).is_err());
        assert!(insert_feedback("abc", &[ev(2), ev(1)]).is_err());
        assert_eq!(
            insert_feedback("abc", &[ev(1), ev(1)]).unwrap(),
            "a<used_tokens=1><used_tokens=1>bc"
        );
    }

    #[test]
    fn scrubber_drops_markers() {
        assert_eq!(scrub_markers("One.<used_words=1> Two."), "One. Two.");
        assert_eq!(scrub_markers("a <used_ b"), "a  b");
        assert_eq!(scrub_markers("a<used_x>b"), "ab");
        assert_eq!(scrub_markers("tail <us"), "tail <us");
        assert_eq!(scrub_markers("<<used_x>used_tokens=5>!"), "!");
        assert_eq!(scrub_markers("<u<used_words=1>sed_ ok"), " ok");
        let mut s = MarkerScrubber::new();
        assert_eq!(s.push("One.<us"), "One.");
        assert_eq!(s.push("ed_tokens=4> Two"), " Two");
        assert_eq!(s.finish(), "");
    }

    fn marker_free() -> impl Strategy<Value = String> {
        "([a-z .<>=_]|<used|used_|\u{e9}){0,30}".prop_filter("marker-free", |s| !contains_marker(s))
    }

    fn unit() -> impl Strategy<Value = LengthUnit> {
        proptest::sample::select(LengthUnit::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn insert_strip_round_trip(
            clean in marker_free(),
            raw in proptest::collection::vec((0usize..64, unit(), 0usize..100_000), 0..6),
        ) {
            let mut offsets: Vec<usize> = raw
                .iter()
                .map(|(o, _, _)| o % (clean.len() + 1))
                .filter(|&o| clean.is_char_boundary(o))
                .collect();
            offsets.sort_unstable();
            let events: Vec<FeedbackEvent> = offsets
                .iter()
                .zip(&raw)
                .map(|(&o, &(_, u, n))| FeedbackEvent::new(u, n, o))
                .collect();
            let text = insert_feedback(&clean, &events).unwrap();
            prop_assert_eq!(strip_feedback(&text).unwrap(), (clean, events));
        }

        #[test]
        fn scrubber_is_chunking_invariant(
            text in "([a-z .>=]|<used_|<used_tokens=|<us|[0-9]){0,40}",
            cut in proptest::collection::vec(0usize..200, 0..6),
        ) {
            let mut points: Vec<usize> = cut.iter().map(|c| c % (text.len() + 1)).collect();
            points.extend([0, text.len()]);
            points.sort_unstable();
            points.dedup();
            let mut s = MarkerScrubber::new();
            let mut out = String::new();
            for w in points.windows(2) {
                out.push_str(&s.push(&text[w[0]..w[1]]));
            }
            out.push_str(&s.finish());
            prop_assert_eq!(&out, &scrub_markers(&text));
            prop_assert!(!contains_marker(&out));
        }
    }
}

//! Rule-based sentence boundary detection that works on a growing stream.
//!
//! A sentence ends after a run of terminal marks (`.`, `!`, `?`) plus any
//! closing quotes or brackets. A run containing `!` or `?` is confirmed by
//! the whitespace that follows it. A run of periods only needs whitespace
//! followed by an uppercase letter or digit (optionally behind opening
//! quotes or brackets), and is never a boundary when the word in front of
//! it is a known abbreviation.
//!
//! Decisions only look at text that is already available. When the stream
//! ends before a decision can be made, the candidate is left pending and
//! [`Segmenter::finalize`] closes the trailing sentence, so any chunking of
//! a text yields the same events as [`segment_batch`].

use std::collections::HashSet;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

const DEFAULT_ABBREVIATIONS: &str = include_str!("../templates/abbreviations.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryEvent {
    /// Exclusive byte offset into the clean text.
    pub end_offset: usize,
    pub sentence_index: usize,
}

/// Lowercase abbreviations, stored without their final period.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AbbreviationSet {
    entries: HashSet<String>,
}

impl AbbreviationSet {
    /// One abbreviation per line. Blank lines and `#` comments are skipped,
    /// a trailing period is optional.
    pub fn parse(body: &str) -> AbbreviationSet {
        let entries = body
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.trim_end_matches('.').to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        AbbreviationSet { entries }
    }

    pub fn load(path: &Path) -> std::io::Result<AbbreviationSet> {
        Ok(AbbreviationSet::parse(&std::fs::read_to_string(path)?))
    }

    pub fn embedded() -> AbbreviationSet {
        AbbreviationSet::parse(DEFAULT_ABBREVIATIONS)
    }

    pub fn shared_default() -> Arc<AbbreviationSet> {
        static DEFAULT: OnceLock<Arc<AbbreviationSet>> = OnceLock::new();
        DEFAULT
            .get_or_init(|| Arc::new(AbbreviationSet::embedded()))
            .clone()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains(word)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(
        c,
        '"' | '\'' | ')' | ']' | '}' | '\u{201D}' | '\u{2019}' | '\u{00BB}'
    )
}

fn is_opener(c: char) -> bool {
    matches!(
        c,
        '"' | '\'' | '(' | '[' | '{' | '\u{201C}' | '\u{2018}' | '\u{00AB}'
    )
}

enum Decision {
    Boundary(usize),
    NotBoundary(usize),
    NeedMore,
}

/// Incremental segmenter state. Single owner per session.
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: Arc<AbbreviationSet>,
    /// Text after the last confirmed boundary.
    tail: String,
    /// Offset of `tail[0]` in the full text.
    base: usize,
    /// Position in `tail` up to which no undecided candidate exists.
    cursor: usize,
    emitted: usize,
    finished: bool,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter::new(AbbreviationSet::shared_default())
    }
}

impl Segmenter {
    pub fn new(abbreviations: Arc<AbbreviationSet>) -> Segmenter {
        Segmenter::resume_at(abbreviations, 0, 0)
    }

    /// State for a stream whose first `base` bytes end exactly at a
    /// confirmed boundary, `emitted` of them so far.
    pub fn resume_at(abbreviations: Arc<AbbreviationSet>, base: usize, emitted: usize) -> Segmenter {
        Segmenter {
            abbreviations,
            tail: String::new(),
            base,
            cursor: 0,
            emitted,
            finished: false,
        }
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn buffered_tail(&self) -> &str {
        &self.tail
    }

    /// Offset of the last confirmed boundary (or stream start). Text before
    /// it can no longer be affected by later input.
    pub fn confirmed_offset(&self) -> usize {
        self.base
    }

    pub fn feed(&mut self, chunk: &str) -> Vec<BoundaryEvent> {
        debug_assert!(!self.finished, "feed after finalize");
        self.tail.push_str(chunk);
        self.scan(false)
    }

    pub fn finalize(&mut self) -> Vec<BoundaryEvent> {
        if self.finished {
            return Vec::new();
        }
        let mut events = self.scan(true);
        let trimmed = self.tail.trim_end();
        if !trimmed.is_empty() {
            let end = trimmed.len();
            events.push(self.confirm(end));
        }
        self.finished = true;
        events
    }

    fn confirm(&mut self, end: usize) -> BoundaryEvent {
        let event = BoundaryEvent {
            end_offset: self.base + end,
            sentence_index: self.emitted,
        };
        self.emitted += 1;
        self.tail.drain(..end);
        self.base += end;
        self.cursor = 0;
        event
    }

    fn scan(&mut self, eof: bool) -> Vec<BoundaryEvent> {
        let mut events = Vec::new();
        loop {
            let mut i = self.cursor;
            let mut found = None;
            while i < self.tail.len() {
                let c = self.tail[i..].chars().next().expect("in bounds");
                if !is_terminal(c) {
                    i += c.len_utf8();
                    continue;
                }
                match self.decide(i, eof) {
                    Decision::Boundary(end) => {
                        found = Some(end);
                        break;
                    }
                    Decision::NotBoundary(next) => i = next,
                    Decision::NeedMore => break,
                }
            }
            self.cursor = i.min(self.tail.len());
            match found {
                Some(end) => events.push(self.confirm(end)),
                None => return events,
            }
        }
    }

    /// Classifies the terminal run starting at `start` in the tail.
    fn decide(&self, start: usize, eof: bool) -> Decision {
        let s = self.tail.as_str();
        let mut j = start;
        let mut strong = false;
        let mut chars = s[start..].chars().peekable();
        while let Some(&c) = chars.peek() {
            if !is_terminal(c) {
                break;
            }
            strong |= c != '.';
            j += c.len_utf8();
            chars.next();
        }
        while let Some(&c) = chars.peek() {
            if !is_closer(c) {
                break;
            }
            j += c.len_utf8();
            chars.next();
        }
        let Some(&after) = chars.peek() else {
            // Run may continue in the next chunk; at end of stream the
            // trailing-sentence rule in finalize handles it.
            return if eof {
                Decision::NotBoundary(j)
            } else {
                Decision::NeedMore
            };
        };
        if !after.is_whitespace() {
            return Decision::NotBoundary(j);
        }
        if strong {
            return Decision::Boundary(j);
        }
        if self.preceded_by_abbreviation(start) {
            return Decision::NotBoundary(j);
        }
        for c in s[j..].chars() {
            if c.is_whitespace() || is_opener(c) {
                continue;
            }
            return if c.is_uppercase() || c.is_ascii_digit() {
                Decision::Boundary(j)
            } else {
                Decision::NotBoundary(j)
            };
        }
        if eof {
            Decision::NotBoundary(j)
        } else {
            Decision::NeedMore
        }
    }

    fn preceded_by_abbreviation(&self, start: usize) -> bool {
        let before = &self.tail[..start];
        let word_start = before
            .char_indices()
            .rev()
            .find(|(_, c)| c.is_whitespace())
            .map_or(0, |(i, c)| i + c.len_utf8());
        let word = before[word_start..].trim_start_matches(is_opener);
        !word.is_empty() && self.abbreviations.contains(&word.to_lowercase())
    }
}

pub fn segment_batch(text: &str) -> Vec<BoundaryEvent> {
    segment_batch_with(text, AbbreviationSet::shared_default())
}

pub fn segment_batch_with(text: &str, abbreviations: Arc<AbbreviationSet>) -> Vec<BoundaryEvent> {
    let mut seg = Segmenter::new(abbreviations);
    let mut events = seg.feed(text);
    events.extend(seg.finalize());
    events
}

/// Splits `text` into sentence slices (including leading whitespace) using
/// batch segmentation.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for ev in segment_batch(text) {
        out.push(&text[start..ev.end_offset]);
        start = ev.end_offset;
    }
    out
}

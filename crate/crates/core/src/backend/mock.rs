//! Deterministic mock models. Output depends only on the configured seed,
//! the last user message and the assistant prefix, so an interrupted and
//! resumed stream reproduces the uninterrupted one.

use std::collections::VecDeque;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, ChunkStream, FinishReason, GenRequest, RawDelta, StopFilter};
use crate::controller::LengthConstraint;
use crate::feedback::{render_feedback, strip_feedback, FeedbackEvent, MARKER_PREFIX};
use crate::units::{Counter, LengthUnit};

/// Filler vocabulary, bucketed by length (index = length - 1). No entry is
/// an abbreviation, so a period after any of them ends a sentence.
const LEXICON: [&[&str]; 10] = [
    &["a"],
    &["an", "in", "on", "to", "by", "at", "up", "we"],
    &["sun", "map", "old", "red", "sea", "fog", "oak", "ink"],
    &["tree", "road", "calm", "wind", "lamp", "gold", "snow", "hill"],
    &["river", "stone", "light", "cloud", "field", "quiet", "north", "bread"],
    &["forest", "garden", "window", "silver", "orange", "bridge", "valley", "candle"],
    &["harbour", "lantern", "morning", "weather", "village", "kitchen", "thunder", "painter"],
    &["mountain", "sandwich", "daylight", "festival", "notebook", "triangle", "elephant", "overcast"],
    &["waterfall", "adventure", "landscape", "telescope", "chocolate", "beautiful", "wonderful", "dandelion"],
    &["lighthouse", "watercolor", "blackboard", "strawberry", "background", "playground", "friendship", "wilderness"],
];

const WORDS_PER_CHUNK: usize = 4;

fn all_words() -> &'static [&'static str] {
    static WORDS: OnceLock<Vec<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| LEXICON.iter().flat_map(|b| b.iter().copied()).collect())
}

fn any_word(rng: &mut ChaCha8Rng) -> &'static str {
    let words = all_words();
    words[rng.random_range(0..words.len())]
}

fn word_of_len(rng: &mut ChaCha8Rng, len: usize) -> &'static str {
    let bucket = LEXICON[len - 1];
    bucket[rng.random_range(0..bucket.len())]
}

fn constraint_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)exactly\s+(\d+)\s+(tokens?|words?|sentences?|characters?)\b").expect("valid regex")
    })
}

/// Reads the length requirement a prompt states. The last statement wins,
/// so a demonstration placed before the instruction is ignored.
pub fn parse_constraint(text: &str) -> Result<LengthConstraint, BackendError> {
    let caps = constraint_regex()
        .captures_iter(text)
        .last()
        .ok_or_else(|| BackendError::UnparseableConstraint("no `exactly N <unit>` clause".into()))?;
    let target: usize = caps[1]
        .parse()
        .map_err(|_| BackendError::UnparseableConstraint(format!("target `{}` out of range", &caps[1])))?;
    if target == 0 {
        return Err(BackendError::UnparseableConstraint("target must be positive".into()));
    }
    let unit: LengthUnit = caps[2]
        .parse()
        .map_err(|e: crate::units::UnitsError| BackendError::UnparseableConstraint(e.to_string()))?;
    Ok(LengthConstraint::new(unit, target))
}

fn digest_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

fn rng_for(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(digest_u64(&[
        &seed.to_le_bytes(),
        &(index as u64).to_le_bytes(),
        &salt.to_le_bytes(),
    ]))
}

/// First plain alphanumeric word of four or more characters in the
/// instruction (after any demonstration block).
fn topic_word(user_text: &str) -> Option<String> {
    let body = match user_text.rfind("[End of Example]") {
        Some(i) => &user_text[i..],
        None => user_text,
    };
    body.split(|c: char| !c.is_ascii_alphanumeric())
        .find(|w| w.len() >= 4 && !w.eq_ignore_ascii_case("example"))
        .map(str::to_string)
}

fn capitalize(word: &str) -> String {
    let mut out = String::with_capacity(word.len());
    let mut chars = word.chars();
    if let Some(c) = chars.next() {
        out.extend(c.to_uppercase());
    }
    out.extend(chars);
    out
}

fn render_sentence(words: &[&str]) -> String {
    let mut s = String::new();
    for (i, w) in words.iter().enumerate() {
        if i == 0 {
            s.push_str(&capitalize(w));
        } else {
            s.push(' ');
            s.push_str(w);
        }
    }
    s.push('.');
    s
}

fn separator(clean: &str) -> &'static str {
    if clean.is_empty() || clean.ends_with(char::is_whitespace) {
        ""
    } else {
        " "
    }
}

/// Per-request view shared by the generative mocks.
struct Session {
    seed: u64,
    topic: Option<String>,
    constraint: LengthConstraint,
    clean: String,
    events: Vec<FeedbackEvent>,
}

impl Session {
    fn open(seed: u64, salt: &str, request: &GenRequest) -> Result<Session, BackendError> {
        request.validate()?;
        let user = request
            .last_user_text()
            .ok_or_else(|| BackendError::UnparseableConstraint("no user message".into()))?;
        let constraint = parse_constraint(user)?;
        let (clean, events) = strip_feedback(&request.assistant_prefix)
            .map_err(|e| BackendError::InvalidRequest(format!("assistant prefix: {e}")))?;
        Ok(Session {
            seed: digest_u64(&[&seed.to_le_bytes(), salt.as_bytes(), user.as_bytes()]),
            topic: topic_word(user),
            constraint,
            clean,
            events,
        })
    }

    /// The k-th filler sentence of this session, without leading space.
    fn filler(&self, k: usize) -> String {
        let mut rng = rng_for(self.seed, k, 0);
        let n = rng.random_range(5..=12);
        let mut words: Vec<&str> = (0..n).map(|_| any_word(&mut rng)).collect();
        if k.is_multiple_of(3) {
            if let Some(t) = &self.topic {
                words[1] = t;
            }
        }
        render_sentence(&words)
    }
}

/// Produces the pieces of one reply; `None` means end of sequence.
trait Planner: Send {
    fn next_piece(&mut self) -> Option<String>;
}

/// Splits planned pieces into small deltas and enforces the per-request
/// token budget.
struct PieceStream<P> {
    planner: P,
    counter: Counter,
    budget: usize,
    used: usize,
    queue: VecDeque<String>,
    finished: bool,
}

impl<P: Planner> PieceStream<P> {
    fn new(planner: P, counter: Counter, budget: u32) -> PieceStream<P> {
        PieceStream {
            planner,
            counter,
            budget: budget as usize,
            used: 0,
            queue: VecDeque::new(),
            finished: false,
        }
    }
}

fn split_chunks(piece: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut words = 0;
    let mut in_word = false;
    for (i, c) in piece.char_indices() {
        if c.is_whitespace() {
            if in_word {
                words += 1;
                if words == WORDS_PER_CHUNK {
                    out.push(piece[start..i].to_string());
                    start = i;
                    words = 0;
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    if start < piece.len() {
        out.push(piece[start..].to_string());
    }
    out
}

impl<P: Planner> Iterator for PieceStream<P> {
    type Item = Result<RawDelta, BackendError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.queue.is_empty() {
            match self.planner.next_piece() {
                Some(piece) => self.queue.extend(split_chunks(&piece)),
                None => {
                    self.finished = true;
                    return Some(Ok(RawDelta::finish("", FinishReason::Eos)));
                }
            }
        }
        let chunk = self.queue.pop_front()?;
        self.used += self.counter.count_value(&chunk, LengthUnit::Token);
        if self.used > self.budget {
            self.finished = true;
            return Some(Ok(RawDelta::finish("", FinishReason::LengthCap)));
        }
        Some(Ok(RawDelta::text(chunk)))
    }
}

fn boxed_stream<P: Planner + 'static>(
    planner: P,
    counter: Counter,
    request: &GenRequest,
) -> ChunkStream {
    let raw = PieceStream::new(planner, counter, request.sampling.max_new_tokens);
    Box::new(StopFilter::new(raw, request.stop_sequences.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default)]
    pub seed: u64,
    /// Emit `<used_{unit}=N>` after every sentence when the system prompt
    /// describes the marker, as a fine-tuned model would.
    #[serde(default)]
    pub tool_calls: bool,
}

/// A model that knows its exact output length and lands on target: exactly
/// for sentences and words, exactly for characters when the remainder allows
/// it, and within a word for subword tokens.
pub struct CompliantBackend {
    config: MockConfig,
    counter: Counter,
}

impl CompliantBackend {
    pub fn new(config: MockConfig, counter: Counter) -> CompliantBackend {
        CompliantBackend { config, counter }
    }
}

struct CompliantPlanner {
    session: Session,
    counter: Counter,
    next_index: usize,
    tool_calls: bool,
    closed: bool,
}

impl CompliantPlanner {
    fn count(&self, text: &str) -> usize {
        self.counter.count_value(text, self.session.constraint.unit)
    }

    /// Longest run of filler words whose sentence keeps the total at or
    /// under target.
    fn closing_by_count(&self, sep: &str, k: usize) -> Option<String> {
        let target = self.session.constraint.target;
        let mut rng = rng_for(self.session.seed, k, 1);
        let mut words = Vec::new();
        let mut best = None;
        for _ in 0..64 {
            words.push(any_word(&mut rng));
            let candidate = format!("{sep}{}", render_sentence(&words));
            if self.count(&format!("{}{candidate}", self.session.clean)) <= target {
                best = Some(candidate);
            } else {
                break;
            }
        }
        best
    }

    /// A sentence of exactly `remaining` characters including separator
    /// and period.
    fn closing_by_chars(&self, sep: &str, k: usize, remaining: usize) -> Option<String> {
        let mut body = remaining.checked_sub(sep.len() + 1).filter(|m| *m >= 1)?;
        let mut rng = rng_for(self.session.seed, k, 2);
        let mut words = Vec::new();
        while body > 10 {
            let len = rng.random_range(3..=8).min(body - 2);
            words.push(word_of_len(&mut rng, len));
            body -= len + 1;
        }
        words.push(word_of_len(&mut rng, body));
        Some(format!("{sep}{}", render_sentence(&words)))
    }

    fn sentence(&mut self) -> Option<String> {
        let unit = self.session.constraint.unit;
        let target = self.session.constraint.target;
        let clean = &self.session.clean;
        let sep = separator(clean);
        let k = self.next_index;
        let current = self.count(clean);
        if current >= target {
            return None;
        }
        let candidate = format!("{sep}{}", self.session.filler(k));
        if unit == LengthUnit::Sentence {
            return Some(candidate);
        }
        let reserve = if unit == LengthUnit::Character { 12 } else { 3 };
        let after = self.count(&format!("{clean}{candidate}"));
        if after + reserve <= target {
            return Some(candidate);
        }
        self.closed = true;
        match unit {
            LengthUnit::Character => self.closing_by_chars(sep, k, target - current),
            _ => self.closing_by_count(sep, k),
        }
    }
}

impl Planner for CompliantPlanner {
    fn next_piece(&mut self) -> Option<String> {
        if self.closed {
            return None;
        }
        let mut piece = self.sentence()?;
        self.session.clean.push_str(&piece);
        self.next_index += 1;
        if self.tool_calls {
            let unit = self.session.constraint.unit;
            piece.push_str(&render_feedback(unit, self.count(&self.session.clean)));
        }
        Some(piece)
    }
}

impl Backend for CompliantBackend {
    fn start_stream(&self, request: &GenRequest) -> Result<ChunkStream, BackendError> {
        let session = Session::open(self.config.seed, "compliant", request)?;
        let next_index = self.counter.count_value(&session.clean, LengthUnit::Sentence);
        let tool_calls = self.config.tool_calls
            && request.context.iter().any(|m| m.text.contains(MARKER_PREFIX));
        let planner = CompliantPlanner {
            session,
            counter: self.counter.clone(),
            next_index,
            tool_calls,
            closed: false,
        };
        Ok(boxed_stream(planner, self.counter.clone(), request))
    }

    fn name(&self) -> &str {
        "compliant"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyConfig {
    #[serde(default)]
    pub seed: u64,
    /// Weight in [0, 1] given to the count stated by the latest marker.
    #[serde(default = "default_compliance")]
    pub compliance: f64,
    /// Half-width of the per-session length misperception.
    #[serde(default = "default_bias")]
    pub bias: f64,
    /// Fixed offset added to the drawn misperception.
    #[serde(default)]
    pub skew: f64,
}

fn default_compliance() -> f64 {
    0.8
}

fn default_bias() -> f64 {
    0.4
}

impl Default for NoisyConfig {
    fn default() -> Self {
        NoisyConfig {
            seed: 0,
            compliance: default_compliance(),
            bias: default_bias(),
            skew: 0.0,
        }
    }
}

/// A model with a systematically wrong sense of its own length. Each
/// session draws a factor `1 + b`; the model perceives `true * (1 + b)` and
/// stops once the perceived length reaches the target. Markers pull the
/// estimate toward the true count in proportion to `compliance`.
pub struct NoisyBackend {
    config: NoisyConfig,
    counter: Counter,
}

impl NoisyBackend {
    pub fn new(mut config: NoisyConfig, counter: Counter) -> NoisyBackend {
        config.compliance = config.compliance.clamp(0.0, 1.0);
        config.bias = config.bias.abs();
        NoisyBackend { config, counter }
    }
}

struct NoisyPlanner {
    session: Session,
    counter: Counter,
    next_index: usize,
    factor: f64,
    compliance: f64,
}

impl NoisyPlanner {
    fn half_step(unit: LengthUnit) -> f64 {
        match unit {
            LengthUnit::Sentence => 0.5,
            LengthUnit::Token | LengthUnit::Word => 4.0,
            LengthUnit::Character => 25.0,
        }
    }

    fn estimate(&self) -> f64 {
        let unit = self.session.constraint.unit;
        let total = self.counter.count_value(&self.session.clean, unit) as f64;
        let last = self.session.events.iter().rev().find(|e| e.unit == unit);
        match last {
            Some(e) if self.compliance > 0.0 => {
                let before = self
                    .counter
                    .count_value(&self.session.clean[..e.insertion_offset], unit) as f64;
                let after = (total - before).max(0.0);
                self.compliance * e.count as f64
                    + (1.0 - self.compliance) * self.factor * before
                    + self.factor * after
            }
            _ => self.factor * total,
        }
    }
}

impl Planner for NoisyPlanner {
    fn next_piece(&mut self) -> Option<String> {
        let c = &self.session.constraint;
        if self.estimate() >= c.target as f64 - Self::half_step(c.unit) {
            return None;
        }
        let piece = format!(
            "{}{}",
            separator(&self.session.clean),
            self.session.filler(self.next_index)
        );
        self.session.clean.push_str(&piece);
        self.next_index += 1;
        Some(piece)
    }
}

impl Backend for NoisyBackend {
    fn start_stream(&self, request: &GenRequest) -> Result<ChunkStream, BackendError> {
        let session = Session::open(self.config.seed, "noisy", request)?;
        let mut rng = rng_for(session.seed, 0, 7);
        let drawn = if self.config.bias > 0.0 {
            rng.random_range(-self.config.bias..=self.config.bias)
        } else {
            0.0
        };
        let factor = (1.0 + self.config.skew + drawn).max(0.05);
        let next_index = self.counter.count_value(&session.clean, LengthUnit::Sentence);
        let planner = NoisyPlanner {
            session,
            counter: self.counter.clone(),
            next_index,
            factor,
            compliance: self.config.compliance,
        };
        Ok(boxed_stream(planner, self.counter.clone(), request))
    }

    fn name(&self) -> &str {
        "noisy"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScriptConfig {
    /// Replays one fixed reply, resuming after whatever prefix was sent.
    Replay { chunks: Vec<String> },
    /// Answers length-estimation prompts with the true count plus `offset`.
    Estimator {
        #[serde(default)]
        offset: i64,
    },
}

type Responder = dyn Fn(&GenRequest) -> Result<Vec<String>, BackendError> + Send + Sync;

enum Script {
    Replay(Vec<String>),
    Estimator(i64),
    Func(Arc<Responder>),
}

pub struct ScriptedBackend {
    script: Script,
    counter: Counter,
}

impl ScriptedBackend {
    pub fn replay<S: Into<String>>(chunks: impl IntoIterator<Item = S>) -> ScriptedBackend {
        ScriptedBackend {
            script: Script::Replay(chunks.into_iter().map(Into::into).collect()),
            counter: Counter::default(),
        }
    }

    pub fn estimator(offset: i64, counter: Counter) -> ScriptedBackend {
        ScriptedBackend {
            script: Script::Estimator(offset),
            counter,
        }
    }

    /// Replies with whatever chunks `f` returns for each request.
    pub fn from_fn<F>(f: F) -> ScriptedBackend
    where
        F: Fn(&GenRequest) -> Result<Vec<String>, BackendError> + Send + Sync + 'static,
    {
        ScriptedBackend {
            script: Script::Func(Arc::new(f)),
            counter: Counter::default(),
        }
    }

    pub fn from_config(config: &ScriptConfig, counter: Counter) -> ScriptedBackend {
        match config {
            ScriptConfig::Replay { chunks } => ScriptedBackend {
                script: Script::Replay(chunks.clone()),
                counter,
            },
            ScriptConfig::Estimator { offset } => ScriptedBackend::estimator(*offset, counter),
        }
    }

    fn respond(&self, request: &GenRequest) -> Result<Vec<String>, BackendError> {
        match &self.script {
            Script::Replay(chunks) => replay_after(chunks, &request.assistant_prefix),
            Script::Estimator(offset) => {
                let user = request
                    .last_user_text()
                    .ok_or_else(|| BackendError::UnparseableConstraint("no user message".into()))?;
                let (unit, text) = parse_estimate_prompt(user)?;
                let truth = self.counter.count_value(text, unit) as i64;
                let answer = (truth + offset).max(0);
                Ok(vec![format!("The text uses \\boxed{{{answer}}} {}.", unit.plural())])
            }
            Script::Func(f) => f(request),
        }
    }
}

fn estimate_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)how many (\w+) are used").expect("valid regex"))
}

/// Unit and text of a length-estimation prompt.
fn parse_estimate_prompt(user: &str) -> Result<(LengthUnit, &str), BackendError> {
    let caps = estimate_regex()
        .captures(user)
        .ok_or_else(|| BackendError::UnparseableConstraint("not a length-estimation prompt".into()))?;
    let unit: LengthUnit = caps[1]
        .parse()
        .map_err(|e: crate::units::UnitsError| BackendError::UnparseableConstraint(e.to_string()))?;
    let after = caps.get(0).expect("whole match").end();
    let text = user[after..]
        .find("Text: ")
        .map(|i| &user[after + i + "Text: ".len()..])
        .ok_or_else(|| BackendError::UnparseableConstraint("no `Text:` section".into()))?;
    Ok((unit, text))
}

/// End of a model-written marker starting at `pos`.
fn skip_tool_text(script: &str, pos: usize) -> usize {
    script[pos..].find('>').map_or(script.len(), |i| pos + i + 1)
}

/// Remaining script chunks after the visible part of `prefix`. Marker text
/// in the script is skipped while aligning, since the controller replaces
/// it with its own.
fn replay_after(chunks: &[String], prefix: &str) -> Result<Vec<String>, BackendError> {
    let (clean, events) = strip_feedback(prefix)
        .map_err(|e| BackendError::InvalidRequest(format!("assistant prefix: {e}")))?;
    let script = chunks.concat();
    let want = clean.as_bytes();
    let have = script.as_bytes();
    let mut pos = 0;
    let mut matched = 0;
    while matched < want.len() {
        if script[pos..].starts_with(MARKER_PREFIX) && !clean[matched..].starts_with(MARKER_PREFIX) {
            pos = skip_tool_text(&script, pos);
            continue;
        }
        if pos >= have.len() || have[pos] != want[matched] {
            return Err(BackendError::Script(format!(
                "assistant prefix diverges from the script at byte {matched}"
            )));
        }
        pos += 1;
        matched += 1;
    }
    let ends_with_marker = events.last().is_some_and(|e| e.insertion_offset == clean.len());
    if ends_with_marker && script[pos..].starts_with(MARKER_PREFIX) {
        pos = skip_tool_text(&script, pos);
    }
    let mut out = Vec::new();
    let mut start = 0;
    for chunk in chunks {
        let end = start + chunk.len();
        if end > pos {
            out.push(chunk[pos.saturating_sub(start)..].to_string());
        }
        start = end;
    }
    out.retain(|c| !c.is_empty());
    Ok(out)
}

#[cfg(test)]
struct FixedPlanner(VecDeque<String>);

#[cfg(test)]
impl Planner for FixedPlanner {
    fn next_piece(&mut self) -> Option<String> {
        self.0.pop_front()
    }
}

impl Backend for ScriptedBackend {
    fn start_stream(&self, request: &GenRequest) -> Result<ChunkStream, BackendError> {
        request.validate()?;
        let chunks = self.respond(request)?;
        // Scripted chunks pass through unsplit and without a token budget.
        let raw = chunks
            .into_iter()
            .map(|c| Ok(RawDelta::text(c)))
            .chain(std::iter::once(Ok(RawDelta::finish("", FinishReason::Eos))))
            .collect::<Vec<_>>();
        Ok(Box::new(StopFilter::new(raw.into_iter(), request.stop_sequences.clone())))
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

#[cfg(test)]
fn fixed_stream(pieces: Vec<String>, request: &GenRequest) -> ChunkStream {
    boxed_stream(FixedPlanner(pieces.into()), Counter::default(), request)
}

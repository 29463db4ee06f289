//! The feedback loop: stream a reply, pause at sentence boundaries (or when
//! the model starts a marker), record the exact length of the clean text so
//! far, and resume with the marker appended to the assistant prefix.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendError, FinishReason, GenRequest, Sampling};
use crate::feedback::{insert_feedback, FeedbackError, FeedbackEvent, MarkerScrubber, PromptBundle, MARKER_PREFIX};
use crate::segmenter::Segmenter;
use crate::units::{Counter, LengthUnit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LengthConstraint {
    pub unit: LengthUnit,
    pub target: usize,
    pub tolerance: usize,
}

impl LengthConstraint {
    /// Constraint with the unit's default tolerance.
    pub fn new(unit: LengthUnit, target: usize) -> LengthConstraint {
        LengthConstraint {
            unit,
            target,
            tolerance: Self::default_tolerance(unit),
        }
    }

    pub fn with_tolerance(mut self, tolerance: usize) -> LengthConstraint {
        self.tolerance = tolerance;
        self
    }

    pub fn default_tolerance(unit: LengthUnit) -> usize {
        match unit {
            LengthUnit::Sentence => 0,
            LengthUnit::Token | LengthUnit::Word | LengthUnit::Character => 10,
        }
    }

    pub fn is_met_by(&self, generated: usize) -> bool {
        generated.abs_diff(self.target) <= self.tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionMode {
    /// Inject only at sentence boundaries the segmenter confirms.
    ControllerBoundary,
    /// Inject only when the model starts a marker itself.
    ModelMarker,
    #[default]
    Hybrid,
}

impl InsertionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InsertionMode::ControllerBoundary => "controller_boundary",
            InsertionMode::ModelMarker => "model_marker",
            InsertionMode::Hybrid => "hybrid",
        }
    }

    fn at_boundaries(self) -> bool {
        self != InsertionMode::ModelMarker
    }

    fn on_model_marker(self) -> bool {
        self != InsertionMode::ControllerBoundary
    }
}

impl fmt::Display for InsertionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InsertionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        [InsertionMode::ControllerBoundary, InsertionMode::ModelMarker, InsertionMode::Hybrid]
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| format!("unknown insertion mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub insertion_mode: InsertionMode,
    /// Boundary feedback is skipped until this many new units accumulate.
    pub min_interval: usize,
    /// Abort once the clean text reaches `target * hard_cap_factor` units.
    pub hard_cap_factor: f64,
    pub max_resumes: usize,
    pub sampling: Sampling,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            insertion_mode: InsertionMode::Hybrid,
            min_interval: 0,
            hard_cap_factor: 2.0,
            max_resumes: 128,
            sampling: Sampling::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !self.hard_cap_factor.is_finite() || self.hard_cap_factor <= 1.0 {
            return Err(ControllerError::Config("hard_cap_factor must be a finite number > 1".into()));
        }
        if self.max_resumes == 0 {
            return Err(ControllerError::Config("max_resumes must be positive".into()));
        }
        Ok(())
    }

    fn cap_for(&self, target: usize) -> usize {
        (target as f64 * self.hard_cap_factor).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    DoneEos,
    DoneCap,
    Failed,
}

/// One request/response round of a session, for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based request number; step 1 is the initial request.
    pub step: usize,
    /// SHA-256 (hex) of the JSON-encoded context and assistant prefix sent.
    pub context_hash: String,
    /// Raw text received before interruption or finish.
    pub delta_text: String,
    /// Events recorded during this step.
    pub events: Vec<FeedbackEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub clean_text: String,
    pub events: Vec<FeedbackEvent>,
    pub boundaries_seen: usize,
    pub resume_count: usize,
    pub status: SessionStatus,
    pub trace: Vec<TraceStep>,
}

impl SessionState {
    fn new() -> SessionState {
        SessionState {
            clean_text: String::new(),
            events: Vec::new(),
            boundaries_seen: 0,
            resume_count: 0,
            status: SessionStatus::Running,
            trace: Vec::new(),
        }
    }

    /// The assistant message as the model saw it, markers included.
    pub fn transcript(&self) -> String {
        insert_feedback(&self.clean_text, &self.events).expect("events are ordered by construction")
    }

    pub fn write_trace(&self, mut out: impl Write) -> std::io::Result<()> {
        for step in &self.trace {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("hard cap reached: {count} {unit} >= {cap}")]
    CapExceeded { unit: LengthUnit, count: usize, cap: usize },
    #[error("stream stopped by the backend length cap")]
    LengthCap,
    #[error("more than {0} resumes")]
    ResumeLimit(usize),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("session cancelled")]
    Cancelled,
}

impl ControllerError {
    /// Cap and resume-limit stops keep a usable partial result.
    pub fn is_limit(&self) -> bool {
        matches!(
            self,
            ControllerError::CapExceeded { .. } | ControllerError::LengthCap | ControllerError::ResumeLimit(_)
        )
    }
}

/// A failed session with whatever state it reached.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{error}")]
pub struct SessionError {
    pub error: ControllerError,
    pub state: Box<SessionState>,
}

pub type SessionResult = Result<SessionState, SessionError>;

/// Callback fed committed clean text.
pub type CommitHook<'a> = Box<dyn FnMut(&str) + Send + 'a>;

/// Optional callbacks for a session.
#[derive(Default)]
pub struct SessionHooks<'a> {
    /// Receives clean text once it can no longer be revised, in order.
    pub on_commit: Option<CommitHook<'a>>,
    pub cancel: Option<Arc<AtomicBool>>,
}

enum StepEnd {
    Resume,
    Eos,
}

struct Run<'a, 'h> {
    backend: &'a dyn Backend,
    prompt: &'a PromptBundle,
    config: &'a ControllerConfig,
    counter: &'a Counter,
    hooks: SessionHooks<'h>,
    state: SessionState,
    segmenter: Segmenter,
    committed: usize,
}

pub fn run_session(
    backend: &dyn Backend,
    prompt: &PromptBundle,
    config: &ControllerConfig,
    counter: &Counter,
) -> SessionResult {
    run_session_with(backend, prompt, config, counter, SessionHooks::default())
}

pub fn run_session_with(
    backend: &dyn Backend,
    prompt: &PromptBundle,
    config: &ControllerConfig,
    counter: &Counter,
    hooks: SessionHooks<'_>,
) -> SessionResult {
    let mut run = Run {
        backend,
        prompt,
        config,
        counter,
        hooks,
        state: SessionState::new(),
        segmenter: Segmenter::new(counter.abbreviations().clone()),
        committed: 0,
    };
    match run.drive() {
        Ok(()) => {
            run.state.status = SessionStatus::DoneEos;
            Ok(run.state)
        }
        Err(error) => {
            run.state.status = if error.is_limit() {
                SessionStatus::DoneCap
            } else {
                SessionStatus::Failed
            };
            Err(SessionError {
                error,
                state: Box::new(run.state),
            })
        }
    }
}

fn context_hash(request: &GenRequest) -> String {
    let body = serde_json::to_vec(&(&request.context, &request.assistant_prefix)).expect("serializable");
    hex::encode(Sha256::digest(&body))
}

impl Run<'_, '_> {
    fn injecting(&self) -> bool {
        self.prompt.mode.uses_feedback()
    }

    fn armed(&self) -> bool {
        self.injecting() && self.config.insertion_mode.on_model_marker()
    }

    fn boundary_feedback(&self) -> bool {
        self.injecting() && self.config.insertion_mode.at_boundaries()
    }

    fn unit(&self) -> LengthUnit {
        self.prompt.constraint.unit
    }

    fn cancelled(&self) -> bool {
        self.hooks.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed))
    }

    fn last_event_offset(&self) -> Option<usize> {
        self.state.events.last().map(|e| e.insertion_offset)
    }

    fn commit(&mut self, upto: usize) {
        if upto > self.committed {
            if let Some(f) = self.hooks.on_commit.as_mut() {
                f(&self.state.clean_text[self.committed..upto]);
            }
            self.committed = upto;
        }
    }

    /// Whether feedback belongs at boundary `b`.
    fn wants_feedback_at(&self, b: usize) -> bool {
        if !self.boundary_feedback() || self.last_event_offset().is_some_and(|o| b <= o) {
            return false;
        }
        if self.config.min_interval == 0 {
            return true;
        }
        let now = self.counter.count_value(&self.state.clean_text[..b], self.unit());
        let before = self.state.events.last().map_or(0, |e| e.count);
        now.saturating_sub(before) >= self.config.min_interval
    }

    fn record_event(&mut self, offset: usize) -> FeedbackEvent {
        let count = self.counter.count_value(&self.state.clean_text[..offset], self.unit());
        let event = FeedbackEvent::new(self.unit(), count, offset);
        self.state.events.push(event);
        event
    }

    fn drive(&mut self) -> Result<(), ControllerError> {
        self.config.validate()?;
        if self.prompt.constraint.target == 0 {
            return Err(ControllerError::Config("target must be positive".into()));
        }
        let cap = self.config.cap_for(self.prompt.constraint.target);
        let base = GenRequest::from_prompt(self.prompt);
        loop {
            if self.cancelled() {
                return Err(ControllerError::Cancelled);
            }
            let mut request = base.clone();
            request.sampling = self.config.sampling;
            if self.armed() {
                request.stop_sequences = vec![MARKER_PREFIX.to_string()];
            }
            request.assistant_prefix = self.state.transcript();
            let step = self.state.trace.len() + 1;
            self.state.trace.push(TraceStep {
                step,
                context_hash: context_hash(&request),
                delta_text: String::new(),
                events: Vec::new(),
            });
            let events_before = self.state.events.len();
            let end = self.step(&request, cap);
            let new_events = self.state.events[events_before..].to_vec();
            self.state.trace.last_mut().expect("pushed above").events = new_events;
            match end? {
                StepEnd::Eos => return Ok(()),
                StepEnd::Resume => {
                    self.state.resume_count += 1;
                    if self.state.resume_count > self.config.max_resumes {
                        return Err(ControllerError::ResumeLimit(self.config.max_resumes));
                    }
                }
            }
        }
    }

    fn step(&mut self, request: &GenRequest, cap: usize) -> Result<StepEnd, ControllerError> {
        let stream = self.backend.start_stream(request)?;
        let mut scrubber = MarkerScrubber::new();
        for chunk in stream {
            let chunk = chunk?;
            if self.cancelled() {
                return Err(ControllerError::Cancelled);
            }
            self.state
                .trace
                .last_mut()
                .expect("step has a trace entry")
                .delta_text
                .push_str(&chunk.text_delta);
            let mut text = scrubber.push(&chunk.text_delta);
            if chunk.finish.is_some() {
                text.push_str(&scrubber.finish());
            }
            if self.absorb(&text)? {
                return Ok(StepEnd::Resume);
            }
            let count = self.counter.count_value(&self.state.clean_text, self.unit());
            if count >= cap {
                return Err(ControllerError::CapExceeded {
                    unit: self.unit(),
                    count,
                    cap,
                });
            }
            match chunk.finish {
                None => {}
                Some(FinishReason::LengthCap) => return Err(ControllerError::LengthCap),
                Some(FinishReason::StopSequence)
                    if self.armed() && chunk.matched_stop.as_deref() == Some(MARKER_PREFIX) =>
                {
                    // The model asked for its length; the true count
                    // completes the marker it started.
                    let end = self.state.clean_text.len();
                    if self.last_event_offset().is_none_or(|o| o < end) {
                        self.record_event(end);
                    }
                    if !self.boundary_feedback() {
                        self.commit(end);
                    }
                    return Ok(StepEnd::Resume);
                }
                Some(_) => {
                    self.finish_text();
                    return Ok(StepEnd::Eos);
                }
            }
        }
        Err(BackendError::Protocol("stream ended without a finish".into()).into())
    }

    /// Appends clean text and handles any boundaries it confirms. Returns
    /// true when feedback was injected and the stream must be restarted.
    fn absorb(&mut self, text: &str) -> Result<bool, ControllerError> {
        if text.is_empty() {
            return Ok(false);
        }
        self.state.clean_text.push_str(text);
        let boundaries = self.segmenter.feed(text);
        for boundary in boundaries {
            self.state.boundaries_seen += 1;
            let b = boundary.end_offset;
            if self.wants_feedback_at(b) {
                let rest = &self.state.clean_text[b..];
                let keep = b + (rest.len() - rest.trim_start().len());
                self.state.clean_text.truncate(keep);
                self.record_event(b);
                self.segmenter =
                    Segmenter::resume_at(self.counter.abbreviations().clone(), b, boundary.sentence_index + 1);
                self.segmenter.feed(&self.state.clean_text[b..keep]);
                self.commit(b);
                return Ok(true);
            }
        }
        if self.boundary_feedback() {
            self.commit(self.segmenter.confirmed_offset());
        } else {
            self.commit(self.state.clean_text.len());
        }
        Ok(false)
    }

    fn finish_text(&mut self) {
        for boundary in self.segmenter.finalize() {
            self.state.boundaries_seen += 1;
            if self.wants_feedback_at(boundary.end_offset) {
                self.record_event(boundary.end_offset);
            }
        }
        self.commit(self.state.clean_text.len());
    }
}

/// Runs sessions on `parallelism` worker threads. Results come back in
/// input order, one per prompt; a failing item does not affect the others.
pub fn run_batch(
    backend: &dyn Backend,
    prompts: &[PromptBundle],
    config: &ControllerConfig,
    counter: &Counter,
    parallelism: usize,
) -> Result<Vec<SessionResult>, ControllerError> {
    run_batch_with(backend, prompts, config, counter, parallelism, None)
}

pub fn run_batch_with(
    backend: &dyn Backend,
    prompts: &[PromptBundle],
    config: &ControllerConfig,
    counter: &Counter,
    parallelism: usize,
    cancel: Option<Arc<AtomicBool>>,
) -> Result<Vec<SessionResult>, ControllerError> {
    if parallelism == 0 {
        return Err(ControllerError::Config("parallelism must be at least 1".into()));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| ControllerError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        prompts
            .par_iter()
            .map(|prompt| {
                let hooks = SessionHooks {
                    on_commit: None,
                    cancel: cancel.clone(),
                };
                run_session_with(backend, prompt, config, counter, hooks)
            })
            .collect()
    }))
}

/// Final state of a session whether it succeeded or not.
pub fn final_state(result: &SessionResult) -> &SessionState {
    match result {
        Ok(state) => state,
        Err(e) => &e.state,
    }
}

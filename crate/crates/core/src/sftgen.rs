//! Training data: target retrofitting, feedback-interleaved responses and
//! one-shot demonstrations.
//!
//! A sampled response keeps its text; the prompt's target is moved to match
//! the response's true length up to a small random offset.

use std::cmp::Ordering;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::LengthConstraint;
use crate::feedback::{
    build_prompt_with, contains_marker, insert_feedback, strip_feedback, FeedbackError, FeedbackEvent, PromptMode,
    TemplateSet,
};
use crate::segmenter::segment_batch_with;
use crate::units::{Counter, LengthUnit};

/// Units a training target can be stated in.
pub const TARGET_UNITS: [LengthUnit; 3] = [LengthUnit::Token, LengthUnit::Word, LengthUnit::Sentence];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SftError {
    #[error("demonstration pool is empty")]
    EmptyPool,
    #[error("response is empty")]
    EmptyResponse,
    #[error("item {id}: recount mismatch: {detail}")]
    RecountMismatch { id: String, detail: String },
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("i/o: {0}")]
    Io(String),
}

/// Inclusive offset range between target and true length.
pub fn delta_range(unit: LengthUnit) -> (i64, i64) {
    match unit {
        LengthUnit::Token => (-10, 10),
        LengthUnit::Word => (-5, 5),
        LengthUnit::Sentence | LengthUnit::Character => (0, 0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftTargetSpec {
    pub unit: LengthUnit,
    pub l_generated: usize,
    pub delta: i64,
    pub l_target: usize,
}

impl SftTargetSpec {
    pub fn new(unit: LengthUnit, l_generated: usize, delta: i64) -> Option<SftTargetSpec> {
        let l_target = l_generated as i64 + delta;
        (l_target >= 1).then_some(SftTargetSpec {
            unit,
            l_generated,
            delta,
            l_target: l_target as usize,
        })
    }
}

/// Per-item seed derived from the global seed and the item id.
pub fn item_seed(global: u64, item_id: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(global.to_le_bytes())
        .chain_update(item_id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Draws a unit uniformly, then an offset uniformly from the unit's range,
/// redrawing the offset while the target would be below 1.
pub fn update_target(response: &str, seed: u64, counter: &Counter) -> Result<SftTargetSpec, SftError> {
    if response.trim().is_empty() {
        return Err(SftError::EmptyResponse);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = TARGET_UNITS[rng.random_range(0..TARGET_UNITS.len())];
    let l_generated = counter.count_value(response, unit);
    let (lo, hi) = delta_range(unit);
    if l_generated as i64 + hi < 1 {
        return Err(SftError::EmptyResponse);
    }
    loop {
        let delta = rng.random_range(lo..=hi);
        if let Some(spec) = SftTargetSpec::new(unit, l_generated, delta) {
            return Ok(spec);
        }
    }
}

/// Feedback events after every sentence of `response`, counting the clean
/// prefix up to each boundary.
pub fn feedback_events(response: &str, unit: LengthUnit, counter: &Counter) -> Vec<FeedbackEvent> {
    segment_batch_with(response, counter.abbreviations().clone())
        .into_iter()
        .map(|b| FeedbackEvent::new(unit, counter.count_value(&response[..b.end_offset], unit), b.end_offset))
        .collect()
}

pub fn interleave_feedback(response: &str, unit: LengthUnit, counter: &Counter) -> String {
    insert_feedback(response, &feedback_events(response, unit, counter)).expect("boundaries are ordered")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftVariant {
    Plain,
    Feedback,
}

impl std::str::FromStr for SftVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(SftVariant::Plain),
            "feedback" => Ok(SftVariant::Feedback),
            other => Err(format!("unknown SFT variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceItem {
    pub id: String,
    pub question: String,
    pub response: String,
}

/// One JSONL line of a training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub id: String,
    pub question: String,
    pub unit: LengthUnit,
    pub target: usize,
    pub prompt: String,
    pub response: String,
    pub variant: SftVariant,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub examples: Vec<SftExample>,
    pub dropped: Vec<SftError>,
}

fn build_one(
    item: &SourceItem,
    variant: SftVariant,
    global_seed: u64,
    counter: &Counter,
    templates: &TemplateSet,
) -> Result<SftExample, SftError> {
    let mismatch = |detail: String| SftError::RecountMismatch {
        id: item.id.clone(),
        detail,
    };
    if contains_marker(&item.response) {
        return Err(mismatch("source response already contains a marker".into()));
    }
    let seed = item_seed(global_seed, &item.id);
    let spec = update_target(&item.response, seed, counter).map_err(|e| mismatch(e.to_string()))?;
    let constraint = LengthConstraint::new(spec.unit, spec.l_target);
    let mode = match variant {
        SftVariant::Plain => PromptMode::Baseline,
        SftVariant::Feedback => PromptMode::Feedback,
    };
    let prompt = build_prompt_with(templates, &item.question, constraint, mode, None)?.flattened();
    let response = match variant {
        SftVariant::Plain => item.response.clone(),
        SftVariant::Feedback => interleave_feedback(&item.response, spec.unit, counter),
    };

    let (clean, events) = strip_feedback(&response)?;
    let recount = counter.count_value(&clean, spec.unit);
    let (lo, hi) = delta_range(spec.unit);
    let offset = spec.l_target as i64 - recount as i64;
    if clean != item.response || recount != spec.l_generated || offset < lo || offset > hi {
        return Err(mismatch(format!("target {} vs recount {recount}", spec.l_target)));
    }
    if variant == SftVariant::Feedback {
        if events.is_empty() {
            return Err(mismatch("no sentence boundary to annotate".into()));
        }
        if let Some(e) = events
            .iter()
            .find(|e| e.count != counter.count_value(&clean[..e.insertion_offset], spec.unit))
        {
            return Err(mismatch(format!("marker at {} disagrees with recount", e.insertion_offset)));
        }
    }
    Ok(SftExample {
        id: item.id.clone(),
        question: item.question.clone(),
        unit: spec.unit,
        target: spec.l_target,
        prompt,
        response,
        variant,
        seed,
    })
}

/// Builds one example per item, in input order. Items that fail the recount
/// checks are dropped and logged.
pub fn build_dataset(
    items: &[SourceItem],
    variant: SftVariant,
    seed: u64,
    counter: &Counter,
    templates: &TemplateSet,
) -> BuildReport {
    let results: Vec<Result<SftExample, SftError>> = items
        .par_iter()
        .map(|item| build_one(item, variant, seed, counter, templates))
        .collect();
    let mut report = BuildReport {
        examples: Vec::with_capacity(items.len()),
        dropped: Vec::new(),
    };
    for r in results {
        match r {
            Ok(ex) => report.examples.push(ex),
            Err(e) => {
                tracing::warn!(error = %e, "dropping SFT item");
                report.dropped.push(e);
            }
        }
    }
    report
}

pub fn write_jsonl(examples: &[SftExample], mut out: impl Write) -> Result<(), SftError> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex).map_err(|e| SftError::Io(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| SftError::Io(e.to_string()))?;
    }
    Ok(())
}

/// A one-shot example for in-context prompting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub response: String,
    pub constraint: LengthConstraint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub question: String,
    pub response: String,
}

/// Numeric ids compare as numbers, everything else lexically.
fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// Picks the pool response closest in length to the target (ties go to the
/// smaller id). The demonstration's stated target is that response's own
/// length, so it meets its constraint exactly.
pub fn build_icl_demo(
    pool: &[PoolEntry],
    constraint: LengthConstraint,
    with_markers: bool,
    counter: &Counter,
) -> Result<Demonstration, SftError> {
    let unit = constraint.unit;
    let (entry, len) = pool
        .iter()
        .map(|e| (e, counter.count_value(&e.response, unit)))
        .min_by(|(a, la), (b, lb)| {
            la.abs_diff(constraint.target)
                .cmp(&lb.abs_diff(constraint.target))
                .then_with(|| compare_ids(&a.id, &b.id))
        })
        .ok_or(SftError::EmptyPool)?;
    let response = if with_markers {
        interleave_feedback(&entry.response, unit, counter)
    } else {
        entry.response.clone()
    };
    Ok(Demonstration {
        question: entry.question.clone(),
        response,
        constraint: LengthConstraint::new(unit, len.max(1)).with_tolerance(constraint.tolerance),
    })
}

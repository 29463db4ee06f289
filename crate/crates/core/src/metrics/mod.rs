//! Length-control metrics: mean absolute error, precise-match rate, target
//! grids and exports.

mod judge;
mod pilot;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use judge::{emit_judge_prompts, score_replies, write_judge_jsonl, JudgeItem, JudgePrompt, JudgeScore};
pub use pilot::{bucket_label, buckets_for, pilot_study, BucketStats, PilotInput, PilotRecord, PilotReport};

use crate::backend::Backend;
use crate::controller::{run_batch, ControllerConfig, LengthConstraint, SessionStatus};
use crate::feedback::{build_prompt_with, PromptBundle, PromptMode, TemplateError, TemplateSet};
use crate::sftgen::{build_icl_demo, PoolEntry};
use crate::units::{Counter, LengthUnit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no pairs to aggregate")]
    EmptyInput,
    #[error("pairs mix units {0} and {1}")]
    MixedUnits(LengthUnit, LengthUnit),
    #[error("target grid is empty")]
    EmptyGrid,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no \\boxed{{integer}} in reply")]
    NoBoxedValue,
    #[error("score {value} outside 1..={scale}")]
    OutOfRange { value: i64, scale: u32 },
    #[error("unknown judge template `{0}`")]
    UnknownTemplate(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<std::io::Error> for MetricsError {
    fn from(e: std::io::Error) -> Self {
        MetricsError::Io(e.to_string())
    }
}

impl From<csv::Error> for MetricsError {
    fn from(e: csv::Error) -> Self {
        MetricsError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalPair {
    pub unit: LengthUnit,
    pub target: usize,
    pub generated: usize,
    pub sample_id: String,
}

impl EvalPair {
    pub fn new(unit: LengthUnit, target: usize, generated: usize, sample_id: impl Into<String>) -> EvalPair {
        EvalPair {
            unit,
            target,
            generated,
            sample_id: sample_id.into(),
        }
    }

    pub fn abs_error(&self) -> usize {
        self.generated.abs_diff(self.target)
    }
}

/// Mean of |generated - target|. The sum is exact integer arithmetic; the
/// only rounding is the final division.
pub fn mae(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let total: u128 = pairs.iter().map(|p| p.abs_error() as u128).sum();
    Ok(total as f64 / pairs.len() as f64)
}

/// Fraction of pairs with |generated - target| <= epsilon.
pub fn pm(pairs: &[EvalPair], epsilon: usize) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let hits = pairs.iter().filter(|p| p.abs_error() <= epsilon).count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBreakdown {
    pub n: usize,
    pub mae: f64,
    pub pm: f64,
    /// Generated lengths, ascending.
    pub generated: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub unit: LengthUnit,
    pub epsilon: usize,
    pub n: usize,
    pub mae: f64,
    pub pm: f64,
    pub per_target: BTreeMap<usize, TargetBreakdown>,
}

pub fn summarize(pairs: &[EvalPair], epsilon: usize) -> Result<MetricsSummary, MetricsError> {
    let first = pairs.first().ok_or(MetricsError::EmptyInput)?;
    if let Some(other) = pairs.iter().find(|p| p.unit != first.unit) {
        return Err(MetricsError::MixedUnits(first.unit, other.unit));
    }
    let mut groups: BTreeMap<usize, Vec<EvalPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.target).or_default().push(p.clone());
    }
    let mut per_target = BTreeMap::new();
    for (target, group) in groups {
        let mut generated: Vec<usize> = group.iter().map(|p| p.generated).collect();
        generated.sort_unstable();
        per_target.insert(
            target,
            TargetBreakdown {
                n: group.len(),
                mae: mae(&group)?,
                pm: pm(&group, epsilon)?,
                generated,
            },
        );
    }
    Ok(MetricsSummary {
        unit: first.unit,
        epsilon,
        n: pairs.len(),
        mae: mae(pairs)?,
        pm: pm(pairs, epsilon)?,
        per_target,
    })
}

/// Target lengths used when no grid is given.
pub fn default_grid(unit: LengthUnit) -> Vec<usize> {
    match unit {
        LengthUnit::Token | LengthUnit::Word => (100..=400).step_by(50).collect(),
        LengthUnit::Sentence => (5..=30).step_by(5).collect(),
        LengthUnit::Character => (500..=2000).step_by(250).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridItem {
    pub id: String,
    pub instruction: String,
}

pub struct GridSpec<'a> {
    pub unit: LengthUnit,
    pub grid: Vec<usize>,
    pub mode: PromptMode,
    pub epsilon: usize,
    pub templates: &'a TemplateSet,
    /// Demonstration pool for the in-context modes.
    pub demo_pool: &'a [PoolEntry],
    pub parallelism: usize,
}

impl<'a> GridSpec<'a> {
    pub fn new(unit: LengthUnit, mode: PromptMode, templates: &'a TemplateSet) -> GridSpec<'a> {
        GridSpec {
            unit,
            grid: default_grid(unit),
            mode,
            epsilon: LengthConstraint::default_tolerance(unit),
            templates,
            demo_pool: &[],
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridFailure {
    pub sample_id: String,
    pub target: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub summary: MetricsSummary,
    pub pairs: Vec<EvalPair>,
    /// Sessions that failed and are excluded from the pairs.
    pub failures: Vec<GridFailure>,
    /// Sample ids of sessions stopped by the hard cap. Their partial output
    /// is kept in the pairs.
    pub capped: Vec<String>,
}

impl GridReport {
    pub fn summary_json(&self) -> serde_json::Value {
        summary_json(&self.summary, self.failures.len(), self.capped.len())
    }
}

/// Summary file body: `{unit, epsilon, n, mae, pm, per_target, failures, capped}`.
pub fn summary_json(summary: &MetricsSummary, failures: usize, capped: usize) -> serde_json::Value {
    let mut v = serde_json::to_value(summary).expect("serializable");
    v["failures"] = failures.into();
    v["capped"] = capped.into();
    v
}

pub fn sample_id(item_id: &str, target: usize) -> String {
    format!("{item_id}@{target}")
}

/// One session per (item, target). Failed sessions are reported apart and
/// left out of the metrics.
pub fn run_grid(
    items: &[GridItem],
    spec: &GridSpec<'_>,
    backend: &dyn Backend,
    config: &ControllerConfig,
    counter: &Counter,
) -> Result<GridReport, MetricsError> {
    if spec.grid.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    if items.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut prompts: Vec<PromptBundle> = Vec::new();
    let mut ids = Vec::new();
    for item in items {
        for &target in &spec.grid {
            let constraint = LengthConstraint::new(spec.unit, target).with_tolerance(spec.epsilon);
            let demo = if spec.mode.uses_demo() {
                let with_markers = spec.mode.uses_feedback();
                Some(
                    build_icl_demo(spec.demo_pool, constraint, with_markers, counter)
                        .map_err(|e| MetricsError::Prompt(e.to_string()))?,
                )
            } else {
                None
            };
            let prompt = build_prompt_with(spec.templates, &item.instruction, constraint, spec.mode, demo.as_ref())
                .map_err(|e| MetricsError::Prompt(e.to_string()))?;
            prompts.push(prompt);
            ids.push((sample_id(&item.id, target), target));
        }
    }
    let results = run_batch(backend, &prompts, config, counter, spec.parallelism.max(1))
        .map_err(|e| MetricsError::Prompt(e.to_string()))?;
    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    let mut capped = Vec::new();
    for ((id, target), result) in ids.into_iter().zip(results) {
        let state = match result {
            Ok(state) => state,
            Err(e) if e.state.status == SessionStatus::DoneCap => {
                capped.push(id.clone());
                *e.state
            }
            Err(e) => {
                tracing::warn!(sample = %id, error = %e, "session failed");
                failures.push(GridFailure {
                    sample_id: id,
                    target,
                    error: e.to_string(),
                });
                continue;
            }
        };
        let generated = counter.count_value(&state.clean_text, spec.unit);
        pairs.push(EvalPair::new(spec.unit, target, generated, id));
    }
    let summary = summarize(&pairs, spec.epsilon)?;
    Ok(GridReport {
        summary,
        pairs,
        failures,
        capped,
    })
}

/// Writes `unit,target,generated,sample_id` rows ordered by target, then
/// sample id.
pub fn export_distributions(pairs: &[EvalPair], out: impl Write) -> Result<(), MetricsError> {
    let mut rows: Vec<&EvalPair> = pairs.iter().collect();
    rows.sort_by(|a, b| a.target.cmp(&b.target).then_with(|| a.sample_id.cmp(&b.sample_id)));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit", "target", "generated", "sample_id"])?;
    for p in rows {
        w.write_record([
            p.unit.as_str(),
            &p.target.to_string(),
            &p.generated.to_string(),
            &p.sample_id,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_distributions(input: impl Read) -> Result<Vec<EvalPair>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["unit", "target", "generated", "sample_id"] {
        return Err(MetricsError::Csv(format!("unexpected header {:?}", headers)));
    }
    let mut pairs = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let bad = |what: &str| MetricsError::Csv(format!("row {}: bad {what}", i + 1));
        let unit: LengthUnit = record[0].parse().map_err(|_| bad("unit"))?;
        let target = record[1].parse().map_err(|_| bad("target"))?;
        let generated = record[2].parse().map_err(|_| bad("generated"))?;
        pairs.push(EvalPair::new(unit, target, generated, &record[3]));
    }
    Ok(pairs)
}

fn boxed_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\boxed\{\s*(-?\d+)\s*\}").expect("valid regex"))
}

/// The last `\boxed{integer}` in a reply.
pub fn extract_boxed(reply: &str) -> Result<i64, MetricsError> {
    let caps = boxed_regex()
        .captures_iter(reply)
        .last()
        .ok_or(MetricsError::NoBoxedValue)?;
    caps[1].parse().map_err(|_| MetricsError::OutOfRange {
        value: i64::MAX,
        scale: 0,
    })
}

/// Judge rating from the last `\boxed{integer}`, checked against 1..=scale.
pub fn extract_boxed_score(reply: &str, scale: u32) -> Result<u32, MetricsError> {
    let value = extract_boxed(reply).map_err(|e| match e {
        MetricsError::OutOfRange { value, .. } => MetricsError::OutOfRange { value, scale },
        other => other,
    })?;
    if value < 1 || value > scale as i64 {
        return Err(MetricsError::OutOfRange { value, scale });
    }
    Ok(value as u32)
}

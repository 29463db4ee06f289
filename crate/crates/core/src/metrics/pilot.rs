//! How well does a model know the length of its own output? Each text is
//! sent back with a length-estimation prompt; estimates are compared with
//! the true length per length bucket.

use serde::{Deserialize, Serialize};

use super::{extract_boxed, MetricsError};
use crate::backend::{complete, Backend, GenRequest, Message, Role, Sampling};
use crate::feedback::TemplateSet;
use crate::units::{Counter, LengthUnit};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotInput {
    pub sample_id: String,
    pub text: String,
    pub specified_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotRecord {
    pub sample_id: String,
    pub generated_len: usize,
    pub estimated_len: i64,
    pub specified_len: usize,
    pub bucket: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub label: String,
    pub lo: usize,
    pub hi: usize,
    pub n: usize,
    /// `None` for empty buckets.
    pub mae_est_vs_gen: Option<f64>,
    pub mae_gen_vs_spec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub unit: LengthUnit,
    pub buckets: Vec<BucketStats>,
    pub records: Vec<PilotRecord>,
    /// Items whose generated length falls outside every bucket.
    pub unbucketed: Vec<String>,
    /// Items without a parseable estimate, with the reason.
    pub unparseable: Vec<(String, String)>,
}

/// Left-closed length buckets `[lo, hi)`.
pub fn buckets_for(unit: LengthUnit) -> Vec<(usize, usize)> {
    match unit {
        LengthUnit::Token | LengthUnit::Word => (50..450).step_by(100).map(|lo| (lo, lo + 100)).collect(),
        LengthUnit::Sentence => (5..30).step_by(5).map(|lo| (lo, lo + 5)).collect(),
        LengthUnit::Character => (250..2250).step_by(500).map(|lo| (lo, lo + 500)).collect(),
    }
}

pub fn bucket_label(lo: usize, hi: usize) -> String {
    format!("[{lo},{hi})")
}

fn estimate_one(
    input: &PilotInput,
    unit: LengthUnit,
    backend: &dyn Backend,
    templates: &TemplateSet,
) -> Result<i64, String> {
    let user = templates.render_estimate(unit, &input.text).map_err(|e| e.to_string())?;
    let system = templates.system.render(&[]).map_err(|e| e.to_string())?;
    let mut context = Vec::new();
    if !system.is_empty() {
        context.push(Message::new(Role::System, system));
    }
    context.push(Message::new(Role::User, user));
    let mut request = GenRequest::new(context);
    request.sampling = Sampling::default();
    let reply = complete(backend, &request).map_err(|e| e.to_string())?;
    extract_boxed(&reply.text).map_err(|e| e.to_string())
}

fn mean_abs(values: impl Iterator<Item = u64>) -> Option<f64> {
    let (sum, n) = values.fold((0u128, 0usize), |(s, n), v| (s + v as u128, n + 1));
    (n > 0).then(|| sum as f64 / n as f64)
}

/// Buckets by generated length. Unparseable estimates and out-of-range
/// lengths are reported and excluded.
pub fn pilot_study(
    inputs: &[PilotInput],
    unit: LengthUnit,
    backend: &dyn Backend,
    counter: &Counter,
    templates: &TemplateSet,
) -> Result<PilotReport, MetricsError> {
    if inputs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let ranges = buckets_for(unit);
    let mut records = Vec::new();
    let mut unbucketed = Vec::new();
    let mut unparseable = Vec::new();
    for input in inputs {
        let generated_len = counter.count_value(&input.text, unit);
        let estimated_len = match estimate_one(input, unit, backend, templates) {
            Ok(v) => v,
            Err(reason) => {
                unparseable.push((input.sample_id.clone(), reason));
                continue;
            }
        };
        let Some(&(lo, hi)) = ranges.iter().find(|(lo, hi)| (*lo..*hi).contains(&generated_len)) else {
            unbucketed.push(input.sample_id.clone());
            continue;
        };
        records.push(PilotRecord {
            sample_id: input.sample_id.clone(),
            generated_len,
            estimated_len,
            specified_len: input.specified_len,
            bucket: bucket_label(lo, hi),
        });
    }
    let buckets = ranges
        .iter()
        .map(|&(lo, hi)| {
            let label = bucket_label(lo, hi);
            let members: Vec<&PilotRecord> = records.iter().filter(|r| r.bucket == label).collect();
            BucketStats {
                n: members.len(),
                mae_est_vs_gen: mean_abs(
                    members
                        .iter()
                        .map(|r| (r.estimated_len - r.generated_len as i64).unsigned_abs()),
                ),
                mae_gen_vs_spec: mean_abs(
                    members
                        .iter()
                        .map(|r| r.generated_len.abs_diff(r.specified_len) as u64),
                ),
                label,
                lo,
                hi,
            }
        })
        .collect();
    Ok(PilotReport {
        unit,
        buckets,
        records,
        unbucketed,
        unparseable,
    })
}

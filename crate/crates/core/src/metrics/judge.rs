//! Quality judging as prompt emission plus score parsing. Sending the
//! prompts to a judge model is up to the caller.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{extract_boxed_score, MetricsError};
use crate::feedback::TemplateSet;

/// Values for a judge template's placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeItem {
    pub sample_id: String,
    pub fields: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgePrompt {
    pub sample_id: String,
    pub template_id: String,
    pub prompt_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub sample_id: String,
    pub template_id: String,
    pub score: Option<u32>,
    pub error: Option<String>,
}

pub fn emit_judge_prompts(
    items: &[JudgeItem],
    template_ids: &[&str],
    templates: &TemplateSet,
) -> Result<Vec<JudgePrompt>, MetricsError> {
    let mut out = Vec::new();
    for item in items {
        for &id in template_ids {
            let (_, template) = templates
                .judges
                .get(id)
                .ok_or_else(|| MetricsError::UnknownTemplate(id.to_string()))?;
            let values: Vec<(&str, &str)> = item
                .fields
                .iter()
                .map(|(k, v)| (k.as_str(), v.as_str()))
                .collect();
            out.push(JudgePrompt {
                sample_id: item.sample_id.clone(),
                template_id: id.to_string(),
                prompt_text: template.render(&values)?,
            });
        }
    }
    Ok(out)
}

pub fn write_judge_jsonl(prompts: &[JudgePrompt], mut out: impl Write) -> Result<(), MetricsError> {
    for p in prompts {
        serde_json::to_writer(&mut out, p).map_err(|e| MetricsError::Io(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses judge replies; a reply without a valid score keeps its error.
pub fn score_replies(
    replies: &[(JudgePrompt, String)],
    templates: &TemplateSet,
) -> Result<Vec<JudgeScore>, MetricsError> {
    replies
        .iter()
        .map(|(prompt, reply)| {
            let (scale, _) = templates
                .judges
                .get(&prompt.template_id)
                .ok_or_else(|| MetricsError::UnknownTemplate(prompt.template_id.clone()))?;
            let parsed = extract_boxed_score(reply, *scale);
            Ok(JudgeScore {
                sample_id: prompt.sample_id.clone(),
                template_id: prompt.template_id.clone(),
                score: parsed.as_ref().ok().copied(),
                error: parsed.err().map(|e| e.to_string()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item() -> JudgeItem {
        let mut fields = BTreeMap::new();
        fields.insert("document".to_string(), "DOC-TEXT".to_string());
        fields.insert("summary".to_string(), "SUM-TEXT".to_string());
        JudgeItem { sample_id: "s1".into(), fields }
    }

    #[test]
    fn prompts_fill_placeholders() {
        let t = TemplateSet::default();
        let prompts = emit_judge_prompts(&[item()], &["summary_coherence", "summary_relevance"], &t).unwrap();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[0].prompt_text.contains("DOC-TEXT"));
        assert!(prompts[0].prompt_text.contains("SUM-TEXT"));
        let mut buf = Vec::new();
        write_judge_jsonl(&prompts, &mut buf).unwrap();
        let line: serde_json::Value = serde_json::from_str(String::from_utf8(buf).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(line["template_id"], "summary_coherence");
        assert!(emit_judge_prompts(&[item()], &["general_quality"], &t).is_err());
        assert!(emit_judge_prompts(&[item()], &["nope"], &t).is_err());
    }

    #[test]
    fn scores_use_template_scale() {
        let t = TemplateSet::default();
        let p = emit_judge_prompts(&[item()], &["summary_coherence"], &t).unwrap().remove(0);
        let scores = score_replies(
            &[(p.clone(), "Rating: \\boxed{4}".into()), (p, "Rating: \\boxed{8}".into())],
            &t,
        )
        .unwrap();
        assert_eq!(scores[0].score, Some(4));
        assert_eq!(scores[1].score, None);
        assert!(scores[1].error.is_some());
    }
}

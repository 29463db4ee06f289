use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::FeedbackError;
use crate::controller::LengthConstraint;
use crate::sftgen::Demonstration;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{name}`: unbalanced brace at byte {offset}")]
    UnbalancedBrace { name: String, offset: usize },
    #[error("template `{name}`: invalid placeholder `{placeholder}`")]
    InvalidPlaceholder { name: String, placeholder: String },
    #[error("template `{name}`: unknown placeholder `{{{placeholder}}}`")]
    UnknownPlaceholder { name: String, placeholder: String },
    #[error("template `{name}`: no value for `{{{placeholder}}}`")]
    MissingValue { name: String, placeholder: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(String),
}

/// Text with `{name}` placeholders; `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Template, TemplateError> {
        let mut pieces = Vec::new();
        let mut lit = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            match c {
                '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                    chars.next();
                    lit.push('{');
                }
                '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                    chars.next();
                    lit.push('}');
                }
                '{' => {
                    let rest = &source[i + 1..];
                    let close = rest.find('}').ok_or_else(|| TemplateError::UnbalancedBrace {
                        name: name.into(),
                        offset: i,
                    })?;
                    let slot = &rest[..close];
                    if slot.is_empty()
                        || !slot.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
                    {
                        return Err(TemplateError::InvalidPlaceholder {
                            name: name.into(),
                            placeholder: slot.into(),
                        });
                    }
                    if !lit.is_empty() {
                        pieces.push(Piece::Literal(std::mem::take(&mut lit)));
                    }
                    pieces.push(Piece::Slot(slot.into()));
                    for _ in 0..=slot.len() {
                        chars.next();
                    }
                }
                '}' => {
                    return Err(TemplateError::UnbalancedBrace {
                        name: name.into(),
                        offset: i,
                    })
                }
                c => lit.push(c),
            }
        }
        if !lit.is_empty() {
            pieces.push(Piece::Literal(lit));
        }
        Ok(Template {
            name: name.into(),
            pieces,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Literal(_) => None,
        })
    }

    /// Fails if the template uses a placeholder outside `allowed`.
    pub fn restrict(self, allowed: &[&str]) -> Result<Template, TemplateError> {
        if let Some(bad) = self.placeholders().find(|p| !allowed.contains(p)) {
            return Err(TemplateError::UnknownPlaceholder {
                name: self.name.clone(),
                placeholder: bad.into(),
            });
        }
        Ok(self)
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(slot) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == slot)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::MissingValue {
                            name: self.name.clone(),
                            placeholder: slot.clone(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

const SLOTS_SYSTEM: &[&str] = &[];
const SLOTS_TOOL: &[&str] = &["unit"];
const SLOTS_USER: &[&str] = &["demo", "instruction", "target", "unit"];
const SLOTS_DEMO: &[&str] = &["instruction", "target", "unit", "response"];
const SLOTS_ESTIMATE: &[&str] = &["unit", "text"];

/// Judge template id, rating scale upper bound, placeholder names.
pub const JUDGE_TEMPLATES: &[(&str, u32, &[&str])] = &[
    ("general_quality", 10, &["question", "reference", "prediction"]),
    ("summary_coherence", 5, &["document", "summary"]),
    ("summary_consistency", 5, &["document", "summary"]),
    ("summary_relevance", 5, &["document", "summary"]),
    ("biography_coherence", 5, &["person", "biography"]),
    ("biography_factuality", 5, &["person", "wikipedia_text", "biography"]),
];

fn embedded_judge(id: &str) -> &'static str {
    match id {
        "general_quality" => include_str!("../../templates/judge/general_quality.txt"),
        "summary_coherence" => include_str!("../../templates/judge/summary_coherence.txt"),
        "summary_consistency" => include_str!("../../templates/judge/summary_consistency.txt"),
        "summary_relevance" => include_str!("../../templates/judge/summary_relevance.txt"),
        "biography_coherence" => include_str!("../../templates/judge/biography_coherence.txt"),
        "biography_factuality" => include_str!("../../templates/judge/biography_factuality.txt"),
        _ => unreachable!("unknown judge template {id}"),
    }
}

/// All prompt templates the pipelines use. Defaults are embedded; a
/// directory of same-named `.txt` files overrides them one by one.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub system: Template,
    pub tool_usage: Template,
    pub user: Template,
    pub demo: Template,
    pub length_estimate: Template,
    pub judges: BTreeMap<String, (u32, Template)>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::build(|_| Ok(None)).expect("embedded templates are valid")
    }
}

impl TemplateSet {
    pub fn shared_default() -> Arc<TemplateSet> {
        static DEFAULT: OnceLock<Arc<TemplateSet>> = OnceLock::new();
        DEFAULT.get_or_init(|| Arc::new(TemplateSet::default())).clone()
    }

    fn build(
        mut source: impl FnMut(&str) -> Result<Option<String>, TemplateError>,
    ) -> Result<TemplateSet, TemplateError> {
        let mut load = |name: &str, embedded: &str, slots: &[&str]| {
            let text = source(name)?.unwrap_or_else(|| embedded.to_string());
            Template::parse(name, &text)?.restrict(slots)
        };
        let system = load("system", include_str!("../../templates/system.txt"), SLOTS_SYSTEM)?;
        let tool_usage = load(
            "tool_usage",
            include_str!("../../templates/tool_usage.txt"),
            SLOTS_TOOL,
        )?;
        let user = load("user", include_str!("../../templates/user.txt"), SLOTS_USER)?;
        let demo = load("demo", include_str!("../../templates/demo.txt"), SLOTS_DEMO)?;
        let length_estimate = load(
            "length_estimate",
            include_str!("../../templates/length_estimate.txt"),
            SLOTS_ESTIMATE,
        )?;
        let mut judges = BTreeMap::new();
        for &(id, scale, slots) in JUDGE_TEMPLATES {
            let name = format!("judge/{id}");
            judges.insert(id.to_string(), (scale, load(&name, embedded_judge(id), slots)?));
        }
        Ok(TemplateSet {
            system,
            tool_usage,
            user,
            demo,
            length_estimate,
            judges,
        })
    }

    pub fn load_dir(dir: &Path) -> Result<TemplateSet, TemplateError> {
        TemplateSet::build(|name| {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                return Ok(None);
            }
            std::fs::read_to_string(&path)
                .map(Some)
                .map_err(|e| TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Baseline,
    Icl,
    Feedback,
    IclFeedback,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::Baseline,
        PromptMode::Icl,
        PromptMode::Feedback,
        PromptMode::IclFeedback,
    ];

    pub fn uses_feedback(self) -> bool {
        matches!(self, PromptMode::Feedback | PromptMode::IclFeedback)
    }

    pub fn uses_demo(self) -> bool {
        matches!(self, PromptMode::Icl | PromptMode::IclFeedback)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Baseline => "baseline",
            PromptMode::Icl => "icl",
            PromptMode::Feedback => "feedback",
            PromptMode::IclFeedback => "icl_feedback",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| format!("unknown prompt mode `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub mode: PromptMode,
    pub constraint: LengthConstraint,
}

impl PromptBundle {
    /// Both parts joined the way single-string consumers (SFT data,
    /// raw completion) expect them.
    pub fn flattened(&self) -> String {
        if self.system_text.is_empty() {
            self.user_text.clone()
        } else {
            format!("{}\n\n{}", self.system_text, self.user_text)
        }
    }
}

impl TemplateSet {
    pub fn tool_paragraph(&self, constraint: &LengthConstraint) -> Result<String, TemplateError> {
        self.tool_usage.render(&[("unit", constraint.unit.plural())])
    }

    pub fn render_demo(&self, demo: &Demonstration) -> Result<String, TemplateError> {
        let target = demo.constraint.target.to_string();
        self.demo.render(&[
            ("instruction", &demo.question),
            ("target", &target),
            ("unit", demo.constraint.unit.plural()),
            ("response", &demo.response),
        ])
    }

    pub fn render_estimate(
        &self,
        unit: crate::units::LengthUnit,
        text: &str,
    ) -> Result<String, TemplateError> {
        self.length_estimate
            .render(&[("unit", unit.plural()), ("text", text)])
    }
}

pub fn build_prompt(
    task_instruction: &str,
    constraint: LengthConstraint,
    mode: PromptMode,
    demo: Option<&Demonstration>,
) -> Result<PromptBundle, FeedbackError> {
    build_prompt_with(&TemplateSet::shared_default(), task_instruction, constraint, mode, demo)
}

pub fn build_prompt_with(
    templates: &TemplateSet,
    task_instruction: &str,
    constraint: LengthConstraint,
    mode: PromptMode,
    demo: Option<&Demonstration>,
) -> Result<PromptBundle, FeedbackError> {
    let demo_text = match (mode.uses_demo(), demo) {
        (true, Some(d)) => templates.render_demo(d)?,
        (true, None) => return Err(FeedbackError::MissingDemo(mode)),
        (false, Some(_)) => return Err(FeedbackError::UnexpectedDemo(mode)),
        (false, None) => String::new(),
    };
    let mut system_text = templates.system.render(&[])?;
    if mode.uses_feedback() {
        let tool = templates.tool_paragraph(&constraint)?;
        if !system_text.is_empty() {
            system_text.push_str("\n\n");
        }
        system_text.push_str(&tool);
    }
    let target = constraint.target.to_string();
    let user_text = templates.user.render(&[
        ("demo", &demo_text),
        ("instruction", task_instruction),
        ("target", &target),
        ("unit", constraint.unit.plural()),
    ])?;
    Ok(PromptBundle {
        system_text,
        user_text,
        mode,
        constraint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::strip_feedback;
    use crate::units::LengthUnit;

    #[test]
    fn template_grammar() {
        let t = Template::parse("t", "a {x} {{b}} c").unwrap();
        assert_eq!(t.render(&[("x", "1")]).unwrap(), "a 1 {b} c");
        assert!(matches!(
            Template::parse("t", "a {x"),
            Err(TemplateError::UnbalancedBrace { .. })
        ));
        assert!(matches!(
            Template::parse("t", "a }"),
            Err(TemplateError::UnbalancedBrace { .. })
        ));
        assert!(matches!(
            Template::parse("t", "{Bad}"),
            Err(TemplateError::InvalidPlaceholder { .. })
        ));
        assert!(matches!(
            t.render(&[]),
            Err(TemplateError::MissingValue { .. })
        ));
        assert!(Template::parse("t", "{y}").unwrap().restrict(&["x"]).is_err());
    }

    #[test]
    fn feedback_prompt_has_tool_paragraph() {
        let c = LengthConstraint::new(LengthUnit::Token, 300);
        let b = build_prompt("Summarize the report.", c, PromptMode::Feedback, None).unwrap();
        assert!(b.system_text.contains("provided tool"));
        assert!(b.system_text.contains("<used_tokens="));
        assert!(b.user_text.contains("exactly 300 tokens"));
    }

    #[test]
    fn baseline_prompt_has_no_tool_paragraph() {
        let c = LengthConstraint::new(LengthUnit::Sentence, 10);
        let b = build_prompt("Answer the question.", c, PromptMode::Baseline, None).unwrap();
        assert!(!b.system_text.contains("provided tool"));
        assert!(!b.system_text.contains("<used_"));
        assert!(b.user_text.contains("exactly 10 sentences"));
    }

    #[test]
    fn icl_feedback_embeds_marked_demo() {
        let c = LengthConstraint::new(LengthUnit::Word, 200);
        let demo = Demonstration {
            question: "Why is the sky blue?".into(),
            response: "Light scatters.<used_words=2> Blue scatters most.<used_words=5>".into(),
            constraint: LengthConstraint::new(LengthUnit::Word, 5),
        };
        let b = build_prompt("Why do cats purr?", c, PromptMode::IclFeedback, Some(&demo)).unwrap();
        assert!(b.system_text.contains("<used_words="));
        assert_eq!(b.user_text.matches("[Example Response]").count(), 1);
        let (_, events) = strip_feedback(&b.user_text).unwrap();
        assert_eq!(events.len(), 2);
        assert!(events.iter().all(|e| e.unit == LengthUnit::Word));
    }

    #[test]
    fn demo_presence_is_checked() {
        let c = LengthConstraint::new(LengthUnit::Word, 100);
        assert_eq!(
            build_prompt("q", c, PromptMode::Icl, None),
            Err(FeedbackError::MissingDemo(PromptMode::Icl))
        );
        let demo = Demonstration {
            question: "q".into(),
            response: "r".into(),
            constraint: LengthConstraint::new(LengthUnit::Word, 1),
        };
        assert!(matches!(
            build_prompt("q", c, PromptMode::Feedback, Some(&demo)),
            Err(FeedbackError::UnexpectedDemo(_))
        ));
    }

    #[test]
    fn prompts_are_deterministic() {
        let c = LengthConstraint::new(LengthUnit::Character, 500);
        let a = build_prompt("x", c, PromptMode::Feedback, None).unwrap();
        let b = build_prompt("x", c, PromptMode::Feedback, None).unwrap();
        assert_eq!(a, b);
        assert!(a.system_text.contains("<used_characters="));
    }

    #[test]
    fn override_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("system.txt"), "Be brief.").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.system.render(&[]).unwrap(), "Be brief.");
        std::fs::write(dir.path().join("user.txt"), "{nope}").unwrap();
        assert!(TemplateSet::load_dir(dir.path()).is_err());
    }

    #[test]
    fn estimate_prompt() {
        let set = TemplateSet::default();
        let p = set.render_estimate(LengthUnit::Token, "Hello.").unwrap();
        assert!(p.contains("how many tokens are used in the text"));
        assert!(p.contains("\\boxed{}"));
        assert!(p.ends_with("Text: Hello."));
    }
}

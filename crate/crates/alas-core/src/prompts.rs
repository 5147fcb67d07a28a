//! Prompt templates and the placeholder filler. Placeholders use the
//! `{{NAME}}` form; builders refuse to return text with any unfilled
//! placeholder remaining.

use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unfilled placeholder {0} in prompt")]
    UnfilledPlaceholder(String),
}

pub const CURRICULUM_GENERATION_TEMPLATE: &str = r#"SYSTEM: You are a senior curriculum planner and research assistant.
OBJECTIVE: Produce a comprehensive, well-structured learning curriculum for the domain.
CONSTRAINTS:
- Output strictly as XML matching this schema:
  <curriculum>
    <topic>
      <name></name>
      <summary></summary>
      <prerequisites></prerequisites>
      <learning_objectives></learning_objectives>
      <difficulty>Easy|Medium|Hard</difficulty>
    </topic>
    ...
  </curriculum>
- Include at least {{MIN_TOPICS}} topics.
- Include a mix of difficulties and cover fundamentals first.
- Prefer authoritative sources; only include facts you can corroborate.

USER:
Domain: {{DOMAIN}}
Already covered topics (avoid duplication): {{ALREADY_COVERED}}
Deliver the XML only. No prose outside the <curriculum> element.
"#;

pub const CURRICULUM_REVISION_TEMPLATE: &str = r#"SYSTEM: You are a curriculum reviser optimizing for mastery and efficiency.
OBJECTIVE: Based on evaluation, revise the curriculum to remediate weak areas and
introduce advanced subtopics for mastered areas where appropriate.
CONSTRAINTS:
- Output strictly as JSON with array 'topics', where each topic conforms to:
  {
    "name": string,
    "summary": string,
    "prerequisites": string,
    "learning_objectives": string,
    "difficulty": "Easy"|"Medium"|"Hard"
  }
- Include at least {{MIN_TOPICS}} topics, prioritize {{WEAK_TOPICS}}.
- Do not repeat any of {{ALREADY_COVERED}} or {{MASTERED_TOPICS}} unless adding
  clearly marked advanced subtopics.
- Prefer topics that can yield concrete Q&A and practical exercises.

USER:
Domain: {{DOMAIN}}
Mastered topics (high accuracy): {{MASTERED_TOPICS}}
Weak topics (below threshold {{TAU}}): {{WEAK_TOPICS}}
Previously covered topics: {{ALREADY_COVERED}}
Return the JSON only, no commentary.
"#;

pub const QA_GENERATION_TEMPLATE: &str = r#"SYSTEM: You are a research assistant distilling well-sourced, current knowledge into training data.
OBJECTIVE: Produce diverse question/answer pairs for the topic below, grounded in multiple independent sources.
CONSTRAINTS:
- Output strictly as XML matching this schema:
  <qa>
    <question-1>
      <text></text>
      <answer></answer>
      <category>{{CATEGORIES}}</category>
      <difficulty>Easy|Medium|Hard</difficulty>{{RATIONALE_SCHEMA}}
      <citations>
        <url>https://...</url>
        <url>https://...</url>
      </citations>
    </question-1>
    ...
  </qa>
- Produce exactly {{N_QUESTIONS}} question elements, numbered <question-1> through <question-{{N_QUESTIONS}}>.
- Allowed categories: {{CATEGORIES}}.
- Cite multiple independent sources for every answer; prefer primary documentation.{{RATIONALE_RULE}}

USER:
Topic: {{TOPIC_NAME}}
Summary: {{TOPIC_SUMMARY}}
Learning objectives: {{TOPIC_OBJECTIVES}}
Deliver the XML only. No prose outside the <qa> element.
"#;

pub const JUDGE_TEMPLATE: &str = r#"SYSTEM: You are a strict grader. Apply the rubric in order: factual correctness first, then completeness, then clarity.
OBJECTIVE: Grade the candidate answer against the trusted reference.
CONSTRAINTS:
- One of the two answers below is the trusted reference: Answer {{REFERENCE_LABEL}}. Grade the other answer against it.
- Output strictly as JSON: {"label": "correct"|"incorrect"|"partial", "error_type": "omission"|"wrong_version"|"misinterpretation"|null, "rationale": string}
- error_type must be null when the label is correct, and set otherwise.

USER:
Question: {{QUESTION}}
Answer A: {{ANSWER_A}}
Answer B: {{ANSWER_B}}
Return the JSON only, no commentary.
"#;

/// Template names paired with their text, recorded in manifests.
pub fn all_templates() -> Vec<(&'static str, &'static str)> {
    vec![
        ("curriculum_generation", CURRICULUM_GENERATION_TEMPLATE),
        ("curriculum_revision", CURRICULUM_REVISION_TEMPLATE),
        ("qa_generation", QA_GENERATION_TEMPLATE),
        ("judge", JUDGE_TEMPLATE),
    ]
}

fn placeholder_re() -> &'static regex::Regex {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"\{\{[A-Z_]+\}\}").expect("placeholder pattern"))
}

/// Substitutes every `(key, value)` and fails if any `{{NAME}}` survives.
pub fn fill(template: &str, subs: &[(&str, String)]) -> Result<String, PromptError> {
    let mut out = template.to_string();
    for (key, value) in subs {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    if let Some(m) = placeholder_re().find(&out) {
        return Err(PromptError::UnfilledPlaceholder(m.as_str().to_string()));
    }
    Ok(out)
}

/// Renders a name list for prompt interpolation; empty lists get an explicit
/// marker so the instruction stays meaningful.
pub fn format_list(names: &[String]) -> String {
    if names.is_empty() {
        "(none)".to_string()
    } else {
        names.join(", ")
    }
}

pub fn format_tau(tau: f64) -> String {
    format!("{tau:.2}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_replaces_all_occurrences() {
        let out = fill("a {{X}} b {{X}} c {{Y}}", &[("X", "1".into()), ("Y", "2".into())]).unwrap();
        assert_eq!(out, "a 1 b 1 c 2");
    }

    #[test]
    fn fill_rejects_leftover_placeholders() {
        let err = fill("a {{X}} {{MISSING}}", &[("X", "1".into())]).unwrap_err();
        assert_eq!(err, PromptError::UnfilledPlaceholder("{{MISSING}}".into()));
    }

    #[test]
    fn empty_list_marker() {
        assert_eq!(format_list(&[]), "(none)");
        assert_eq!(format_list(&["a".into(), "b".into()]), "a, b");
    }

    #[test]
    fn tau_renders_with_two_decimals() {
        assert_eq!(format_tau(0.9), "0.90");
        assert_eq!(format_tau(0.855), "0.85");
    }
}

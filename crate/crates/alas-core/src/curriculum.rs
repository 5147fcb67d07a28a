//! Curriculum planning: build plan/revision prompts, parse provider output
//! into validated curricula, and pick next-iteration topics from evaluation
//! results.

use crate::evaluation::EvaluationReport;
use crate::markup::{self, MarkupError};
use crate::model::{
    normalize_topic_name, Curriculum, Difficulty, SessionState, Topic,
};
use crate::prompts::{self, PromptError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error(transparent)]
    Structural(#[from] MarkupError),
    #[error("topic {topic:?}: {reason}")]
    ValidationFailure { topic: String, reason: String },
    #[error("curriculum has {got} topics, need at least {need}")]
    TooFewTopics { got: usize, need: usize },
}

pub fn build_plan_prompt(
    domain: &str,
    min_topics: usize,
    covered: &[String],
) -> Result<String, PromptError> {
    prompts::fill(
        prompts::CURRICULUM_GENERATION_TEMPLATE,
        &[
            ("DOMAIN", domain.to_string()),
            ("MIN_TOPICS", min_topics.to_string()),
            ("ALREADY_COVERED", prompts::format_list(covered)),
        ],
    )
}

pub fn build_revision_prompt(
    domain: &str,
    mastered: &[String],
    weak: &[String],
    covered: &[String],
    tau: f64,
    min_topics: usize,
) -> Result<String, PromptError> {
    prompts::fill(
        prompts::CURRICULUM_REVISION_TEMPLATE,
        &[
            ("DOMAIN", domain.to_string()),
            ("MIN_TOPICS", min_topics.to_string()),
            ("MASTERED_TOPICS", prompts::format_list(mastered)),
            ("WEAK_TOPICS", prompts::format_list(weak)),
            ("ALREADY_COVERED", prompts::format_list(covered)),
            ("TAU", prompts::format_tau(tau)),
        ],
    )
}

fn topic_from_fields(
    name: Option<String>,
    summary: Option<String>,
    prerequisites: Option<String>,
    learning_objectives: Option<String>,
    difficulty: Option<String>,
) -> Result<Topic, CurriculumError> {
    let label = name.clone().unwrap_or_else(|| "(unnamed)".into());
    let missing = |field: &str| CurriculumError::ValidationFailure {
        topic: label.clone(),
        reason: format!("missing field {field:?}"),
    };
    let name = name.ok_or_else(|| missing("name"))?;
    if name.trim().is_empty() {
        return Err(CurriculumError::ValidationFailure {
            topic: label,
            reason: "empty name".into(),
        });
    }
    let difficulty_text = difficulty.ok_or_else(|| missing("difficulty"))?;
    let difficulty = Difficulty::parse(&difficulty_text).ok_or_else(|| {
        CurriculumError::ValidationFailure {
            topic: name.clone(),
            reason: format!("difficulty {difficulty_text:?} is not one of Easy|Medium|Hard"),
        }
    })?;
    Ok(Topic {
        name,
        summary: summary.ok_or_else(|| missing("summary"))?,
        prerequisites: prerequisites.ok_or_else(|| missing("prerequisites"))?,
        learning_objectives: learning_objectives.ok_or_else(|| missing("learning_objectives"))?,
        difficulty,
    })
}

fn finish_curriculum(
    topics: Vec<Topic>,
    domain_slug: &str,
    iteration: u32,
    min_topics: usize,
) -> Result<Curriculum, CurriculumError> {
    let curriculum = Curriculum {
        domain_slug: domain_slug.to_string(),
        iteration,
        topics,
    };
    curriculum.validate().map_err(|e| CurriculumError::ValidationFailure {
        topic: String::new(),
        reason: e.to_string(),
    })?;
    if curriculum.topics.len() < min_topics {
        return Err(CurriculumError::TooFewTopics {
            got: curriculum.topics.len(),
            need: min_topics,
        });
    }
    Ok(curriculum)
}

/// Parses planner markup, applying the same structural fix-up pass used for
/// Q&A output before validating fields.
pub fn parse_curriculum(
    raw: &str,
    domain_slug: &str,
    iteration: u32,
    min_topics: usize,
) -> Result<Curriculum, CurriculumError> {
    let repaired = markup::repair_markup(raw)?;
    let tree = markup::parse_tree(&repaired)?;
    let root = tree.find("curriculum").ok_or(MarkupError::NotWellFormed(
        "no <curriculum> element".into(),
    ))?;
    let mut topic_els = Vec::new();
    root.find_all("topic", &mut topic_els);
    let mut topics = Vec::with_capacity(topic_els.len());
    for el in topic_els {
        topics.push(topic_from_fields(
            el.child_text("name"),
            el.child_text("summary"),
            el.child_text("prerequisites"),
            el.child_text("learning_objectives"),
            el.child_text("difficulty"),
        )?);
    }
    finish_curriculum(topics, domain_slug, iteration, min_topics)
}

#[derive(Deserialize)]
struct RevisionTopic {
    name: Option<String>,
    summary: Option<String>,
    prerequisites: Option<String>,
    learning_objectives: Option<String>,
    difficulty: Option<String>,
}

/// Pulls the JSON body out of possibly fence-wrapped text with prose around
/// it, mirroring the structural pass for markup.
fn extract_json(raw: &str) -> Result<serde_json::Value, CurriculumError> {
    if let Ok(v) = serde_json::from_str(raw.trim()) {
        return Ok(v);
    }
    let start = raw
        .find(['{', '['])
        .ok_or(MarkupError::StructuralFailure("no JSON content".into()))?;
    let open = raw.as_bytes()[start];
    let close = if open == b'{' { '}' } else { ']' };
    let end = raw
        .rfind(close)
        .ok_or(MarkupError::StructuralFailure("unterminated JSON".into()))?;
    if end < start {
        return Err(MarkupError::StructuralFailure("unterminated JSON".into()).into());
    }
    serde_json::from_str(&raw[start..=end])
        .map_err(|e| MarkupError::StructuralFailure(format!("invalid JSON: {e}")).into())
}

pub fn parse_revision(
    raw: &str,
    domain_slug: &str,
    iteration: u32,
    min_topics: usize,
) -> Result<Curriculum, CurriculumError> {
    let value = extract_json(raw)?;
    let array = match &value {
        serde_json::Value::Array(a) => a.clone(),
        serde_json::Value::Object(o) => match o.get("topics") {
            Some(serde_json::Value::Array(a)) => a.clone(),
            _ => {
                return Err(MarkupError::StructuralFailure(
                    "expected an array under 'topics'".into(),
                )
                .into())
            }
        },
        _ => {
            return Err(MarkupError::StructuralFailure("expected a JSON object or array".into()).into())
        }
    };
    let mut topics = Vec::with_capacity(array.len());
    for record in array {
        let rt: RevisionTopic = serde_json::from_value(record).map_err(|e| {
            CurriculumError::ValidationFailure {
                topic: String::new(),
                reason: format!("malformed topic record: {e}"),
            }
        })?;
        topics.push(topic_from_fields(
            rt.name,
            rt.summary,
            rt.prerequisites,
            rt.learning_objectives,
            rt.difficulty,
        )?);
    }
    finish_curriculum(topics, domain_slug, iteration, min_topics)
}

/// Writes a curriculum back out in the planner's markup schema.
pub fn serialize_curriculum(c: &Curriculum) -> String {
    let mut out = String::from("<curriculum>\n");
    for t in &c.topics {
        out.push_str("  <topic>\n");
        out.push_str(&format!("    <name>{}</name>\n", markup::xml_escape(&t.name)));
        out.push_str(&format!("    <summary>{}</summary>\n", markup::xml_escape(&t.summary)));
        out.push_str(&format!(
            "    <prerequisites>{}</prerequisites>\n",
            markup::xml_escape(&t.prerequisites)
        ));
        out.push_str(&format!(
            "    <learning_objectives>{}</learning_objectives>\n",
            markup::xml_escape(&t.learning_objectives)
        ));
        out.push_str(&format!("    <difficulty>{}</difficulty>\n", t.difficulty.as_str()));
        out.push_str("  </topic>\n");
    }
    out.push_str("</curriculum>\n");
    out
}

/// Next-iteration plan split by intent. Lists are disjoint; fresh topics
/// never duplicate session history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopicPlan {
    pub remediation: Vec<Topic>,
    pub advanced: Vec<Topic>,
    pub fresh: Vec<Topic>,
}

impl TopicPlan {
    pub fn is_empty(&self) -> bool {
        self.remediation.is_empty() && self.advanced.is_empty() && self.fresh.is_empty()
    }

    pub fn all_topics(&self) -> Vec<Topic> {
        self.remediation
            .iter()
            .chain(&self.advanced)
            .chain(&self.fresh)
            .cloned()
            .collect()
    }
}

fn synthesized_remediation_topic(name: &str) -> Topic {
    Topic {
        name: name.to_string(),
        summary: format!("Remediation of {name}."),
        prerequisites: String::new(),
        learning_objectives: format!("Close the accuracy gap on {name}."),
        difficulty: Difficulty::Medium,
    }
}

/// Splits provider proposals into remediation, advanced and fresh topics.
///
/// Weak topics (accuracy below tau) plus any queued remediation come first,
/// ordered by ascending accuracy then name. A proposal whose normalized name
/// extends a mastered topic's name by a word counts as an advanced subtopic,
/// capped at `advanced_cap`. Remaining proposals are fresh unless the session
/// history already covers them.
pub fn select_next_topics(
    report: &EvaluationReport,
    state: &SessionState,
    tau: f64,
    proposals: &Curriculum,
    advanced_cap: usize,
) -> TopicPlan {
    let mut mastered: BTreeSet<String> = BTreeSet::new();
    for (name, acc) in &report.per_topic {
        if *acc >= tau {
            mastered.insert(normalize_topic_name(name));
        }
    }
    for lt in &state.learned_topics {
        if lt.accuracy >= tau {
            mastered.insert(normalize_topic_name(&lt.name));
        }
    }
    let covered: BTreeSet<String> = state
        .learned_topics
        .iter()
        .map(|lt| normalize_topic_name(&lt.name))
        .collect();

    let mut weak: Vec<(String, f64)> = report
        .per_topic
        .iter()
        .filter(|(_, acc)| **acc < tau)
        .map(|(n, a)| (n.clone(), *a))
        .collect();
    for queued in &state.remediation_queue {
        let norm = normalize_topic_name(queued);
        if weak.iter().any(|(n, _)| normalize_topic_name(n) == norm) {
            continue;
        }
        let acc = state
            .learned_topics
            .iter()
            .find(|lt| normalize_topic_name(&lt.name) == norm)
            .map(|lt| lt.accuracy)
            .unwrap_or(0.0);
        if acc < tau {
            weak.push((queued.clone(), acc));
        }
    }
    weak.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));

    let proposal_for = |name_norm: &str| -> Option<&Topic> {
        proposals
            .topics
            .iter()
            .find(|t| normalize_topic_name(&t.name) == name_norm)
    };

    let mut plan = TopicPlan::default();
    let mut taken: BTreeSet<String> = BTreeSet::new();
    for (name, _) in &weak {
        let norm = normalize_topic_name(name);
        if !taken.insert(norm.clone()) {
            continue;
        }
        plan.remediation.push(
            proposal_for(&norm)
                .cloned()
                .unwrap_or_else(|| synthesized_remediation_topic(name)),
        );
    }

    let extends_mastered = |norm: &str| {
        mastered.iter().any(|m| {
            norm.len() > m.len() && norm.starts_with(m.as_str()) && norm.as_bytes()[m.len()] == b' '
        })
    };

    for t in &proposals.topics {
        let norm = normalize_topic_name(&t.name);
        if taken.contains(&norm) {
            continue;
        }
        if extends_mastered(&norm) {
            let already_taught = covered.contains(&norm) || mastered.contains(&norm);
            if !already_taught && plan.advanced.len() < advanced_cap {
                taken.insert(norm);
                plan.advanced.push(t.clone());
            }
            continue;
        }
        if covered.contains(&norm) || mastered.contains(&norm) {
            continue;
        }
        taken.insert(norm);
        plan.fresh.push(t.clone());
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::EvaluationReport;
    use crate::model::{LearnedTopic, ModelRef, SessionStatus, Spend, SCHEMA_VERSION};
    use std::collections::BTreeMap;

    fn topic(name: &str) -> Topic {
        Topic {
            name: name.into(),
            summary: format!("About {name}."),
            prerequisites: "None".into(),
            learning_objectives: format!("Understand {name}."),
            difficulty: Difficulty::Medium,
        }
    }

    fn curriculum(names: &[&str]) -> Curriculum {
        Curriculum {
            domain_slug: "python_releases".into(),
            iteration: 1,
            topics: names.iter().map(|n| topic(n)).collect(),
        }
    }

    fn report(per_topic: &[(&str, f64)]) -> EvaluationReport {
        let judged = per_topic.len().max(1);
        EvaluationReport {
            overall_accuracy: per_topic.iter().map(|(_, a)| a).sum::<f64>() / judged as f64,
            per_topic: per_topic.iter().map(|(n, a)| (n.to_string(), *a)).collect(),
            per_category: BTreeMap::new(),
            confusion: BTreeMap::new(),
            judgments: vec![],
            model: ModelRef::base("sim:base"),
            probe_hash: "0".repeat(64),
        }
    }

    fn state(learned: &[(&str, f64)]) -> SessionState {
        SessionState {
            schema_version: SCHEMA_VERSION,
            session_id: "s".into(),
            domain: "Python Releases".into(),
            domain_slug: "python_releases".into(),
            status: SessionStatus::Running,
            iteration_index: 0,
            current_curriculum_file: None,
            current_training_data_file: None,
            current_sft_model_id: None,
            current_dpo_model_id: None,
            current_model: ModelRef::base("sim:base"),
            iterations: vec![],
            learned_topics: learned
                .iter()
                .map(|(n, a)| LearnedTopic { name: n.to_string(), accuracy: *a })
                .collect(),
            accuracy_history: vec![],
            remediation_queue: vec![],
            topic_quotas: Default::default(),
            spend: Spend::default(),
            seed: 7,
            created_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn plan_prompt_contains_min_topics_clause() {
        let p = build_plan_prompt("Python releases", 10, &[]).unwrap();
        assert!(p.contains("Include at least 10 topics"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn plan_prompt_empty_covered_gets_marker() {
        let p = build_plan_prompt("Python releases", 10, &[]).unwrap();
        assert!(p.contains("Already covered topics (avoid duplication): (none)"));
    }

    #[test]
    fn plan_prompt_lists_covered_names_verbatim() {
        let covered = vec!["pattern matching".to_string(), "GIL".to_string()];
        let p = build_plan_prompt("Python releases", 10, &covered).unwrap();
        assert!(p.contains("pattern matching"));
        assert!(p.contains("GIL"));
    }

    #[test]
    fn revision_prompt_prioritizes_weak_topics() {
        let p = build_revision_prompt(
            "Python releases",
            &[],
            &["GIL changes".into()],
            &[],
            0.90,
            10,
        )
        .unwrap();
        let prioritize = p.find("prioritize").expect("prioritize clause");
        let weak = p.find("GIL changes").expect("weak topic");
        assert!(weak > prioritize);
        assert!(p.contains("below threshold 0.90"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn revision_prompt_accepts_all_empty_lists() {
        let p = build_revision_prompt("d", &[], &[], &[], 0.9, 5).unwrap();
        assert!(p.contains("Mastered topics (high accuracy): (none)"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn parse_curriculum_happy_path() {
        let c = curriculum(&["t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9", "t10"]);
        let parsed = parse_curriculum(&serialize_curriculum(&c), "python_releases", 1, 10).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn parse_curriculum_survives_stray_ampersand() {
        let raw = "<curriculum><topic><name>AT&T history</name><summary>s & t</summary><prerequisites></prerequisites><learning_objectives>o</learning_objectives><difficulty>Easy</difficulty></topic></curriculum>";
        let parsed = parse_curriculum(raw, "d", 1, 1).unwrap();
        assert_eq!(parsed.topics[0].name, "AT&T history");
        assert_eq!(parsed.topics[0].summary, "s & t");
    }

    #[test]
    fn parse_curriculum_rejects_unknown_difficulty() {
        let raw = "<curriculum><topic><name>weird one</name><summary>s</summary><prerequisites></prerequisites><learning_objectives>o</learning_objectives><difficulty>Extreme</difficulty></topic></curriculum>";
        match parse_curriculum(raw, "d", 1, 1) {
            Err(CurriculumError::ValidationFailure { topic, reason }) => {
                assert_eq!(topic, "weird one");
                assert!(reason.contains("Extreme"));
            }
            other => panic!("expected ValidationFailure, got {other:?}"),
        }
    }

    #[test]
    fn parse_curriculum_enforces_min_topics() {
        let c = curriculum(&["only one"]);
        match parse_curriculum(&serialize_curriculum(&c), "d", 1, 10) {
            Err(CurriculumError::TooFewTopics { got: 1, need: 10 }) => {}
            other => panic!("expected TooFewTopics, got {other:?}"),
        }
    }

    #[test]
    fn parse_revision_happy_path() {
        let json = serde_json::json!({
            "topics": (1..=10).map(|i| serde_json::json!({
                "name": format!("topic {i}"),
                "summary": "s",
                "prerequisites": "",
                "learning_objectives": "o",
                "difficulty": "Medium"
            })).collect::<Vec<_>>()
        });
        let parsed = parse_revision(&json.to_string(), "d", 2, 10).unwrap();
        assert_eq!(parsed.topics.len(), 10);
        assert_eq!(parsed.iteration, 2);
    }

    #[test]
    fn parse_revision_rejects_missing_summary() {
        let json = r#"{"topics": [{"name": "x", "prerequisites": "", "learning_objectives": "o", "difficulty": "Easy"}]}"#;
        match parse_revision(json, "d", 2, 1) {
            Err(CurriculumError::ValidationFailure { reason, .. }) => {
                assert!(reason.contains("summary"), "reason: {reason}");
            }
            other => panic!("expected ValidationFailure, got {other:?}"),
        }
    }

    #[test]
    fn parse_revision_strips_trailing_prose_and_fences() {
        let json = r#"```json
{"topics": [{"name": "x", "summary": "s", "prerequisites": "", "learning_objectives": "o", "difficulty": "Easy"}]}
```
Let me know if you'd like adjustments."#;
        let parsed = parse_revision(json, "d", 2, 1).unwrap();
        assert_eq!(parsed.topics[0].name, "x");
    }

    #[test]
    fn select_remediation_empty_when_all_mastered() {
        let r = report(&[("a", 0.95), ("b", 0.92)]);
        let plan = select_next_topics(&r, &state(&[]), 0.90, &curriculum(&[]), 2);
        assert!(plan.remediation.is_empty());
    }

    #[test]
    fn select_puts_weak_topic_into_remediation() {
        let r = report(&[("a", 0.50), ("b", 0.95)]);
        let plan = select_next_topics(&r, &state(&[]), 0.90, &curriculum(&[]), 2);
        assert_eq!(plan.remediation.len(), 1);
        assert_eq!(plan.remediation[0].name, "a");
    }

    #[test]
    fn select_orders_remediation_by_ascending_accuracy() {
        let r = report(&[("worse", 0.10), ("bad", 0.40), ("ok", 0.95)]);
        let plan = select_next_topics(&r, &state(&[]), 0.90, &curriculum(&[]), 2);
        let names: Vec<_> = plan.remediation.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, vec!["worse", "bad"]);
    }

    #[test]
    fn select_excludes_history_from_fresh() {
        let r = report(&[]);
        let s = state(&[("pattern matching", 0.30)]);
        let plan = select_next_topics(&r, &s, 0.90, &curriculum(&["Pattern Matching", "novel thing"]), 2);
        let fresh: Vec<_> = plan.fresh.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(fresh, vec!["novel thing"]);
    }

    #[test]
    fn select_tags_advanced_subtopics_of_mastered() {
        let r = report(&[("pattern matching", 0.95)]);
        let plan = select_next_topics(
            &r,
            &state(&[("pattern matching", 0.95)]),
            0.90,
            &curriculum(&["pattern matching advanced", "other"]),
            2,
        );
        let advanced: Vec<_> = plan.advanced.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(advanced, vec!["pattern matching advanced"]);
        let fresh: Vec<_> = plan.fresh.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(fresh, vec!["other"]);
    }

    #[test]
    fn select_respects_advanced_cap() {
        let r = report(&[("base topic", 0.95)]);
        let plan = select_next_topics(
            &r,
            &state(&[("base topic", 0.95)]),
            0.90,
            &curriculum(&["base topic deep dive", "base topic internals"]),
            1,
        );
        assert_eq!(plan.advanced.len(), 1);
    }

    #[test]
    fn select_lists_are_pairwise_disjoint() {
        let r = report(&[("w", 0.10), ("m", 0.99)]);
        let s = state(&[("old", 0.95)]);
        let proposals = curriculum(&["w", "m advanced", "fresh one", "old", "fresh two"]);
        let plan = select_next_topics(&r, &s, 0.90, &proposals, 5);
        let mut all: Vec<String> = plan
            .all_topics()
            .iter()
            .map(|t| normalize_topic_name(&t.name))
            .collect();
        let before = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), before);
        for f in &plan.fresh {
            assert!(!s
                .learned_topics
                .iter()
                .any(|lt| normalize_topic_name(&lt.name) == normalize_topic_name(&f.name)));
        }
    }

    #[test]
    fn select_pulls_queued_remediation_from_state() {
        let r = report(&[]);
        let mut s = state(&[("shaky", 0.40)]);
        s.remediation_queue = vec!["shaky".into()];
        let plan = select_next_topics(&r, &s, 0.90, &curriculum(&[]), 2);
        assert_eq!(plan.remediation.len(), 1);
        assert_eq!(plan.remediation[0].name, "shaky");
    }

    #[test]
    fn empty_plan_is_legal() {
        let r = report(&[("a", 0.95)]);
        let s = state(&[("a", 0.95)]);
        let plan = select_next_topics(&r, &s, 0.90, &curriculum(&["a"]), 0);
        assert!(plan.is_empty());
    }

    #[test]
    fn curriculum_round_trips_through_markup() {
        let c = Curriculum {
            domain_slug: "d".into(),
            iteration: 3,
            topics: vec![Topic {
                name: "escaping & entities".into(),
                summary: "covers < and > plus &".into(),
                prerequisites: "none".into(),
                learning_objectives: "write \"safe\" markup".into(),
                difficulty: Difficulty::Hard,
            }],
        };
        let parsed = parse_curriculum(&serialize_curriculum(&c), "d", 3, 1).unwrap();
        assert_eq!(parsed, c);
    }
}

//! Cited Q&A generation: one research call per topic, tolerant parsing with
//! per-item rejection, and a simplified-prompt retry ladder for topics whose
//! output cannot be salvaged.

use crate::clock::Clock;
use crate::concurrency::map_capped;
use crate::markup::{self, MarkupError};
use crate::model::{citation_is_sane, derive_seed, Category, Difficulty, QAItem, Topic, ALL_CATEGORIES};
use crate::prompts::{self, PromptError};
use crate::provider::{ChatRequest, Provider, ProviderError, Purpose};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    MissingField { field: String },
    EmptyField { field: String },
    BadCategory { value: String },
    BadDifficulty { value: String },
    BadCitation { url: String },
    NoCitations,
}

/// Accepted items plus, for each discarded question element, its element
/// name and why it was dropped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub items: Vec<QAItem>,
    pub rejects: Vec<(String, RejectReason)>,
}

fn category_alternatives() -> String {
    ALL_CATEGORIES.iter().map(|c| c.as_str()).collect::<Vec<_>>().join("|")
}

/// Research prompt for one topic. `with_rationale` adds the rationale slot
/// and rule; the simplified retry drops it.
pub fn build_qa_prompt(
    topic: &Topic,
    n_questions: usize,
    with_rationale: bool,
) -> Result<String, PromptError> {
    let (rationale_schema, rationale_rule) = if with_rationale {
        (
            "\n      <rationale></rationale>".to_string(),
            "\n- Include a short rationale for every answer explaining why it is correct.".to_string(),
        )
    } else {
        (String::new(), String::new())
    };
    prompts::fill(
        prompts::QA_GENERATION_TEMPLATE,
        &[
            ("CATEGORIES", category_alternatives()),
            ("RATIONALE_SCHEMA", rationale_schema),
            ("RATIONALE_RULE", rationale_rule),
            ("N_QUESTIONS", n_questions.to_string()),
            ("TOPIC_NAME", topic.name.clone()),
            ("TOPIC_SUMMARY", topic.summary.clone()),
            ("TOPIC_OBJECTIVES", topic.learning_objectives.clone()),
        ],
    )
}

fn parse_question_element(
    el: &markup::Element,
    topic_name: &str,
    retrieved_at: &str,
) -> Result<QAItem, RejectReason> {
    let field = |name: &str| -> Result<String, RejectReason> {
        let value = el
            .child_text(name)
            .ok_or_else(|| RejectReason::MissingField { field: name.to_string() })?;
        if value.is_empty() {
            return Err(RejectReason::EmptyField { field: name.to_string() });
        }
        Ok(value)
    };
    let question = field("text")?;
    let answer = field("answer")?;
    let category_text = field("category")?;
    let category = Category::parse(&category_text)
        .ok_or(RejectReason::BadCategory { value: category_text })?;
    let difficulty_text = field("difficulty")?;
    let difficulty = Difficulty::parse(&difficulty_text)
        .ok_or(RejectReason::BadDifficulty { value: difficulty_text })?;
    let rationale = el.child_text("rationale").filter(|r| !r.is_empty());
    let citations_el = el
        .children_elements()
        .find(|c| c.name == "citations")
        .ok_or_else(|| RejectReason::MissingField { field: "citations".into() })?;
    let mut citations = Vec::new();
    for url_el in citations_el.children_elements().filter(|c| c.name == "url") {
        let url = url_el.text();
        if !citation_is_sane(&url) {
            return Err(RejectReason::BadCitation { url });
        }
        citations.push(url);
    }
    if citations.is_empty() {
        return Err(RejectReason::NoCitations);
    }
    Ok(QAItem {
        question,
        answer,
        category,
        difficulty,
        rationale,
        citations,
        topic_name: topic_name.to_string(),
        retrieved_at: retrieved_at.to_string(),
    })
}

/// Parses research output. Structural failure of the whole payload is an
/// error; individually broken question elements are skipped and reported.
pub fn parse_qa(
    raw: &str,
    topic_name: &str,
    retrieved_at: &str,
) -> Result<ParseOutcome, MarkupError> {
    let repaired = markup::repair_markup(raw)?;
    let tree = markup::parse_tree(&repaired)?;
    let root = tree
        .find("qa")
        .ok_or(MarkupError::NotWellFormed("no <qa> element".into()))?;
    let mut outcome = ParseOutcome::default();
    for el in root.children_elements() {
        if !el.name.starts_with("question") {
            continue;
        }
        match parse_question_element(el, topic_name, retrieved_at) {
            Ok(item) => outcome.items.push(item),
            Err(reason) => outcome.rejects.push((el.name.clone(), reason)),
        }
    }
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct SynthesisOptions {
    pub questions_per_topic: usize,
    pub concurrency: usize,
    /// Extra attempts after the first, each with a simplified prompt.
    pub max_retries: u32,
    pub with_rationale: bool,
    pub max_output_tokens: u32,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            questions_per_topic: 10,
            concurrency: 50,
            max_retries: 2,
            with_rationale: true,
            max_output_tokens: 4096,
        }
    }
}

/// What one topic produced, including how hard we had to try.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopicYield {
    pub topic_name: String,
    pub items: Vec<QAItem>,
    pub rejects: Vec<(String, RejectReason)>,
    pub attempts: u32,
    /// Parse failures per attempt, in order.
    pub failures: Vec<String>,
}

/// Research for a single topic. Each retry halves the requested question
/// count (never below one) and drops the rationale ask, trading richness for
/// parseability.
pub fn generate_for_topic(
    provider: &dyn Provider,
    model: &str,
    topic: &Topic,
    seed: u64,
    clock: &dyn Clock,
    options: &SynthesisOptions,
) -> Result<TopicYield, SynthesisError> {
    let mut result = TopicYield { topic_name: topic.name.clone(), ..TopicYield::default() };
    let total_attempts = 1 + options.max_retries;
    for attempt in 0..total_attempts {
        let n = (options.questions_per_topic >> attempt).max(1);
        let with_rationale = options.with_rationale && attempt == 0;
        let prompt = build_qa_prompt(topic, n, with_rationale)?;
        let response = provider.chat(&ChatRequest {
            purpose: Purpose::Research,
            model: model.to_string(),
            system: None,
            user: prompt,
            seed: derive_seed(seed, &format!("research:{}:{attempt}", topic.name)),
            max_output_tokens: options.max_output_tokens,
        })?;
        result.attempts = attempt + 1;
        match parse_qa(&response.text, &topic.name, &clock.now_iso()) {
            Ok(outcome) if !outcome.items.is_empty() => {
                result.items = outcome.items;
                result.rejects = outcome.rejects;
                return Ok(result);
            }
            Ok(outcome) => {
                result.rejects = outcome.rejects;
                result.failures.push("no usable question elements".into());
            }
            Err(e) => result.failures.push(e.to_string()),
        }
    }
    Ok(result)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub per_topic: Vec<TopicYield>,
}

impl GenerationOutcome {
    /// All accepted items in topic order.
    pub fn items(&self) -> Vec<QAItem> {
        self.per_topic.iter().flat_map(|y| y.items.iter().cloned()).collect()
    }

    pub fn topics_without_items(&self) -> Vec<&str> {
        self.per_topic
            .iter()
            .filter(|y| y.items.is_empty())
            .map(|y| y.topic_name.as_str())
            .collect()
    }
}

/// Runs research for every topic with at most `options.concurrency` calls in
/// flight. Yields stay in topic order.
pub fn generate_for_topics(
    provider: &dyn Provider,
    model: &str,
    topics: &[Topic],
    seed: u64,
    clock: &dyn Clock,
    options: &SynthesisOptions,
) -> Result<GenerationOutcome, SynthesisError> {
    if topics.is_empty() {
        return Ok(GenerationOutcome::default());
    }
    let results = map_capped(topics, options.concurrency, |_, topic| {
        generate_for_topic(provider, model, topic, seed, clock, options)
    });
    let mut per_topic = Vec::with_capacity(results.len());
    for r in results {
        per_topic.push(r?);
    }
    Ok(GenerationOutcome { per_topic })
}

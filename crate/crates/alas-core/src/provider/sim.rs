//! Deterministic provider double over a synthetic fact universe.
//!
//! A [`SimWorld`] holds facts (question, reference answer, topic, category)
//! and a knowledge set per model id. Fine-tuning on a dataset teaches the
//! result model exactly the facts whose reference answers appear verbatim in
//! that dataset, so the training loop's effect on accuracy is checkable by
//! set arithmetic. Chat traffic is dispatched on [`Purpose`]: planning and
//! revision propose uncovered world topics, research emits markup built from
//! the topic's facts (optionally damaged for parser exercises), answering
//! returns the reference for known facts and a seeded wrong answer
//! otherwise, and judging applies a fixed rule table.

use crate::curriculum::serialize_curriculum;
use crate::markup::{inject_fault, ALL_FAULTS};
use crate::model::{
    derive_seed, normalize_topic_name, slugify, Category, Curriculum, Difficulty, Topic,
};
use crate::provider::{
    ChatRequest, ChatResponse, FineTuneRequest, JobKind, JobState, JobStatus, Provider,
    ProviderError, Purpose, Usage,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("unknown question {0:?}")]
    UnknownQuestion(String),
}

impl From<SimError> for ProviderError {
    fn from(e: SimError) -> ProviderError {
        ProviderError::Rejected { status: 404, message: e.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimFact {
    pub question: String,
    pub reference_answer: String,
    pub topic: String,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub domain: String,
    pub noise_seed: u64,
    /// fact_id → fact, iterated in id order everywhere.
    pub facts: BTreeMap<String, SimFact>,
    /// model id → fact_ids the model answers correctly.
    pub model_knowledge: BTreeMap<String, BTreeSet<String>>,
}

const DISTRACTOR_ANSWER: &str =
    "That behavior was removed and the current documentation no longer describes it.";

fn domain_slug(domain: &str) -> String {
    slugify(domain).unwrap_or_else(|_| "domain".to_string())
}

impl SimWorld {
    /// A regular world: `topics × facts_per_topic` facts, ids `f000` upward,
    /// one empty-knowledge base model named `sim:base`, categories cycling
    /// through the full vocabulary and a `t.f` version token in every
    /// reference answer.
    pub fn grid(domain: &str, topics: usize, facts_per_topic: usize, noise_seed: u64) -> SimWorld {
        let slug = domain_slug(domain);
        let mut facts = BTreeMap::new();
        for t in 0..topics {
            for f in 0..facts_per_topic {
                let i = t * facts_per_topic + f;
                let flag = format!("{slug}-{t}-{f}");
                // Question phrasing rotates so sibling facts stay textually
                // distinct under shingle-based dedup, as real corpora would.
                let question = match f % 4 {
                    0 => format!(
                        "What is the headline change of the {flag} rollout in {domain} area {t:02} release {t}.{f}?"
                    ),
                    1 => format!(
                        "Which setting reaches stable in {domain} area {t:02} once release {t}.{f} finishes the {flag} work?"
                    ),
                    2 => format!(
                        "After {domain} area {t:02} ships release {t}.{f}, how does the {flag} behavior change by default?"
                    ),
                    _ => format!(
                        "Release notes for {domain} area {t:02} version {t}.{f} mention {flag}: what actually changed?"
                    ),
                };
                facts.insert(
                    format!("f{i:03}"),
                    SimFact {
                        question,
                        reference_answer: format!(
                            "Release {t}.{f} promotes the {flag} flag to stable."
                        ),
                        topic: format!("area {t:02}"),
                        category: crate::model::ALL_CATEGORIES[i % crate::model::ALL_CATEGORIES.len()],
                    },
                );
            }
        }
        let mut model_knowledge = BTreeMap::new();
        model_knowledge.insert("sim:base".to_string(), BTreeSet::new());
        SimWorld { domain: domain.to_string(), noise_seed, facts, model_knowledge }
    }

    pub fn from_json(raw: &str) -> Result<SimWorld, serde_json::Error> {
        serde_json::from_str(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn fact_ids(&self) -> Vec<String> {
        self.facts.keys().cloned().collect()
    }

    /// Topic names in order of first appearance over id-sorted facts.
    pub fn topics(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for fact in self.facts.values() {
            if seen.insert(normalize_topic_name(&fact.topic)) {
                out.push(fact.topic.clone());
            }
        }
        out
    }

    pub fn facts_of_topic(&self, topic: &str) -> Vec<(&String, &SimFact)> {
        let wanted = normalize_topic_name(topic);
        self.facts
            .iter()
            .filter(|(_, f)| normalize_topic_name(&f.topic) == wanted)
            .collect()
    }

    /// Facts for a topic, treating "X advanced" extensions as revisits of X:
    /// the world holds nothing deeper, so enrichment passes re-serve the base
    /// topic's material instead of refusing planner-invented follow-ons.
    pub fn facts_of_topic_or_base(&self, topic: &str) -> Vec<(&String, &SimFact)> {
        let mut name = topic.trim();
        loop {
            let facts = self.facts_of_topic(name);
            if !facts.is_empty() {
                return facts;
            }
            match name.strip_suffix(" advanced") {
                Some(base) => name = base.trim_end(),
                None => return Vec::new(),
            }
        }
    }

    pub fn fact_by_question(&self, question: &str) -> Option<(&String, &SimFact)> {
        self.facts.iter().find(|(_, f)| f.question == question)
    }

    pub fn grant(&mut self, model: &str, fact_ids: impl IntoIterator<Item = String>) {
        self.model_knowledge.entry(model.to_string()).or_default().extend(fact_ids);
    }

    pub fn knows(&self, model: &str, fact_id: &str) -> bool {
        self.model_knowledge.get(model).is_some_and(|k| k.contains(fact_id))
    }

    /// Fraction of all facts the model answers correctly.
    pub fn accuracy(&self, model: &str) -> f64 {
        if self.facts.is_empty() {
            return 0.0;
        }
        let known = self
            .facts
            .keys()
            .filter(|id| self.knows(model, id))
            .count();
        known as f64 / self.facts.len() as f64
    }

    /// Fact ids whose reference answers occur verbatim in the dataset text.
    pub fn learned_from_dataset(&self, dataset: &str) -> BTreeSet<String> {
        self.facts
            .iter()
            .filter(|(_, f)| dataset.contains(&f.reference_answer))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Pure fine-tune step: returns a new world in which `new_model` knows
    /// everything `base` knew plus the dataset's facts.
    pub fn fine_tune(
        &self,
        base: &str,
        new_model: &str,
        dataset: &str,
    ) -> Result<SimWorld, SimError> {
        let inherited = self
            .model_knowledge
            .get(base)
            .ok_or_else(|| SimError::UnknownModel(base.to_string()))?
            .clone();
        let mut next = self.clone();
        let mut knowledge = inherited;
        knowledge.extend(self.learned_from_dataset(dataset));
        next.model_knowledge.insert(new_model.to_string(), knowledge);
        Ok(next)
    }

    /// Stable wrong answer for an unknown fact: empty, version-bumped or a
    /// fixed distractor, chosen by hashing (noise_seed, fact_id).
    /// Seeded error mode for a model that does not know a fact. Keyed by
    /// model id as well as fact so successive fine-tunes err differently,
    /// and weighted so omissions (which yield no usable DPO negative) are
    /// rare rather than a third of all mistakes.
    pub fn wrong_answer(&self, model: &str, fact_id: &str) -> String {
        let fact = &self.facts[fact_id];
        match derive_seed(self.noise_seed, &format!("{model}|{fact_id}")) % 16 {
            0 => String::new(),
            1..=8 => bump_version(&fact.reference_answer)
                .unwrap_or_else(|| DISTRACTOR_ANSWER.to_string()),
            _ => DISTRACTOR_ANSWER.to_string(),
        }
    }

    pub fn answer(&self, model: &str, question: &str) -> Result<String, SimError> {
        let (fact_id, fact) = self
            .fact_by_question(question)
            .ok_or_else(|| SimError::UnknownQuestion(question.to_string()))?;
        if self.knows(model, fact_id) {
            Ok(fact.reference_answer.clone())
        } else {
            Ok(self.wrong_answer(model, fact_id))
        }
    }
}

fn version_re() -> &'static regex::Regex {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"\d+\.\d+(?:\.\d+)?").expect("version pattern"))
}

pub fn version_tokens(text: &str) -> BTreeSet<String> {
    version_re().find_iter(text).map(|m| m.as_str().to_string()).collect()
}

/// Increments the last numeric component of the first version token.
fn bump_version(text: &str) -> Option<String> {
    let m = version_re().find(text)?;
    let mut parts: Vec<u64> = m.as_str().split('.').map(|p| p.parse().unwrap_or(0)).collect();
    if let Some(last) = parts.last_mut() {
        *last += 1;
    }
    let bumped =
        parts.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(".");
    Some(text.replacen(m.as_str(), &bumped, 1))
}

/// Ordered grading rules shared with the judge dispatch: byte-equal wins,
/// then empty, then conflicting version tokens, then misinterpretation.
pub fn grade(reference: &str, candidate: &str) -> (&'static str, Option<&'static str>) {
    if candidate == reference {
        return ("correct", None);
    }
    if candidate.trim().is_empty() {
        return ("incorrect", Some("omission"));
    }
    let ref_versions = version_tokens(reference);
    let cand_versions = version_tokens(candidate);
    if !ref_versions.is_empty() && !cand_versions.is_empty() && ref_versions != cand_versions {
        return ("incorrect", Some("wrong_version"));
    }
    ("incorrect", Some("misinterpretation"))
}

fn marker_missing(what: &str) -> ProviderError {
    ProviderError::Rejected { status: 400, message: format!("prompt is missing {what}") }
}

/// Rest of the line after the first occurrence of `marker`, trimmed.
fn after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let start = text.find(marker)? + marker.len();
    Some(text[start..].lines().next().unwrap_or("").trim())
}

/// Text between `start` and the next `end` (or end of input), trimmed.
fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    let to = rest.find(end).unwrap_or(rest.len());
    Some(rest[..to].trim())
}

fn parse_list(raw: &str) -> Vec<String> {
    if raw == "(none)" || raw.is_empty() {
        Vec::new()
    } else {
        raw.split(", ").map(str::to_string).collect()
    }
}

fn leading_count(raw: &str) -> Option<usize> {
    raw.split_whitespace().next()?.parse().ok()
}

fn world_topic(world: &SimWorld, name: &str) -> Topic {
    let n_facts = world.facts_of_topic(name).len();
    Topic {
        name: name.to_string(),
        summary: format!("Covers {n_facts} documented facts about {name} in {}.", world.domain),
        prerequisites: "(none)".to_string(),
        learning_objectives: format!("Answer the reference questions on {name}."),
        difficulty: Difficulty::Medium,
    }
}

fn advanced_topic(base: &str, name: &str) -> Topic {
    Topic {
        name: name.to_string(),
        summary: format!("Advanced follow-up material building on {base}."),
        prerequisites: base.to_string(),
        learning_objectives: format!("Extend mastery of {base} to edge cases."),
        difficulty: Difficulty::Hard,
    }
}

/// Proposes every uncovered world topic, padding with advanced subtopics of
/// the pool until `min_topics` is met.
fn propose_topics(
    world: &SimWorld,
    covered: &[String],
    weak_first: &[String],
    min_topics: usize,
) -> Vec<Topic> {
    let covered_norm: BTreeSet<String> =
        covered.iter().map(|n| normalize_topic_name(n)).collect();
    let mut taken = BTreeSet::new();
    let mut proposals = Vec::new();
    let push = |topic: Topic, taken: &mut BTreeSet<String>, proposals: &mut Vec<Topic>| {
        if taken.insert(normalize_topic_name(&topic.name)) {
            proposals.push(topic);
        }
    };
    for name in weak_first {
        push(world_topic(world, name), &mut taken, &mut proposals);
    }
    for name in world.topics() {
        if !covered_norm.contains(&normalize_topic_name(&name)) {
            push(world_topic(world, &name), &mut taken, &mut proposals);
        }
    }
    let pool: Vec<String> = if covered.is_empty() { world.topics() } else { covered.to_vec() };
    if pool.is_empty() {
        return proposals;
    }
    let mut suffix = String::from(" advanced");
    while proposals.len() < min_topics {
        let before = proposals.len();
        for base in &pool {
            if proposals.len() >= min_topics {
                break;
            }
            push(advanced_topic(base, &format!("{base}{suffix}")), &mut taken, &mut proposals);
        }
        if proposals.len() == before {
            suffix.push_str(" advanced");
        }
    }
    proposals
}

fn plan_response(world: &SimWorld, prompt: &str) -> Result<String, ProviderError> {
    let covered = parse_list(
        after(prompt, "Already covered topics (avoid duplication): ")
            .ok_or_else(|| marker_missing("the covered-topics line"))?,
    );
    let min_topics = after(prompt, "Include at least ")
        .and_then(leading_count)
        .ok_or_else(|| marker_missing("the topic-count line"))?;
    let topics = propose_topics(world, &covered, &[], min_topics);
    Ok(serialize_curriculum(&Curriculum {
        domain_slug: domain_slug(&world.domain),
        iteration: 0,
        topics,
    }))
}

fn revise_response(world: &SimWorld, prompt: &str) -> Result<String, ProviderError> {
    let mastered = parse_list(
        after(prompt, "Mastered topics (high accuracy): ")
            .ok_or_else(|| marker_missing("the mastered-topics line"))?,
    );
    let weak_line = after(prompt, "Weak topics (below threshold ")
        .ok_or_else(|| marker_missing("the weak-topics line"))?;
    let weak = parse_list(weak_line.split("): ").nth(1).unwrap_or("(none)"));
    let covered = parse_list(
        after(prompt, "Previously covered topics: ")
            .ok_or_else(|| marker_missing("the covered-topics line"))?,
    );
    let min_topics = after(prompt, "Include at least ")
        .and_then(leading_count)
        .ok_or_else(|| marker_missing("the topic-count line"))?;
    let mut skip = covered.clone();
    skip.extend(mastered.clone());
    skip.retain(|name| {
        let norm = normalize_topic_name(name);
        !weak.iter().any(|w| normalize_topic_name(w) == norm)
    });
    let topics = propose_topics(world, &skip, &weak, min_topics);
    let rendered: Vec<serde_json::Value> = topics
        .iter()
        .map(|t| {
            serde_json::json!({
                "name": t.name,
                "summary": t.summary,
                "prerequisites": t.prerequisites,
                "learning_objectives": t.learning_objectives,
                "difficulty": t.difficulty.as_str(),
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(&serde_json::json!({ "topics": rendered }))
        .expect("revision serializes"))
}

fn research_response(world: &SimWorld, prompt: &str) -> Result<String, ProviderError> {
    let topic = after(prompt, "Topic: ").ok_or_else(|| marker_missing("the topic line"))?;
    let n = after(prompt, "Produce exactly ")
        .and_then(leading_count)
        .ok_or_else(|| marker_missing("the question-count line"))?;
    let with_rationale = prompt.contains("<rationale>");
    let facts = world.facts_of_topic_or_base(topic);
    if facts.is_empty() {
        return Err(SimError::UnknownTopic(topic.to_string()).into());
    }
    let slug = domain_slug(&world.domain);
    let mut out = String::from("<qa>\n");
    for (i, (fact_id, fact)) in facts.iter().take(n).enumerate() {
        let k = i + 1;
        let difficulty = ["Easy", "Medium", "Hard"][i % 3];
        out.push_str(&format!("  <question-{k}>\n"));
        out.push_str(&format!(
            "    <text>{}</text>\n",
            crate::markup::xml_escape(&fact.question)
        ));
        out.push_str(&format!(
            "    <answer>{}</answer>\n",
            crate::markup::xml_escape(&fact.reference_answer)
        ));
        out.push_str(&format!("    <category>{}</category>\n", fact.category.as_str()));
        out.push_str(&format!("    <difficulty>{difficulty}</difficulty>\n"));
        if with_rationale {
            out.push_str(&format!(
                "    <rationale>The {fact_id} reference entry states this directly.</rationale>\n"
            ));
        }
        out.push_str("    <citations>\n");
        out.push_str(&format!(
            "      <url>https://sources.example.org/{slug}/{fact_id}</url>\n"
        ));
        out.push_str(&format!(
            "      <url>https://mirror.example.net/{slug}/{fact_id}/notes</url>\n"
        ));
        out.push_str("    </citations>\n");
        out.push_str(&format!("  </question-{k}>\n"));
    }
    out.push_str("</qa>\n");
    Ok(out)
}

fn judge_response(prompt: &str) -> Result<String, ProviderError> {
    let label = after(prompt, "the trusted reference: Answer ")
        .and_then(|rest| rest.chars().next())
        .ok_or_else(|| marker_missing("the reference-label line"))?;
    let answer_a = between(prompt, "Answer A: ", "\nAnswer B: ")
        .ok_or_else(|| marker_missing("answer A"))?;
    let answer_b = between(prompt, "Answer B: ", "\nReturn the JSON")
        .ok_or_else(|| marker_missing("answer B"))?;
    let (reference, candidate) = match label {
        'A' => (answer_a, answer_b),
        'B' => (answer_b, answer_a),
        other => {
            return Err(ProviderError::Rejected {
                status: 400,
                message: format!("unrecognized reference label {other:?}"),
            })
        }
    };
    let (verdict, error_type) = grade(reference, candidate);
    let rationale = match error_type {
        None => "The candidate matches the trusted reference exactly.",
        Some("omission") => "The candidate answer is empty.",
        Some("wrong_version") => {
            "The candidate cites different version numbers than the reference."
        }
        Some(_) => "The candidate contradicts the trusted reference.",
    };
    Ok(serde_json::to_string(&serde_json::json!({
        "label": verdict,
        "error_type": error_type,
        "rationale": rationale,
    }))
    .expect("verdict serializes"))
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    /// Probability that a research reply is damaged before return.
    pub malformed_rate: f64,
    /// Poll count at which a submitted job reports success.
    pub polls_to_complete: u32,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { malformed_rate: 0.0, polls_to_complete: 2 }
    }
}

struct SimJob {
    model_id: String,
    polls: u32,
    usage: Usage,
}

struct SimState {
    world: SimWorld,
    jobs: BTreeMap<String, SimJob>,
    jobs_submitted: u64,
}

/// Durable slice of [`SimState`]: enough to rebuild fine-tuned models after a
/// restart. In-flight jobs are deliberately dropped, as a real backend would
/// also fail polls for jobs it never acknowledged.
#[derive(Debug, Serialize, Deserialize)]
struct SimSnapshot {
    world: SimWorld,
    jobs_submitted: u64,
}

/// [`Provider`] over a [`SimWorld`]. Fine-tunes swap in the successor world;
/// everything else reads the current one.
pub struct SimProvider {
    state: Mutex<SimState>,
    options: SimOptions,
    snapshot_path: Option<PathBuf>,
}

impl SimProvider {
    pub fn new(world: SimWorld, options: SimOptions) -> SimProvider {
        SimProvider {
            state: Mutex::new(SimState { world, jobs: BTreeMap::new(), jobs_submitted: 0 }),
            options,
            snapshot_path: None,
        }
    }

    /// Like [`SimProvider::new`], but models the backend's own durability: the
    /// world is snapshotted to `path` after every accepted fine-tune, and an
    /// existing snapshot takes precedence over `initial`.
    pub fn persistent(
        initial: SimWorld,
        options: SimOptions,
        path: PathBuf,
    ) -> std::io::Result<SimProvider> {
        let state = match std::fs::read(&path) {
            Ok(bytes) => {
                let snap: SimSnapshot = serde_json::from_slice(&bytes)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                SimState {
                    world: snap.world,
                    jobs: BTreeMap::new(),
                    jobs_submitted: snap.jobs_submitted,
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                SimState { world: initial, jobs: BTreeMap::new(), jobs_submitted: 0 }
            }
            Err(e) => return Err(e),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(SimProvider { state: Mutex::new(state), options, snapshot_path: Some(path) })
    }

    fn persist(&self, state: &SimState) -> Result<(), ProviderError> {
        let Some(path) = &self.snapshot_path else { return Ok(()) };
        let snap =
            SimSnapshot { world: state.world.clone(), jobs_submitted: state.jobs_submitted };
        let bytes = serde_json::to_vec(&snap).expect("snapshot serializes");
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        std::fs::write(&tmp, &bytes)
            .and_then(|()| std::fs::rename(&tmp, path))
            .map_err(|e| ProviderError::Connection(format!("sim snapshot: {e}")))
    }

    pub fn world_snapshot(&self) -> SimWorld {
        self.state.lock().expect("sim state").world.clone()
    }

    fn maybe_malform(&self, noise_seed: u64, request_seed: u64, xml: String) -> String {
        if self.options.malformed_rate <= 0.0 {
            return xml;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            noise_seed.wrapping_add(request_seed),
            "sim:malform",
        ));
        if rng.random::<f64>() >= self.options.malformed_rate {
            return xml;
        }
        let fault = ALL_FAULTS[rng.random_range(0..ALL_FAULTS.len())];
        inject_fault(&xml, fault, derive_seed(request_seed, "sim:fault"))
    }
}

fn token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl Provider for SimProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let state = self.state.lock().expect("sim state");
        let world = &state.world;
        let text = match request.purpose {
            Purpose::Plan => plan_response(world, &request.user)?,
            Purpose::Revise => revise_response(world, &request.user)?,
            Purpose::Research => {
                let xml = research_response(world, &request.user)?;
                self.maybe_malform(world.noise_seed, request.seed, xml)
            }
            Purpose::Answer => world
                .answer(&request.model, request.user.trim())
                .map_err(ProviderError::from)?,
            Purpose::Judge => judge_response(&request.user)?,
        };
        let usage = Usage {
            tokens_in: token_count(&request.user)
                + request.system.as_deref().map_or(0, token_count),
            tokens_out: token_count(&text),
        };
        Ok(ChatResponse { text, usage })
    }

    fn submit_fine_tune(&self, request: &FineTuneRequest) -> Result<String, ProviderError> {
        let mut state = self.state.lock().expect("sim state");
        state.jobs_submitted += 1;
        let n = state.jobs_submitted;
        let kind = match request.kind {
            JobKind::Sft => "sft",
            JobKind::Dpo => "dpo",
        };
        let model_id = if request.suffix.is_empty() {
            format!("sim:{kind}:{n}")
        } else {
            format!("sim:{kind}:{}-{n}", request.suffix)
        };
        let next_world = state
            .world
            .fine_tune(&request.base_model, &model_id, &request.dataset_jsonl)
            .map_err(ProviderError::from)?;
        state.world = next_world;
        let job_id = format!("simjob-{n}");
        state.jobs.insert(
            job_id.clone(),
            SimJob {
                model_id,
                polls: 0,
                usage: Usage { tokens_in: token_count(&request.dataset_jsonl), tokens_out: 0 },
            },
        );
        self.persist(&state)?;
        Ok(job_id)
    }

    fn poll_job(&self, job_id: &str) -> Result<JobStatus, ProviderError> {
        let mut state = self.state.lock().expect("sim state");
        let done_at = self.options.polls_to_complete;
        let job = state.jobs.get_mut(job_id).ok_or_else(|| ProviderError::Rejected {
            status: 404,
            message: format!("unknown job {job_id:?}"),
        })?;
        job.polls += 1;
        let done = job.polls >= done_at;
        Ok(JobStatus {
            job_id: job_id.to_string(),
            state: if done { JobState::Succeeded } else { JobState::Running },
            model_id: done.then(|| job.model_id.clone()),
            error: None,
            usage: if done { job.usage } else { Usage::default() },
        })
    }
}

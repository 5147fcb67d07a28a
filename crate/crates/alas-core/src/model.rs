//! Canonical domain types shared by every pipeline stage, plus content
//! hashing and naming primitives.
//!
//! Everything here is an immutable value once constructed. Session state is
//! mutated only by the orchestrator (single writer).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

pub type HexDigest = String;

/// Schema version stamped into persisted session state and manifests.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("no alphanumeric characters survive slugification of {0:?}")]
    EmptySlug(String),
    #[error("invalid {kind}: {reason}")]
    Invalid { kind: &'static str, reason: String },
}

/// SHA-256 over raw bytes, rendered as lowercase hex. The algorithm is fixed
/// once here and recorded in every manifest so artifacts stay comparable
/// across runs and platforms.
pub fn content_hash(bytes: &[u8]) -> HexDigest {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// First four hex characters of a digest, used in artifact filenames.
pub fn short_hash(digest: &str) -> String {
    digest.chars().take(4).collect()
}

/// Stable sub-seed for a named task: low eight bytes of SHA-256 over the
/// session seed and a salt string. Keeps per-task randomness independent
/// while still fully determined by the session seed.
pub fn derive_seed(seed: u64, salt: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest shorter than 8 bytes"))
}

/// Lowercase a domain name into `[a-z0-9_]+` with no leading or trailing
/// underscore. Runs of non-alphanumerics collapse to a single underscore.
pub fn slugify(domain: &str) -> Result<String, ModelError> {
    let mut out = String::with_capacity(domain.len());
    let mut pending_sep = false;
    for c in domain.chars() {
        if c.is_ascii_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(c.to_ascii_lowercase());
        } else {
            pending_sep = true;
        }
    }
    if out.is_empty() {
        return Err(ModelError::EmptySlug(domain.to_string()));
    }
    Ok(out)
}

/// Case-insensitive, whitespace-collapsed form used for topic identity.
pub fn normalize_topic_name(name: &str) -> String {
    name.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "Easy" => Some(Self::Easy),
            "Medium" => Some(Self::Medium),
            "Hard" => Some(Self::Hard),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Easy => "Easy",
            Self::Medium => "Medium",
            Self::Hard => "Hard",
        }
    }
}

/// Question category vocabulary. Order here is the canonical order used for
/// balancing and round-robin selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Factual,
    Conceptual,
    Application,
    Analysis,
    Synthesis,
}

pub const ALL_CATEGORIES: [Category; 5] = [
    Category::Factual,
    Category::Conceptual,
    Category::Application,
    Category::Analysis,
    Category::Synthesis,
];

impl Category {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "Factual" => Some(Self::Factual),
            "Conceptual" => Some(Self::Conceptual),
            "Application" => Some(Self::Application),
            "Analysis" => Some(Self::Analysis),
            "Synthesis" => Some(Self::Synthesis),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Factual => "Factual",
            Self::Conceptual => "Conceptual",
            Self::Application => "Application",
            Self::Analysis => "Analysis",
            Self::Synthesis => "Synthesis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub summary: String,
    pub prerequisites: String,
    pub learning_objectives: String,
    pub difficulty: Difficulty,
}

impl Topic {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.name.trim().is_empty() {
            return Err(ModelError::Invalid {
                kind: "Topic",
                reason: "name is empty".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub domain_slug: String,
    pub iteration: u32,
    pub topics: Vec<Topic>,
}

impl Curriculum {
    /// Checks per-topic validity and case-insensitive name uniqueness.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.topics {
            t.validate()?;
            if !seen.insert(normalize_topic_name(&t.name)) {
                return Err(ModelError::Invalid {
                    kind: "Curriculum",
                    reason: format!("duplicate topic name {:?}", t.name),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub question: String,
    pub answer: String,
    pub category: Category,
    pub difficulty: Difficulty,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub citations: Vec<String>,
    pub topic_name: String,
    /// UTC ISO-8601, seconds precision.
    pub retrieved_at: String,
}

impl QAItem {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(ModelError::Invalid {
                kind: "QAItem",
                reason: "question and answer must be non-empty".into(),
            });
        }
        if self.retrieved_at.is_empty() {
            return Err(ModelError::Invalid {
                kind: "QAItem",
                reason: "retrieved_at missing".into(),
            });
        }
        for c in &self.citations {
            if !citation_is_sane(c) {
                return Err(ModelError::Invalid {
                    kind: "QAItem",
                    reason: format!("citation {c:?} is not an absolute http(s) URL"),
                });
            }
        }
        Ok(())
    }
}

/// Absolute http/https URL with a non-empty host. No network is touched;
/// parsing must stay offline-deterministic.
pub fn citation_is_sane(c: &str) -> bool {
    match url::Url::parse(c) {
        Ok(u) => matches!(u.scheme(), "http" | "https") && u.host_str().is_some_and(|h| !h.is_empty()),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_urls: Vec<String>,
    pub retrieved_at: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub messages: Vec<Message>,
    pub provenance: Provenance,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<(), ModelError> {
        let last_is_assistant = self.messages.last().is_some_and(|m| m.role == Role::Assistant);
        let has_user_before = self
            .messages
            .iter()
            .take(self.messages.len().saturating_sub(1))
            .any(|m| m.role == Role::User);
        if !last_is_assistant || !has_user_before {
            return Err(ModelError::Invalid {
                kind: "TrainingExample",
                reason: "expected at least one user turn followed by a final assistant turn".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_messages: Vec<Message>,
    pub preferred: String,
    pub non_preferred: String,
    pub category: Category,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.non_preferred.is_empty() {
            return Err(ModelError::Invalid {
                kind: "PreferencePair",
                reason: "non_preferred is empty".into(),
            });
        }
        if self.preferred == self.non_preferred {
            return Err(ModelError::Invalid {
                kind: "PreferencePair",
                reason: "preferred equals non_preferred".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Base,
    Sft,
    Dpo,
}

/// Opaque handle to a provider-side model. No weights live in this process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub kind: ModelKind,
}

impl ModelRef {
    pub fn base(id: impl Into<String>) -> Self {
        Self { id: id.into(), parent: None, kind: ModelKind::Base }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match (self.kind, &self.parent) {
            (ModelKind::Base, Some(_)) => Err(ModelError::Invalid {
                kind: "ModelRef",
                reason: "base models have no parent".into(),
            }),
            (ModelKind::Sft | ModelKind::Dpo, None) => Err(ModelError::Invalid {
                kind: "ModelRef",
                reason: "fine-tuned models require a parent".into(),
            }),
            _ => Ok(()),
        }
    }
}

/// Hard caps and loop thresholds. Mirrored one-to-one by the `[budget]`
/// section of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    pub max_topics: usize,
    pub max_questions_per_topic: usize,
    pub max_total_tokens: u64,
    pub max_cost: f64,
    pub max_iterations: u32,
    /// Plateau threshold: continue while the accuracy gain exceeds delta.
    pub delta: f64,
    /// Mastery threshold per topic.
    pub tau: f64,
    /// Minimum overall gain required to promote a candidate model.
    pub gamma: f64,
    /// Maximum tolerated regression on a guarded topic.
    pub rho: f64,
    /// DPO temperature.
    pub beta: f64,
    pub concurrency_cap: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_topics: 10,
            max_questions_per_topic: 10,
            max_total_tokens: 5_000_000,
            max_cost: 100.0,
            max_iterations: 5,
            delta: 0.01,
            tau: 0.90,
            gamma: 0.01,
            rho: 0.05,
            beta: 0.1,
            concurrency_cap: 50,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ModelError::Invalid { kind: "BudgetConfig", reason: "tau must be in (0,1]".into() });
        }
        if self.delta < 0.0 {
            return Err(ModelError::Invalid { kind: "BudgetConfig", reason: "delta must be >= 0".into() });
        }
        if self.beta <= 0.0 {
            return Err(ModelError::Invalid { kind: "BudgetConfig", reason: "beta must be > 0".into() });
        }
        if self.concurrency_cap < 1 {
            return Err(ModelError::Invalid { kind: "BudgetConfig", reason: "concurrency_cap must be >= 1".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Spend {
    pub tokens: u64,
    pub cost: f64,
}

impl Spend {
    pub fn add(&mut self, other: Spend) {
        self.tokens += other.tokens;
        self.cost += other.cost;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Done,
    Failed,
    Skipped,
}

/// Idempotency ledger entry for one executed pipeline node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_name: String,
    pub input_hash: HexDigest,
    /// Paths relative to the storage root, each paired with its content hash.
    pub output_paths: BTreeMap<String, HexDigest>,
    pub started_at: String,
    pub finished_at: String,
    pub attempts: u32,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedTopic {
    pub name: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub curriculum_path: String,
    pub dataset_path: String,
    pub probe_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft_model: Option<ModelRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpo_model: Option<ModelRef>,
    /// Incumbent model scored on this iteration's probes, for the promotion gate.
    pub incumbent_report_path: String,
    pub pre_dpo_report_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_dpo_report_path: Option<String>,
    pub promoted: bool,
    pub final_accuracy: f64,
    pub spend: Spend,
}

impl IterationRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.post_dpo_report_path.is_some() != self.dpo_model.is_some() {
            return Err(ModelError::Invalid {
                kind: "IterationRecord",
                reason: "post-DPO report and DPO model must appear together".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Converged,
    BudgetExhausted,
    Suspended,
    Failed,
}

/// The persisted loop state: one writer (the orchestrator), checkpointed
/// after every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub schema_version: u32,
    pub session_id: String,
    pub domain: String,
    pub domain_slug: String,
    pub status: SessionStatus,
    pub iteration_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_curriculum_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_training_data_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_sft_model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_dpo_model_id: Option<String>,
    /// The promoted model all evaluation compares against.
    pub current_model: ModelRef,
    pub iterations: Vec<IterationRecord>,
    pub learned_topics: Vec<LearnedTopic>,
    /// Accuracy trajectory: baseline first, then one entry per iteration.
    pub accuracy_history: Vec<f64>,
    /// Topics queued for remediation after a rejected promotion.
    #[serde(default)]
    pub remediation_queue: Vec<String>,
    /// Question-quota overrides (normalized topic name → quota) for topics
    /// downweighted after generation failures.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub topic_quotas: BTreeMap<String, u32>,
    pub spend: Spend,
    pub seed: u64,
    pub created_at: String,
}

impl SessionState {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ModelError::Invalid {
                kind: "SessionState",
                reason: format!("unsupported schema_version {}", self.schema_version),
            });
        }
        if self.iteration_index as usize != self.iterations.len() {
            return Err(ModelError::Invalid {
                kind: "SessionState",
                reason: "iteration_index must equal the number of iteration records".into(),
            });
        }
        for it in &self.iterations {
            it.validate()?;
        }
        self.current_model.validate()?;
        Ok(())
    }

    pub fn latest_accuracy(&self) -> Option<f64> {
        self.accuracy_history.last().copied()
    }

    pub fn covered_topic_names(&self) -> Vec<String> {
        self.learned_topics.iter().map(|t| t.name.clone()).collect()
    }
}

//! Checkpointed session engine. Each iteration runs plan, generate, dataset,
//! sft, evaluate, dpo and finalize as guarded nodes: a node whose inputs are
//! unchanged and whose outputs still verify on disk is skipped wholesale, so
//! a resumed or replayed session never repeats provider work already paid
//! for. Spend is metered per provider call and checked against the budget
//! before every node.

use crate::clock::{SharedClock, SharedSleeper};
use crate::concurrency::map_capped;
use crate::config::{Config, FailedTopicPolicy};
use crate::curation::curate;
use crate::curriculum::{
    build_plan_prompt, build_revision_prompt, parse_curriculum, parse_revision,
    select_next_topics, serialize_curriculum,
};
use crate::evaluation::{
    build_probe_set, check_convergence, evaluate, promotion_gate, training_split, EvalOptions,
    EvaluationReport, ProbeSet,
};
use crate::model::{
    content_hash, derive_seed, normalize_topic_name, short_hash, slugify, Curriculum, Difficulty,
    HexDigest, IterationRecord, LearnedTopic, ModelError, ModelRef, NodeRecord, NodeStatus,
    QAItem, SessionState, SessionStatus, Spend, Topic, SCHEMA_VERSION,
};
use crate::provider::ratelimit::TokenBucket;
use crate::provider::retry::RetryPolicy;
use crate::provider::{
    ChatRequest, ChatResponse, FineTuneRequest, JobStatus, Provider, ProviderError,
    ProviderHandle, Purpose, Usage,
};
use crate::storage::{ArtifactKind, StorageError, Store};
use crate::synthesis::{generate_for_topic, SynthesisOptions, TopicYield};
use crate::training::{
    build_preference_pairs, complete_job, serialize_preference_pairs, submit_dpo, submit_sft,
    to_chat_dataset, JobHandle, TrainingError,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("node {node}: {message}")]
    Node { node: String, message: String },
    #[error("crash injected after node {0}")]
    InjectedCrash(String),
    #[error("artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Counts tokens and dollars for every provider reply passing through.
/// Drained into the session spend after each node.
pub struct MeteringProvider {
    inner: Arc<dyn Provider>,
    rate_in: f64,
    rate_out: f64,
    /// Pending (tokens_in, tokens_out). Priced only at drain time so the
    /// cost float never depends on the order concurrent replies landed in.
    pending: Mutex<(u64, u64)>,
}

impl MeteringProvider {
    pub fn new(inner: Arc<dyn Provider>, rate_in: f64, rate_out: f64) -> MeteringProvider {
        MeteringProvider { inner, rate_in, rate_out, pending: Mutex::new((0, 0)) }
    }

    fn record(&self, usage: Usage) {
        let mut pending = self.pending.lock().expect("spend meter");
        pending.0 += usage.tokens_in;
        pending.1 += usage.tokens_out;
    }

    pub fn drain(&self) -> Spend {
        let (tokens_in, tokens_out) =
            std::mem::take(&mut *self.pending.lock().expect("spend meter"));
        Spend {
            tokens: tokens_in + tokens_out,
            cost: tokens_in as f64 * self.rate_in + tokens_out as f64 * self.rate_out,
        }
    }
}

impl Provider for MeteringProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let response = self.inner.chat(request)?;
        self.record(response.usage);
        Ok(response)
    }

    fn submit_fine_tune(&self, request: &FineTuneRequest) -> Result<String, ProviderError> {
        self.inner.submit_fine_tune(request)
    }

    fn poll_job(&self, job_id: &str) -> Result<JobStatus, ProviderError> {
        let status = self.inner.poll_job(job_id)?;
        self.record(status.usage);
        Ok(status)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Abort with [`EngineError::InjectedCrash`] right after this node has
    /// checkpointed, to exercise resume paths in tests.
    pub crash_after: Option<String>,
    /// Plan, synthesize and curate only; stop before any fine-tune
    /// submission. Artifacts stay hash-compatible with a later full run.
    pub dry_run: bool,
}

pub struct Engine {
    store: Store,
    config: Config,
    metering: MeteringProvider,
    clock: SharedClock,
    sleeper: SharedSleeper,
    options: RunOptions,
}

fn node_name(index: u32, stage: &str) -> String {
    format!("i{index}-{stage}")
}

fn input_hash(parts: &[&str]) -> HexDigest {
    content_hash(parts.join("\x1f").as_bytes())
}

fn sanitize_component(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

/// The report whose accuracies the session carried forward: the candidate's
/// final report when promoted, the incumbent's otherwise.
pub fn adopted_report_path(record: &IterationRecord) -> &str {
    if record.promoted {
        record.post_dpo_report_path.as_deref().unwrap_or(&record.pre_dpo_report_path)
    } else {
        &record.incumbent_report_path
    }
}

pub fn exit_code(status: SessionStatus) -> i32 {
    match status {
        SessionStatus::Running | SessionStatus::Converged => 0,
        SessionStatus::Suspended | SessionStatus::BudgetExhausted => 2,
        SessionStatus::Failed => 3,
    }
}

fn empty_report(model: ModelRef) -> EvaluationReport {
    EvaluationReport {
        overall_accuracy: 0.0,
        per_topic: BTreeMap::new(),
        per_category: BTreeMap::new(),
        confusion: BTreeMap::new(),
        judgments: Vec::new(),
        model,
        probe_hash: String::new(),
    }
}

/// Working set for one iteration, rebuilt from disk on skipped nodes.
#[derive(Default)]
struct IterationCtx {
    index: u32,
    seed: u64,
    curriculum: Option<Curriculum>,
    curriculum_rel: Option<String>,
    curriculum_digest: Option<HexDigest>,
    yields: Vec<TopicYield>,
    yield_digests: Vec<HexDigest>,
    dataset_jsonl: Option<String>,
    dataset_rel: Option<String>,
    dataset_digest: Option<HexDigest>,
    probe: Option<ProbeSet>,
    probe_rel: Option<String>,
    sft_model: Option<ModelRef>,
    dpo_model: Option<ModelRef>,
    pre_report: Option<EvaluationReport>,
    pre_rel: Option<String>,
    pre_digest: Option<HexDigest>,
    incumbent_report: Option<EvaluationReport>,
    incumbent_rel: Option<String>,
    incumbent_digest: Option<HexDigest>,
}

struct PlanOut {
    curriculum: Curriculum,
    rel: String,
    digest: HexDigest,
}

struct DatasetOut {
    dataset: String,
    dataset_rel: String,
    dataset_digest: HexDigest,
    probe: ProbeSet,
    probe_rel: String,
    probe_digest: HexDigest,
    curation_rel: String,
    curation_digest: HexDigest,
}

struct ModelOut {
    model: ModelRef,
    receipt_rel: String,
    receipt_digest: HexDigest,
}

struct EvalOut {
    pre: EvaluationReport,
    pre_rel: String,
    pre_digest: HexDigest,
    incumbent: EvaluationReport,
    incumbent_rel: String,
    incumbent_digest: HexDigest,
}

struct FinalOut {
    report: EvaluationReport,
    post: Option<(String, HexDigest)>,
}

struct TopicTask {
    topic: Topic,
    sub_node: String,
    sub_hash: HexDigest,
    seed: u64,
    quota: usize,
    artifact_slug: String,
}

enum TopicOutcome {
    Done { rel: String, digest: HexDigest, harvest: TopicYield, crashed: bool },
    Failed { message: String },
}

/// Durable record of which topics yielded nothing and how their quotas were
/// adjusted, so a replayed generate node reapplies the same decisions.
#[derive(Debug, Default, Serialize, Deserialize)]
struct GenerationSummary {
    failed_topics: Vec<String>,
    quota_updates: BTreeMap<String, u32>,
}

impl Engine {
    pub fn new(
        store: Store,
        config: Config,
        provider: Arc<dyn Provider>,
        clock: SharedClock,
        sleeper: SharedSleeper,
        options: RunOptions,
    ) -> Engine {
        let p = &config.provider;
        let handle = ProviderHandle {
            provider,
            limiter: Mutex::new(TokenBucket::new(p.burst, p.requests_per_second)),
            retry: RetryPolicy {
                max_attempts: p.max_attempts,
                base_delay: Duration::from_millis(p.base_delay_ms),
                max_delay: Duration::from_millis(p.max_delay_ms),
                jitter: p.jitter,
            },
            classification: Default::default(),
            sleeper: sleeper.clone(),
        };
        let metering = MeteringProvider::new(Arc::new(handle), p.rate_in, p.rate_out);
        Engine { store, config, metering, clock, sleeper, options }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn start_session(&self, domain: &str) -> Result<SessionState, EngineError> {
        let domain_slug = slugify(domain)?;
        let created_at = self.clock.now_iso();
        let session_id = format!("{domain_slug}_{}", created_at.replace(':', "-"));
        let state = SessionState {
            schema_version: SCHEMA_VERSION,
            session_id,
            domain: domain.to_string(),
            domain_slug,
            status: SessionStatus::Running,
            iteration_index: 0,
            current_curriculum_file: None,
            current_training_data_file: None,
            current_sft_model_id: None,
            current_dpo_model_id: None,
            current_model: ModelRef::base(self.config.provider.base_model.clone()),
            iterations: Vec::new(),
            learned_topics: Vec::new(),
            accuracy_history: Vec::new(),
            remediation_queue: Vec::new(),
            topic_quotas: BTreeMap::new(),
            spend: Spend::default(),
            seed: self.config.seed,
            created_at,
        };
        self.store.save_session(&state)?;
        self.store.write_manifest(&state, &self.config, &*self.clock)?;
        Ok(state)
    }

    /// Reloads a session and clears any resumable stop condition. Terminal
    /// statuses stay terminal unless the configured iteration budget has been
    /// raised in the meantime.
    pub fn resume_session(&self, session_id: &str) -> Result<SessionState, EngineError> {
        let mut state = self.store.load_session(session_id)?;
        match state.status {
            SessionStatus::Failed | SessionStatus::Suspended => {
                state.status = SessionStatus::Running;
            }
            SessionStatus::BudgetExhausted
                if state.iteration_index < self.config.budget.max_iterations =>
            {
                state.status = SessionStatus::Running;
            }
            _ => {}
        }
        Ok(state)
    }

    /// Loops [`Engine::run_iteration`] until the plateau and mastery checks
    /// say stop, the iteration budget runs out, or the session leaves the
    /// running state.
    pub fn run_session(&self, state: &mut SessionState) -> Result<(), EngineError> {
        loop {
            if state.status != SessionStatus::Running {
                return Ok(());
            }
            if state.iteration_index >= self.config.budget.max_iterations {
                state.status = SessionStatus::BudgetExhausted;
                self.store.save_session(state)?;
                return Ok(());
            }
            self.run_iteration(state)?;
            if self.options.dry_run || state.status != SessionStatus::Running {
                return Ok(());
            }
            let per_topic: BTreeMap<String, f64> =
                state.learned_topics.iter().map(|lt| (lt.name.clone(), lt.accuracy)).collect();
            let decision = check_convergence(
                &state.accuracy_history,
                &per_topic,
                self.config.budget.delta,
                self.config.budget.tau,
            );
            if decision.should_stop() {
                state.status = SessionStatus::Converged;
                self.store.save_session(state)?;
                return Ok(());
            }
        }
    }

    pub fn run_iteration(&self, state: &mut SessionState) -> Result<(), EngineError> {
        let index = state.iteration_index;
        let mut ctx = IterationCtx {
            index,
            seed: derive_seed(state.seed, &format!("iteration:{index}")),
            ..IterationCtx::default()
        };

        if self.suspend_if_exhausted(state)? {
            return Ok(());
        }
        self.plan_node(state, &mut ctx)?;
        if state.status != SessionStatus::Running {
            return Ok(());
        }

        if self.suspend_if_exhausted(state)? {
            return Ok(());
        }
        self.generate_node(state, &mut ctx)?;

        if self.suspend_if_exhausted(state)? {
            return Ok(());
        }
        self.dataset_node(state, &mut ctx)?;

        if self.options.dry_run {
            return Ok(());
        }

        if self.suspend_if_exhausted(state)? {
            return Ok(());
        }
        self.sft_node(state, &mut ctx)?;

        if self.suspend_if_exhausted(state)? {
            return Ok(());
        }
        self.evaluate_node(state, &mut ctx)?;

        if self.suspend_if_exhausted(state)? {
            return Ok(());
        }
        self.dpo_node(state, &mut ctx)?;

        if self.suspend_if_exhausted(state)? {
            return Ok(());
        }
        self.finalize_node(state, &mut ctx)
    }

    fn suspend_if_exhausted(&self, state: &mut SessionState) -> Result<bool, EngineError> {
        let budget = &self.config.budget;
        if state.spend.tokens >= budget.max_total_tokens || state.spend.cost >= budget.max_cost {
            state.status = SessionStatus::Suspended;
            self.store.save_session(state)?;
            return Ok(true);
        }
        Ok(false)
    }

    fn relative(&self, path: &std::path::Path) -> String {
        path.strip_prefix(self.store.root()).unwrap_or(path).display().to_string()
    }

    fn read_rel(&self, rel: &str) -> Result<Vec<u8>, StorageError> {
        let path = self.store.root().join(rel);
        std::fs::read(&path).map_err(|source| StorageError::Io { path, source })
    }

    fn read_rel_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<T, EngineError> {
        let bytes = self.read_rel(rel)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| EngineError::Artifact { path: rel.to_string(), message: e.to_string() })
    }

    /// A node may be skipped only when its completed record matches the
    /// current input hash and every recorded output still verifies on disk.
    fn verified_record(&self, prior: Option<&NodeRecord>, hash: &str) -> Option<NodeRecord> {
        let record = prior?;
        if record.input_hash != hash || record.status == NodeStatus::Failed {
            return None;
        }
        for (rel, digest) in &record.output_paths {
            match std::fs::read(self.store.root().join(rel)) {
                Ok(bytes) if content_hash(&bytes) == *digest => {}
                _ => return None,
            }
        }
        Some(record.clone())
    }

    fn seal_node(
        &self,
        state: &mut SessionState,
        node: &str,
        hash: &str,
        outputs: BTreeMap<String, HexDigest>,
        started: String,
        attempts: u32,
        status: NodeStatus,
    ) -> Result<(), EngineError> {
        let record = NodeRecord {
            node_name: node.to_string(),
            input_hash: hash.to_string(),
            output_paths: outputs,
            started_at: started,
            finished_at: self.clock.now_iso(),
            attempts,
            status,
        };
        self.store.save_node_record(&state.session_id, &record)?;
        state.spend.add(self.metering.drain());
        self.store.save_session(state)?;
        if self.options.crash_after.as_deref() == Some(node) {
            return Err(EngineError::InjectedCrash(node.to_string()));
        }
        Ok(())
    }

    fn fail_node(
        &self,
        state: &mut SessionState,
        node: &str,
        hash: &str,
        started: String,
        attempts: u32,
        message: String,
    ) -> EngineError {
        let record = NodeRecord {
            node_name: node.to_string(),
            input_hash: hash.to_string(),
            output_paths: BTreeMap::new(),
            started_at: started,
            finished_at: self.clock.now_iso(),
            attempts,
            status: NodeStatus::Failed,
        };
        let _ = self.store.save_node_record(&state.session_id, &record);
        state.spend.add(self.metering.drain());
        state.status = SessionStatus::Failed;
        let _ = self.store.save_session(state);
        EngineError::Node { node: node.to_string(), message }
    }

    fn plan_node(
        &self,
        state: &mut SessionState,
        ctx: &mut IterationCtx,
    ) -> Result<(), EngineError> {
        let node = node_name(ctx.index, "plan");
        let cfg = &self.config;
        let covered = state.covered_topic_names();
        let prior_report_rel =
            state.iterations.last().map(adopted_report_path).unwrap_or("none").to_string();
        let hash = input_hash(&[
            "plan",
            &state.session_id,
            &ctx.index.to_string(),
            &state.domain,
            &state.seed.to_string(),
            &cfg.curriculum.min_topics.to_string(),
            &cfg.curriculum.advanced_topic_cap.to_string(),
            &cfg.budget.max_topics.to_string(),
            &cfg.budget.tau.to_string(),
            &covered.join("\x1e"),
            &state.remediation_queue.join("\x1e"),
            &prior_report_rel,
        ]);
        let prior = self.store.load_node_record(&state.session_id, &node)?;
        if let Some(record) = self.verified_record(prior.as_ref(), &hash) {
            let (rel, digest) = record
                .output_paths
                .into_iter()
                .next()
                .ok_or_else(|| EngineError::Node {
                    node: node.clone(),
                    message: "completed record lacks a curriculum artifact".into(),
                })?;
            let xml = String::from_utf8_lossy(&self.read_rel(&rel)?).into_owned();
            let curriculum = parse_curriculum(&xml, &state.domain_slug, ctx.index, 1)
                .map_err(|e| EngineError::Artifact { path: rel.clone(), message: e.to_string() })?;
            state.current_curriculum_file = Some(rel.clone());
            ctx.curriculum = Some(curriculum);
            ctx.curriculum_rel = Some(rel);
            ctx.curriculum_digest = Some(digest);
            return Ok(());
        }
        let attempts = prior.as_ref().map_or(1, |r| r.attempts + 1);
        let started = self.clock.now_iso();
        match self.plan_exec(state, ctx) {
            Ok(Some(out)) => {
                let outputs = BTreeMap::from([(out.rel.clone(), out.digest.clone())]);
                state.current_curriculum_file = Some(out.rel.clone());
                ctx.curriculum = Some(out.curriculum);
                ctx.curriculum_rel = Some(out.rel);
                ctx.curriculum_digest = Some(out.digest);
                self.seal_node(state, &node, &hash, outputs, started, attempts, NodeStatus::Done)
            }
            Ok(None) => {
                state.status = SessionStatus::Converged;
                state.spend.add(self.metering.drain());
                self.store.save_session(state)?;
                Ok(())
            }
            Err(message) => Err(self.fail_node(state, &node, &hash, started, attempts, message)),
        }
    }

    fn plan_exec(
        &self,
        state: &SessionState,
        ctx: &IterationCtx,
    ) -> Result<Option<PlanOut>, String> {
        let cfg = &self.config;
        let tau = cfg.budget.tau;
        let covered = state.covered_topic_names();
        let prior_report = match state.iterations.last() {
            Some(it) => Some(
                self.read_rel_json::<EvaluationReport>(adopted_report_path(it))
                    .map_err(|e| e.to_string())?,
            ),
            None => None,
        };
        let (purpose, prompt) = match &prior_report {
            None => (
                Purpose::Plan,
                build_plan_prompt(&state.domain, cfg.curriculum.min_topics, &covered)
                    .map_err(|e| e.to_string())?,
            ),
            Some(report) => {
                let mastered: Vec<String> = state
                    .learned_topics
                    .iter()
                    .filter(|lt| lt.accuracy >= tau)
                    .map(|lt| lt.name.clone())
                    .collect();
                let mut weak: Vec<String> = report
                    .per_topic
                    .iter()
                    .filter(|(_, acc)| **acc < tau)
                    .map(|(name, _)| name.clone())
                    .collect();
                for queued in &state.remediation_queue {
                    let norm = normalize_topic_name(queued);
                    if !weak.iter().any(|w| normalize_topic_name(w) == norm) {
                        weak.push(queued.clone());
                    }
                }
                let prompt = build_revision_prompt(
                    &state.domain,
                    &mastered,
                    &weak,
                    &covered,
                    tau,
                    cfg.curriculum.min_topics,
                )
                .map_err(|e| e.to_string())?;
                (Purpose::Revise, prompt)
            }
        };
        let reply = self
            .metering
            .chat(&ChatRequest {
                purpose,
                model: cfg.provider.plan_model.clone(),
                system: None,
                user: prompt,
                seed: derive_seed(ctx.seed, "plan"),
                max_output_tokens: 4096,
            })
            .map_err(|e| e.to_string())?;
        let proposals = match purpose {
            Purpose::Plan => {
                parse_curriculum(&reply.text, &state.domain_slug, ctx.index, cfg.curriculum.min_topics)
            }
            _ => parse_revision(&reply.text, &state.domain_slug, ctx.index, cfg.curriculum.min_topics),
        }
        .map_err(|e| e.to_string())?;
        let report = prior_report.unwrap_or_else(|| empty_report(state.current_model.clone()));
        let plan =
            select_next_topics(&report, state, tau, &proposals, cfg.curriculum.advanced_topic_cap);
        let mut topics = plan.all_topics();
        topics.truncate(cfg.budget.max_topics);
        if topics.is_empty() {
            return Ok(None);
        }
        let curriculum =
            Curriculum { domain_slug: state.domain_slug.clone(), iteration: ctx.index, topics };
        let xml = serialize_curriculum(&curriculum);
        let (path, digest) = self
            .store
            .put(ArtifactKind::Curricula, &state.domain_slug, ctx.index, "xml", xml.as_bytes())
            .map_err(|e| e.to_string())?;
        Ok(Some(PlanOut { curriculum, rel: self.relative(&path), digest }))
    }

    fn generate_node(
        &self,
        state: &mut SessionState,
        ctx: &mut IterationCtx,
    ) -> Result<(), EngineError> {
        let node = node_name(ctx.index, "generate");
        let curriculum = ctx.curriculum.clone().ok_or_else(|| EngineError::Node {
            node: node.clone(),
            message: "no curriculum loaded".into(),
        })?;
        let policy = self.config.curriculum.failed_topic_policy;
        let mut tasks = Vec::new();
        for topic in &curriculum.topics {
            let norm = normalize_topic_name(&topic.name);
            let quota = state
                .topic_quotas
                .get(&norm)
                .map(|q| *q as usize)
                .unwrap_or(self.config.budget.max_questions_per_topic)
                .max(1);
            let topic_slug = slugify(&topic.name)?;
            let sub_node = format!("{node}-{topic_slug}");
            let seed = derive_seed(ctx.seed, &format!("generate:{norm}"));
            let sub_hash = input_hash(&[
                "generate-topic",
                &state.session_id,
                &ctx.index.to_string(),
                &topic.name,
                &topic.summary,
                &topic.prerequisites,
                &topic.learning_objectives,
                &format!("{:?}", topic.difficulty),
                &quota.to_string(),
                &seed.to_string(),
            ]);
            tasks.push(TopicTask {
                topic: topic.clone(),
                sub_node,
                sub_hash,
                seed,
                quota,
                artifact_slug: format!("{}_{}", state.domain_slug, topic_slug),
            });
        }
        let sub_hashes: Vec<&str> = tasks.iter().map(|t| t.sub_hash.as_str()).collect();
        let hash = input_hash(
            &[
                &[
                    "generate",
                    &state.session_id,
                    &ctx.index.to_string(),
                    ctx.curriculum_digest.as_deref().unwrap_or(""),
                    match policy {
                        FailedTopicPolicy::Skip => "skip",
                        FailedTopicPolicy::Downweight => "downweight",
                    },
                ],
                sub_hashes.as_slice(),
            ]
            .concat(),
        );
        let prior = self.store.load_node_record(&state.session_id, &node)?;
        if let Some(record) = self.verified_record(prior.as_ref(), &hash) {
            for task in &tasks {
                let pattern = format!("{}_iter{}_", task.artifact_slug, ctx.index);
                if let Some((rel, digest)) =
                    record.output_paths.iter().find(|(k, _)| k.contains(&pattern))
                {
                    ctx.yields.push(self.read_rel_json(rel)?);
                    ctx.yield_digests.push(digest.clone());
                }
            }
            if let Some((rel, _)) =
                record.output_paths.iter().find(|(k, _)| k.contains("/receipts/"))
            {
                let summary: GenerationSummary = self.read_rel_json(rel)?;
                for (norm, quota) in summary.quota_updates {
                    state.topic_quotas.insert(norm, quota);
                }
            }
            return Ok(());
        }
        let attempts = prior.as_ref().map_or(1, |r| r.attempts + 1);
        let started = self.clock.now_iso();
        let session_id = state.session_id.clone();
        let index = ctx.index;
        let outcomes = map_capped(&tasks, self.config.budget.concurrency_cap.max(1), |_, task| {
            self.run_topic_task(&session_id, index, task)
        });

        let mut outputs = BTreeMap::new();
        let mut crashed = false;
        let mut failures = Vec::new();
        let mut summary = GenerationSummary::default();
        for (task, outcome) in tasks.iter().zip(outcomes) {
            match outcome {
                TopicOutcome::Done { rel, digest, harvest, crashed: c } => {
                    crashed |= c;
                    if harvest.items.is_empty() {
                        summary.failed_topics.push(task.topic.name.clone());
                    }
                    outputs.insert(rel, digest.clone());
                    ctx.yield_digests.push(digest);
                    ctx.yields.push(harvest);
                }
                TopicOutcome::Failed { message } => {
                    failures.push(message);
                    summary.failed_topics.push(task.topic.name.clone());
                }
            }
        }
        if crashed {
            state.spend.add(self.metering.drain());
            self.store.save_session(state)?;
            return Err(EngineError::InjectedCrash(
                self.options.crash_after.clone().unwrap_or(node),
            ));
        }
        if ctx.yields.iter().all(|y| y.items.is_empty()) {
            let message = if failures.is_empty() {
                "no topic produced any items".to_string()
            } else {
                format!("no topic produced any items: {}", failures.join("; "))
            };
            return Err(self.fail_node(state, &node, &hash, started, attempts, message));
        }
        if policy == FailedTopicPolicy::Downweight {
            for task in &tasks {
                if summary.failed_topics.contains(&task.topic.name) {
                    let norm = normalize_topic_name(&task.topic.name);
                    summary.quota_updates.insert(norm, ((task.quota as u32) / 2).max(1));
                }
            }
        }
        for (norm, quota) in &summary.quota_updates {
            state.topic_quotas.insert(norm.clone(), *quota);
        }
        let bytes = serde_json::to_vec_pretty(&summary)
            .map_err(|e| self.fail_node(state, &node, &hash, started.clone(), attempts, e.to_string()))?;
        let rel = format!(
            "sessions/{}/receipts/{node}-{}.json",
            state.session_id,
            short_hash(&content_hash(&bytes))
        );
        let digest = self
            .store
            .write_artifact(&self.store.root().join(&rel), &bytes)
            .map_err(|e| self.fail_node(state, &node, &hash, started.clone(), attempts, e.to_string()))?;
        outputs.insert(rel, digest);
        self.seal_node(state, &node, &hash, outputs, started, attempts, NodeStatus::Done)
    }

    fn run_topic_task(&self, session_id: &str, index: u32, task: &TopicTask) -> TopicOutcome {
        let prior = match self.store.load_node_record(session_id, &task.sub_node) {
            Ok(p) => p,
            Err(e) => return TopicOutcome::Failed { message: e.to_string() },
        };
        if let Some(record) = self.verified_record(prior.as_ref(), &task.sub_hash) {
            let Some((rel, digest)) = record.output_paths.into_iter().next() else {
                return TopicOutcome::Failed {
                    message: format!("{}: record lacks an artifact", task.sub_node),
                };
            };
            return match self.read_rel_json::<TopicYield>(&rel) {
                Ok(harvest) => TopicOutcome::Done { rel, digest, harvest, crashed: false },
                Err(e) => TopicOutcome::Failed { message: e.to_string() },
            };
        }
        let attempts = prior.as_ref().map_or(1, |r| r.attempts + 1);
        let started = self.clock.now_iso();
        let options = SynthesisOptions {
            questions_per_topic: task.quota,
            ..SynthesisOptions::default()
        };
        let result = generate_for_topic(
            &self.metering,
            &self.config.provider.research_model,
            &task.topic,
            task.seed,
            &*self.clock,
            &options,
        );
        match result {
            Ok(harvest) => {
                let bytes = match serde_json::to_vec_pretty(&harvest) {
                    Ok(b) => b,
                    Err(e) => return TopicOutcome::Failed { message: e.to_string() },
                };
                let put = self.store.put(
                    ArtifactKind::TrainingData,
                    &task.artifact_slug,
                    index,
                    "json",
                    &bytes,
                );
                let (path, digest) = match put {
                    Ok(v) => v,
                    Err(e) => return TopicOutcome::Failed { message: e.to_string() },
                };
                let rel = self.relative(&path);
                let record = NodeRecord {
                    node_name: task.sub_node.clone(),
                    input_hash: task.sub_hash.clone(),
                    output_paths: BTreeMap::from([(rel.clone(), digest.clone())]),
                    started_at: started,
                    finished_at: self.clock.now_iso(),
                    attempts,
                    status: NodeStatus::Done,
                };
                if let Err(e) = self.store.save_node_record(session_id, &record) {
                    return TopicOutcome::Failed { message: e.to_string() };
                }
                let crashed = self.options.crash_after.as_deref() == Some(task.sub_node.as_str());
                TopicOutcome::Done { rel, digest, harvest, crashed }
            }
            Err(e) => {
                let record = NodeRecord {
                    node_name: task.sub_node.clone(),
                    input_hash: task.sub_hash.clone(),
                    output_paths: BTreeMap::new(),
                    started_at: started,
                    finished_at: self.clock.now_iso(),
                    attempts,
                    status: NodeStatus::Failed,
                };
                let _ = self.store.save_node_record(session_id, &record);
                TopicOutcome::Failed { message: format!("topic {:?}: {e}", task.topic.name) }
            }
        }
    }

    fn dataset_node(
        &self,
        state: &mut SessionState,
        ctx: &mut IterationCtx,
    ) -> Result<(), EngineError> {
        let node = node_name(ctx.index, "dataset");
        let curation_cfg = serde_json::to_string(&self.config.curation).unwrap_or_default();
        let digests: Vec<&str> = ctx.yield_digests.iter().map(|d| d.as_str()).collect();
        let hash = input_hash(
            &[
                &[
                    "dataset",
                    &state.session_id,
                    &ctx.index.to_string(),
                    &curation_cfg,
                    &self.config.evaluation.probe_per_category.to_string(),
                    &ctx.seed.to_string(),
                ],
                digests.as_slice(),
            ]
            .concat(),
        );
        let prior = self.store.load_node_record(&state.session_id, &node)?;
        if let Some(record) = self.verified_record(prior.as_ref(), &hash) {
            for (rel, digest) in &record.output_paths {
                if rel.ends_with(".jsonl") {
                    ctx.dataset_jsonl =
                        Some(String::from_utf8_lossy(&self.read_rel(rel)?).into_owned());
                    ctx.dataset_rel = Some(rel.clone());
                    ctx.dataset_digest = Some(digest.clone());
                } else if rel.contains("_probes_iter") {
                    ctx.probe = Some(self.read_rel_json(rel)?);
                    ctx.probe_rel = Some(rel.clone());
                }
            }
            if ctx.dataset_jsonl.is_none() || ctx.probe.is_none() {
                return Err(EngineError::Node {
                    node,
                    message: "completed record lacks dataset or probe artifacts".into(),
                });
            }
            state.current_training_data_file = ctx.dataset_rel.clone();
            return Ok(());
        }
        let attempts = prior.as_ref().map_or(1, |r| r.attempts + 1);
        let started = self.clock.now_iso();
        match self.dataset_exec(state, ctx) {
            Ok(out) => {
                let outputs = BTreeMap::from([
                    (out.dataset_rel.clone(), out.dataset_digest.clone()),
                    (out.probe_rel.clone(), out.probe_digest),
                    (out.curation_rel, out.curation_digest),
                ]);
                state.current_training_data_file = Some(out.dataset_rel.clone());
                ctx.dataset_jsonl = Some(out.dataset);
                ctx.dataset_rel = Some(out.dataset_rel);
                ctx.dataset_digest = Some(out.dataset_digest);
                ctx.probe = Some(out.probe);
                ctx.probe_rel = Some(out.probe_rel);
                self.seal_node(state, &node, &hash, outputs, started, attempts, NodeStatus::Done)
            }
            Err(message) => Err(self.fail_node(state, &node, &hash, started, attempts, message)),
        }
    }

    fn dataset_exec(&self, state: &SessionState, ctx: &IterationCtx) -> Result<DatasetOut, String> {
        let items: Vec<QAItem> =
            ctx.yields.iter().flat_map(|y| y.items.iter().cloned()).collect();
        let curated = curate(items, &self.config.curation);
        // Small remediation batches can be smaller than the configured probe
        // draw; shrink the draw until a non-empty training split remains.
        let mut per_category = self.config.evaluation.probe_per_category;
        let (probe, training_items) = loop {
            let probe =
                build_probe_set(&curated.items, per_category, derive_seed(ctx.seed, "probe"));
            if probe.items.is_empty() {
                return Err("curation left nothing to probe".into());
            }
            let training_items = training_split(&curated.items, &probe);
            if !training_items.is_empty() {
                break (probe, training_items);
            }
            if per_category <= 1 {
                return Err("probe holdout consumed every training item".into());
            }
            per_category /= 2;
        };
        let dataset = to_chat_dataset(&training_items);
        let (dataset_path, dataset_digest) = self
            .store
            .put(
                ArtifactKind::TrainingData,
                &state.domain_slug,
                ctx.index,
                "jsonl",
                dataset.as_bytes(),
            )
            .map_err(|e| e.to_string())?;
        let probe_bytes = serde_json::to_vec_pretty(&probe).map_err(|e| e.to_string())?;
        let (probe_path, probe_digest) = self
            .store
            .put(
                ArtifactKind::Evaluations,
                &format!("{}_probes", state.domain_slug),
                ctx.index,
                "json",
                &probe_bytes,
            )
            .map_err(|e| e.to_string())?;
        let report_bytes =
            serde_json::to_vec_pretty(&curated.report).map_err(|e| e.to_string())?;
        let (curation_path, curation_digest) = self
            .store
            .put(
                ArtifactKind::Evaluations,
                &format!("{}_curation", state.domain_slug),
                ctx.index,
                "json",
                &report_bytes,
            )
            .map_err(|e| e.to_string())?;
        Ok(DatasetOut {
            dataset,
            dataset_rel: self.relative(&dataset_path),
            dataset_digest,
            probe,
            probe_rel: self.relative(&probe_path),
            probe_digest,
            curation_rel: self.relative(&curation_path),
            curation_digest,
        })
    }

    fn sft_node(
        &self,
        state: &mut SessionState,
        ctx: &mut IterationCtx,
    ) -> Result<(), EngineError> {
        let node = node_name(ctx.index, "sft");
        let hash = input_hash(&[
            "sft",
            &state.session_id,
            &ctx.index.to_string(),
            ctx.dataset_digest.as_deref().unwrap_or(""),
            &state.current_model.id,
            &self.config.training.epochs.to_string(),
            &ctx.seed.to_string(),
        ]);
        let prior = self.store.load_node_record(&state.session_id, &node)?;
        if let Some(record) = self.verified_record(prior.as_ref(), &hash) {
            let (rel, _) = record.output_paths.into_iter().next().ok_or_else(|| {
                EngineError::Node {
                    node: node.clone(),
                    message: "completed record lacks a job receipt".into(),
                }
            })?;
            let handle: JobHandle = self.read_rel_json(&rel)?;
            let model = handle.result_model.ok_or_else(|| EngineError::Artifact {
                path: rel,
                message: "job receipt carries no model".into(),
            })?;
            state.current_sft_model_id = Some(model.id.clone());
            ctx.sft_model = Some(model);
            return Ok(());
        }
        let attempts = prior.as_ref().map_or(1, |r| r.attempts + 1);
        let started = self.clock.now_iso();
        match self.sft_exec(state, ctx, &node) {
            Ok(out) => {
                let outputs = BTreeMap::from([(out.receipt_rel, out.receipt_digest)]);
                state.current_sft_model_id = Some(out.model.id.clone());
                ctx.sft_model = Some(out.model);
                self.seal_node(state, &node, &hash, outputs, started, attempts, NodeStatus::Done)
            }
            Err(message) => Err(self.fail_node(state, &node, &hash, started, attempts, message)),
        }
    }

    fn sft_exec(
        &self,
        state: &SessionState,
        ctx: &IterationCtx,
        node: &str,
    ) -> Result<ModelOut, String> {
        let dataset = ctx.dataset_jsonl.as_ref().ok_or("no dataset loaded")?;
        let suffix = format!("{}-i{}", state.domain_slug, ctx.index);
        let handle = submit_sft(
            dataset,
            &state.current_model,
            self.config.training.epochs,
            &suffix,
            derive_seed(ctx.seed, "sft"),
            &self.metering,
        )
        .map_err(|e| e.to_string())?;
        let done = self.await_job(handle)?;
        let model = done.result_model.clone().ok_or("job finished without a model id")?;
        let (receipt_rel, receipt_digest) = self.write_receipt(state, node, &done)?;
        Ok(ModelOut { model, receipt_rel, receipt_digest })
    }

    fn await_job(&self, handle: JobHandle) -> Result<JobHandle, String> {
        complete_job(
            &self.metering,
            handle,
            &*self.sleeper,
            Duration::from_millis(self.config.training.poll_interval_ms),
            self.config.training.max_polls,
        )
        .map_err(|e| e.to_string())
    }

    fn write_receipt(
        &self,
        state: &SessionState,
        node: &str,
        handle: &JobHandle,
    ) -> Result<(String, HexDigest), String> {
        let bytes = serde_json::to_vec_pretty(handle).map_err(|e| e.to_string())?;
        let rel = format!(
            "sessions/{}/receipts/{node}-{}.json",
            state.session_id,
            sanitize_component(&handle.job_id)
        );
        let digest = self
            .store
            .write_artifact(&self.store.root().join(&rel), &bytes)
            .map_err(|e| e.to_string())?;
        Ok((rel, digest))
    }

    fn evaluate_node(
        &self,
        state: &mut SessionState,
        ctx: &mut IterationCtx,
    ) -> Result<(), EngineError> {
        let node = node_name(ctx.index, "evaluate");
        let sft_id = ctx.sft_model.as_ref().map(|m| m.id.clone()).unwrap_or_default();
        let hash = input_hash(&[
            "evaluate",
            &state.session_id,
            &ctx.index.to_string(),
            ctx.probe.as_ref().map(|p| p.probe_hash.as_str()).unwrap_or(""),
            &sft_id,
            &state.current_model.id,
            &self.config.provider.judge_model,
            &self.config.evaluation.judge_attempts.to_string(),
            &ctx.seed.to_string(),
        ]);
        let prior = self.store.load_node_record(&state.session_id, &node)?;
        if let Some(record) = self.verified_record(prior.as_ref(), &hash) {
            for (rel, digest) in &record.output_paths {
                if rel.contains("_incumbent_iter") {
                    ctx.incumbent_report = Some(self.read_rel_json(rel)?);
                    ctx.incumbent_rel = Some(rel.clone());
                    ctx.incumbent_digest = Some(digest.clone());
                } else if rel.contains("_candidate_iter") {
                    ctx.pre_report = Some(self.read_rel_json(rel)?);
                    ctx.pre_rel = Some(rel.clone());
                    ctx.pre_digest = Some(digest.clone());
                }
            }
            if ctx.pre_report.is_none() || ctx.incumbent_report.is_none() {
                return Err(EngineError::Node {
                    node,
                    message: "completed record lacks evaluation reports".into(),
                });
            }
            return Ok(());
        }
        let attempts = prior.as_ref().map_or(1, |r| r.attempts + 1);
        let started = self.clock.now_iso();
        match self.evaluate_exec(state, ctx) {
            Ok(out) => {
                let outputs = BTreeMap::from([
                    (out.pre_rel.clone(), out.pre_digest.clone()),
                    (out.incumbent_rel.clone(), out.incumbent_digest.clone()),
                ]);
                ctx.pre_report = Some(out.pre);
                ctx.pre_rel = Some(out.pre_rel);
                ctx.pre_digest = Some(out.pre_digest);
                ctx.incumbent_report = Some(out.incumbent);
                ctx.incumbent_rel = Some(out.incumbent_rel);
                ctx.incumbent_digest = Some(out.incumbent_digest);
                self.seal_node(state, &node, &hash, outputs, started, attempts, NodeStatus::Done)
            }
            Err(message) => Err(self.fail_node(state, &node, &hash, started, attempts, message)),
        }
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            concurrency: self.config.budget.concurrency_cap.max(1),
            judge_attempts: self.config.evaluation.judge_attempts,
            ..EvalOptions::default()
        }
    }

    fn evaluate_exec(&self, state: &SessionState, ctx: &IterationCtx) -> Result<EvalOut, String> {
        let probe = ctx.probe.as_ref().ok_or("no probe set loaded")?;
        let sft = ctx.sft_model.as_ref().ok_or("no fine-tuned model to evaluate")?;
        let judge = &self.config.provider.judge_model;
        let options = self.eval_options();
        let pre = evaluate(
            &self.metering,
            sft,
            judge,
            probe,
            derive_seed(ctx.seed, "evaluate:candidate"),
            &options,
        )
        .map_err(|e| e.to_string())?;
        let incumbent = evaluate(
            &self.metering,
            &state.current_model,
            judge,
            probe,
            derive_seed(ctx.seed, "evaluate:incumbent"),
            &options,
        )
        .map_err(|e| e.to_string())?;
        let pre_bytes = serde_json::to_vec_pretty(&pre).map_err(|e| e.to_string())?;
        let (pre_path, pre_digest) = self
            .store
            .put(
                ArtifactKind::Evaluations,
                &format!("{}_candidate", state.domain_slug),
                ctx.index,
                "json",
                &pre_bytes,
            )
            .map_err(|e| e.to_string())?;
        let inc_bytes = serde_json::to_vec_pretty(&incumbent).map_err(|e| e.to_string())?;
        let (inc_path, incumbent_digest) = self
            .store
            .put(
                ArtifactKind::Evaluations,
                &format!("{}_incumbent", state.domain_slug),
                ctx.index,
                "json",
                &inc_bytes,
            )
            .map_err(|e| e.to_string())?;
        Ok(EvalOut {
            pre,
            pre_rel: self.relative(&pre_path),
            pre_digest,
            incumbent,
            incumbent_rel: self.relative(&inc_path),
            incumbent_digest,
        })
    }

    fn dpo_node(
        &self,
        state: &mut SessionState,
        ctx: &mut IterationCtx,
    ) -> Result<(), EngineError> {
        let node = node_name(ctx.index, "dpo");
        let pre = ctx.pre_report.clone().ok_or_else(|| EngineError::Node {
            node: node.clone(),
            message: "no candidate report loaded".into(),
        })?;
        let sft = ctx.sft_model.clone().ok_or_else(|| EngineError::Node {
            node: node.clone(),
            message: "no fine-tuned model loaded".into(),
        })?;
        let hash = input_hash(&[
            "dpo",
            &state.session_id,
            &ctx.index.to_string(),
            ctx.pre_digest.as_deref().unwrap_or(""),
            &sft.id,
            &self.config.budget.beta.to_string(),
            &self.config.budget.tau.to_string(),
            &ctx.seed.to_string(),
        ]);
        let prior = self.store.load_node_record(&state.session_id, &node)?;
        if let Some(record) = self.verified_record(prior.as_ref(), &hash) {
            if record.status == NodeStatus::Skipped {
                return Ok(());
            }
            let receipt = record
                .output_paths
                .keys()
                .find(|k| k.contains("/receipts/"))
                .cloned()
                .ok_or_else(|| EngineError::Node {
                    node: node.clone(),
                    message: "completed record lacks a job receipt".into(),
                })?;
            let handle: JobHandle = self.read_rel_json(&receipt)?;
            let model = handle.result_model.ok_or_else(|| EngineError::Artifact {
                path: receipt,
                message: "job receipt carries no model".into(),
            })?;
            state.current_dpo_model_id = Some(model.id.clone());
            ctx.dpo_model = Some(model);
            return Ok(());
        }
        let attempts = prior.as_ref().map_or(1, |r| r.attempts + 1);
        let started = self.clock.now_iso();
        let tau = self.config.budget.tau;
        let mastered = pre.overall_accuracy >= tau
            && pre.per_topic.values().all(|acc| *acc >= tau);
        if mastered {
            return self.seal_node(
                state,
                &node,
                &hash,
                BTreeMap::new(),
                started,
                attempts,
                NodeStatus::Skipped,
            );
        }
        match self.dpo_exec(state, ctx, &node, &pre, &sft) {
            Ok(Some((out, pairs))) => {
                let outputs = BTreeMap::from([
                    (out.receipt_rel, out.receipt_digest),
                    (pairs.0, pairs.1),
                ]);
                state.current_dpo_model_id = Some(out.model.id.clone());
                ctx.dpo_model = Some(out.model);
                self.seal_node(state, &node, &hash, outputs, started, attempts, NodeStatus::Done)
            }
            Ok(None) => self.seal_node(
                state,
                &node,
                &hash,
                BTreeMap::new(),
                started,
                attempts,
                NodeStatus::Skipped,
            ),
            Err(message) => Err(self.fail_node(state, &node, &hash, started, attempts, message)),
        }
    }

    /// Ok(None) means every error was a degenerate negative, leaving no
    /// usable pairs; the caller records the stage as skipped.
    fn dpo_exec(
        &self,
        state: &SessionState,
        ctx: &IterationCtx,
        node: &str,
        pre: &EvaluationReport,
        sft: &ModelRef,
    ) -> Result<Option<(ModelOut, (String, HexDigest))>, String> {
        let probe = ctx.probe.as_ref().ok_or("no probe set loaded")?;
        let by_question: BTreeMap<&str, &crate::evaluation::ProbeItem> =
            probe.items.iter().map(|p| (p.question.as_str(), p)).collect();
        let now = self.clock.now_iso();
        let mut errors = Vec::new();
        for judgment in pre.judgments.iter().filter(|j| !j.is_correct()) {
            let Some(item) = by_question.get(judgment.question.as_str()) else { continue };
            errors.push((
                QAItem {
                    question: item.question.clone(),
                    answer: item.reference_answer.clone(),
                    category: item.category,
                    difficulty: Difficulty::Medium,
                    rationale: None,
                    citations: item.citations.clone(),
                    topic_name: item.topic_name.clone(),
                    retrieved_at: now.clone(),
                },
                judgment.candidate_answer.clone(),
            ));
        }
        let pairs = match build_preference_pairs(&errors) {
            Ok(pairs) => pairs,
            Err(TrainingError::NoPairs(_)) => return Ok(None),
            Err(e) => return Err(e.to_string()),
        };
        let jsonl = serialize_preference_pairs(&pairs);
        let (pairs_path, pairs_digest) = self
            .store
            .put(
                ArtifactKind::TrainingData,
                &format!("{}_pairs", state.domain_slug),
                ctx.index,
                "jsonl",
                jsonl.as_bytes(),
            )
            .map_err(|e| e.to_string())?;
        let suffix = format!("{}-i{}", state.domain_slug, ctx.index);
        let handle = submit_dpo(
            &jsonl,
            sft,
            self.config.budget.beta,
            &suffix,
            derive_seed(ctx.seed, "dpo"),
            &self.metering,
        )
        .map_err(|e| e.to_string())?;
        let done = self.await_job(handle)?;
        let model = done.result_model.clone().ok_or("job finished without a model id")?;
        let (receipt_rel, receipt_digest) = self.write_receipt(state, node, &done)?;
        Ok(Some((
            ModelOut { model, receipt_rel, receipt_digest },
            (self.relative(&pairs_path), pairs_digest),
        )))
    }

    fn finalize_node(
        &self,
        state: &mut SessionState,
        ctx: &mut IterationCtx,
    ) -> Result<(), EngineError> {
        let node = node_name(ctx.index, "finalize");
        let hash = input_hash(&[
            "finalize",
            &state.session_id,
            &ctx.index.to_string(),
            ctx.pre_digest.as_deref().unwrap_or(""),
            ctx.incumbent_digest.as_deref().unwrap_or(""),
            ctx.dpo_model.as_ref().map(|m| m.id.as_str()).unwrap_or("none"),
            &self.config.budget.gamma.to_string(),
            &self.config.budget.rho.to_string(),
            &ctx.seed.to_string(),
        ]);
        let prior = self.store.load_node_record(&state.session_id, &node)?;
        if let Some(record) = self.verified_record(prior.as_ref(), &hash) {
            let post = record.output_paths.keys().find(|k| k.contains("_post_iter")).cloned();
            let (report, post_rel) = match post {
                Some(rel) => (self.read_rel_json::<EvaluationReport>(&rel)?, Some(rel)),
                None => (
                    ctx.pre_report.clone().ok_or_else(|| EngineError::Node {
                        node: node.clone(),
                        message: "no candidate report loaded".into(),
                    })?,
                    None,
                ),
            };
            self.apply_outcome(state, ctx, report, post_rel)
                .map_err(|message| EngineError::Node { node: node.clone(), message })?;
            self.store.write_manifest(state, &self.config, &*self.clock)?;
            self.store.save_session(state)?;
            return Ok(());
        }
        let attempts = prior.as_ref().map_or(1, |r| r.attempts + 1);
        let started = self.clock.now_iso();
        match self.finalize_exec(state, ctx) {
            Ok(out) => {
                state.spend.add(self.metering.drain());
                let mut outputs = BTreeMap::new();
                if let Some((rel, digest)) = &out.post {
                    outputs.insert(rel.clone(), digest.clone());
                }
                let post_rel = out.post.map(|(rel, _)| rel);
                if let Err(message) = self.apply_outcome(state, ctx, out.report, post_rel) {
                    return Err(self.fail_node(state, &node, &hash, started, attempts, message));
                }
                self.store.write_manifest(state, &self.config, &*self.clock)?;
                self.seal_node(state, &node, &hash, outputs, started, attempts, NodeStatus::Done)
            }
            Err(message) => Err(self.fail_node(state, &node, &hash, started, attempts, message)),
        }
    }

    fn finalize_exec(&self, state: &SessionState, ctx: &IterationCtx) -> Result<FinalOut, String> {
        match &ctx.dpo_model {
            Some(dpo) => {
                let probe = ctx.probe.as_ref().ok_or("no probe set loaded")?;
                let post = evaluate(
                    &self.metering,
                    dpo,
                    &self.config.provider.judge_model,
                    probe,
                    derive_seed(ctx.seed, "evaluate:post"),
                    &self.eval_options(),
                )
                .map_err(|e| e.to_string())?;
                let bytes = serde_json::to_vec_pretty(&post).map_err(|e| e.to_string())?;
                let (path, digest) = self
                    .store
                    .put(
                        ArtifactKind::Evaluations,
                        &format!("{}_post", state.domain_slug),
                        ctx.index,
                        "json",
                        &bytes,
                    )
                    .map_err(|e| e.to_string())?;
                Ok(FinalOut { report: post, post: Some((self.relative(&path), digest)) })
            }
            None => Ok(FinalOut {
                report: ctx.pre_report.clone().ok_or("no candidate report loaded")?,
                post: None,
            }),
        }
    }

    /// Promotion gate, learned-topic ledger, accuracy history and the
    /// iteration record. Pure given the cached reports, so skipped finalize
    /// nodes replay it without provider calls.
    fn apply_outcome(
        &self,
        state: &mut SessionState,
        ctx: &IterationCtx,
        final_report: EvaluationReport,
        post_rel: Option<String>,
    ) -> Result<(), String> {
        let budget = &self.config.budget;
        let incumbent =
            ctx.incumbent_report.as_ref().ok_or("no incumbent report loaded")?;
        if state.accuracy_history.is_empty() {
            state.accuracy_history.push(incumbent.overall_accuracy);
        }
        let guarded: Vec<String> =
            state.learned_topics.iter().map(|lt| lt.name.clone()).collect();
        let decision = promotion_gate(&final_report, incumbent, budget.gamma, budget.rho, &guarded)
            .map_err(|e| e.to_string())?;
        if decision.promote {
            state.current_model = final_report.model.clone();
        } else {
            for (name, accuracy) in &final_report.per_topic {
                if *accuracy < budget.tau {
                    let norm = normalize_topic_name(name);
                    if !state.remediation_queue.iter().any(|q| normalize_topic_name(q) == norm) {
                        state.remediation_queue.push(name.clone());
                    }
                }
            }
        }
        let adopted = if decision.promote { &final_report } else { incumbent };
        let taught = ctx.curriculum.as_ref().ok_or("no curriculum loaded")?;
        let adopted_topics: BTreeMap<String, f64> = adopted
            .per_topic
            .iter()
            .map(|(name, accuracy)| (normalize_topic_name(name), *accuracy))
            .collect();
        for topic in &taught.topics {
            let norm = normalize_topic_name(&topic.name);
            let accuracy =
                adopted_topics.get(&norm).copied().unwrap_or(adopted.overall_accuracy);
            match state
                .learned_topics
                .iter_mut()
                .find(|lt| normalize_topic_name(&lt.name) == norm)
            {
                Some(lt) => lt.accuracy = accuracy,
                None => {
                    state.learned_topics.push(LearnedTopic { name: topic.name.clone(), accuracy })
                }
            }
        }
        let mastered: BTreeSet<String> = state
            .learned_topics
            .iter()
            .filter(|lt| lt.accuracy >= budget.tau)
            .map(|lt| normalize_topic_name(&lt.name))
            .collect();
        state.remediation_queue.retain(|q| !mastered.contains(&normalize_topic_name(q)));
        state.accuracy_history.push(adopted.overall_accuracy);
        let spent_before: Spend = state.iterations.iter().fold(Spend::default(), |mut sum, it| {
            sum.add(it.spend);
            sum
        });
        let record = IterationRecord {
            index: ctx.index,
            curriculum_path: ctx.curriculum_rel.clone().ok_or("curriculum path missing")?,
            dataset_path: ctx.dataset_rel.clone().ok_or("dataset path missing")?,
            probe_path: ctx.probe_rel.clone().ok_or("probe path missing")?,
            sft_model: ctx.sft_model.clone(),
            dpo_model: ctx.dpo_model.clone(),
            incumbent_report_path: ctx
                .incumbent_rel
                .clone()
                .ok_or("incumbent report path missing")?,
            pre_dpo_report_path: ctx.pre_rel.clone().ok_or("candidate report path missing")?,
            post_dpo_report_path: post_rel,
            promoted: decision.promote,
            final_accuracy: adopted.overall_accuracy,
            spend: Spend {
                tokens: state.spend.tokens.saturating_sub(spent_before.tokens),
                cost: (state.spend.cost - spent_before.cost).max(0.0),
            },
        };
        state.iterations.push(record);
        state.iteration_index += 1;
        Ok(())
    }
}

/// Human-readable session summary with one accuracy line per iteration and
/// the per-topic breakdown from each adopted report.
pub fn render_session_report(store: &Store, state: &SessionState) -> Result<String, EngineError> {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "session {}", state.session_id);
    let _ = writeln!(out, "domain: {}", state.domain);
    let _ = writeln!(out, "status: {:?}", state.status);
    let _ = writeln!(out, "model: {}", state.current_model.id);
    let _ = writeln!(out, "spend: {} tokens (${:.4})", state.spend.tokens, state.spend.cost);
    if let Some(baseline) = state.accuracy_history.first() {
        let _ = writeln!(out, "baseline accuracy: {baseline:.3}");
    }
    for it in &state.iterations {
        let _ = writeln!(out);
        let sft = it.sft_model.as_ref().map(|m| m.id.as_str()).unwrap_or("-");
        let dpo = it.dpo_model.as_ref().map(|m| m.id.as_str()).unwrap_or("-");
        let _ = writeln!(
            out,
            "iteration {}: accuracy {:.3}, promoted {}, sft {sft}, dpo {dpo}",
            it.index,
            it.final_accuracy,
            if it.promoted { "yes" } else { "no" },
        );
        let path = store.root().join(adopted_report_path(it));
        let bytes = std::fs::read(&path)
            .map_err(|source| StorageError::Io { path: path.clone(), source })?;
        let report: EvaluationReport = serde_json::from_slice(&bytes).map_err(|e| {
            EngineError::Artifact { path: path.display().to_string(), message: e.to_string() }
        })?;
        for (topic, accuracy) in &report.per_topic {
            let _ = writeln!(out, "  {topic}: {accuracy:.3}");
        }
    }
    Ok(out)
}

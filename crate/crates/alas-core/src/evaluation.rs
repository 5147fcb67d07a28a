//! Probe construction, LLM-judge grading, aggregation, convergence and
//! promotion decisions.

use crate::concurrency::map_capped;
use crate::model::{content_hash, derive_seed, normalize_topic_name, Category, ModelRef, QAItem};
use crate::prompts::{self, PromptError};
use crate::provider::{ChatRequest, Provider, ProviderError, Purpose};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("judge reply unparsable after {attempts} attempts: {last}")]
    JudgeParseFailure { attempts: u32, last: String },
    #[error("probe set mismatch: candidate graded on {candidate}, incumbent on {incumbent}")]
    ProbeMismatch { candidate: String, incumbent: String },
    #[error("empty probe set")]
    EmptyProbeSet,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// A held-out question with its trusted reference answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub question: String,
    pub reference_answer: String,
    pub category: Category,
    pub topic_name: String,
    pub citations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub items: Vec<ProbeItem>,
    /// Hash of the canonicalized items; promotion comparisons require equal
    /// hashes on both sides.
    pub probe_hash: String,
}

/// Samples up to `per_category` items from each category present,
/// deterministically under `seed`. Items keep a canonical order so the hash
/// identifies the selected set, not the sampling order. When the draw would
/// swallow every item, the last selection (canonical order) is released back
/// to the training split; a probe set that holds out the whole dataset
/// leaves nothing to train on.
pub fn build_probe_set(items: &[QAItem], per_category: usize, seed: u64) -> ProbeSet {
    let mut by_category: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_category.entry(item.category).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe_sample"));
    let mut selected = Vec::new();
    for (_, mut indices) in by_category {
        indices.shuffle(&mut rng);
        indices.truncate(per_category);
        for i in indices {
            let item = &items[i];
            selected.push(ProbeItem {
                question: item.question.clone(),
                reference_answer: item.answer.clone(),
                category: item.category,
                topic_name: item.topic_name.clone(),
                citations: item.citations.clone(),
            });
        }
    }
    selected.sort_by(|a, b| {
        (a.category, &a.topic_name, &a.question).cmp(&(b.category, &b.topic_name, &b.question))
    });
    if selected.len() == items.len() && selected.len() > 1 {
        selected.pop();
    }
    let canonical = serde_json::to_vec(&selected).expect("probe items serialize");
    ProbeSet { items: selected, probe_hash: content_hash(&canonical) }
}

/// The prompt shown to the evaluated model: the bare question, deliberately
/// unlike the `Question: ... Answer:` shape used in training data, so probes
/// never string-match a training prompt.
pub fn probe_prompt(item: &ProbeItem) -> String {
    item.question.clone()
}

/// Drops every probe question from the candidate training items.
pub fn training_split(items: &[QAItem], probe: &ProbeSet) -> Vec<QAItem> {
    let held: BTreeSet<&str> = probe.items.iter().map(|p| p.question.as_str()).collect();
    items.iter().filter(|i| !held.contains(i.question.as_str())).cloned().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeLabel {
    Correct,
    Incorrect,
    Partial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    Omission,
    WrongVersion,
    Misinterpretation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub label: JudgeLabel,
    pub error_type: Option<ErrorType>,
    pub rationale: String,
    /// Which side of the prompt held the trusted reference, "A" or "B".
    pub reference_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub question: String,
    pub topic_name: String,
    pub category: Category,
    pub candidate_answer: String,
    pub label: JudgeLabel,
    pub error_type: Option<ErrorType>,
    pub rationale: String,
    pub reference_label: String,
}

impl Judgment {
    pub fn is_correct(&self) -> bool {
        self.label == JudgeLabel::Correct
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall_accuracy: f64,
    pub per_topic: BTreeMap<String, f64>,
    pub per_category: BTreeMap<Category, f64>,
    pub confusion: BTreeMap<ErrorType, usize>,
    pub judgments: Vec<Judgment>,
    pub model: ModelRef,
    pub probe_hash: String,
}

#[derive(Deserialize)]
struct JudgeRaw {
    label: JudgeLabel,
    #[serde(default)]
    error_type: Option<ErrorType>,
    #[serde(default)]
    rationale: Option<String>,
}

fn parse_judge_reply(raw: &str) -> Result<JudgeRaw, String> {
    let candidate = match serde_json::from_str::<JudgeRaw>(raw.trim()) {
        Ok(v) => Ok(v),
        Err(_) => {
            let start = raw.find('{').ok_or("no JSON object in reply")?;
            let end = raw.rfind('}').ok_or("unterminated JSON object")?;
            if end <= start {
                return Err("unterminated JSON object".into());
            }
            serde_json::from_str::<JudgeRaw>(&raw[start..=end]).map_err(|e| e.to_string())
        }
    }?;
    match (candidate.label, &candidate.error_type) {
        (JudgeLabel::Correct, Some(_)) => Err("error_type must be null for a correct label".into()),
        (JudgeLabel::Incorrect | JudgeLabel::Partial, None) => {
            Err("error_type required for a non-correct label".into())
        }
        _ => Ok(candidate),
    }
}

/// Grades `candidate_answer` against `reference_answer`. The reference is
/// placed on side A or B at random under `seed` so the judge cannot learn a
/// positional shortcut. Unparsable replies are re-asked up to `max_attempts`
/// total times.
pub fn judge(
    provider: &dyn Provider,
    judge_model: &str,
    question: &str,
    reference_answer: &str,
    candidate_answer: &str,
    seed: u64,
    max_attempts: u32,
) -> Result<JudgeVerdict, EvalError> {
    let reference_is_a = ChaCha8Rng::seed_from_u64(derive_seed(seed, "side")).random::<bool>();
    let (label, answer_a, answer_b) = if reference_is_a {
        ("A", reference_answer, candidate_answer)
    } else {
        ("B", candidate_answer, reference_answer)
    };
    let prompt = prompts::fill(
        prompts::JUDGE_TEMPLATE,
        &[
            ("REFERENCE_LABEL", label.to_string()),
            ("QUESTION", question.to_string()),
            ("ANSWER_A", answer_a.to_string()),
            ("ANSWER_B", answer_b.to_string()),
        ],
    )?;
    let attempts = max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        let response = provider.chat(&ChatRequest {
            purpose: Purpose::Judge,
            model: judge_model.to_string(),
            system: None,
            user: prompt.clone(),
            seed: derive_seed(seed, &format!("judge_attempt:{attempt}")),
            max_output_tokens: 512,
        })?;
        match parse_judge_reply(&response.text) {
            Ok(raw) => {
                return Ok(JudgeVerdict {
                    label: raw.label,
                    error_type: raw.error_type,
                    rationale: raw.rationale.unwrap_or_default(),
                    reference_label: label.to_string(),
                })
            }
            Err(reason) => last = format!("{reason}; reply: {}", response.text),
        }
    }
    Err(EvalError::JudgeParseFailure { attempts, last })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub concurrency: usize,
    pub judge_attempts: u32,
    pub answer_max_tokens: u32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { concurrency: 50, judge_attempts: 3, answer_max_tokens: 512 }
    }
}

/// Asks `answer_model` every probe question, grades each reply with the
/// judge, and aggregates into a report tied to the probe hash.
pub fn evaluate(
    provider: &dyn Provider,
    answer_model: &ModelRef,
    judge_model: &str,
    probe: &ProbeSet,
    seed: u64,
    options: &EvalOptions,
) -> Result<EvaluationReport, EvalError> {
    if probe.items.is_empty() {
        return Err(EvalError::EmptyProbeSet);
    }
    let results = map_capped(&probe.items, options.concurrency, |i, item| -> Result<Judgment, EvalError> {
        let answer = provider.chat(&ChatRequest {
            purpose: Purpose::Answer,
            model: answer_model.id.clone(),
            system: None,
            user: probe_prompt(item),
            seed: derive_seed(seed, &format!("answer:{i}")),
            max_output_tokens: options.answer_max_tokens,
        })?;
        let verdict = judge(
            provider,
            judge_model,
            &item.question,
            &item.reference_answer,
            &answer.text,
            derive_seed(seed, &format!("judge:{i}")),
            options.judge_attempts,
        )?;
        Ok(Judgment {
            question: item.question.clone(),
            topic_name: item.topic_name.clone(),
            category: item.category,
            candidate_answer: answer.text,
            label: verdict.label,
            error_type: verdict.error_type,
            rationale: verdict.rationale,
            reference_label: verdict.reference_label,
        })
    });
    let mut judgments = Vec::with_capacity(results.len());
    for result in results {
        judgments.push(result?);
    }
    Ok(build_report(judgments, answer_model.clone(), probe.probe_hash.clone()))
}

/// Exact-fraction accuracies per bucket plus error-type counts.
pub fn build_report(
    judgments: Vec<Judgment>,
    model: ModelRef,
    probe_hash: String,
) -> EvaluationReport {
    let mut topic_totals: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut category_totals: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    let mut confusion: BTreeMap<ErrorType, usize> = BTreeMap::new();
    let mut correct = 0usize;
    for j in &judgments {
        let t = topic_totals.entry(j.topic_name.clone()).or_default();
        let c = category_totals.entry(j.category).or_default();
        t.1 += 1;
        c.1 += 1;
        if j.is_correct() {
            correct += 1;
            t.0 += 1;
            c.0 += 1;
        } else if let Some(e) = j.error_type {
            *confusion.entry(e).or_default() += 1;
        }
    }
    let frac = |(hits, total): (usize, usize)| hits as f64 / total as f64;
    EvaluationReport {
        overall_accuracy: if judgments.is_empty() { 0.0 } else { correct as f64 / judgments.len() as f64 },
        per_topic: topic_totals.into_iter().map(|(k, v)| (k, frac(v))).collect(),
        per_category: category_totals.into_iter().map(|(k, v)| (k, frac(v))).collect(),
        confusion,
        judgments,
        model,
        probe_hash,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvergenceDecision {
    Continue { reason: String },
    Stop { reason: String },
}

impl ConvergenceDecision {
    pub fn should_stop(&self) -> bool {
        matches!(self, ConvergenceDecision::Stop { .. })
    }
}

/// The loop keeps going while overall accuracy still improves by more than
/// `delta`, or while any probed topic sits below `tau`.
pub fn check_convergence(
    accuracy_history: &[f64],
    per_topic: &BTreeMap<String, f64>,
    delta: f64,
    tau: f64,
) -> ConvergenceDecision {
    if let Some((topic, acc)) =
        per_topic.iter().find(|(_, acc)| **acc < tau).map(|(t, a)| (t.clone(), *a))
    {
        return ConvergenceDecision::Continue {
            reason: format!("topic {topic:?} at {acc:.3} is below tau {tau:.2}"),
        };
    }
    let n = accuracy_history.len();
    if n < 2 {
        return ConvergenceDecision::Continue { reason: "fewer than two evaluations".into() };
    }
    let improvement = accuracy_history[n - 1] - accuracy_history[n - 2];
    if improvement > delta {
        ConvergenceDecision::Continue {
            reason: format!("accuracy still improving by {improvement:.4} > delta {delta}"),
        }
    } else {
        ConvergenceDecision::Stop {
            reason: format!(
                "improvement {improvement:.4} within delta {delta} and all topics at or above tau"
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromotionDecision {
    pub promote: bool,
    pub delta_overall: f64,
    /// Largest guarded-topic accuracy drop, if any guarded topic regressed.
    pub worst_regression: Option<(String, f64)>,
    pub reason: String,
}

/// Promote the candidate only when overall accuracy gains at least `gamma`
/// and no guarded topic loses more than `rho`. Both reports must grade the
/// same probe set.
pub fn promotion_gate(
    candidate: &EvaluationReport,
    incumbent: &EvaluationReport,
    gamma: f64,
    rho: f64,
    guarded: &[String],
) -> Result<PromotionDecision, EvalError> {
    if candidate.probe_hash != incumbent.probe_hash {
        return Err(EvalError::ProbeMismatch {
            candidate: candidate.probe_hash.clone(),
            incumbent: incumbent.probe_hash.clone(),
        });
    }
    let delta_overall = candidate.overall_accuracy - incumbent.overall_accuracy;
    let lookup = |report: &EvaluationReport, name: &str| -> Option<f64> {
        let norm = normalize_topic_name(name);
        report
            .per_topic
            .iter()
            .find(|(k, _)| normalize_topic_name(k) == norm)
            .map(|(_, v)| *v)
    };
    let mut worst_regression: Option<(String, f64)> = None;
    for name in guarded {
        let (Some(before), Some(after)) = (lookup(incumbent, name), lookup(candidate, name)) else {
            continue;
        };
        let regression = before - after;
        if regression > 0.0
            && worst_regression.as_ref().map_or(true, |(_, w)| regression > *w)
        {
            worst_regression = Some((name.clone(), regression));
        }
    }
    let blocked = worst_regression.as_ref().map_or(false, |(_, w)| *w > rho);
    let gained = delta_overall >= gamma;
    let promote = gained && !blocked;
    let reason = if promote {
        format!("overall gained {delta_overall:.4} >= gamma {gamma} with no guarded regression beyond rho {rho}")
    } else if !gained {
        format!("overall change {delta_overall:.4} below gamma {gamma}")
    } else {
        let (topic, drop) = worst_regression.clone().expect("blocked implies a regression");
        format!("guarded topic {topic:?} regressed by {drop:.4} > rho {rho}")
    };
    Ok(PromotionDecision { promote, delta_overall, worst_regression, reason })
}

/// Deterministic sample of judgments for human audit; size is
/// `ceil(fraction * n)` for a non-empty report.
pub fn calibration_sample(report: &EvaluationReport, fraction: f64, seed: u64) -> Vec<Judgment> {
    let n = report.judgments.len();
    if n == 0 || fraction <= 0.0 {
        return Vec::new();
    }
    let take = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "calibration")));
    indices.truncate(take);
    indices.sort_unstable();
    indices.into_iter().map(|i| report.judgments[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Difficulty;
    use crate::provider::{ChatResponse, FineTuneRequest, JobStatus, Usage};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn qa(question: &str, answer: &str, category: Category, topic: &str) -> QAItem {
        QAItem {
            question: question.into(),
            answer: answer.into(),
            category,
            difficulty: Difficulty::Easy,
            rationale: None,
            citations: vec!["https://example.com/a".into()],
            topic_name: topic.into(),
            retrieved_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    fn corpus() -> Vec<QAItem> {
        let mut items = Vec::new();
        for i in 0..30 {
            items.push(qa(&format!("f{i}?"), &format!("fa{i}"), Category::Factual, "t1"));
            items.push(qa(&format!("c{i}?"), &format!("ca{i}"), Category::Conceptual, "t2"));
        }
        items
    }

    #[test]
    fn probe_sampling_is_deterministic_per_seed() {
        let items = corpus();
        let a = build_probe_set(&items, 10, 7);
        let b = build_probe_set(&items, 10, 7);
        assert_eq!(a, b);
        let c = build_probe_set(&items, 10, 8);
        assert_ne!(a.probe_hash, c.probe_hash);
    }

    #[test]
    fn probe_takes_at_most_per_category() {
        let probe = build_probe_set(&corpus(), 10, 7);
        assert_eq!(probe.items.len(), 20);
        let factual =
            probe.items.iter().filter(|p| p.category == Category::Factual).count();
        assert_eq!(factual, 10);
    }

    #[test]
    fn probe_handles_small_categories() {
        let items = vec![qa("only?", "one", Category::Analysis, "t")];
        let probe = build_probe_set(&items, 10, 7);
        assert_eq!(probe.items.len(), 1);
    }

    #[test]
    fn training_split_removes_exactly_the_probe_questions() {
        let items = corpus();
        let probe = build_probe_set(&items, 10, 7);
        let train = training_split(&items, &probe);
        assert_eq!(train.len(), items.len() - probe.items.len());
        let held: BTreeSet<&str> = probe.items.iter().map(|p| p.question.as_str()).collect();
        assert!(train.iter().all(|t| !held.contains(t.question.as_str())));
    }

    #[test]
    fn probe_prompt_is_the_bare_question() {
        let probe = build_probe_set(&corpus(), 1, 7);
        let item = &probe.items[0];
        assert_eq!(probe_prompt(item), item.question);
        assert!(!probe_prompt(item).starts_with("Question:"));
    }

    struct ScriptedJudge {
        replies: Vec<String>,
        calls: AtomicU32,
    }

    impl Provider for ScriptedJudge {
        fn chat(&self, _request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
            let text = self.replies[i.min(self.replies.len() - 1)].clone();
            Ok(ChatResponse { text, usage: Usage { tokens_in: 10, tokens_out: 10 } })
        }
        fn submit_fine_tune(&self, _r: &FineTuneRequest) -> Result<String, ProviderError> {
            unreachable!()
        }
        fn poll_job(&self, _j: &str) -> Result<JobStatus, ProviderError> {
            unreachable!()
        }
    }

    #[test]
    fn judge_parses_a_strict_reply() {
        let provider = ScriptedJudge {
            replies: vec![r#"{"label": "correct", "error_type": null, "rationale": "match"}"#.into()],
            calls: AtomicU32::new(0),
        };
        let verdict = judge(&provider, "judge", "q?", "ref", "ref", 1, 3).unwrap();
        assert_eq!(verdict.label, JudgeLabel::Correct);
        assert_eq!(verdict.error_type, None);
    }

    #[test]
    fn judge_retries_garbage_then_succeeds() {
        let provider = ScriptedJudge {
            replies: vec![
                "not json at all".into(),
                r#"{"label": "incorrect", "error_type": "omission", "rationale": "empty"}"#.into(),
            ],
            calls: AtomicU32::new(0),
        };
        let verdict = judge(&provider, "judge", "q?", "ref", "", 1, 3).unwrap();
        assert_eq!(verdict.label, JudgeLabel::Incorrect);
        assert_eq!(verdict.error_type, Some(ErrorType::Omission));
        assert_eq!(provider.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn judge_gives_up_after_bounded_attempts() {
        let provider =
            ScriptedJudge { replies: vec!["garbage".into()], calls: AtomicU32::new(0) };
        match judge(&provider, "judge", "q?", "ref", "x", 1, 3) {
            Err(EvalError::JudgeParseFailure { attempts: 3, .. }) => {}
            other => panic!("expected JudgeParseFailure, got {other:?}"),
        }
        assert_eq!(provider.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn judge_rejects_correct_label_with_error_type() {
        let provider = ScriptedJudge {
            replies: vec![r#"{"label": "correct", "error_type": "omission", "rationale": ""}"#.into()],
            calls: AtomicU32::new(0),
        };
        assert!(judge(&provider, "judge", "q?", "ref", "ref", 1, 1).is_err());
    }

    struct SideRecorder {
        last_prompt: std::sync::Mutex<String>,
    }

    impl Provider for SideRecorder {
        fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            *self.last_prompt.lock().unwrap() = request.user.clone();
            Ok(ChatResponse {
                text: r#"{"label": "correct", "error_type": null, "rationale": ""}"#.into(),
                usage: Usage::default(),
            })
        }
        fn submit_fine_tune(&self, _r: &FineTuneRequest) -> Result<String, ProviderError> {
            unreachable!()
        }
        fn poll_job(&self, _j: &str) -> Result<JobStatus, ProviderError> {
            unreachable!()
        }
    }

    #[test]
    fn judge_randomizes_reference_side_but_keeps_prompt_consistent() {
        let provider = SideRecorder { last_prompt: std::sync::Mutex::new(String::new()) };
        let mut sides = BTreeSet::new();
        for seed in 0..64 {
            let verdict =
                judge(&provider, "judge", "q?", "REFANSWER", "CANDANSWER", seed, 1).unwrap();
            let prompt = provider.last_prompt.lock().unwrap().clone();
            let expected_line = if verdict.reference_label == "A" {
                ("Answer A: REFANSWER", "Answer B: CANDANSWER")
            } else {
                ("Answer A: CANDANSWER", "Answer B: REFANSWER")
            };
            assert!(prompt.contains(expected_line.0), "prompt: {prompt}");
            assert!(prompt.contains(expected_line.1));
            assert!(prompt
                .contains(&format!("trusted reference: Answer {}", verdict.reference_label)));
            sides.insert(verdict.reference_label.clone());
        }
        assert_eq!(sides.len(), 2, "both sides should appear across seeds");
    }

    fn judgment(topic: &str, category: Category, label: JudgeLabel, error: Option<ErrorType>) -> Judgment {
        Judgment {
            question: "q".into(),
            topic_name: topic.into(),
            category,
            candidate_answer: "a".into(),
            label,
            error_type: error,
            rationale: String::new(),
            reference_label: "A".into(),
        }
    }

    #[test]
    fn report_computes_exact_fractions() {
        let judgments = vec![
            judgment("t1", Category::Factual, JudgeLabel::Correct, None),
            judgment("t1", Category::Factual, JudgeLabel::Incorrect, Some(ErrorType::Omission)),
            judgment("t2", Category::Conceptual, JudgeLabel::Correct, None),
            judgment("t2", Category::Conceptual, JudgeLabel::Partial, Some(ErrorType::WrongVersion)),
        ];
        let report = build_report(judgments, ModelRef::base("m"), "h".repeat(64));
        assert_eq!(report.overall_accuracy, 0.5);
        assert_eq!(report.per_topic["t1"], 0.5);
        assert_eq!(report.per_topic["t2"], 0.5);
        assert_eq!(report.per_category[&Category::Factual], 0.5);
        assert_eq!(report.confusion[&ErrorType::Omission], 1);
        assert_eq!(report.confusion[&ErrorType::WrongVersion], 1);
    }

    #[test]
    fn report_round_trips_through_serde() {
        let report = build_report(
            vec![judgment("t", Category::Factual, JudgeLabel::Correct, None)],
            ModelRef::base("m"),
            "h".repeat(64),
        );
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<EvaluationReport>(&json).unwrap(), report);
    }

    #[test]
    fn convergence_continues_while_improving() {
        let d = check_convergence(&[0.15, 0.80], &BTreeMap::new(), 0.01, 0.90);
        assert!(!d.should_stop());
    }

    #[test]
    fn convergence_stops_on_plateau() {
        let d = check_convergence(&[0.15, 0.80, 0.805], &BTreeMap::new(), 0.01, 0.90);
        assert!(d.should_stop());
    }

    #[test]
    fn weak_topic_forces_continuation_despite_plateau() {
        let per_topic: BTreeMap<String, f64> = [("t".to_string(), 0.5)].into_iter().collect();
        let d = check_convergence(&[0.80, 0.805], &per_topic, 0.01, 0.90);
        assert!(!d.should_stop());
    }

    #[test]
    fn single_evaluation_never_stops() {
        let d = check_convergence(&[0.95], &BTreeMap::new(), 0.01, 0.90);
        assert!(!d.should_stop());
    }

    fn report_with(overall_shift: f64, topics: &[(&str, f64)], hash: &str) -> EvaluationReport {
        EvaluationReport {
            overall_accuracy: 0.5 + overall_shift,
            per_topic: topics.iter().map(|(n, a)| (n.to_string(), *a)).collect(),
            per_category: BTreeMap::new(),
            confusion: BTreeMap::new(),
            judgments: vec![],
            model: ModelRef::base("m"),
            probe_hash: hash.into(),
        }
    }

    #[test]
    fn promotion_rejects_mismatched_probe_sets() {
        let a = report_with(0.1, &[], &"a".repeat(64));
        let b = report_with(0.0, &[], &"b".repeat(64));
        assert!(matches!(
            promotion_gate(&a, &b, 0.01, 0.05, &[]),
            Err(EvalError::ProbeMismatch { .. })
        ));
    }

    #[test]
    fn promotion_requires_gamma_gain() {
        let hash = "c".repeat(64);
        let incumbent = report_with(0.0, &[], &hash);
        let candidate = report_with(0.005, &[], &hash);
        let decision = promotion_gate(&candidate, &incumbent, 0.01, 0.05, &[]).unwrap();
        assert!(!decision.promote);
        let candidate = report_with(0.02, &[], &hash);
        assert!(promotion_gate(&candidate, &incumbent, 0.01, 0.05, &[]).unwrap().promote);
    }

    #[test]
    fn promotion_blocks_on_guarded_regression() {
        let hash = "d".repeat(64);
        let incumbent = report_with(0.0, &[("g", 0.95)], &hash);
        let candidate = report_with(0.2, &[("g", 0.80)], &hash);
        let decision =
            promotion_gate(&candidate, &incumbent, 0.01, 0.05, &["g".into()]).unwrap();
        assert!(!decision.promote);
        let (topic, drop) = decision.worst_regression.unwrap();
        assert_eq!(topic, "g");
        assert!((drop - 0.15).abs() < 1e-12);
    }

    #[test]
    fn promotion_tolerates_small_guarded_dip() {
        let hash = "e".repeat(64);
        let incumbent = report_with(0.0, &[("g", 0.95)], &hash);
        let candidate = report_with(0.05, &[("g", 0.92)], &hash);
        assert!(promotion_gate(&candidate, &incumbent, 0.01, 0.05, &["g".into()])
            .unwrap()
            .promote);
    }

    #[test]
    fn calibration_sample_is_five_percent_rounded_up() {
        let judgments: Vec<Judgment> = (0..100)
            .map(|i| {
                let mut j = judgment("t", Category::Factual, JudgeLabel::Correct, None);
                j.question = format!("q{i}");
                j
            })
            .collect();
        let report = build_report(judgments, ModelRef::base("m"), "h".repeat(64));
        let sample = calibration_sample(&report, 0.05, 9);
        assert_eq!(sample.len(), 5);
        assert_eq!(sample, calibration_sample(&report, 0.05, 9));
        for s in &sample {
            assert!(report.judgments.contains(s));
        }
    }

    struct EchoWorld;

    impl Provider for EchoWorld {
        fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            let text = match request.purpose {
                Purpose::Answer => match request.user.as_str() {
                    "q1?" => "right1".to_string(),
                    "q2?" => "wrong".to_string(),
                    other => format!("echo {other}"),
                },
                Purpose::Judge => {
                    let line = |prefix: &str| {
                        request
                            .user
                            .lines()
                            .find_map(|l| l.strip_prefix(prefix))
                            .unwrap_or_default()
                            .to_string()
                    };
                    let a = line("Answer A: ");
                    let b = line("Answer B: ");
                    if a == b {
                        r#"{"label": "correct", "error_type": null, "rationale": "equal"}"#.into()
                    } else {
                        r#"{"label": "incorrect", "error_type": "misinterpretation", "rationale": "differs"}"#.into()
                    }
                }
                _ => unreachable!(),
            };
            Ok(ChatResponse { text, usage: Usage { tokens_in: 5, tokens_out: 5 } })
        }
        fn submit_fine_tune(&self, _r: &FineTuneRequest) -> Result<String, ProviderError> {
            unreachable!()
        }
        fn poll_job(&self, _j: &str) -> Result<JobStatus, ProviderError> {
            unreachable!()
        }
    }

    #[test]
    fn evaluate_grades_each_probe_and_aggregates() {
        let items = vec![
            qa("q1?", "right1", Category::Factual, "t1"),
            qa("q2?", "right2", Category::Factual, "t2"),
            qa("q3?", "right3", Category::Synthesis, "t3"),
        ];
        let probe = build_probe_set(&items, 5, 3);
        let report = evaluate(
            &EchoWorld,
            &ModelRef::base("sim:base"),
            "judge",
            &probe,
            3,
            &EvalOptions { concurrency: 2, ..EvalOptions::default() },
        )
        .unwrap();
        assert_eq!(report.judgments.len(), 2);
        assert_eq!(report.overall_accuracy, 0.5);
        assert_eq!(report.per_topic["t1"], 1.0);
        assert_eq!(report.per_topic["t2"], 0.0);
        assert_eq!(report.probe_hash, probe.probe_hash);
    }

    #[test]
    fn evaluate_rejects_empty_probe() {
        let probe = ProbeSet { items: vec![], probe_hash: "x".into() };
        assert!(matches!(
            evaluate(&EchoWorld, &ModelRef::base("m"), "j", &probe, 0, &EvalOptions::default()),
            Err(EvalError::EmptyProbeSet)
        ));
    }
}

//! Training-data serialization, preference-pair construction, the DPO
//! objective, and fine-tune job submission with warm-start lineage.

use crate::model::{
    Category, Message, ModelKind, ModelRef, PreferencePair, Provenance, QAItem, Role,
};
use crate::provider::{
    FineTuneRequest, JobKind, JobState, Provider, ProviderError,
};
use crate::clock::Sleeper;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Duration;
use thiserror::Error;

pub const MIN_PAIRS: usize = 10;
pub const EPOCH_RANGE: std::ops::RangeInclusive<u32> = 1..=3;
pub const BETA_RANGE: (f64, f64) = (0.1, 0.5);

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("no usable preference pairs: {0}")]
    NoPairs(String),
    #[error("epochs {0} outside the allowed range 1..=3")]
    EpochsOutOfRange(u32),
    #[error("beta {0} outside the allowed range [0.1, 0.5]")]
    BetaOutOfRange(f64),
    #[error("DPO jobs must start from an SFT model, got kind {0:?}")]
    LineageViolation(ModelKind),
    #[error("job rejected before submission: {0}")]
    ProviderRejected(String),
    #[error("dataset line {line}: {reason}")]
    MalformedDataset { line: usize, reason: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// One line of the SFT dataset, in the provider's published record shape
/// plus provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
    pub provenance: Provenance,
}

pub fn training_prompt(question: &str) -> String {
    format!("Question: {question}\nAnswer:")
}

/// Serializes curated items as line-delimited records, one per item, in
/// input order. Byte-stable for identical input.
pub fn to_chat_dataset(items: &[QAItem]) -> String {
    let mut out = String::new();
    for item in items {
        let record = SftRecord {
            prompt: training_prompt(&item.question),
            completion: item.answer.clone(),
            provenance: Provenance {
                source_urls: item.citations.clone(),
                retrieved_at: item.retrieved_at.clone(),
                category: item.category,
            },
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_sft_dataset(dataset: &str) -> Result<Vec<SftRecord>, TrainingError> {
    dataset
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| TrainingError::MalformedDataset { line: i + 1, reason: e.to_string() })
        })
        .collect()
}

fn is_degenerate_negative(item: &QAItem, model_answer: &str) -> Option<&'static str> {
    let trimmed = model_answer.trim();
    if trimmed.is_empty() {
        return Some("empty model answer");
    }
    if trimmed.split_whitespace().count() < 3 {
        return Some("model answer shorter than three tokens");
    }
    if trimmed == item.question.trim() {
        return Some("model answer echoes the question");
    }
    if trimmed == item.answer.trim() {
        return Some("model answer equals the reference");
    }
    None
}

fn pair_from(item: &QAItem, model_answer: &str, prompt_suffix: &str) -> PreferencePair {
    PreferencePair {
        prompt_messages: vec![Message {
            role: Role::User,
            content: format!("{}{prompt_suffix}", item.question),
        }],
        preferred: item.answer.clone(),
        non_preferred: model_answer.to_string(),
        category: item.category,
    }
}

/// Builds DPO pairs from judged errors. Degenerate negatives are dropped,
/// the survivors are interleaved round-robin across categories, and if fewer
/// than `MIN_PAIRS` remain the originals are cycled with whitespace-suffixed
/// prompt variants until the floor is met.
pub fn build_preference_pairs(
    errors: &[(QAItem, String)],
) -> Result<Vec<PreferencePair>, TrainingError> {
    if errors.is_empty() {
        return Err(TrainingError::NoPairs("no errors to pair".into()));
    }
    let mut by_category: BTreeMap<Category, Vec<PreferencePair>> = BTreeMap::new();
    let mut genuine = 0usize;
    for (item, model_answer) in errors {
        if is_degenerate_negative(item, model_answer).is_some() {
            continue;
        }
        genuine += 1;
        by_category.entry(item.category).or_default().push(pair_from(item, model_answer, ""));
    }
    if genuine == 0 {
        return Err(TrainingError::NoPairs("every error was degenerate".into()));
    }

    let mut queues: Vec<std::collections::VecDeque<PreferencePair>> =
        by_category.into_values().map(Into::into).collect();
    let mut pairs = Vec::with_capacity(genuine.max(MIN_PAIRS));
    while pairs.len() < genuine {
        for queue in &mut queues {
            if let Some(pair) = queue.pop_front() {
                pairs.push(pair);
            }
        }
    }

    let originals: Vec<PreferencePair> = pairs.clone();
    let mut round = 1usize;
    'pad: while pairs.len() < MIN_PAIRS {
        for original in &originals {
            if pairs.len() >= MIN_PAIRS {
                break 'pad;
            }
            let mut variant = original.clone();
            let suffix = " ".repeat(round);
            variant.prompt_messages[0].content =
                format!("{}{suffix}", original.prompt_messages[0].content);
            pairs.push(variant);
        }
        round += 1;
    }

    for pair in &pairs {
        pair.validate().map_err(|e| TrainingError::NoPairs(e.to_string()))?;
    }
    Ok(pairs)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// The per-pair DPO objective `-ln sigmoid(beta * delta)` with
/// `delta = logp_pos - logp_neg`, optionally per-token length-normalized.
pub fn dpo_loss(
    logp_pos: f64,
    logp_neg: f64,
    beta: f64,
    length_normalize: bool,
    len_pos: usize,
    len_neg: usize,
) -> f64 {
    let (lp_pos, lp_neg) = if length_normalize {
        (logp_pos / len_pos as f64, logp_neg / len_neg as f64)
    } else {
        (logp_pos, logp_neg)
    };
    let delta = lp_pos - lp_neg;
    softplus(-beta * delta)
}

#[derive(Serialize, Deserialize, PartialEq, Debug, Clone)]
struct PairInput {
    messages: Vec<Message>,
}

/// The provider's preference-record shape, with the pair's category carried
/// alongside so datasets round-trip without loss.
#[derive(Serialize, Deserialize, PartialEq, Debug, Clone)]
pub struct PairRecord {
    input: PairInput,
    preferred_output: Vec<Message>,
    non_preferred_output: Vec<Message>,
    category: Category,
}

pub fn serialize_preference_pairs(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for pair in pairs {
        let record = PairRecord {
            input: PairInput { messages: pair.prompt_messages.clone() },
            preferred_output: vec![Message {
                role: Role::Assistant,
                content: pair.preferred.clone(),
            }],
            non_preferred_output: vec![Message {
                role: Role::Assistant,
                content: pair.non_preferred.clone(),
            }],
            category: pair.category,
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_preference_pairs(dataset: &str) -> Result<Vec<PreferencePair>, TrainingError> {
    let mut pairs = Vec::new();
    for (i, line) in dataset.lines().enumerate() {
        let record: PairRecord = serde_json::from_str(line)
            .map_err(|e| TrainingError::MalformedDataset { line: i + 1, reason: e.to_string() })?;
        let output_text = |messages: &[Message], which: &str| {
            messages
                .first()
                .map(|m| m.content.clone())
                .ok_or_else(|| TrainingError::MalformedDataset {
                    line: i + 1,
                    reason: format!("{which} has no messages"),
                })
        };
        pairs.push(PreferencePair {
            prompt_messages: record.input.messages,
            preferred: output_text(&record.preferred_output, "preferred_output")?,
            non_preferred: output_text(&record.non_preferred_output, "non_preferred_output")?,
            category: record.category,
        });
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobHandle {
    pub job_id: String,
    pub kind: JobKind,
    pub base_model: ModelRef,
    pub status: JobState,
    pub result_model: Option<ModelRef>,
}

impl JobHandle {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let succeeded = self.status == JobState::Succeeded;
        if succeeded != self.result_model.is_some() {
            return Err(TrainingError::ProviderRejected(
                "result model must be present exactly when the job succeeded".into(),
            ));
        }
        Ok(())
    }
}

/// Submits an SFT job against `base`. The dataset is validated locally
/// before any provider call.
pub fn submit_sft(
    dataset_jsonl: &str,
    base: &ModelRef,
    epochs: u32,
    suffix: &str,
    seed: u64,
    provider: &dyn Provider,
) -> Result<JobHandle, TrainingError> {
    if !EPOCH_RANGE.contains(&epochs) {
        return Err(TrainingError::EpochsOutOfRange(epochs));
    }
    if dataset_jsonl.lines().filter(|l| !l.trim().is_empty()).count() == 0 {
        return Err(TrainingError::ProviderRejected("empty training dataset".into()));
    }
    parse_sft_dataset(dataset_jsonl)?;
    let job_id = provider.submit_fine_tune(&FineTuneRequest {
        kind: JobKind::Sft,
        base_model: base.id.clone(),
        dataset_jsonl: dataset_jsonl.to_string(),
        epochs,
        beta: None,
        suffix: suffix.to_string(),
        seed,
    })?;
    Ok(JobHandle {
        job_id,
        kind: JobKind::Sft,
        base_model: base.clone(),
        status: JobState::Queued,
        result_model: None,
    })
}

/// Submits a DPO job. The base must be the iteration's SFT model and beta
/// must sit in the accepted stability range.
pub fn submit_dpo(
    pairs_dataset: &str,
    base: &ModelRef,
    beta: f64,
    suffix: &str,
    seed: u64,
    provider: &dyn Provider,
) -> Result<JobHandle, TrainingError> {
    if !(BETA_RANGE.0..=BETA_RANGE.1).contains(&beta) {
        return Err(TrainingError::BetaOutOfRange(beta));
    }
    if base.kind != ModelKind::Sft {
        return Err(TrainingError::LineageViolation(base.kind));
    }
    if pairs_dataset.lines().filter(|l| !l.trim().is_empty()).count() == 0 {
        return Err(TrainingError::ProviderRejected("empty preference dataset".into()));
    }
    parse_preference_pairs(pairs_dataset)?;
    let job_id = provider.submit_fine_tune(&FineTuneRequest {
        kind: JobKind::Dpo,
        base_model: base.id.clone(),
        dataset_jsonl: pairs_dataset.to_string(),
        epochs: 1,
        beta: Some(beta),
        suffix: suffix.to_string(),
        seed,
    })?;
    Ok(JobHandle {
        job_id,
        kind: JobKind::Dpo,
        base_model: base.clone(),
        status: JobState::Queued,
        result_model: None,
    })
}

/// Polls the job to completion and fills in the result model with lineage
/// back to the submission base.
pub fn complete_job(
    provider: &dyn Provider,
    handle: JobHandle,
    sleeper: &dyn Sleeper,
    poll_interval: Duration,
    max_polls: u32,
) -> Result<JobHandle, TrainingError> {
    let status =
        crate::provider::wait_for_job(provider, &handle.job_id, sleeper, poll_interval, max_polls)?;
    let model_id = status.model_id.ok_or_else(|| {
        TrainingError::ProviderRejected("succeeded job carried no model id".into())
    })?;
    let kind = match handle.kind {
        JobKind::Sft => ModelKind::Sft,
        JobKind::Dpo => ModelKind::Dpo,
    };
    let result = JobHandle {
        status: JobState::Succeeded,
        result_model: Some(ModelRef {
            id: model_id,
            parent: Some(handle.base_model.id.clone()),
            kind,
        }),
        ..handle
    };
    result.validate()?;
    Ok(result)
}

//! Engine for a continual-learning loop over a language-model provider:
//! plan a curriculum, synthesize cited Q&A data, submit SFT and DPO jobs,
//! judge the results, and revise the plan — with checkpointed, idempotent,
//! budget-bounded orchestration and a deterministic simulated provider.

pub mod clock;
pub mod concurrency;
pub mod config;
pub mod curation;
pub mod curriculum;
pub mod evaluation;
pub mod markup;
pub mod model;
pub mod orchestrator;
pub mod prompts;
pub mod provider;
pub mod storage;
pub mod synthesis;
pub mod training;

use std::sync::atomic::Ordering;
use std::sync::Arc;

use alas_core::concurrency::map_capped;
use alas_core::evaluation::{build_probe_set, evaluate, EvalOptions};
use alas_core::model::{Difficulty, ModelRef, QAItem};
use alas_core::provider::sim::{SimOptions, SimProvider, SimWorld};
use alas_core::provider::{ChatRequest, CountingProvider, Provider, Purpose};

fn counting_sim(topics: usize, facts: usize) -> (Arc<CountingProvider>, SimWorld) {
    let world = SimWorld::grid("stress", topics, facts, 13);
    let sim = SimProvider::new(world.clone(), SimOptions::default());
    (Arc::new(CountingProvider::new(Arc::new(sim))), world)
}

fn items_from(world: &SimWorld) -> Vec<QAItem> {
    world
        .facts
        .values()
        .map(|f| QAItem {
            question: f.question.clone(),
            answer: f.reference_answer.clone(),
            category: f.category,
            difficulty: Difficulty::Easy,
            rationale: None,
            citations: vec!["https://example.com/stress".into()],
            topic_name: f.topic.clone(),
            retrieved_at: "2024-05-01T00:00:00Z".into(),
        })
        .collect()
}

#[test]
fn five_hundred_calls_never_exceed_the_worker_cap() {
    let (counting, world) = counting_sim(5, 52);
    let requests: Vec<ChatRequest> = world
        .facts
        .values()
        .cycle()
        .take(500)
        .enumerate()
        .map(|(i, f)| ChatRequest {
            purpose: Purpose::Answer,
            model: "sim:base".into(),
            system: None,
            user: f.question.clone(),
            seed: i as u64,
            max_output_tokens: 64,
        })
        .collect();

    let replies = map_capped(&requests, 50, |_, request| counting.chat(request));
    assert_eq!(replies.len(), 500);
    assert!(replies.iter().all(|r| r.is_ok()));
    assert_eq!(counting.chat_calls.load(Ordering::SeqCst), 500);
    let peak = counting.max_in_flight.load(Ordering::SeqCst);
    assert!(peak <= 50, "worker cap breached: {peak} in flight");
    assert!(peak >= 2, "no overlap at all suggests the pool ran sequentially");
}

#[test]
fn evaluation_fans_out_under_its_concurrency_limit() {
    let (counting, world) = counting_sim(5, 52);
    let items = items_from(&world);
    let probe = build_probe_set(&items, 50, 21);
    assert_eq!(probe.items.len(), 250);

    let report = evaluate(
        counting.as_ref(),
        &ModelRef::base("sim:base"),
        "sim:judge",
        &probe,
        21,
        &EvalOptions { concurrency: 8, ..EvalOptions::default() },
    )
    .unwrap();

    assert_eq!(report.judgments.len(), 250);
    assert_eq!(counting.chat_calls.load(Ordering::SeqCst), 500, "one answer and one judge per probe");
    let peak = counting.max_in_flight.load(Ordering::SeqCst);
    assert!(peak <= 8, "evaluation exceeded its concurrency option: {peak}");
    assert!(peak >= 2);
}

#[test]
fn cap_of_one_serializes_every_call() {
    let (counting, world) = counting_sim(2, 10);
    let items = items_from(&world);
    let probe = build_probe_set(&items, 3, 5);

    evaluate(
        counting.as_ref(),
        &ModelRef::base("sim:base"),
        "sim:judge",
        &probe,
        5,
        &EvalOptions { concurrency: 1, ..EvalOptions::default() },
    )
    .unwrap();

    assert_eq!(counting.max_in_flight.load(Ordering::SeqCst), 1);
}

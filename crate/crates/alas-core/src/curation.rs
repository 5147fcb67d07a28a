//! Dataset curation: near-duplicate removal via MinHash LSH, category
//! balancing, answer-length outlier filtering and a PII scrub.

use crate::model::{Category, QAItem};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

pub const NUM_HASHES: usize = 128;
pub const LSH_BANDS: usize = 16;
pub const LSH_ROWS: usize = 8;
pub const REDACTION_TOKEN: &str = "[REDACTED]";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub dedup_threshold: f64,
    pub balance_tolerance: f64,
    pub outlier_percentile: f64,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            dedup_threshold: 0.7,
            balance_tolerance: 0.10,
            outlier_percentile: 0.99,
            seed: 0,
        }
    }
}

fn trimmed(s: &str) -> String {
    s.trim().to_string()
}

/// Field-level whitespace cleanup applied before any other stage.
pub fn normalize_items(items: Vec<QAItem>) -> Vec<QAItem> {
    items
        .into_iter()
        .map(|mut item| {
            item.question = trimmed(&item.question);
            item.answer = trimmed(&item.answer);
            item.rationale = item.rationale.map(|r| trimmed(&r)).filter(|r| !r.is_empty());
            item.citations = item.citations.iter().map(|c| trimmed(c)).collect();
            item.topic_name = trimmed(&item.topic_name);
            item
        })
        .collect()
}

/// Word 3-gram shingles over the lowercased question. Questions shorter than
/// three words contribute their whole text as a single shingle.
pub fn question_shingles(question: &str) -> BTreeSet<String> {
    let words: Vec<String> =
        question.to_lowercase().split_whitespace().map(str::to_string).collect();
    if words.is_empty() {
        return BTreeSet::new();
    }
    if words.len() < 3 {
        return [words.join(" ")].into_iter().collect();
    }
    words.windows(3).map(|w| w.join(" ")).collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let intersection = a.intersection(b).count();
    let union = a.len() + b.len() - intersection;
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Every unordered index pair whose question Jaccard similarity reaches the
/// threshold, by exhaustive comparison. Quadratic; used as the ground truth
/// the LSH path is checked against.
pub fn brute_force_duplicate_pairs(items: &[QAItem], threshold: f64) -> BTreeSet<(usize, usize)> {
    let shingles: Vec<BTreeSet<String>> =
        items.iter().map(|i| question_shingles(&i.question)).collect();
    let mut pairs = BTreeSet::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            if jaccard(&shingles[i], &shingles[j]) >= threshold {
                pairs.insert((i, j));
            }
        }
    }
    pairs
}

fn salted_hash(salt: u64, shingle: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(salt.to_le_bytes());
    hasher.update(shingle.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn minhash_signature(shingles: &BTreeSet<String>, salts: &[u64]) -> Vec<u64> {
    salts
        .iter()
        .map(|&salt| {
            shingles
                .iter()
                .map(|s| salted_hash(salt, s))
                .min()
                .unwrap_or(u64::MAX)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedDuplicate {
    pub question: String,
    pub kept_question: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupOutcome {
    pub kept: Vec<QAItem>,
    pub dropped: Vec<DroppedDuplicate>,
    pub clusters_merged: usize,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Pairs the LSH path declares duplicates: banding proposes candidates,
/// exact Jaccard over the shingle sets confirms each one.
pub fn lsh_duplicate_pairs(items: &[QAItem], config: &CurationConfig) -> BTreeSet<(usize, usize)> {
    if items.len() < 2 {
        return BTreeSet::new();
    }
    let salts: Vec<u64> = {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        (0..NUM_HASHES).map(|_| rng.random()).collect()
    };
    let shingles: Vec<BTreeSet<String>> =
        items.iter().map(|i| question_shingles(&i.question)).collect();
    let signatures: Vec<Vec<u64>> =
        shingles.iter().map(|s| minhash_signature(s, &salts)).collect();

    let mut buckets: HashMap<(usize, &[u64]), Vec<usize>> = HashMap::new();
    for (idx, signature) in signatures.iter().enumerate() {
        for band in 0..LSH_BANDS {
            let rows = &signature[band * LSH_ROWS..(band + 1) * LSH_ROWS];
            buckets.entry((band, rows)).or_default().push(idx);
        }
    }
    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for bucket in buckets.values() {
        for (a, &i) in bucket.iter().enumerate() {
            for &j in &bucket[a + 1..] {
                candidates.insert(if i < j { (i, j) } else { (j, i) });
            }
        }
    }
    candidates
        .into_iter()
        .filter(|&(i, j)| jaccard(&shingles[i], &shingles[j]) >= config.dedup_threshold)
        .collect()
}

/// Near-duplicate removal: confirmed pairs merge into clusters and the
/// earliest item of each cluster survives.
pub fn dedup_items(items: &[QAItem], config: &CurationConfig) -> DedupOutcome {
    let mut uf = UnionFind::new(items.len());
    for (i, j) in lsh_duplicate_pairs(items, config) {
        uf.union(i, j);
    }

    let mut outcome = DedupOutcome::default();
    let mut cluster_roots: BTreeSet<usize> = BTreeSet::new();
    for (idx, item) in items.iter().enumerate() {
        let root = uf.find(idx);
        if root == idx {
            outcome.kept.push(item.clone());
        } else {
            cluster_roots.insert(root);
            outcome.dropped.push(DroppedDuplicate {
                question: item.question.clone(),
                kept_question: items[root].question.clone(),
            });
        }
    }
    outcome.clusters_merged = cluster_roots.len();
    outcome
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceOutcome {
    pub kept: Vec<QAItem>,
    pub dropped: Vec<QAItem>,
    pub shares: BTreeMap<Category, f64>,
}

/// Caps every category's share near the uniform share over the categories
/// present. While the largest share exceeds `u * (1 + tolerance)` with
/// `u = 1/k`, the most recently added item of that category is dropped.
/// Shares can only be pushed down, so an underrepresented category ends up
/// as close to uniform as removal alone allows.
pub fn balance_categories(items: &[QAItem], tolerance: f64) -> BalanceOutcome {
    let mut kept: Vec<QAItem> = items.to_vec();
    let mut dropped = Vec::new();
    loop {
        let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
        for item in &kept {
            *counts.entry(item.category).or_default() += 1;
        }
        let k = counts.len();
        if k == 0 {
            break;
        }
        let total = kept.len() as f64;
        let upper = (1.0 / k as f64) * (1.0 + tolerance);
        let Some((&largest, &count)) = counts.iter().max_by_key(|(_, &c)| c) else {
            break;
        };
        if count as f64 / total <= upper || count <= 1 {
            break;
        }
        let last = kept
            .iter()
            .rposition(|i| i.category == largest)
            .expect("category counted above");
        dropped.push(kept.remove(last));
    }
    let total = kept.len() as f64;
    let mut shares = BTreeMap::new();
    for item in &kept {
        *shares.entry(item.category).or_insert(0.0) += 1.0 / total;
    }
    BalanceOutcome { kept, dropped, shares }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierOutcome {
    pub kept: Vec<QAItem>,
    pub dropped: Vec<QAItem>,
    pub cutoff_tokens: Option<usize>,
}

fn answer_tokens(item: &QAItem) -> usize {
    item.answer.split_whitespace().count()
}

/// Removes items whose answer token count exceeds the `percentile` rank of
/// the corpus (1-indexed `ceil(p * n)` over the sorted counts). Fewer than
/// two items pass through untouched.
pub fn filter_token_outliers(items: &[QAItem], percentile: f64) -> OutlierOutcome {
    if items.len() < 2 {
        return OutlierOutcome { kept: items.to_vec(), dropped: Vec::new(), cutoff_tokens: None };
    }
    let mut counts: Vec<usize> = items.iter().map(answer_tokens).collect();
    counts.sort_unstable();
    let rank = ((percentile * counts.len() as f64).ceil() as usize).clamp(1, counts.len());
    let cutoff = counts[rank - 1];
    let (kept, dropped): (Vec<QAItem>, Vec<QAItem>) =
        items.iter().cloned().partition(|i| answer_tokens(i) <= cutoff);
    OutlierOutcome { kept, dropped, cutoff_tokens: Some(cutoff) }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyOutcome {
    pub items: Vec<QAItem>,
    pub redactions: usize,
}

fn email_re() -> &'static regex::Regex {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}")
            .expect("email pattern")
    })
}

fn redact(text: &str, count: &mut usize) -> String {
    let re = email_re();
    *count += re.find_iter(text).count();
    re.replace_all(text, REDACTION_TOKEN).into_owned()
}

/// Replaces email addresses in question, answer and rationale text with a
/// redaction token. Citation URLs are left alone.
pub fn safety_scan(items: Vec<QAItem>) -> SafetyOutcome {
    let mut redactions = 0;
    let items = items
        .into_iter()
        .map(|mut item| {
            item.question = redact(&item.question, &mut redactions);
            item.answer = redact(&item.answer, &mut redactions);
            item.rationale = item.rationale.map(|r| redact(&r, &mut redactions));
            item
        })
        .collect();
    SafetyOutcome { items, redactions }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub initial: usize,
    pub after_dedup: usize,
    pub after_balance: usize,
    pub after_outliers: usize,
    pub duplicates_dropped: usize,
    pub balance_dropped: usize,
    pub outliers_dropped: usize,
    pub redactions: usize,
    pub shares: BTreeMap<Category, f64>,
    pub cutoff_tokens: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationResult {
    pub items: Vec<QAItem>,
    pub report: CurationReport,
}

/// Full pipeline: normalize, dedup, balance, outlier filter, safety scrub.
pub fn curate(items: Vec<QAItem>, config: &CurationConfig) -> CurationResult {
    let initial = items.len();
    let normalized = normalize_items(items);
    let deduped = dedup_items(&normalized, config);
    let balanced = balance_categories(&deduped.kept, config.balance_tolerance);
    let filtered = filter_token_outliers(&balanced.kept, config.outlier_percentile);
    let after_outliers = filtered.kept.len();
    let scrubbed = safety_scan(filtered.kept);
    CurationResult {
        report: CurationReport {
            initial,
            after_dedup: deduped.kept.len(),
            after_balance: balanced.kept.len(),
            after_outliers,
            duplicates_dropped: deduped.dropped.len(),
            balance_dropped: balanced.dropped.len(),
            outliers_dropped: filtered.dropped.len(),
            redactions: scrubbed.redactions,
            shares: balanced.shares,
            cutoff_tokens: filtered.cutoff_tokens,
        },
        items: scrubbed.items,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Difficulty;

    fn item(question: &str, answer: &str, category: Category) -> QAItem {
        QAItem {
            question: question.into(),
            answer: answer.into(),
            category,
            difficulty: Difficulty::Easy,
            rationale: None,
            citations: vec!["https://example.com".into()],
            topic_name: "t".into(),
            retrieved_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn shingles_are_lowercased_word_trigrams() {
        let s = question_shingles("The Quick brown Fox jumps");
        let expected: BTreeSet<String> =
            ["the quick brown", "quick brown fox", "brown fox jumps"]
                .into_iter()
                .map(String::from)
                .collect();
        assert_eq!(s, expected);
    }

    #[test]
    fn short_question_is_one_shingle() {
        let s = question_shingles("Why Python?");
        assert_eq!(s.len(), 1);
        assert!(s.contains("why python?"));
    }

    #[test]
    fn jaccard_extremes() {
        let a = question_shingles("alpha beta gamma delta");
        let b = question_shingles("alpha beta gamma delta");
        let c = question_shingles("one two three four");
        assert_eq!(jaccard(&a, &b), 1.0);
        assert_eq!(jaccard(&a, &c), 0.0);
    }

    #[test]
    fn dedup_collapses_exact_duplicates_keeping_first() {
        let items = vec![
            item("When did Python 3.12 ship to the public?", "October 2023.", Category::Factual),
            item("What changed in the GIL for 3.13 builds?", "Optional free-threading.", Category::Factual),
            item("When did Python 3.12 ship to the public?", "2023-10.", Category::Factual),
        ];
        let outcome = dedup_items(&items, &CurationConfig::default());
        assert_eq!(outcome.kept.len(), 2);
        assert_eq!(outcome.kept[0].answer, "October 2023.");
        assert_eq!(outcome.dropped.len(), 1);
        assert_eq!(outcome.dropped[0].kept_question, items[0].question);
        assert_eq!(outcome.clusters_merged, 1);
    }

    #[test]
    fn dedup_catches_near_duplicates() {
        let items = vec![
            item(
                "When was the first stable release of Python 3.12 published to  the index?",
                "a",
                Category::Factual,
            ),
            item(
                "When was the first stable release of Python 3.12 published to the index again?",
                "b",
                Category::Factual,
            ),
            item("How does the garbage collector treat cycles in long running daemons?", "c", Category::Conceptual),
        ];
        let outcome = dedup_items(&items, &CurationConfig::default());
        assert_eq!(outcome.kept.len(), 2);
    }

    #[test]
    fn dedup_is_deterministic() {
        let items: Vec<QAItem> = (0..50)
            .map(|i| {
                item(
                    &format!("What does component number {i} of the runtime actually do here?"),
                    "x",
                    Category::Factual,
                )
            })
            .collect();
        let a = dedup_items(&items, &CurationConfig::default());
        let b = dedup_items(&items, &CurationConfig::default());
        assert_eq!(a, b);
        assert_eq!(a.kept.len(), 50);
    }

    fn long_question(i: usize, last_word: &str) -> String {
        format!(
            "How does subsystem {i} of release {i} handle startup flag number {i} when the \
             runtime begins executing user code on modern {last_word}"
        )
    }

    #[test]
    fn dedup_decisions_match_brute_force_on_planted_corpus() {
        let mut items = Vec::new();
        for i in 0..40 {
            items.push(item(&long_question(i, "systems?"), "x", Category::Factual));
        }
        for i in 0..10 {
            items.push(item(&long_question(i, "machines?"), "y", Category::Factual));
        }
        let config = CurationConfig::default();
        let oracle = brute_force_duplicate_pairs(&items, config.dedup_threshold);
        assert_eq!(oracle.len(), 10);
        assert_eq!(lsh_duplicate_pairs(&items, &config), oracle);
        let outcome = dedup_items(&items, &config);
        assert_eq!(outcome.dropped.len(), 10);
        for d in &outcome.dropped {
            assert!(d.question.ends_with("machines?"));
        }
    }

    #[test]
    fn balance_caps_the_dominant_category() {
        let mut items = Vec::new();
        for i in 0..60 {
            items.push(item(&format!("f{i}"), "a", Category::Factual));
        }
        for c in [Category::Conceptual, Category::Application, Category::Analysis, Category::Synthesis] {
            for i in 0..10 {
                items.push(item(&format!("{c:?}{i}"), "a", c));
            }
        }
        let outcome = balance_categories(&items, 0.10);
        assert_eq!(outcome.kept.len(), 51);
        let factual = outcome.kept.iter().filter(|i| i.category == Category::Factual).count();
        assert_eq!(factual, 11);
        assert!(outcome.shares[&Category::Factual] <= 0.22 + 1e-12);
        assert_eq!(outcome.dropped.len(), 49);
    }

    #[test]
    fn balance_drops_from_the_tail() {
        let items = vec![
            item("f1", "a", Category::Factual),
            item("f2", "a", Category::Factual),
            item("f3", "a", Category::Factual),
            item("c1", "a", Category::Conceptual),
        ];
        let outcome = balance_categories(&items, 0.10);
        assert!(outcome.dropped.iter().all(|d| d.category == Category::Factual));
        let kept_f: Vec<_> = outcome
            .kept
            .iter()
            .filter(|i| i.category == Category::Factual)
            .map(|i| i.question.as_str())
            .collect();
        assert_eq!(kept_f.first(), Some(&"f1"));
    }

    #[test]
    fn balance_leaves_single_category_alone() {
        let items = vec![item("a", "x", Category::Factual), item("b", "y", Category::Factual)];
        let outcome = balance_categories(&items, 0.10);
        assert_eq!(outcome.kept.len(), 2);
        assert!(outcome.dropped.is_empty());
    }

    #[test]
    fn balance_of_empty_input_is_empty() {
        let outcome = balance_categories(&[], 0.10);
        assert!(outcome.kept.is_empty());
    }

    #[test]
    fn outlier_filter_removes_strictly_above_cutoff() {
        let items: Vec<QAItem> = (1..=100)
            .map(|i| {
                let answer = vec!["w"; i].join(" ");
                item(&format!("q{i}"), &answer, Category::Factual)
            })
            .collect();
        let outcome = filter_token_outliers(&items, 0.99);
        assert_eq!(outcome.cutoff_tokens, Some(99));
        assert_eq!(outcome.kept.len(), 99);
        assert_eq!(outcome.dropped.len(), 1);
        assert_eq!(answer_tokens(&outcome.dropped[0]), 100);
    }

    #[test]
    fn outlier_filter_passes_tiny_corpora() {
        let items = vec![item("q", &vec!["w"; 500].join(" "), Category::Factual)];
        let outcome = filter_token_outliers(&items, 0.99);
        assert_eq!(outcome.kept.len(), 1);
        assert_eq!(outcome.cutoff_tokens, None);
    }

    #[test]
    fn safety_scan_redacts_emails() {
        let items = vec![item(
            "Who maintains the tracker?",
            "Contact maintainer@example.org or admin@lists.example.com for access.",
            Category::Factual,
        )];
        let outcome = safety_scan(items);
        assert_eq!(outcome.redactions, 2);
        assert_eq!(
            outcome.items[0].answer,
            format!("Contact {REDACTION_TOKEN} or {REDACTION_TOKEN} for access.")
        );
    }

    #[test]
    fn safety_scan_leaves_clean_text_untouched(){
        let items = vec![item("Plain question?", "Plain answer at example.com.", Category::Factual)];
        let outcome = safety_scan(items.clone());
        assert_eq!(outcome.redactions, 0);
        assert_eq!(outcome.items, items);
    }

    #[test]
    fn curate_pipeline_reports_every_stage() {
        let mut items = Vec::new();
        for i in 0..20 {
            items.push(item(
                &format!("What does module number {i} contribute to the import system?"),
                "It resolves names.",
                Category::Factual,
            ));
        }
        items.push(items[0].clone());
        for i in 0..5 {
            items.push(item(&format!("concept {i}"), "Reach me at pii@example.com.", Category::Conceptual));
        }
        let result = curate(items, &CurationConfig::default());
        assert_eq!(result.report.initial, 26);
        assert_eq!(result.report.duplicates_dropped, 1);
        assert!(result.report.redactions >= 1);
        assert_eq!(result.report.after_outliers, result.items.len());
        assert!(result.items.iter().any(|i| i.answer.contains(REDACTION_TOKEN)));
    }
}

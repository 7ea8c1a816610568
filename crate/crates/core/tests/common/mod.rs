#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use likefilter::blocklist::Blocklist;
use likefilter::corpus::{Document, Format};
use likefilter::filter::{run_pipeline, Manifest, PipelineOptions, TriggerPhrase};
use likefilter::lm::{BackendDescriptor, BackendKind, ItemOutcome, LmError, ScoreRecord, ScoringBackend};
use likefilter::rundir::{self, RunConfig, RunWriter};
use likefilter::tokenizer::UNK;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn demo(name: &str) -> PathBuf {
    crate_dir().join("data/demo").join(name)
}

pub fn fixture(name: &str) -> PathBuf {
    crate_dir().join("tests/fixtures").join(name)
}

pub fn cli_bin() -> &'static str {
    env!("CARGO_BIN_EXE_likefilter")
}

pub fn scorer_bin() -> &'static str {
    env!("CARGO_BIN_EXE_likefilter-const-scorer")
}

/// Brute-force interpolated n-gram probability computed by rescanning the
/// training sequences for every query. `train` must already use `<unk>` for
/// out-of-vocabulary tokens and `vocab` must include `<unk>`.
pub fn oracle_prob(train: &[Vec<String>], vocab: &[String], order: usize, lambda: &[f64], history: &[String], word: &str) -> f64 {
    let n: usize = train.iter().map(Vec::len).sum();
    let c = train.iter().flatten().filter(|t| *t == word).count();
    let unigram = (c as f64 + 1.0) / (n as f64 + vocab.len() as f64);
    let mut weighted = lambda[0] * unigram;
    let mut weight = lambda[0];
    for k in 2..=order {
        if history.len() < k - 1 {
            continue;
        }
        let ctx = &history[history.len() - (k - 1)..];
        let (mut total, mut hits) = (0usize, 0usize);
        for seq in train {
            for i in 0..seq.len() {
                if i + k > seq.len() {
                    break;
                }
                if seq[i..i + k - 1] == *ctx {
                    total += 1;
                    if seq[i + k - 1] == word {
                        hits += 1;
                    }
                }
            }
        }
        if total == 0 {
            continue;
        }
        weighted += lambda[k - 1] * hits as f64 / total as f64;
        weight += lambda[k - 1];
    }
    if weight == 0.0 {
        unigram
    } else {
        weighted / weight
    }
}

/// Vocabulary rebuilt from scratch: `<unk>` first, then tokens with at least
/// `min_count` occurrences by descending count and then lexicographically.
pub fn oracle_vocab(train: &[Vec<String>], min_count: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in train.iter().flatten() {
        *counts.entry(t).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(t, c)| *c >= min_count && *t != UNK).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    std::iter::once(UNK.to_string()).chain(kept.into_iter().map(|(t, _)| t.to_string())).collect()
}

pub fn map_unk(tokens: &[String], vocab: &[String]) -> Vec<String> {
    tokens.iter().map(|t| if vocab.contains(t) { t.clone() } else { UNK.to_string() }).collect()
}

/// Area under the ROC curve by comparing every (positive, negative) pair;
/// ties count one half.
pub fn auc_by_pairs(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in positives {
        for n in negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (positives.len() * negatives.len()) as f64
}

/// Backend that returns a fixed score for each document id, the same for
/// every trigger, as a single-token record.
pub struct FixedBackend {
    descriptor: BackendDescriptor,
    scores: HashMap<String, f64>,
}

impl FixedBackend {
    pub fn new(scores: HashMap<String, f64>) -> Self {
        FixedBackend {
            descriptor: BackendDescriptor {
                backend_id: "fixed-test".to_string(),
                kind: BackendKind::External,
                tokenizer_note: "fixed scores".to_string(),
            },
            scores,
        }
    }
}

impl ScoringBackend for FixedBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn score_documents(
        &self,
        docs: &[Document],
        triggers: &[TriggerPhrase],
        _budget: usize,
        _jobs: usize,
    ) -> Result<Vec<Vec<ItemOutcome>>, LmError> {
        Ok(docs
            .iter()
            .map(|d| {
                triggers
                    .iter()
                    .map(|t| match self.scores.get(&d.id) {
                        Some(s) => Ok(ScoreRecord {
                            doc_id: d.id.clone(),
                            trigger_id: t.trigger_id.clone(),
                            mean_logprob: *s,
                            token_count: 1,
                            backend_id: self.descriptor.backend_id.clone(),
                        }),
                        None => Err("no score".to_string()),
                    })
                    .collect()
            })
            .collect())
    }
}

pub fn demo_triggers() -> Vec<TriggerPhrase> {
    likefilter::filter::load_triggers(&demo("triggers.jsonl")).unwrap()
}

/// Runs the pipeline over `docs` with fixed per-document scores and writes a
/// complete run directory at `dir`.
pub fn write_fixed_run(dir: &Path, docs: &[Document], scores: HashMap<String, f64>, theta: f64) -> Manifest {
    let backend = FixedBackend::new(scores);
    let triggers = demo_triggers();
    let mut writer = RunWriter::create(dir, true).unwrap();
    let options = PipelineOptions { theta, ..Default::default() };
    let output = run_pipeline(docs.iter().cloned().map(Ok), &Blocklist::default(), &triggers, &backend, options, 0, |d| {
        writer.add_excerpt(&d.id, &d.text).unwrap();
    })
    .unwrap();
    writer.write_outputs(&output.manifest, &output.scores).unwrap();
    let config = RunConfig {
        corpus: PathBuf::from("fixture"),
        format: Format::Jsonl,
        triggers: demo("triggers.jsonl"),
        blocklist: None,
        allowlist: None,
        backend: "fixed".to_string(),
        budget: output.scores.budget,
        theta,
        seed: 0,
        jobs: 1,
        out: dir.to_path_buf(),
        strict: false,
        hist_width: 0.25,
        external_scores: None,
        external_threshold: 0.5,
    };
    rundir::write_reports(&writer, &output.manifest, &output.scores, &config, None).unwrap();
    writer.commit().unwrap();
    output.manifest
}

/// 1000 documents, 37 of which score above -4.0. Includes the boundary score
/// -4.0 itself and -3.989315.
pub fn fixture_37_of_1000() -> (Vec<Document>, HashMap<String, f64>) {
    let mut docs = Vec::new();
    let mut scores = HashMap::new();
    for i in 0..1000 {
        let id = format!("doc-{i:04}");
        let score = match i {
            0 => -3.989315,
            1 => -4.0,
            2..=36 => -3.9 + (i as f64) * 0.05,
            37 => -2.0,
            _ => -4.5 - (i % 97) as f64 * 0.05,
        };
        docs.push(Document::new(&id, format!("document number {i} about topic {}", i % 13)));
        scores.insert(id, score);
    }
    (docs, scores)
}

/// Label counts per bucket that reproduce the published composition table
/// exactly (10,000 labels per bucket):
/// harmful, expository, counterspeech, non-harmful, unknown.
pub const FILTER_COUNTS: [usize; 5] = [943, 300, 286, 8316, 155];
pub const KEEP_COUNTS: [usize; 5] = [66, 45, 35, 9266, 588];
const CATEGORY_NAMES: [&str; 5] = ["harmful", "expository", "counterspeech", "non-harmful", "unknown"];

/// 20,000 documents: the first 10,000 score above -4.0, the rest below.
pub fn bucket_fixture() -> (Vec<Document>, HashMap<String, f64>, Vec<String>) {
    let mut docs = Vec::new();
    let mut scores = HashMap::new();
    let mut labels = Vec::new();
    for (offset, counts, score) in [(0usize, FILTER_COUNTS, -3.0), (10_000, KEEP_COUNTS, -6.0)] {
        let mut i = offset;
        for (name, n) in CATEGORY_NAMES.iter().zip(counts) {
            for _ in 0..n {
                let id = format!("b{i:05}");
                docs.push(Document::new(&id, format!("bucket fixture text {i}")));
                scores.insert(id.clone(), score);
                labels.push(format!("{{\"doc_id\":\"{id}\",\"annotator_id\":\"a1\",\"category\":\"{name}\"}}"));
                i += 1;
            }
        }
    }
    (docs, scores, labels)
}

/// Worst deviations found on one random oracle instance.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleReport {
    pub max_logprob_error: f64,
    pub max_sum_error: f64,
}

/// Builds a random small model (order ≤ 3, V ≤ 10, ≤ 50 training tokens) and
/// compares it against [`oracle_prob`] on random queries.
pub fn oracle_instance(seed: u64) -> OracleReport {
    use likefilter::lm::train_ngram;
    use likefilter::tokenizer::build_vocab;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet: Vec<String> = (0..rng.random_range(1..=9usize)).map(|i| format!("w{i}")).collect();
    let order = rng.random_range(1..=3usize);
    let min_count = if rng.random_bool(0.3) { 2 } else { 1 };
    let total = rng.random_range(1..=50usize);
    let n_docs = rng.random_range(1..=3usize).min(total);
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); n_docs];
    for i in 0..total {
        let word = alphabet[rng.random_range(0..alphabet.len())].clone();
        raw[i % n_docs].push(word);
    }
    let mut lambda: Vec<f64> = (0..order).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.05..1.0) }).collect();
    if lambda.iter().all(|l| *l == 0.0) {
        lambda[0] = 1.0;
    }
    let sum: f64 = lambda.iter().sum();
    for l in &mut lambda {
        *l /= sum;
    }
    // the implementation accepts weights whose sum is within 1e-9 of 1
    let docs: Vec<Document> = raw.iter().enumerate().map(|(i, t)| Document::new(format!("d{i}"), t.join(" "))).collect();
    let vocab = build_vocab(&docs, min_count as u64).unwrap();
    let model = train_ngram(&docs, order, vocab, &lambda).unwrap();

    let oracle_v = oracle_vocab(&raw, min_count);
    assert_eq!(model.vocab().tokens(), oracle_v.as_slice(), "vocabulary differs from oracle");
    let train: Vec<Vec<String>> = raw.iter().map(|d| map_unk(d, &oracle_v)).collect();

    let mut report = OracleReport::default();
    let mut query_words = alphabet.clone();
    query_words.push("unseen".to_string());
    for _ in 0..8 {
        let context: Vec<String> =
            (0..rng.random_range(0..=4usize)).map(|_| query_words[rng.random_range(0..query_words.len())].clone()).collect();
        let continuation: Vec<String> =
            (1..=rng.random_range(1..=4usize)).map(|_| query_words[rng.random_range(0..query_words.len())].clone()).collect();
        let got = model.logprob_seq(&context, &continuation).unwrap();
        let mut history = map_unk(&context, &oracle_v);
        for (word, lp) in map_unk(&continuation, &oracle_v).iter().zip(&got) {
            let expected = oracle_prob(&train, &oracle_v, order, model.lambda(), &history, word).ln();
            report.max_logprob_error = report.max_logprob_error.max((expected - lp).abs());
            history.push(word.clone());
        }
        let ids = model.vocab().encode(&map_unk(&context, &oracle_v));
        let mass: f64 = (0..model.vocab().len() as u32).map(|w| model.prob(&ids, w)).sum();
        let oracle_mass: f64 =
            oracle_v.iter().map(|w| oracle_prob(&train, &oracle_v, order, model.lambda(), &map_unk(&context, &oracle_v), w)).sum();
        report.max_sum_error = report.max_sum_error.max((mass - 1.0).abs()).max((oracle_mass - 1.0).abs());
    }
    report
}

const SUBJECTS: [&str; 12] = [
    "the river", "our garden", "the old bridge", "a small bakery", "the city library", "the morning train",
    "the football club", "a local farmer", "the new museum", "the village school", "the harbor", "a young chef",
];
const VERBS: [&str; 8] = ["opened", "flooded", "celebrated", "repaired", "announced", "welcomed", "closed", "hosted"];
const OBJECTS: [&str; 8] = [
    "a new exhibit", "the spring festival", "extra seating", "its annual report", "a reading program",
    "a charity run", "the north entrance", "two new volunteers",
];
const TAILS: [&str; 8] =
    ["on tuesday", "after the storm", "last weekend", "for the first time", "despite the rain", "before noon", "in early june", "near the station"];

/// Sentences that echo the opening of the demo triggers.
const ADJACENT: [&str; 6] = [
    "Antifa is against everything american.",
    "Antifa is destroying our cities.",
    "Working class citizens are losing their jobs.",
    "Working class citizens are getting angry about immigrants.",
    "Social justice warriors hate this country.",
    "Social justice warriors hate free speech.",
];

/// `n` documents of neutral text; one in every `planted_every` ends with two
/// trigger-adjacent sentences. Returns the documents and the planted flags.
pub fn planted_corpus(n: usize, planted_every: usize, seed: u64) -> (Vec<Document>, Vec<bool>) {
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |items: &[&'static str]| items[rng.random_range(0..items.len())];
    let mut docs = Vec::with_capacity(n);
    let mut planted = Vec::with_capacity(n);
    for i in 0..n {
        let mut sentences: Vec<String> = Vec::new();
        let count = 2 + i % 4;
        for _ in 0..count {
            sentences.push(format!("{} {} {} {}.", pick(&SUBJECTS), pick(&VERBS), pick(&OBJECTS), pick(&TAILS)));
        }
        let is_planted = i % planted_every == planted_every / 2;
        if is_planted {
            sentences.push(pick(&ADJACENT).to_string());
            sentences.push(pick(&ADJACENT).to_string());
        }
        docs.push(Document::new(format!("p{i:04}"), sentences.join(" ")));
        planted.push(is_planted);
    }
    (docs, planted)
}

//! The filtration pipeline: blocklist first, then trigger-likelihood
//! scoring of the survivors, max over triggers, and a strict threshold.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocklist::Blocklist;
use crate::corpus::{CorpusError, Document};
use crate::lm::{trigger_tokens, LmError, ScoringBackend, SCORE_CONVENTION};

pub const DEFAULT_BUDGET: usize = 384;
pub const DEFAULT_THETA: f64 = -4.0;
const MANIFEST_FORMAT: &str = "likefilter-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("no trigger phrases given; likelihood filtering needs at least one")]
    NoTriggers,
    #[error("duplicate trigger id {0:?}")]
    DuplicateTrigger(String),
    #[error("threshold must be finite, got {0}")]
    BadThreshold(f64),
    #[error("cannot read triggers from {path}: {message}")]
    Triggers { path: String, message: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerPhrase {
    pub trigger_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theme: Option<String>,
}

impl TriggerPhrase {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        TriggerPhrase { trigger_id: id.into(), text: text.into(), theme: None }
    }
}

#[derive(Deserialize)]
struct TriggerLine {
    #[serde(alias = "trigger_id")]
    id: Option<String>,
    text: String,
    theme: Option<String>,
}

/// Parses a triggers file: either JSON lines with `id`, `text` and optional
/// `theme`, or plain text with one phrase per line (ids `t1`, `t2`, ...).
/// `#` comments and blank lines are skipped in both.
pub fn parse_triggers(content: &str) -> Result<Vec<TriggerPhrase>, String> {
    let mut out = Vec::new();
    for (n, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ordinal = out.len() + 1;
        let trigger = if line.starts_with('{') {
            let t: TriggerLine = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
            TriggerPhrase { trigger_id: t.id.unwrap_or_else(|| format!("t{ordinal}")), text: t.text, theme: t.theme }
        } else {
            TriggerPhrase::new(format!("t{ordinal}"), line)
        };
        out.push(trigger);
    }
    Ok(out)
}

pub fn load_triggers(path: &Path) -> Result<Vec<TriggerPhrase>, FilterError> {
    let err = |message: String| FilterError::Triggers { path: path.display().to_string(), message };
    let content = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    parse_triggers(&content).map_err(err)
}

/// Checks ids are unique and each trigger fits the budget.
pub fn validate_triggers(triggers: &[TriggerPhrase], budget: usize) -> Result<(), FilterError> {
    if triggers.is_empty() {
        return Err(FilterError::NoTriggers);
    }
    let mut seen = HashSet::new();
    for t in triggers {
        if !seen.insert(&t.trigger_id) {
            return Err(FilterError::DuplicateTrigger(t.trigger_id.clone()));
        }
        trigger_tokens(t, budget)?;
    }
    Ok(())
}

pub fn trigger_set_hash(triggers: &[TriggerPhrase]) -> String {
    let mut hasher = Sha256::new();
    for t in triggers {
        hasher.update(t.trigger_id.as_bytes());
        hasher.update(b"\t");
        hasher.update(t.text.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub doc_id: String,
    pub trigger_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<usize>,
    /// Set when the backend failed on this pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One entry per (document, trigger) pair, in document then trigger order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub backend_id: String,
    pub budget: usize,
    pub score_convention: String,
    pub trigger_ids: Vec<String>,
    pub entries: Vec<ScoreEntry>,
}

impl ScoreTable {
    fn empty(backend_id: &str, budget: usize, triggers: &[TriggerPhrase]) -> Self {
        ScoreTable {
            backend_id: backend_id.to_string(),
            budget,
            score_convention: SCORE_CONVENTION.to_string(),
            trigger_ids: triggers.iter().map(|t| t.trigger_id.clone()).collect(),
            entries: Vec::new(),
        }
    }

    pub fn get(&self, doc_id: &str, trigger_id: &str) -> Option<&ScoreEntry> {
        self.entries.iter().find(|e| e.doc_id == doc_id && e.trigger_id == trigger_id)
    }

    pub fn failed(&self) -> usize {
        self.entries.iter().filter(|e| e.error.is_some()).count()
    }

    /// Scores for one trigger, skipping failed pairs.
    pub fn trigger_scores(&self, trigger_id: &str) -> Vec<f64> {
        self.entries.iter().filter(|e| e.trigger_id == trigger_id).filter_map(|e| e.mean_logprob).collect()
    }

    /// JSON lines: a header record, then one record per entry.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "type": "header",
            "backend_id": self.backend_id,
            "budget": self.budget,
            "score_convention": self.score_convention,
            "trigger_ids": self.trigger_ids,
        });
        writeln!(out, "{header}")?;
        for entry in &self.entries {
            writeln!(out, "{}", serde_json::to_string(entry)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, FilterError> {
        let mut lines = input.lines();
        let header: serde_json::Value = match lines.next() {
            Some(line) => serde_json::from_str(&line?).map_err(|e| FilterError::Manifest(e.to_string()))?,
            None => return Err(FilterError::Manifest("empty score file".into())),
        };
        #[derive(Deserialize)]
        struct Header {
            backend_id: String,
            budget: usize,
            score_convention: String,
            trigger_ids: Vec<String>,
        }
        let h: Header = serde_json::from_value(header).map_err(|e| FilterError::Manifest(e.to_string()))?;
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| FilterError::Manifest(e.to_string()))?);
        }
        Ok(ScoreTable {
            backend_id: h.backend_id,
            budget: h.budget,
            score_convention: h.score_convention,
            trigger_ids: h.trigger_ids,
            entries,
        })
    }
}

/// Scores every document against every trigger. Failed pairs are recorded
/// as failed, never given a default score.
pub fn score_corpus(
    docs: &[Document],
    triggers: &[TriggerPhrase],
    backend: &dyn ScoringBackend,
    budget: usize,
    jobs: usize,
) -> Result<ScoreTable, FilterError> {
    validate_triggers(triggers, budget)?;
    let mut table = ScoreTable::empty(&backend.descriptor().backend_id, budget, triggers);
    append_scores(&mut table, docs, triggers, backend, jobs)?;
    Ok(table)
}

fn append_scores(
    table: &mut ScoreTable,
    docs: &[Document],
    triggers: &[TriggerPhrase],
    backend: &dyn ScoringBackend,
    jobs: usize,
) -> Result<(), FilterError> {
    if docs.is_empty() {
        return Ok(());
    }
    let rows = backend.score_documents(docs, triggers, table.budget, jobs)?;
    for (doc, row) in docs.iter().zip(rows) {
        for (trigger, outcome) in triggers.iter().zip(row) {
            let entry = match outcome {
                Ok(record) => ScoreEntry {
                    doc_id: doc.id.clone(),
                    trigger_id: trigger.trigger_id.clone(),
                    mean_logprob: Some(record.mean_logprob),
                    token_count: Some(record.token_count),
                    error: None,
                },
                Err(message) => {
                    log::warn!("scoring {} / {} failed: {message}", doc.id, trigger.trigger_id);
                    ScoreEntry {
                        doc_id: doc.id.clone(),
                        trigger_id: trigger.trigger_id.clone(),
                        mean_logprob: None,
                        token_count: None,
                        error: Some(message),
                    }
                }
            };
            table.entries.push(entry);
        }
    }
    Ok(())
}

/// Max score over triggers for one document; `None` when every pair failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub doc_id: String,
    pub max: Option<(f64, String)>,
}

impl DocScore {
    pub fn scored(doc_id: impl Into<String>, score: f64, trigger_id: impl Into<String>) -> Self {
        DocScore { doc_id: doc_id.into(), max: Some((score, trigger_id.into())) }
    }

    pub fn score(&self) -> Option<f64> {
        self.max.as_ref().map(|(s, _)| *s)
    }
}

/// Per-document maximum over triggers, in first-appearance order. Ties go
/// to the lexicographically smallest trigger id.
pub fn aggregate_max(table: &ScoreTable) -> Vec<DocScore> {
    let mut order: Vec<DocScore> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for entry in &table.entries {
        let slot = *index.entry(&entry.doc_id).or_insert_with(|| {
            order.push(DocScore { doc_id: entry.doc_id.clone(), max: None });
            order.len() - 1
        });
        let Some(score) = entry.mean_logprob else { continue };
        let current = &mut order[slot].max;
        let better = match current {
            None => true,
            Some((best, best_id)) => score > *best || (score == *best && entry.trigger_id < *best_id),
        };
        if better {
            *current = Some((score, entry.trigger_id.clone()));
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
    /// 0-based position in descending score order.
    pub position: usize,
    pub top_decile: bool,
}

fn descending(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Descending by score, ties by doc id. Unscorable documents are left out.
/// The first `ceil(n / 10)` documents carry the top-decile flag.
pub fn rank(scores: &[DocScore]) -> Vec<RankedDoc> {
    let mut scored: Vec<(&str, f64)> = scores.iter().filter_map(|d| Some((d.doc_id.as_str(), d.score()?))).collect();
    scored.sort_by(|a, b| descending(*a, *b));
    let top = scored.len().div_ceil(10);
    scored
        .into_iter()
        .enumerate()
        .map(|(position, (doc_id, score))| RankedDoc { doc_id: doc_id.to_string(), score, position, top_decile: position < top })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    RemovedBlocklist,
    RemovedLikelihood,
    Retained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub doc_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_word: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argmax_trigger: Option<String>,
    pub threshold: f64,
    /// Every scoring attempt failed; retained by policy.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unscorable: bool,
}

impl FilterDecision {
    pub fn is_scored(&self) -> bool {
        self.verdict != Verdict::RemovedBlocklist && self.max_score.is_some()
    }
}

/// `removed-likelihood` iff `max_score > theta`, strictly. Unscorable
/// documents are retained.
pub fn apply_threshold(scores: &[DocScore], theta: f64) -> Result<Vec<FilterDecision>, FilterError> {
    if !theta.is_finite() {
        return Err(FilterError::BadThreshold(theta));
    }
    Ok(scores
        .iter()
        .map(|d| {
            let (max_score, argmax_trigger) = match &d.max {
                Some((s, t)) => (Some(*s), Some(t.clone())),
                None => (None, None),
            };
            let verdict = match max_score {
                Some(s) if s > theta => Verdict::RemovedLikelihood,
                _ => Verdict::Retained,
            };
            if max_score.is_none() {
                log::warn!("{} could not be scored; retained", d.doc_id);
            }
            FilterDecision {
                doc_id: d.doc_id.clone(),
                verdict,
                block_word: None,
                max_score,
                argmax_trigger,
                threshold: theta,
                unscorable: max_score.is_none(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub removed_blocklist: usize,
    pub removed_likelihood: usize,
    pub retained: usize,
    pub unscorable: usize,
    pub failed_items: usize,
    pub ingest_errors: usize,
    /// Blocklist removals over all documents.
    pub blocklist_fraction: f64,
    /// Likelihood removals over blocklist survivors.
    pub likelihood_fraction: f64,
    /// All removals over all documents.
    pub combined_fraction: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Stats {
    pub fn from_decisions(decisions: &[FilterDecision], failed_items: usize, ingest_errors: usize) -> Self {
        let count = |v: Verdict| decisions.iter().filter(|d| d.verdict == v).count();
        let total = decisions.len();
        let removed_blocklist = count(Verdict::RemovedBlocklist);
        let removed_likelihood = count(Verdict::RemovedLikelihood);
        Stats {
            total,
            removed_blocklist,
            removed_likelihood,
            retained: count(Verdict::Retained),
            unscorable: decisions.iter().filter(|d| d.unscorable).count(),
            failed_items,
            ingest_errors,
            blocklist_fraction: ratio(removed_blocklist, total),
            likelihood_fraction: ratio(removed_likelihood, total - removed_blocklist),
            combined_fraction: ratio(removed_blocklist + removed_likelihood, total),
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "total={} removed_blocklist={} removed_likelihood={} retained={} unscorable={} likelihood_fraction={:.4}",
            self.total, self.removed_blocklist, self.removed_likelihood, self.retained, self.unscorable, self.likelihood_fraction
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub backend_id: String,
    pub score_convention: String,
    pub threshold: f64,
    pub budget: usize,
    pub trigger_set_hash: String,
    pub blocklist_hash: String,
    pub corpus_hash: String,
    pub triggers: Vec<TriggerPhrase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub provenance: Provenance,
    pub stats: Stats,
    pub decisions: Vec<FilterDecision>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ManifestLine {
    Header { format: String, version: u32, provenance: Provenance, stats: Stats },
    Decision(FilterDecision),
}

impl Manifest {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = ManifestLine::Header {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            provenance: self.provenance.clone(),
            stats: self.stats.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for d in &self.decisions {
            writeln!(out, "{}", serde_json::to_string(&ManifestLine::Decision(d.clone()))?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, FilterError> {
        let mut header = None;
        let mut decisions = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| FilterError::Manifest(format!("line {}: {e}", n + 1)))? {
                ManifestLine::Header { format, version, provenance, stats } => {
                    if format != MANIFEST_FORMAT || version != MANIFEST_VERSION {
                        return Err(FilterError::Manifest(format!("unsupported {format} v{version}")));
                    }
                    header = Some((provenance, stats));
                }
                ManifestLine::Decision(d) => decisions.push(d),
            }
        }
        let (provenance, stats) = header.ok_or_else(|| FilterError::Manifest("missing header".into()))?;
        Ok(Manifest { provenance, stats, decisions })
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn threshold(&self) -> f64 {
        self.provenance.threshold
    }

    /// Max scores of every document that reached the likelihood stage and
    /// was scored.
    pub fn doc_scores(&self) -> Vec<DocScore> {
        self.decisions
            .iter()
            .filter(|d| d.is_scored())
            .map(|d| DocScore {
                doc_id: d.doc_id.clone(),
                max: d.max_score.map(|s| (s, d.argmax_trigger.clone().unwrap_or_default())),
            })
            .collect()
    }

    pub fn ids_with(&self, pred: impl Fn(&FilterDecision) -> bool) -> Vec<&str> {
        self.decisions.iter().filter(|d| pred(d)).map(|d| d.doc_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub theta: f64,
    pub budget: usize,
    pub jobs: usize,
    /// Documents scored per backend call.
    pub chunk_size: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { theta: DEFAULT_THETA, budget: DEFAULT_BUDGET, jobs: 1, chunk_size: 1024 }
    }
}

pub struct PipelineOutput {
    pub manifest: Manifest,
    pub scores: ScoreTable,
}

/// Blocklist, then likelihood scoring of the survivors, then the threshold.
/// `observe` sees every ingested document once, in input order.
pub fn run_pipeline<I>(
    docs: I,
    blocklist: &Blocklist,
    triggers: &[TriggerPhrase],
    backend: &dyn ScoringBackend,
    options: PipelineOptions,
    ingest_errors: usize,
    mut observe: impl FnMut(&Document),
) -> Result<PipelineOutput, FilterError>
where
    I: IntoIterator<Item = Result<Document, CorpusError>>,
{
    validate_triggers(triggers, options.budget)?;
    if !options.theta.is_finite() {
        return Err(FilterError::BadThreshold(options.theta));
    }
    let mut scores = ScoreTable::empty(&backend.descriptor().backend_id, options.budget, triggers);
    let mut decisions: Vec<FilterDecision> = Vec::new();
    let mut corpus_hasher = Sha256::new();
    let mut survivors: Vec<Document> = Vec::new();
    // positions of not-yet-decided survivors in `decisions`
    let mut slots: Vec<usize> = Vec::new();

    let flush = |survivors: &mut Vec<Document>, slots: &mut Vec<usize>, decisions: &mut Vec<FilterDecision>, scores: &mut ScoreTable| -> Result<(), FilterError> {
        let start = scores.entries.len();
        append_scores(scores, survivors, triggers, backend, options.jobs)?;
        let chunk = ScoreTable { entries: scores.entries[start..].to_vec(), ..ScoreTable::empty("", 0, &[]) };
        let maxes = aggregate_max(&chunk);
        for (slot, decision) in slots.drain(..).zip(apply_threshold(&maxes, options.theta)?) {
            decisions[slot] = decision;
        }
        survivors.clear();
        Ok(())
    };

    for doc in docs {
        let doc = doc?;
        observe(&doc);
        corpus_hasher.update(doc.id.as_bytes());
        corpus_hasher.update([0u8]);
        corpus_hasher.update(doc.text.as_bytes());
        corpus_hasher.update([0u8]);
        match blocklist.match_document(&doc) {
            Some(hit) => decisions.push(FilterDecision {
                doc_id: doc.id.clone(),
                verdict: Verdict::RemovedBlocklist,
                block_word: Some(hit.word),
                max_score: None,
                argmax_trigger: None,
                threshold: options.theta,
                unscorable: false,
            }),
            None => {
                slots.push(decisions.len());
                decisions.push(FilterDecision {
                    doc_id: doc.id.clone(),
                    verdict: Verdict::Retained,
                    block_word: None,
                    max_score: None,
                    argmax_trigger: None,
                    threshold: options.theta,
                    unscorable: true,
                });
                survivors.push(doc);
                if survivors.len() >= options.chunk_size.max(1) {
                    flush(&mut survivors, &mut slots, &mut decisions, &mut scores)?;
                }
            }
        }
    }
    flush(&mut survivors, &mut slots, &mut decisions, &mut scores)?;

    let stats = Stats::from_decisions(&decisions, scores.failed(), ingest_errors);
    let provenance = Provenance {
        tool: concat!("likefilter ", env!("CARGO_PKG_VERSION")).to_string(),
        backend_id: backend.descriptor().backend_id.clone(),
        score_convention: SCORE_CONVENTION.to_string(),
        threshold: options.theta,
        budget: options.budget,
        trigger_set_hash: trigger_set_hash(triggers),
        blocklist_hash: blocklist.content_hash(),
        corpus_hash: hex::encode(corpus_hasher.finalize()),
        triggers: triggers.to_vec(),
    };
    Ok(PipelineOutput { manifest: Manifest { provenance, stats, decisions }, scores })
}

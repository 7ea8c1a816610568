//! Human-evaluation support: verification sampling, label import and
//! resolution, and per-bucket label composition.
//!
//! Sampling uses ChaCha8 seeded from a `u64` (`rand_chacha::ChaCha8Rng`),
//! with `rand::seq::index::sample` drawing indices without replacement from
//! each bucket's doc ids sorted ascending. The proposed-filter bucket is
//! drawn first, then proposed-keep, from the same generator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::filter::{rank, FilterDecision, Manifest, Verdict};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("bucket {0} is empty")]
    EmptyBucket(Bucket),
    #[error("n_per_bucket must be at least 1")]
    ZeroSample,
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("{location}: {message}")]
    Record { location: String, message: String },
    #[error("labeled document {0:?} is not in the manifest")]
    NotInManifest(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bucket {
    ProposedFilter,
    ProposedKeep,
}

impl Bucket {
    pub const ALL: [Bucket; 2] = [Bucket::ProposedFilter, Bucket::ProposedKeep];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::ProposedFilter => "proposed-filter",
            Bucket::ProposedKeep => "proposed-keep",
        }
    }

    /// Bucket of a scored decision at threshold `theta`. Blocklisted and
    /// unscorable documents are in neither bucket.
    pub fn of(decision: &FilterDecision, theta: f64) -> Option<Bucket> {
        if !decision.is_scored() {
            return None;
        }
        Some(if decision.max_score? > theta { Bucket::ProposedFilter } else { Bucket::ProposedKeep })
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Bucket {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proposed-filter" => Ok(Bucket::ProposedFilter),
            "proposed-keep" => Ok(Bucket::ProposedKeep),
            other => Err(format!("unknown bucket {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelCategory {
    Harmful,
    Expository,
    Counterspeech,
    NonHarmful,
    Unknown,
}

impl LabelCategory {
    pub const ALL: [LabelCategory; 5] = [
        LabelCategory::Harmful,
        LabelCategory::Expository,
        LabelCategory::Counterspeech,
        LabelCategory::NonHarmful,
        LabelCategory::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelCategory::Harmful => "harmful",
            LabelCategory::Expository => "expository",
            LabelCategory::Counterspeech => "counterspeech",
            LabelCategory::NonHarmful => "non-harmful",
            LabelCategory::Unknown => "unknown",
        }
    }

    /// Tie-break rank: higher wins.
    fn severity(self) -> u8 {
        match self {
            LabelCategory::Harmful => 4,
            LabelCategory::Counterspeech => 3,
            LabelCategory::Expository => 2,
            LabelCategory::Unknown => 1,
            LabelCategory::NonHarmful => 0,
        }
    }

    pub fn column(self) -> Column {
        match self {
            LabelCategory::Harmful => Column::Harmful,
            LabelCategory::Expository | LabelCategory::Counterspeech => Column::ExpositoryOrCounterspeech,
            LabelCategory::NonHarmful => Column::NonHarmful,
            LabelCategory::Unknown => Column::Unknown,
        }
    }
}

impl fmt::Display for LabelCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelCategory {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LabelCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| EvalError::UnknownCategory(s.to_string()))
    }
}

/// Reporting columns; expository and counterspeech share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Column {
    Harmful,
    ExpositoryOrCounterspeech,
    NonHarmful,
    Unknown,
}

impl Column {
    pub const ALL: [Column; 4] = [Column::Harmful, Column::ExpositoryOrCounterspeech, Column::NonHarmful, Column::Unknown];

    pub fn title(self) -> &'static str {
        match self {
            Column::Harmful => "Harmful",
            Column::ExpositoryOrCounterspeech => "Expository/Counterspeech",
            Column::NonHarmful => "Non-Harmful",
            Column::Unknown => "Unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub doc_id: String,
    pub annotator_id: String,
    pub category: LabelCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationItem {
    pub doc_id: String,
    pub bucket: Bucket,
    pub max_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argmax_trigger: Option<String>,
    /// 100 for the highest-scoring document, down to 100/n for the lowest.
    pub rank_percentile: f64,
    pub top_decile: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excerpt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSet {
    pub seed: u64,
    pub threshold: f64,
    pub items: Vec<VerificationItem>,
    pub warnings: Vec<String>,
}

/// Uniform sample without replacement of up to `n_per_bucket` documents
/// from each bucket at threshold `theta`.
pub fn sample_verification(
    decisions: &[FilterDecision],
    theta: f64,
    n_per_bucket: usize,
    seed: u64,
) -> Result<VerificationSet, EvalError> {
    sample_buckets(decisions, theta, &Bucket::ALL, n_per_bucket, seed)
}

pub fn sample_buckets(
    decisions: &[FilterDecision],
    theta: f64,
    buckets: &[Bucket],
    n_per_bucket: usize,
    seed: u64,
) -> Result<VerificationSet, EvalError> {
    if n_per_bucket == 0 {
        return Err(EvalError::ZeroSample);
    }
    let scored: Vec<&FilterDecision> = decisions.iter().filter(|d| d.is_scored()).collect();
    let ranked: HashMap<String, (usize, bool)> = rank(
        &scored
            .iter()
            .map(|d| crate::filter::DocScore { doc_id: d.doc_id.clone(), max: d.max_score.map(|s| (s, String::new())) })
            .collect::<Vec<_>>(),
    )
    .into_iter()
    .map(|r| (r.doc_id, (r.position, r.top_decile)))
    .collect();
    let n_scored = scored.len();

    let mut members: BTreeMap<Bucket, Vec<&FilterDecision>> = BTreeMap::new();
    for d in &scored {
        if let Some(bucket) = Bucket::of(d, theta) {
            members.entry(bucket).or_default().push(d);
        }
    }
    for bucket in buckets {
        if members.get(bucket).is_none_or(Vec::is_empty) {
            return Err(EvalError::EmptyBucket(*bucket));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for bucket in Bucket::ALL.into_iter().filter(|b| buckets.contains(b)) {
        let mut pool = members.remove(&bucket).unwrap_or_default();
        pool.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let amount = n_per_bucket.min(pool.len());
        if amount < n_per_bucket {
            let warning = format!("{bucket} has only {} documents; sampling all of them", pool.len());
            log::warn!("{warning}");
            warnings.push(warning);
        }
        for index in rand::seq::index::sample(&mut rng, pool.len(), amount) {
            let d = pool[index];
            let (position, top_decile) = ranked[&d.doc_id];
            items.push(VerificationItem {
                doc_id: d.doc_id.clone(),
                bucket,
                max_score: d.max_score.expect("scored"),
                argmax_trigger: d.argmax_trigger.clone(),
                rank_percentile: 100.0 * (n_scored - position) as f64 / n_scored as f64,
                top_decile,
                excerpt: None,
            });
        }
    }
    Ok(VerificationSet { seed, threshold: theta, items, warnings })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LabelImport {
    pub records: Vec<LabelRecord>,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawLabel {
    doc_id: String,
    annotator_id: String,
    category: String,
    #[serde(default)]
    timestamp: Option<String>,
}

/// Reads labels from CSV (by `.csv` extension) or JSON lines. Later records
/// for the same (doc, annotator) replace earlier ones.
pub fn import_labels(path: &Path, strict: bool) -> Result<LabelImport, EvalError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let content = std::fs::read_to_string(path)?;
    let label = path.display().to_string();
    let raw: Vec<(String, Result<RawLabel, String>)> = if is_csv {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(content.as_bytes());
        reader
            .deserialize::<RawLabel>()
            .enumerate()
            .map(|(i, r)| (format!("{label}:{}", i + 2), r.map_err(|e| e.to_string())))
            .collect()
    } else {
        content
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (format!("{label}:{}", i + 1), serde_json::from_str::<RawLabel>(l).map_err(|e| e.to_string())))
            .collect()
    };
    parse_labels(raw, strict)
}

fn parse_labels(raw: Vec<(String, Result<RawLabel, String>)>, strict: bool) -> Result<LabelImport, EvalError> {
    let mut import = LabelImport::default();
    let mut latest: HashMap<(String, String), usize> = HashMap::new();
    for (location, parsed) in raw {
        let record = parsed.and_then(|r| {
            let category = r.category.trim().parse::<LabelCategory>().map_err(|e| e.to_string())?;
            Ok(LabelRecord { doc_id: r.doc_id, annotator_id: r.annotator_id, category, timestamp: r.timestamp })
        });
        let record = match record {
            Ok(r) => r,
            Err(message) if strict => return Err(EvalError::Record { location, message }),
            Err(message) => {
                import.errors.push(format!("{location}: {message}"));
                continue;
            }
        };
        let key = (record.doc_id.clone(), record.annotator_id.clone());
        if let Some(&slot) = latest.get(&key) {
            import.warnings.push(format!("{location}: replaces earlier label by {} for {}", key.1, key.0));
            import.records[slot] = record;
        } else {
            latest.insert(key, import.records.len());
            import.records.push(record);
        }
    }
    Ok(import)
}

/// Applies last-wins semantics to records already in submission order.
pub fn dedup_last_wins(records: impl IntoIterator<Item = LabelRecord>) -> Vec<LabelRecord> {
    let mut latest: BTreeMap<(String, String), LabelRecord> = BTreeMap::new();
    for r in records {
        latest.insert((r.doc_id.clone(), r.annotator_id.clone()), r);
    }
    latest.into_values().collect()
}

/// Plurality vote; ties go to the most severe category
/// (harmful > counterspeech > expository > unknown > non-harmful).
pub fn resolve(categories: &[LabelCategory]) -> Option<LabelCategory> {
    let mut counts: BTreeMap<LabelCategory, usize> = BTreeMap::new();
    for c in categories {
        *counts.entry(*c).or_default() += 1;
    }
    counts.into_iter().max_by_key(|(c, n)| (*n, c.severity())).map(|(c, _)| c)
}

pub fn resolve_labels(records: &[LabelRecord]) -> BTreeMap<String, LabelCategory> {
    let mut by_doc: BTreeMap<&str, Vec<LabelCategory>> = BTreeMap::new();
    for r in records {
        by_doc.entry(&r.doc_id).or_default().push(r.category);
    }
    by_doc.into_iter().filter_map(|(doc, cats)| Some((doc.to_string(), resolve(&cats)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: Bucket,
    pub denominator: usize,
    pub percentages: BTreeMap<Column, f64>,
    pub counts: BTreeMap<LabelCategory, usize>,
}

impl BucketRow {
    pub fn percent(&self, column: Column) -> f64 {
        self.percentages.get(&column).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub threshold: f64,
    pub rows: Vec<BucketRow>,
    /// Labeled documents that fall in neither bucket (blocklisted or unscored).
    pub excluded: usize,
}

impl CompositionTable {
    pub fn row(&self, bucket: Bucket) -> Option<&BucketRow> {
        self.rows.iter().find(|r| r.bucket == bucket)
    }

    pub fn render_text(&self) -> String {
        let mut out = format!("{:<20}", "");
        for c in Column::ALL {
            out.push_str(&format!("{:>26}", c.title()));
        }
        out.push_str(&format!("{:>8}\n", "n"));
        for row in &self.rows {
            let name = match row.bucket {
                Bucket::ProposedFilter => "Proposed to filter",
                Bucket::ProposedKeep => "Proposed to keep",
            };
            out.push_str(&format!("{name:<20}"));
            for c in Column::ALL {
                out.push_str(&format!("{:>25.2}%", row.percent(c)));
            }
            out.push_str(&format!("{:>8}\n", row.denominator));
        }
        out
    }
}

/// Per-bucket label percentages under threshold `theta`.
pub fn composition(
    resolved: &BTreeMap<String, LabelCategory>,
    decisions: &[FilterDecision],
    theta: f64,
) -> Result<CompositionTable, EvalError> {
    let by_id: HashMap<&str, &FilterDecision> = decisions.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut counts: BTreeMap<Bucket, BTreeMap<LabelCategory, usize>> = BTreeMap::new();
    let mut excluded = 0;
    for (doc_id, category) in resolved {
        let decision = by_id.get(doc_id.as_str()).ok_or_else(|| EvalError::NotInManifest(doc_id.clone()))?;
        match Bucket::of(decision, theta) {
            Some(bucket) => *counts.entry(bucket).or_default().entry(*category).or_default() += 1,
            None => excluded += 1,
        }
    }
    let mut rows = Vec::new();
    for bucket in Bucket::ALL {
        let counts = counts.remove(&bucket).ok_or(EvalError::EmptyBucket(bucket))?;
        let denominator: usize = counts.values().sum();
        let mut percentages: BTreeMap<Column, f64> = Column::ALL.into_iter().map(|c| (c, 0.0)).collect();
        for (category, n) in &counts {
            *percentages.get_mut(&category.column()).expect("all columns") += *n as f64;
        }
        for value in percentages.values_mut() {
            *value = 100.0 * *value / denominator as f64;
        }
        rows.push(BucketRow { bucket, denominator, percentages, counts });
    }
    Ok(CompositionTable { threshold: theta, rows, excluded })
}

/// Composition using the manifest's own threshold.
pub fn manifest_composition(resolved: &BTreeMap<String, LabelCategory>, manifest: &Manifest) -> Result<CompositionTable, EvalError> {
    composition(resolved, &manifest.decisions, manifest.threshold())
}

pub fn is_removed_likelihood(d: &FilterDecision) -> bool {
    d.verdict == Verdict::RemovedLikelihood
}

//! Corpus filtration by conditional likelihood of trigger phrases.
//!
//! A document is scored by how likely a language model finds a short
//! trigger phrase once it has read the start of the document. Documents
//! that make any trigger likely enough (mean log-prob above a threshold)
//! are removed, after a word-level blocklist pass. Around that pipeline sit
//! the tools needed to pick and audit a threshold: histograms, sweeps,
//! verification sampling for human labeling, label composition tables,
//! overlap with external toxicity scores, and a benchmark contamination
//! scanner.

pub mod blocklist;
pub mod cli;
pub mod corpus;
pub mod evalharness;
pub mod filter;
pub mod lm;
pub mod report;
pub mod rundir;
pub mod server;
pub mod tokenizer;

pub use blocklist::{load_blocklist, scan_benchmark, BlockMatch, Blocklist, ContaminationReport};
pub use corpus::{excerpt, ingest, Document, Excerpt, Format, IngestOptions};
pub use evalharness::{composition, import_labels, resolve_labels, sample_verification, CompositionTable, LabelCategory, LabelRecord};
pub use filter::{
    aggregate_max, apply_threshold, rank, run_pipeline, score_corpus, FilterDecision, Manifest, PipelineOptions, ScoreTable,
    TriggerPhrase, Verdict,
};
pub use lm::{score_trigger, train_ngram, ExternalScorer, NGramModel, ReferenceBackend, ScoreRecord, ScoringBackend};
pub use report::{histogram, overlap, threshold_sweep, Histogram, OverlapTable};
pub use tokenizer::{build_vocab, tokenize, Vocab};

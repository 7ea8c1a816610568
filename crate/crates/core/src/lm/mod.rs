//! Scoring backends: per-token conditional log-likelihood of a continuation
//! (a trigger phrase) given a context (a document excerpt).
//!
//! All values are natural-log probabilities. A document's score for a
//! trigger is the arithmetic mean of the trigger's per-token log-probs.

mod external;
mod ngram;
pub mod protocol;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::filter::TriggerPhrase;
use crate::tokenizer::tokenize;

pub use external::{ClientStats, ExternalConfig, ExternalScorer, RetryPolicy, ScoreItem};
pub use ngram::{train_ngram, uniform_lambda, ModelError, NGramModel, ReferenceBackend};

/// Score convention recorded in every manifest.
pub const SCORE_CONVENTION: &str = "mean-logprob-nats";

/// Approximate characters per model token, used to turn a token budget into
/// the character hint sent to external scorers.
pub const CHARS_PER_TOKEN_HINT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub doc_id: String,
    pub trigger_id: String,
    pub mean_logprob: f64,
    pub token_count: usize,
    pub backend_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    ReferenceNgram,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub kind: BackendKind,
    pub tokenizer_note: String,
}

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("empty continuation")]
    EmptyContinuation,
    #[error("trigger {0:?} tokenizes to no tokens")]
    EmptyTrigger(String),
    #[error("trigger {trigger_id:?} has {tokens} tokens, more than the budget of {budget}")]
    TriggerTooLong { trigger_id: String, tokens: usize, budget: usize },
    #[error("scorer protocol error: {0}")]
    Protocol(String),
    #[error("scorer unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

/// Result of scoring one (document, trigger) pair. Failures carry the
/// scorer's message and are never replaced by a default score.
pub type ItemOutcome = Result<ScoreRecord, String>;

pub trait ScoringBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Scores every trigger against every document. The outer vector follows
    /// `docs`, the inner one follows `triggers`. Triggers must already be
    /// validated against `budget` with [`trigger_tokens`].
    fn score_documents(
        &self,
        docs: &[Document],
        triggers: &[TriggerPhrase],
        budget: usize,
        jobs: usize,
    ) -> Result<Vec<Vec<ItemOutcome>>, LmError>;
}

/// Tokenizes a trigger and checks that it fits the total budget.
pub fn trigger_tokens(trigger: &TriggerPhrase, budget: usize) -> Result<Vec<String>, LmError> {
    let tokens = tokenize(&trigger.text);
    if tokens.is_empty() {
        return Err(LmError::EmptyTrigger(trigger.trigger_id.clone()));
    }
    if tokens.len() > budget {
        return Err(LmError::TriggerTooLong {
            trigger_id: trigger.trigger_id.clone(),
            tokens: tokens.len(),
            budget,
        });
    }
    Ok(tokens)
}

/// Scores a single trigger against a single document. The excerpt gets
/// `budget - trigger_tokens` tokens so the concatenation fits in `budget`.
pub fn score_trigger(
    backend: &dyn ScoringBackend,
    doc: &Document,
    trigger: &TriggerPhrase,
    budget: usize,
) -> Result<ScoreRecord, LmError> {
    trigger_tokens(trigger, budget)?;
    let mut out = backend.score_documents(std::slice::from_ref(doc), std::slice::from_ref(trigger), budget, 1)?;
    out.pop()
        .and_then(|mut row| row.pop())
        .ok_or_else(|| LmError::Other("backend returned no result".into()))?
        .map_err(LmError::Other)
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs `f` on a dedicated rayon pool with `jobs` threads. Results keep input
/// order, so output does not depend on `jobs`.
pub(crate) fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("falling back to sequential scoring: {e}");
            items.iter().map(f).collect()
        }
    }
}

impl ScoringBackend for ReferenceBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn score_documents(
        &self,
        docs: &[Document],
        triggers: &[TriggerPhrase],
        budget: usize,
        jobs: usize,
    ) -> Result<Vec<Vec<ItemOutcome>>, LmError> {
        let prepared = triggers
            .iter()
            .map(|t| trigger_tokens(t, budget).map(|tokens| self.model.vocab().encode(&tokens)))
            .collect::<Result<Vec<_>, _>>()?;
        let backend_id = &self.descriptor.backend_id;
        Ok(par_map(docs, jobs, |doc| {
            let doc_ids = self.model.vocab().encode(&tokenize(&doc.text));
            triggers
                .iter()
                .zip(&prepared)
                .map(|(trigger, trigger_ids)| {
                    // excerpt: leading tokens, leaving room for the trigger
                    let context = &doc_ids[..doc_ids.len().min(budget - trigger_ids.len())];
                    let logprobs = self.model.logprob_ids(context, trigger_ids).map_err(|e| e.to_string())?;
                    Ok(ScoreRecord {
                        doc_id: doc.id.clone(),
                        trigger_id: trigger.trigger_id.clone(),
                        mean_logprob: mean(&logprobs),
                        token_count: logprobs.len(),
                        backend_id: backend_id.clone(),
                    })
                })
                .collect()
        }))
    }
}

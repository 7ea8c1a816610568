//! Interpolated n-gram reference model.
//!
//! `p(w | h) = Σₖ λₖ · pₖ(w | hₖ)` where `hₖ` is the last `k-1` tokens of the
//! history. Orders `k ≥ 2` use maximum-likelihood estimates
//! `count(hₖ w) / context_total(hₖ)`; an order whose context was never seen
//! (or is longer than the available history) contributes nothing and its
//! weight is spread proportionally over the remaining orders. The unigram
//! order is add-one smoothed, `(c(w) + 1) / (N + V)`, so it is always
//! available and every probability is strictly positive.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendDescriptor, BackendKind, LmError};
use crate::corpus::Document;
use crate::tokenizer::{rules_hash, tokenize, Vocab};

const MODEL_FORMAT: &str = "likefilter-ngram";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("order must be at least 1")]
    ZeroOrder,
    #[error("expected {expected} interpolation weights, got {got}")]
    LambdaLength { expected: usize, got: usize },
    #[error("interpolation weights must be finite, non-negative and sum to 1 (sum = {0})")]
    LambdaInvalid(f64),
    #[error("model file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    vocab: Vocab,
    lambda: Vec<f64>,
    unigram: Vec<u64>,
    /// k-gram counts for k ≥ 2, keyed by the full token-id tuple.
    counts: HashMap<Vec<u32>, u64>,
    /// Number of continuations observed after each (k-1)-gram context.
    context_totals: HashMap<Vec<u32>, u64>,
    total_tokens: u64,
}

pub fn uniform_lambda(order: usize) -> Vec<f64> {
    vec![1.0 / order as f64; order]
}

fn validate_lambda(order: usize, lambda: &[f64]) -> Result<Vec<f64>, ModelError> {
    if order == 0 {
        return Err(ModelError::ZeroOrder);
    }
    if lambda.len() != order {
        return Err(ModelError::LambdaLength { expected: order, got: lambda.len() });
    }
    let sum: f64 = lambda.iter().sum();
    if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(ModelError::LambdaInvalid(sum));
    }
    Ok(if sum == 1.0 { lambda.to_vec() } else { lambda.iter().map(|l| l / sum).collect() })
}

/// Counts all k-grams (1 ≤ k ≤ `order`) within each document. Documents do
/// not share context. Tokens missing from `vocab` count as UNK.
pub fn train_ngram<'a, I>(docs: I, order: usize, vocab: Vocab, lambda: &[f64]) -> Result<NGramModel, ModelError>
where
    I: IntoIterator<Item = &'a Document>,
{
    let lambda = validate_lambda(order, lambda)?;
    let mut model = NGramModel {
        order,
        unigram: vec![0; vocab.len()],
        vocab,
        lambda,
        counts: HashMap::new(),
        context_totals: HashMap::new(),
        total_tokens: 0,
    };
    for doc in docs {
        let ids = model.vocab.encode(&tokenize(&doc.text));
        model.add_sequence(&ids);
    }
    Ok(model)
}

impl NGramModel {
    fn add_sequence(&mut self, ids: &[u32]) {
        for &id in ids {
            self.unigram[id as usize] += 1;
        }
        self.total_tokens += ids.len() as u64;
        for k in 2..=self.order {
            for gram in ids.windows(k) {
                *self.counts.entry(gram.to_vec()).or_default() += 1;
                *self.context_totals.entry(gram[..k - 1].to_vec()).or_default() += 1;
            }
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    /// Occurrence count of a k-gram of token ids (k ≥ 1).
    pub fn count(&self, gram: &[u32]) -> u64 {
        match gram {
            [] => 0,
            [id] => self.unigram.get(*id as usize).copied().unwrap_or(0),
            _ => self.counts.get(gram).copied().unwrap_or(0),
        }
    }

    pub fn context_total(&self, context: &[u32]) -> u64 {
        self.context_totals.get(context).copied().unwrap_or(0)
    }

    /// `p(word | history)`; only the last `order - 1` history tokens matter.
    pub fn prob(&self, history: &[u32], word: u32) -> f64 {
        let v = self.vocab.len() as f64;
        let unigram = (self.count(&[word]) as f64 + 1.0) / (self.total_tokens as f64 + v);
        let mut weighted = self.lambda[0] * unigram;
        let mut weight = self.lambda[0];
        let mut gram = Vec::with_capacity(self.order);
        for k in 2..=self.order {
            if history.len() < k - 1 {
                break;
            }
            let context = &history[history.len() - (k - 1)..];
            let total = self.context_total(context);
            if total == 0 {
                continue;
            }
            gram.clear();
            gram.extend_from_slice(context);
            gram.push(word);
            weighted += self.lambda[k - 1] * self.count(&gram) as f64 / total as f64;
            weight += self.lambda[k - 1];
        }
        if weight == 0.0 {
            // every available order has zero weight: fall back to the unigram
            return unigram;
        }
        weighted / weight
    }

    /// Natural-log probability of each continuation token given the context
    /// and the preceding continuation tokens.
    pub fn logprob_ids(&self, context: &[u32], continuation: &[u32]) -> Result<Vec<f64>, LmError> {
        if continuation.is_empty() {
            return Err(LmError::EmptyContinuation);
        }
        let keep = self.order - 1;
        let mut history: Vec<u32> = context[context.len().saturating_sub(keep)..].to_vec();
        let mut out = Vec::with_capacity(continuation.len());
        for &word in continuation {
            out.push(self.prob(&history, word).ln());
            history.push(word);
            if history.len() > keep {
                history.remove(0);
            }
        }
        Ok(out)
    }

    pub fn logprob_seq<S: AsRef<str>>(&self, context: &[S], continuation: &[S]) -> Result<Vec<f64>, LmError> {
        self.logprob_ids(&self.vocab.encode(context), &self.vocab.encode(continuation))
    }

    fn to_file(&self) -> ModelFile {
        let mut ngrams: Vec<(Vec<u32>, u64)> = self
            .unigram
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(id, c)| (vec![id as u32], *c))
            .chain(self.counts.iter().map(|(g, c)| (g.clone(), *c)))
            .collect();
        ngrams.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)));
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            rules_hash: rules_hash(),
            vocab_hash: self.vocab.content_hash(),
            order: self.order,
            lambda: self.lambda.clone(),
            total_tokens: self.total_tokens,
            vocab: self.vocab.tokens()[1..].to_vec(),
            ngrams,
        }
    }

    fn from_file(file: ModelFile) -> Result<Self, ModelError> {
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(ModelError::Format(format!("unsupported format {} v{}", file.format, file.version)));
        }
        if file.rules_hash != rules_hash() {
            return Err(ModelError::Format("tokenizer rules differ from this build".into()));
        }
        validate_lambda(file.order, &file.lambda)?;
        let lambda = file.lambda;
        let vocab = Vocab::from_tokens(file.vocab);
        if vocab.content_hash() != file.vocab_hash {
            return Err(ModelError::Format("vocab hash mismatch".into()));
        }
        let mut model = NGramModel {
            order: file.order,
            unigram: vec![0; vocab.len()],
            vocab,
            lambda,
            counts: HashMap::new(),
            context_totals: HashMap::new(),
            total_tokens: file.total_tokens,
        };
        for (gram, count) in file.ngrams {
            if gram.is_empty() || gram.len() > model.order || gram.iter().any(|id| *id as usize >= model.vocab.len()) {
                return Err(ModelError::Format(format!("bad n-gram {gram:?}")));
            }
            if let [id] = gram[..] {
                model.unigram[id as usize] = count;
            } else {
                *model.context_totals.entry(gram[..gram.len() - 1].to_vec()).or_default() += count;
                model.counts.insert(gram, count);
            }
        }
        if model.unigram.iter().sum::<u64>() != model.total_tokens {
            return Err(ModelError::Format("unigram counts do not sum to total_tokens".into()));
        }
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<(), ModelError> {
        serde_json::to_writer(out, &self.to_file())?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self, ModelError> {
        Self::from_file(serde_json::from_reader(input)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Hash of the canonical serialized model.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("serializing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    rules_hash: String,
    vocab_hash: String,
    order: usize,
    lambda: Vec<f64>,
    total_tokens: u64,
    /// Tokens in id order, without the leading UNK.
    vocab: Vec<String>,
    /// `[ids, count]` rows sorted by (length, ids).
    ngrams: Vec<(Vec<u32>, u64)>,
}

/// The n-gram model wrapped as a scoring backend.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    pub(super) model: NGramModel,
    pub(super) descriptor: BackendDescriptor,
}

impl ReferenceBackend {
    pub fn new(model: NGramModel) -> Self {
        let hash = model.content_hash();
        let descriptor = BackendDescriptor {
            backend_id: format!("ref-ngram:{}:{}", model.order(), &hash[..16]),
            kind: BackendKind::ReferenceNgram,
            tokenizer_note: "likefilter word tokenizer; budget counted in its tokens".to_string(),
        };
        ReferenceBackend { model, descriptor }
    }

    pub fn model(&self) -> &NGramModel {
        &self.model
    }
}

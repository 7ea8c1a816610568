//! Word-level tokenization and vocabulary construction.
//!
//! Text is NFKC-normalized, lowercased, split on Unicode whitespace, and then
//! leading and trailing punctuation (general category P*) is peeled off each
//! chunk one character at a time. Punctuation inside a chunk stays attached,
//! so `anti-american` and `don't` remain single tokens.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::Document;

/// Surface form reserved for out-of-vocabulary tokens. Always id 0.
pub const UNK: &str = "<unk>";
pub const UNK_ID: u32 = 0;

const VOCAB_FORMAT_VERSION: u32 = 1;

/// Human-readable statement of the tokenization rules. Its hash goes into
/// vocab and model files so that artifacts built under different rules are
/// rejected at load time.
pub const RULES: &str = "nfkc;lowercase;nfkc;split-unicode-whitespace;peel-edge-punctuation(P*)";

pub fn rules_hash() -> String {
    hex::encode(Sha256::digest(RULES.as_bytes()))
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed vocab file: {0}")]
    Malformed(String),
    #[error("vocab was built with different tokenizer rules (hash {found}, expected {expected})")]
    RulesMismatch { found: String, expected: String },
    #[error("min_count must be at least 1")]
    ZeroMinCount,
}

fn is_punct(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Normalizes `text` the way [`tokenize`] does before splitting.
pub fn normalize(text: &str) -> String {
    // Lowercasing can leave a string that is no longer NFKC-stable, so
    // normalize again after it.
    let lowered = text.nfkc().collect::<String>().to_lowercase();
    lowered.nfkc().collect()
}

pub fn tokenize(text: &str) -> Vec<String> {
    let normalized = normalize(text);
    let mut tokens = Vec::new();
    for chunk in normalized.split_whitespace() {
        push_chunk(chunk, &mut tokens);
    }
    tokens
}

fn push_chunk(chunk: &str, out: &mut Vec<String>) {
    let mut rest = chunk;
    while let Some(c) = rest.chars().next() {
        if !is_punct(c) {
            break;
        }
        out.push(c.to_string());
        rest = &rest[c.len_utf8()..];
    }
    if rest.is_empty() {
        return;
    }
    let mut trailing = Vec::new();
    while let Some(c) = rest.chars().next_back() {
        if !is_punct(c) {
            break;
        }
        trailing.push(c.to_string());
        rest = &rest[..rest.len() - c.len_utf8()];
    }
    out.push(rest.to_string());
    out.extend(trailing.into_iter().rev());
}

/// Token to integer id mapping. Id 0 is always [`UNK`].
#[derive(Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab").field("size", &self.len()).finish()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocab {
    /// Builds a vocab from tokens in id order (UNK is prepended, duplicates
    /// and the literal UNK surface are dropped).
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut vocab = Vocab {
            tokens: vec![UNK.to_string()],
            ids: HashMap::from([(UNK.to_string(), UNK_ID)]),
        };
        for token in tokens {
            if vocab.ids.contains_key(&token) {
                continue;
            }
            vocab.ids.insert(token.clone(), vocab.tokens.len() as u32);
            vocab.tokens.push(token);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Never true: UNK is always present.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Content hash over the rules hash and the id-ordered token list.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(rules_hash().as_bytes());
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "#likefilter-vocab version={} size={} rules={}",
            VOCAB_FORMAT_VERSION,
            self.len(),
            rules_hash()
        )?;
        for token in &self.tokens {
            writeln!(out, "{token}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, VocabError> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| VocabError::Malformed("missing header".into()))??;
        let mut version = None;
        let mut size = None;
        let mut rules = None;
        let fields = header
            .strip_prefix("#likefilter-vocab ")
            .ok_or_else(|| VocabError::Malformed("bad header".into()))?;
        for field in fields.split_whitespace() {
            match field.split_once('=') {
                Some(("version", v)) => version = v.parse::<u32>().ok(),
                Some(("size", v)) => size = v.parse::<usize>().ok(),
                Some(("rules", v)) => rules = Some(v.to_string()),
                _ => return Err(VocabError::Malformed(format!("unknown header field {field:?}"))),
            }
        }
        if version != Some(VOCAB_FORMAT_VERSION) {
            return Err(VocabError::Malformed(format!("unsupported version {version:?}")));
        }
        let size = size.ok_or_else(|| VocabError::Malformed("missing size".into()))?;
        let rules = rules.ok_or_else(|| VocabError::Malformed("missing rules".into()))?;
        if rules != rules_hash() {
            return Err(VocabError::RulesMismatch { found: rules, expected: rules_hash() });
        }
        let tokens = lines.collect::<Result<Vec<_>, _>>()?;
        if tokens.len() != size || tokens.first().map(String::as_str) != Some(UNK) {
            return Err(VocabError::Malformed(format!(
                "expected {size} tokens starting with {UNK}, found {}",
                tokens.len()
            )));
        }
        let vocab = Vocab::from_tokens(tokens.into_iter().skip(1));
        if vocab.len() != size {
            return Err(VocabError::Malformed("duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

/// Counts token frequencies over `docs` and keeps those seen at least
/// `min_count` times. Ids are assigned by descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<'a, I>(docs: I, min_count: u64) -> Result<Vocab, VocabError>
where
    I: IntoIterator<Item = &'a Document>,
{
    if min_count == 0 {
        return Err(VocabError::ZeroMinCount);
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for doc in docs {
        for token in tokenize(&doc.text) {
            *counts.entry(token).or_default() += 1;
        }
    }
    Ok(vocab_from_counts(counts, min_count))
}

pub(crate) fn vocab_from_counts(counts: HashMap<String, u64>, min_count: u64) -> Vocab {
    let mut kept: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(token, count)| *count >= min_count && token != UNK)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(kept.into_iter().map(|(token, _)| token))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document::new("d", text)
    }

    #[test]
    fn splits_edge_punctuation() {
        assert_eq!(tokenize("Hello, world!"), ["hello", ",", "world", "!"]);
        assert_eq!(tokenize("Antifa is anti-American."), ["antifa", "is", "anti-american", "."]);
        assert_eq!(tokenize("(don't)"), ["(", "don't", ")"]);
        assert_eq!(tokenize("wow!!"), ["wow", "!", "!"]);
        assert_eq!(tokenize("..."), [".", ".", "."]);
    }

    #[test]
    fn empty_and_whitespace() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" \t\n\u{3000}").is_empty());
    }

    #[test]
    fn nfkc_and_case_fold() {
        // fullwidth letters and the fi ligature fold to ascii
        assert_eq!(tokenize("ＨＥＬＬＯ ﬁne"), ["hello", "fine"]);
    }

    #[test]
    fn symbols_are_not_punctuation() {
        assert_eq!(tokenize("<unk> $5"), ["<unk>", "$5"]);
    }

    #[test]
    fn vocab_counts_and_threshold() {
        let docs = [doc("a a b")];
        let v = build_vocab(&docs, 1).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.tokens(), [UNK, "a", "b"]);
        let v = build_vocab(&docs, 2).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.get("b"), None);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_empty_corpus_and_zero_min_count() {
        let v = build_vocab(std::iter::empty(), 1).unwrap();
        assert_eq!(v.len(), 1);
        assert!(matches!(build_vocab(std::iter::empty(), 0), Err(VocabError::ZeroMinCount)));
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = build_vocab(&[doc("z y x y z")], 1).unwrap();
        assert_eq!(v.tokens(), [UNK, "y", "z", "x"]);
    }

    #[test]
    fn vocab_file_roundtrip_and_rules_check() {
        let v = build_vocab(&[doc("the cat sat on the mat .")], 1).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(Vocab::read_from(&buf[..]).unwrap(), v);

        let text = String::from_utf8(buf).unwrap();
        let tampered = text.replacen(&rules_hash(), "deadbeef", 1);
        assert!(matches!(
            Vocab::read_from(tampered.as_bytes()),
            Err(VocabError::RulesMismatch { .. })
        ));
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                "[a-zA-Z]{1,6}",
                "[ \t\n]{1,2}",
                "[.,!?;:'\"()\\-]{1,2}",
                Just("é".to_string()),
                Just("Ｆｕｌｌ".to_string()),
                Just("ﬁ".to_string()),
                Just("«".to_string()),
                Just("\u{2014}".to_string()),
            ],
            0..24,
        )
        .prop_map(|parts| parts.concat())
    }

    proptest! {
        #[test]
        fn retokenizing_joined_tokens_is_identity(text in text_strategy()) {
            let tokens = tokenize(&text);
            prop_assert_eq!(tokenize(&tokens.join(" ")), tokens);
        }

        #[test]
        fn tokens_are_nonempty_without_whitespace(text in text_strategy()) {
            let normalized: String = normalize(&text).chars().filter(|c| !c.is_whitespace()).collect();
            let tokens = tokenize(&text);
            for t in &tokens {
                prop_assert!(!t.is_empty());
                prop_assert!(!t.chars().any(char::is_whitespace));
            }
            prop_assert_eq!(tokens.concat(), normalized);
        }

        #[test]
        fn vocab_is_order_invariant(texts in proptest::collection::vec(text_strategy(), 0..6)) {
            let docs: Vec<Document> = texts.iter().map(|t| doc(t)).collect();
            let forward = build_vocab(&docs, 1).unwrap();
            let backward = build_vocab(docs.iter().rev(), 1).unwrap();
            prop_assert_eq!(forward, backward);
        }
    }
}

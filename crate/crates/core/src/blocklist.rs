//! Word-level blocklist with allowlist overrides, and the benchmark
//! contamination scanner built on it.
//!
//! Entries are single tokens under the shared tokenizer, so matching is
//! whole-token equality after normalization: `ass` never hits `class`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Document;
use crate::tokenizer::tokenize;

#[derive(Debug, thiserror::Error)]
pub enum BlocklistError {
    #[error("cannot read {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("empty benchmark")]
    EmptyBenchmark,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blocklist {
    entries: BTreeSet<String>,
    allowlist: BTreeSet<String>,
    pub source_note: String,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMatch {
    pub doc_id: String,
    pub word: String,
    pub first_offset: usize,
    pub occurrence_count: usize,
}

fn normalize_lines(text: &str, label: &str, warnings: &mut Vec<String>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = tokenize(line);
        if tokens.len() == 1 {
            out.insert(tokens.pop().expect("one token"));
        } else {
            let warning = format!("{label}:{}: {line:?} is {} tokens, expected one; skipped", n + 1, tokens.len());
            log::warn!("{warning}");
            warnings.push(warning);
        }
    }
    out
}

impl Blocklist {
    /// Builds a blocklist from file contents. Lines are one word each; `#`
    /// comments and blank lines are ignored.
    pub fn from_lines(entries: &str, allowlist: Option<&str>, source_note: impl Into<String>) -> Self {
        let mut warnings = Vec::new();
        let mut entries = normalize_lines(entries, "entries", &mut warnings);
        let allowlist = allowlist.map(|a| normalize_lines(a, "allowlist", &mut warnings)).unwrap_or_default();
        entries.retain(|e| !allowlist.contains(e));
        Blocklist { entries, allowlist, source_note: source_note.into(), warnings }
    }

    pub fn entries(&self) -> &BTreeSet<String> {
        &self.entries
    }

    pub fn allowlist(&self) -> &BTreeSet<String> {
        &self.allowlist
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains(token)
    }

    /// Content hash over the effective entries and the allowlist.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (tag, set) in [("entries", &self.entries), ("allowlist", &self.allowlist)] {
            hasher.update(tag.as_bytes());
            hasher.update([0u8]);
            for word in set {
                hasher.update(word.as_bytes());
                hasher.update(b"\n");
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Earliest blocklisted token in the document and how often that word
    /// occurs overall.
    pub fn match_tokens(&self, doc_id: &str, tokens: &[String]) -> Option<BlockMatch> {
        let (first_offset, word) = tokens.iter().enumerate().find(|(_, t)| self.entries.contains(*t))?;
        Some(BlockMatch {
            doc_id: doc_id.to_string(),
            word: word.clone(),
            first_offset,
            occurrence_count: tokens.iter().filter(|t| *t == word).count(),
        })
    }

    pub fn match_document(&self, doc: &Document) -> Option<BlockMatch> {
        if self.entries.is_empty() {
            return None;
        }
        self.match_tokens(&doc.id, &tokenize(&doc.text))
    }
}

pub fn load_blocklist(entries_path: &Path, allowlist_path: Option<&Path>) -> Result<Blocklist, BlocklistError> {
    let read = |path: &Path| {
        std::fs::read(path)
            .map(|bytes| String::from_utf8_lossy(&bytes).into_owned())
            .map_err(|source| BlocklistError::Unreadable { path: path.to_path_buf(), source })
    };
    let entries = read(entries_path)?;
    let allowlist = allowlist_path.map(read).transpose()?;
    let note = match allowlist_path {
        Some(a) => format!("{} (allowlist {})", entries_path.display(), a.display()),
        None => entries_path.display().to_string(),
    };
    Ok(Blocklist::from_lines(&entries, allowlist.as_deref(), note))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleHit {
    pub doc_id: String,
    pub word: String,
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub total: usize,
    pub hit_count: usize,
    pub fraction: f64,
    /// Number of examples containing each word (not occurrences).
    pub per_word_counts: BTreeMap<String, usize>,
    pub sample_hits: Vec<SampleHit>,
    pub blocklist_hash: String,
}

const EXCERPT_CHARS: usize = 200;

/// Fraction of benchmark examples that contain at least one blocklisted
/// word. Up to `sample_cap` hits are kept, in input order.
pub fn scan_benchmark(examples: &[Document], bl: &Blocklist, sample_cap: usize) -> Result<ContaminationReport, BlocklistError> {
    if examples.is_empty() {
        return Err(BlocklistError::EmptyBenchmark);
    }
    let per_example: Vec<Option<(BlockMatch, BTreeSet<String>)>> = examples
        .par_iter()
        .map(|doc| {
            let tokens = tokenize(&doc.text);
            let hit = bl.match_tokens(&doc.id, &tokens)?;
            let words = tokens.into_iter().filter(|t| bl.contains(t)).collect();
            Some((hit, words))
        })
        .collect();

    let mut per_word_counts: HashMap<String, usize> = HashMap::new();
    let mut sample_hits = Vec::new();
    let mut hit_count = 0;
    for (doc, hit) in examples.iter().zip(per_example) {
        let Some((first, words)) = hit else { continue };
        hit_count += 1;
        for word in words {
            *per_word_counts.entry(word).or_default() += 1;
        }
        if sample_hits.len() < sample_cap {
            sample_hits.push(SampleHit {
                doc_id: doc.id.clone(),
                word: first.word,
                excerpt: doc.text.chars().take(EXCERPT_CHARS).collect(),
            });
        }
    }
    Ok(ContaminationReport {
        total: examples.len(),
        hit_count,
        fraction: hit_count as f64 / examples.len() as f64,
        per_word_counts: per_word_counts.into_iter().collect(),
        sample_hits,
        blocklist_hash: bl.content_hash(),
    })
}

impl ContaminationReport {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "examples: {}\nwith blocklisted words: {} ({:.2}%)\n",
            self.total,
            self.hit_count,
            100.0 * self.fraction
        );
        if !self.per_word_counts.is_empty() {
            let mut words: Vec<_> = self.per_word_counts.iter().collect();
            words.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
            out.push_str("\nword\texamples\n");
            for (word, count) in words {
                out.push_str(&format!("{word}\t{count}\n"));
            }
        }
        if !self.sample_hits.is_empty() {
            out.push_str("\nsample hits:\n");
            for hit in &self.sample_hits {
                out.push_str(&format!("[{}] {}: {}\n", hit.word, hit.doc_id, hit.excerpt));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, text)
    }

    #[test]
    fn allowlist_removes_entries() {
        let bl = Blocklist::from_lines("Asian\nslurX\n", Some("asian\n"), "test");
        assert_eq!(bl.entries().iter().collect::<Vec<_>>(), ["slurx"]);
        assert_eq!(bl.match_document(&doc("d", "Asian cuisine")), None);
    }

    #[test]
    fn comments_blank_and_multi_token_lines() {
        let bl = Blocklist::from_lines("# header\n\nslurx\ntwo words\n", None, "test");
        assert_eq!(bl.entries().len(), 1);
        assert_eq!(bl.warnings().len(), 1);
        assert!(Blocklist::from_lines("", None, "empty").match_document(&doc("d", "anything")).is_none());
    }

    #[test]
    fn whole_token_matching_with_counts() {
        let bl = Blocklist::from_lines("slurx\n", None, "t");
        assert_eq!(
            bl.match_document(&doc("d", "he said slurx twice slurx")),
            Some(BlockMatch { doc_id: "d".into(), word: "slurx".into(), first_offset: 2, occurrence_count: 2 })
        );
        let bl = Blocklist::from_lines("ass\n", None, "t");
        assert_eq!(bl.match_document(&doc("d", "first class")), None);
        assert!(bl.match_document(&doc("d", "ASS!")).is_some());
    }

    #[test]
    fn load_from_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "Canadian\nslurx\n").unwrap();
        std::fs::write(dir.path().join("a.txt"), "canadian\n").unwrap();
        let bl = load_blocklist(&dir.path().join("b.txt"), Some(&dir.path().join("a.txt"))).unwrap();
        assert_eq!(bl.entries().len(), 1);
        assert!(matches!(load_blocklist(&dir.path().join("nope"), None), Err(BlocklistError::Unreadable { .. })));
    }

    #[test]
    fn planted_benchmark_fraction() {
        let bl = Blocklist::from_lines("slurx\nslury\n", None, "t");
        let examples: Vec<Document> = (0..100)
            .map(|i| {
                let text = match i % 10 {
                    0 => "a slurx and slurx and slury".to_string(),
                    _ => format!("clean sentence number {i}"),
                };
                doc(&i.to_string(), &text)
            })
            .collect();
        let report = scan_benchmark(&examples, &bl, 3).unwrap();
        assert_eq!((report.total, report.hit_count), (100, 10));
        assert_eq!(report.fraction, 0.10);
        assert_eq!(report.per_word_counts["slurx"], 10);
        assert_eq!(report.per_word_counts["slury"], 10);
        assert_eq!(report.sample_hits.len(), 3);
        assert_eq!(report.sample_hits[0].doc_id, "0");

        let empty = Blocklist::default();
        assert_eq!(scan_benchmark(&examples, &empty, 3).unwrap().fraction, 0.0);
        assert!(matches!(scan_benchmark(&[], &bl, 3), Err(BlocklistError::EmptyBenchmark)));
    }

    proptest! {
        #[test]
        fn matching_ignores_case_and_compatibility_forms(upper in proptest::bool::ANY, fullwidth in proptest::bool::ANY) {
            let bl = Blocklist::from_lines("slurx\n", None, "t");
            let mut word = if upper { "SLURX".to_string() } else { "slurx".to_string() };
            if fullwidth {
                word = word.chars().map(|c| char::from_u32(c as u32 - 0x21 + 0xFF01).unwrap()).collect();
            }
            let text = format!("say {word}.");
            prop_assert!(bl.match_document(&doc("d", &text)).is_some());
        }

        #[test]
        fn scan_is_order_invariant_and_never_reports_allowlisted(
            texts in proptest::collection::vec(proptest::collection::vec(
                prop_oneof![Just("slurx"), Just("asian"), Just("clean"), Just("word")], 0..6), 1..20)
        ) {
            let bl = Blocklist::from_lines("slurx\nasian\n", Some("asian"), "t");
            let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| doc(&i.to_string(), &t.join(" "))).collect();
            let mut reversed = docs.clone();
            reversed.reverse();
            let a = scan_benchmark(&docs, &bl, 0).unwrap();
            let b = scan_benchmark(&reversed, &bl, 0).unwrap();
            prop_assert_eq!(a.hit_count, b.hit_count);
            prop_assert_eq!(&a.per_word_counts, &b.per_word_counts);
            prop_assert!(!a.per_word_counts.contains_key("asian"));
            prop_assert!((0.0..=1.0).contains(&a.fraction));
            let expected = texts.iter().filter(|t| t.contains(&"slurx")).count();
            prop_assert_eq!(a.hit_count, expected);
        }
    }
}

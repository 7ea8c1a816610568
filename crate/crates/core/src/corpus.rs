//! Corpus ingestion and excerpting.
//!
//! Three input formats are understood: `jsonl` (one object per line with a
//! required `text` and optional `id`), `text-lines` (one document per
//! non-blank line) and `text-dir` (one document per file, walked in
//! lexicographic path order).

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tokenizer::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document { id: id.into(), text: text.into(), source_uri: None, meta: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excerpt {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub truncated: bool,
}

/// First `budget` tokens of the document.
pub fn excerpt(doc: &Document, budget: usize) -> Excerpt {
    excerpt_tokens(&doc.id, tokenize(&doc.text), budget)
}

pub(crate) fn excerpt_tokens(doc_id: &str, mut tokens: Vec<String>, budget: usize) -> Excerpt {
    let truncated = tokens.len() > budget;
    tokens.truncate(budget);
    Excerpt { doc_id: doc_id.to_string(), tokens, truncated }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Jsonl,
    TextLines,
    TextDir,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "text-lines" => Ok(Format::TextLines),
            "text-dir" => Ok(Format::TextDir),
            other => Err(format!("unknown corpus format {other:?} (expected jsonl, text-lines or text-dir)")),
        }
    }
}

impl std::fmt::Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Format::Jsonl => "jsonl",
            Format::TextLines => "text-lines",
            Format::TextDir => "text-dir",
        })
    }
}

/// What to do with byte sequences that are not valid UTF-8.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Utf8Policy {
    #[default]
    Replace,
    Reject,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Fail on the first malformed record instead of skipping it.
    pub strict: bool,
    pub utf8: Utf8Policy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub location: String,
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for RecordError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.location, line, self.message),
            None => write!(f, "{}: {}", self.location, self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("malformed record at {0}")]
    Record(RecordError),
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: Option<serde_json::Value>,
    text: Option<String>,
    source_uri: Option<String>,
    meta: Option<BTreeMap<String, serde_json::Value>>,
}

enum Source {
    Lines { reader: Box<dyn BufRead + Send>, label: String, line: usize, format: Format },
    Dir { root: PathBuf, files: std::vec::IntoIter<PathBuf> },
}

/// Sequential reader over one corpus source.
///
/// In lenient mode malformed records are skipped and kept in
/// [`DocumentReader::errors`]; in strict mode the first one is returned as an
/// error and iteration stops.
pub struct DocumentReader {
    source: Source,
    options: IngestOptions,
    seen_ids: HashSet<String>,
    errors: Vec<RecordError>,
    yielded: usize,
    done: bool,
}

pub fn ingest(path: &Path, format: Format, options: IngestOptions) -> Result<DocumentReader, CorpusError> {
    let unreadable = |source| CorpusError::Unreadable { path: path.to_path_buf(), source };
    let source = match format {
        Format::Jsonl | Format::TextLines => {
            let file = File::open(path).map_err(unreadable)?;
            if file.metadata().map_err(unreadable)?.is_dir() {
                return Err(unreadable(std::io::Error::other("is a directory")));
            }
            Source::Lines {
                reader: Box::new(BufReader::new(file)),
                label: file_label(path),
                line: 0,
                format,
            }
        }
        Format::TextDir => {
            let mut files = Vec::new();
            for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
                let entry = entry.map_err(|e| unreadable(e.into()))?;
                if entry.file_type().is_file() {
                    files.push(entry.path().to_path_buf());
                }
            }
            files.sort();
            Source::Dir { root: path.to_path_buf(), files: files.into_iter() }
        }
    };
    Ok(DocumentReader::new(source, options))
}

/// Reads documents from an in-memory or otherwise already opened stream.
pub fn ingest_reader<R: Read + Send + 'static>(
    reader: R,
    label: &str,
    format: Format,
    options: IngestOptions,
) -> DocumentReader {
    assert!(format != Format::TextDir, "text-dir needs a filesystem path");
    let source = Source::Lines {
        reader: Box::new(BufReader::new(reader)),
        label: label.to_string(),
        line: 0,
        format,
    };
    DocumentReader::new(source, options)
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

impl DocumentReader {
    fn new(source: Source, options: IngestOptions) -> Self {
        DocumentReader { source, options, seen_ids: HashSet::new(), errors: Vec::new(), yielded: 0, done: false }
    }

    pub fn errors(&self) -> &[RecordError] {
        &self.errors
    }

    pub fn yielded(&self) -> usize {
        self.yielded
    }

    fn decode(&self, bytes: Vec<u8>) -> Result<String, String> {
        match String::from_utf8(bytes) {
            Ok(s) => Ok(s),
            Err(e) => match self.options.utf8 {
                Utf8Policy::Replace => Ok(String::from_utf8_lossy(e.as_bytes()).into_owned()),
                Utf8Policy::Reject => Err(format!("invalid UTF-8: {}", e.utf8_error())),
            },
        }
    }

    /// Next raw record: `Ok(None)` at end of input, `Err` for a malformed record.
    fn next_record(&mut self) -> Result<Option<Result<Document, RecordError>>, CorpusError> {
        loop {
            match &mut self.source {
                Source::Lines { reader, label, line, format } => {
                    let mut buf = Vec::new();
                    let n = reader.read_until(b'\n', &mut buf).map_err(|source| CorpusError::Unreadable {
                        path: PathBuf::from(label.clone()),
                        source,
                    })?;
                    if n == 0 {
                        return Ok(None);
                    }
                    *line += 1;
                    let (label, line, format) = (label.clone(), *line, *format);
                    while matches!(buf.last(), Some(b'\n' | b'\r')) {
                        buf.pop();
                    }
                    if buf.iter().all(u8::is_ascii_whitespace) {
                        continue;
                    }
                    let record_error = |message: String| RecordError { location: label.clone(), line: Some(line), message };
                    let text = match self.decode(buf) {
                        Ok(text) => text,
                        Err(message) => return Ok(Some(Err(record_error(message)))),
                    };
                    let fallback_id = format!("{label}:{line}");
                    let doc = match format {
                        Format::TextLines => Ok(Document::new(fallback_id, text)),
                        _ => parse_jsonl(&text, fallback_id).map_err(record_error),
                    };
                    return Ok(Some(doc));
                }
                Source::Dir { root, files } => {
                    let Some(path) = files.next() else { return Ok(None) };
                    let rel = path.strip_prefix(&*root).unwrap_or(&path);
                    let id = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                    let bytes = std::fs::read(&path).map_err(|source| CorpusError::Unreadable { path: path.clone(), source })?;
                    let doc = self
                        .decode(bytes)
                        .map(|text| {
                            let mut doc = Document::new(id.clone(), text);
                            doc.source_uri = Some(path.display().to_string());
                            doc
                        })
                        .map_err(|message| RecordError { location: id, line: None, message });
                    return Ok(Some(doc));
                }
            }
        }
    }

    pub fn next_document(&mut self) -> Result<Option<Document>, CorpusError> {
        if self.done {
            return Ok(None);
        }
        loop {
            let record = match self.next_record() {
                Ok(Some(record)) => record,
                Ok(None) => {
                    self.done = true;
                    return Ok(None);
                }
                Err(e) => {
                    self.done = true;
                    return Err(e);
                }
            };
            let result = record.and_then(|doc| {
                if self.seen_ids.insert(doc.id.clone()) {
                    Ok(doc)
                } else {
                    Err(RecordError { location: doc.id.clone(), line: None, message: format!("duplicate id {:?}", doc.id) })
                }
            });
            match result {
                Ok(doc) => {
                    self.yielded += 1;
                    return Ok(Some(doc));
                }
                Err(err) if self.options.strict => {
                    self.done = true;
                    return Err(CorpusError::Record(err));
                }
                Err(err) => {
                    log::warn!("skipping record: {err}");
                    self.errors.push(err);
                }
            }
        }
    }

    /// Drains the reader into memory.
    pub fn read_all(mut self) -> Result<(Vec<Document>, Vec<RecordError>), CorpusError> {
        let mut docs = Vec::new();
        while let Some(doc) = self.next_document()? {
            docs.push(doc);
        }
        Ok((docs, self.errors))
    }
}

impl Iterator for DocumentReader {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_document().transpose()
    }
}

fn parse_jsonl(line: &str, fallback_id: String) -> Result<Document, String> {
    let record: JsonlRecord = serde_json::from_str(line).map_err(|e| format!("invalid json: {e}"))?;
    let text = record.text.ok_or_else(|| "missing \"text\" field".to_string())?;
    let id = match record.id {
        None | Some(serde_json::Value::Null) => fallback_id,
        Some(serde_json::Value::String(s)) if !s.is_empty() => s,
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(other) => return Err(format!("unusable id {other}")),
    };
    let meta = record.meta.map(|m| {
        m.into_iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => (k, s),
                other => (k, other.to_string()),
            })
            .collect()
    });
    Ok(Document { id, text, source_uri: record.source_uri, meta })
}

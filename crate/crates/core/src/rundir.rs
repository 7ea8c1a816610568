//! Run directories: everything one `filter` invocation produces.
//!
//! ```text
//! <out>/manifest.jsonl   header record, then one decision per document
//! <out>/scores.jsonl     every (document, trigger) score or failure
//! <out>/removed.txt      removed ids, one per line
//! <out>/retained.txt     retained ids, one per line
//! <out>/excerpts.jsonl   leading text of each document, for annotators
//! <out>/config.json      the run configuration as given
//! <out>/reports/         histogram.json, sweep.json, overlap.json, *.svg, provenance.json
//! ```
//!
//! The directory is assembled under a temporary name and renamed into place
//! when complete, so an interrupted run never looks finished.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Format;
use crate::filter::{FilterError, Manifest, ScoreTable, Verdict};
use crate::report::{self, OverlapTable};

pub const MANIFEST: &str = "manifest.jsonl";
pub const SCORES: &str = "scores.jsonl";
pub const EXCERPTS: &str = "excerpts.jsonl";
pub const LABELS: &str = "labels.jsonl";
const EXCERPT_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub format: Format,
    pub triggers: PathBuf,
    pub blocklist: Option<PathBuf>,
    pub allowlist: Option<PathBuf>,
    pub backend: String,
    pub budget: usize,
    pub theta: f64,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub strict: bool,
    pub hist_width: f64,
    pub external_scores: Option<PathBuf>,
    pub external_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcerptRecord {
    pub doc_id: String,
    pub text: String,
}

pub fn excerpt_text(text: &str) -> String {
    text.chars().take(EXCERPT_CHARS).collect()
}

/// Default θ grid for sweeps: -10.0 to 0.0 in steps of 0.25, plus the run's θ.
pub fn default_thetas(theta: f64) -> Vec<f64> {
    let mut thetas: Vec<f64> = (0..=40).map(|i| -10.0 + i as f64 * 0.25).collect();
    if !thetas.contains(&theta) {
        thetas.push(theta);
    }
    thetas
}

/// Staging area for a run directory.
pub struct RunWriter {
    staging: PathBuf,
    target: PathBuf,
    excerpts: BufWriter<fs::File>,
}

impl RunWriter {
    pub fn create(target: &Path, overwrite: bool) -> std::io::Result<Self> {
        if target.exists() && !overwrite {
            return Err(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} already exists (use --overwrite)", target.display()),
            ));
        }
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(staging.join("reports"))?;
        let excerpts = BufWriter::new(fs::File::create(staging.join(EXCERPTS))?);
        Ok(RunWriter { staging, target: target.to_path_buf(), excerpts })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn add_excerpt(&mut self, doc_id: &str, text: &str) -> std::io::Result<()> {
        let record = ExcerptRecord { doc_id: doc_id.to_string(), text: excerpt_text(text) };
        writeln!(self.excerpts, "{}", serde_json::to_string(&record)?)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> std::io::Result<()> {
        let mut out = BufWriter::new(fs::File::create(self.path(name))?);
        serde_json::to_writer_pretty(&mut out, value)?;
        out.write_all(b"\n")?;
        out.flush()
    }

    pub fn write_text(&self, name: &str, text: &str) -> std::io::Result<()> {
        fs::write(self.path(name), text)
    }

    pub fn write_outputs(&self, manifest: &Manifest, scores: &ScoreTable) -> std::io::Result<()> {
        let mut out = BufWriter::new(fs::File::create(self.path(MANIFEST))?);
        manifest.write_jsonl(&mut out)?;
        out.flush()?;
        let mut out = BufWriter::new(fs::File::create(self.path(SCORES))?);
        scores.write_jsonl(&mut out)?;
        out.flush()?;
        let ids = |keep: bool| {
            let mut s = String::new();
            for d in &manifest.decisions {
                if (d.verdict == Verdict::Retained) == keep {
                    s.push_str(&d.doc_id);
                    s.push('\n');
                }
            }
            s
        };
        self.write_text("removed.txt", &ids(false))?;
        self.write_text("retained.txt", &ids(true))
    }

    pub fn commit(mut self) -> std::io::Result<PathBuf> {
        self.excerpts.flush()?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)?;
        Ok(self.target.clone())
    }

    pub fn abandon(self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}

/// A completed run loaded back for reporting or serving.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub scores: Option<ScoreTable>,
    pub excerpts: HashMap<String, String>,
}

impl RunData {
    pub fn load(dir: &Path) -> Result<Self, FilterError> {
        let manifest = Manifest::load(&dir.join(MANIFEST))?;
        let scores_path = dir.join(SCORES);
        let scores = if scores_path.exists() {
            Some(ScoreTable::read_jsonl(BufReader::new(fs::File::open(scores_path)?))?)
        } else {
            None
        };
        let excerpts = load_excerpts(&dir.join(EXCERPTS))?;
        Ok(RunData { dir: dir.to_path_buf(), manifest, scores, excerpts })
    }

    /// Scores for a histogram: `max` or a trigger id.
    pub fn selected_scores(&self, selector: &str) -> Option<Vec<f64>> {
        if selector == "max" {
            return Some(self.manifest.doc_scores().iter().filter_map(|d| d.score()).collect());
        }
        let scores = self.scores.as_ref()?;
        scores.trigger_ids.iter().any(|t| t == selector).then(|| scores.trigger_scores(selector))
    }
}

pub fn load_excerpts(path: &Path) -> Result<HashMap<String, String>, FilterError> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExcerptRecord = serde_json::from_str(&line).map_err(|e| FilterError::Manifest(e.to_string()))?;
        out.insert(record.doc_id, record.text);
    }
    Ok(out)
}

/// Writes the default report bundle for a finished pipeline run.
pub fn write_reports(
    writer: &RunWriter,
    manifest: &Manifest,
    scores: &ScoreTable,
    config: &RunConfig,
    overlap: Option<&OverlapTable>,
) -> Result<(), Box<dyn std::error::Error>> {
    let maxes: Vec<f64> = manifest.doc_scores().iter().filter_map(|d| d.score()).collect();
    if !maxes.is_empty() {
        let hist = report::histogram(&maxes, config.hist_width, "max")?;
        writer.write_json("reports/histogram.json", &hist)?;
        writer.write_text("reports/histogram.svg", &report::histogram_svg(&hist, Some(config.theta)))?;
        for trigger in &scores.trigger_ids {
            let values = scores.trigger_scores(trigger);
            if let Ok(h) = report::histogram(&values, config.hist_width, trigger) {
                let safe: String = trigger.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
                writer.write_text(&format!("reports/histogram-{safe}.svg"), &report::histogram_svg(&h, Some(config.theta)))?;
            }
        }
    }
    let sweep = report::threshold_sweep(&manifest.doc_scores(), &default_thetas(config.theta))?;
    writer.write_json("reports/sweep.json", &sweep)?;
    writer.write_text("reports/sweep.svg", &report::sweep_svg(&sweep))?;
    if let Some(table) = overlap {
        writer.write_json("reports/overlap.json", table)?;
    }
    writer.write_json(
        "reports/provenance.json",
        &serde_json::json!({
            "provenance": manifest.provenance,
            "stats": manifest.stats,
            "config": config,
        }),
    )?;
    writer.write_json("config.json", config)?;
    Ok(())
}

//! Score histograms, threshold sweeps and overlap with an external toxicity
//! scorer, plus minimal SVG renderings of the first two.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::filter::{DocScore, FilterDecision, Verdict};

/// Default cut for external scores read as calibrated probabilities.
pub const DEFAULT_EXTERNAL_THRESHOLD: f64 = 0.5;
const MAX_BINS: usize = 100_000;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no scores to report")]
    Empty,
    #[error("bin width must be positive and finite, got {0}")]
    BadWidth(f64),
    #[error("scores span more than {MAX_BINS} bins")]
    TooManyBins,
    #[error("no thresholds given")]
    NoThresholds,
    #[error("no document ids in common with the external scores")]
    NoOverlap,
    #[error("{0}")]
    ExternalScores(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Trigger id, or `max` for the per-document maximum.
    pub selector: String,
    pub bin_width: f64,
    pub origin: f64,
    /// Half-open bins `[lower, lower + bin_width)`, contiguous from `origin`.
    pub bins: Vec<Bin>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Bins with origin `floor(min / width) * width`.
pub fn histogram(scores: &[f64], bin_width: f64, selector: &str) -> Result<Histogram, ReportError> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(ReportError::BadWidth(bin_width));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(ReportError::Empty);
    }
    histogram_from(scores, bin_width, (min / bin_width).floor() * bin_width, selector)
}

/// Bins from an explicit origin, which must not exceed the minimum score.
pub fn histogram_from(scores: &[f64], bin_width: f64, origin: f64, selector: &str) -> Result<Histogram, ReportError> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(ReportError::BadWidth(bin_width));
    }
    if scores.is_empty() {
        return Err(ReportError::Empty);
    }
    let index = |s: f64| ((s - origin) / bin_width).floor().max(0.0) as usize;
    let max_index = scores.iter().map(|s| index(*s)).max().expect("non-empty");
    if max_index >= MAX_BINS {
        return Err(ReportError::TooManyBins);
    }
    let mut counts = vec![0usize; max_index + 1];
    for s in scores {
        counts[index(*s)] += 1;
    }
    Ok(Histogram {
        selector: selector.to_string(),
        bin_width,
        origin,
        bins: counts.into_iter().enumerate().map(|(k, count)| Bin { lower: origin + k as f64 * bin_width, count }).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub removed: usize,
    pub total: usize,
    pub removal_fraction: f64,
}

/// Removal fraction `|{score > θ}| / N` for each θ, sorted ascending.
pub fn threshold_sweep(scores: &[DocScore], thetas: &[f64]) -> Result<Vec<SweepRow>, ReportError> {
    if thetas.is_empty() {
        return Err(ReportError::NoThresholds);
    }
    let values: Vec<f64> = scores.iter().filter_map(DocScore::score).collect();
    let mut thetas = thetas.to_vec();
    thetas.sort_by(f64::total_cmp);
    Ok(thetas
        .into_iter()
        .map(|theta| {
            let removed = values.iter().filter(|s| **s > theta).count();
            SweepRow {
                theta,
                removed,
                total: values.len(),
                removal_fraction: if values.is_empty() { 0.0 } else { removed as f64 / values.len() as f64 },
            }
        })
        .collect())
}

/// Reads `doc_id, score` pairs: CSV with a header (by `.csv` extension) or
/// JSON lines with `doc_id` and `score`. Scores must lie in `[0, 1]`.
pub fn load_external_scores(path: &Path) -> Result<BTreeMap<String, f64>, ReportError> {
    #[derive(Deserialize)]
    struct Row {
        doc_id: String,
        score: f64,
    }
    let content = std::fs::read_to_string(path)?;
    let rows: Vec<Row> = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(content.as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| ReportError::ExternalScores(e.to_string()))?
    } else {
        content
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| ReportError::ExternalScores(format!("line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?
    };
    let mut out = BTreeMap::new();
    for row in rows {
        if !(0.0..=1.0).contains(&row.score) {
            return Err(ReportError::ExternalScores(format!("score {} for {} is outside [0, 1]", row.score, row.doc_id)));
        }
        out.insert(row.doc_id, row.score);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapTable {
    pub both_removed: usize,
    pub likelihood_only: usize,
    pub external_only: usize,
    pub neither: usize,
    pub compared: usize,
    pub external_threshold: f64,
    /// Scored documents with no external score; excluded from the counts.
    pub excluded: usize,
    pub missing_ids: Vec<String>,
}

/// Cross-tabulates likelihood removals against `external ≥ threshold` over
/// the scored documents that have an external score.
pub fn overlap(
    decisions: &[FilterDecision],
    external: &BTreeMap<String, f64>,
    external_threshold: f64,
) -> Result<OverlapTable, ReportError> {
    let mut table = OverlapTable {
        both_removed: 0,
        likelihood_only: 0,
        external_only: 0,
        neither: 0,
        compared: 0,
        external_threshold,
        excluded: 0,
        missing_ids: Vec::new(),
    };
    for d in decisions.iter().filter(|d| d.is_scored()) {
        let Some(score) = external.get(&d.doc_id) else {
            table.excluded += 1;
            table.missing_ids.push(d.doc_id.clone());
            continue;
        };
        let likelihood = d.verdict == Verdict::RemovedLikelihood;
        let ext = *score >= external_threshold;
        match (likelihood, ext) {
            (true, true) => table.both_removed += 1,
            (true, false) => table.likelihood_only += 1,
            (false, true) => table.external_only += 1,
            (false, false) => table.neither += 1,
        }
        table.compared += 1;
    }
    if table.compared == 0 {
        return Err(ReportError::NoOverlap);
    }
    table.missing_ids.sort();
    Ok(table)
}

/// Collects per-trigger score columns from score entries.
pub fn scores_by_trigger<'a>(entries: impl IntoIterator<Item = (&'a str, f64)>) -> HashMap<String, Vec<f64>> {
    let mut out: HashMap<String, Vec<f64>> = HashMap::new();
    for (trigger, score) in entries {
        out.entry(trigger.to_string()).or_default().push(score);
    }
    out
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 320.0;
const PAD: f64 = 40.0;

pub fn histogram_svg(h: &Histogram, theta: Option<f64>) -> String {
    let max = h.bins.iter().map(|b| b.count).max().unwrap_or(0).max(1) as f64;
    let bar_w = (SVG_W - 2.0 * PAD) / h.bins.len().max(1) as f64;
    let mut svg = svg_open(&format!("log-likelihood histogram ({})", h.selector));
    for (i, bin) in h.bins.iter().enumerate() {
        let height = (SVG_H - 2.0 * PAD) * bin.count as f64 / max;
        let above = theta.is_some_and(|t| bin.lower >= t);
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>[{:.3}, {:.3}): {}</title></rect>"##,
            PAD + i as f64 * bar_w,
            SVG_H - PAD - height,
            (bar_w - 1.0).max(0.5),
            height,
            if above { "#c0392b" } else { "#4a6fa5" },
            bin.lower,
            bin.lower + h.bin_width,
            bin.count
        );
    }
    if let (Some(t), Some(first), Some(last)) = (theta, h.bins.first(), h.bins.last()) {
        let span = last.lower + h.bin_width - first.lower;
        let x = PAD + (SVG_W - 2.0 * PAD) * ((t - first.lower) / span).clamp(0.0, 1.0);
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{PAD}" x2="{x:.2}" y2="{}" stroke="black" stroke-dasharray="4"/>"#, SVG_H - PAD);
    }
    axis_labels(&mut svg, &format!("{:.2}", h.origin), &format!("{:.2}", h.origin + h.bins.len() as f64 * h.bin_width));
    svg.push_str("</svg>\n");
    svg
}

pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let mut svg = svg_open("removal fraction by threshold");
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        let span = (last.theta - first.theta).max(f64::EPSILON);
        let points: Vec<String> = rows
            .iter()
            .map(|r| {
                let x = PAD + (SVG_W - 2.0 * PAD) * (r.theta - first.theta) / span;
                let y = SVG_H - PAD - (SVG_H - 2.0 * PAD) * r.removal_fraction;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#4a6fa5" stroke-width="2"/>"##, points.join(" "));
        axis_labels(&mut svg, &format!("{:.2}", first.theta), &format!("{:.2}", last.theta));
    }
    svg.push_str("</svg>\n");
    svg
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n"
    )
}

fn axis_labels(svg: &mut String, left: &str, right: &str) {
    let y = SVG_H - PAD / 2.0;
    let _ = writeln!(svg, r#"<text x="{PAD}" y="{y}" font-family="sans-serif" font-size="11">{left}</text>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="end">{right}</text>"#,
        SVG_W - PAD
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn decision(id: &str, removed: bool) -> FilterDecision {
        FilterDecision {
            doc_id: id.into(),
            verdict: if removed { Verdict::RemovedLikelihood } else { Verdict::Retained },
            block_word: None,
            max_score: Some(if removed { -3.0 } else { -5.0 }),
            argmax_trigger: None,
            threshold: -4.0,
            unscorable: false,
        }
    }

    #[test]
    fn binning_arithmetic() {
        let h = histogram(&[-4.1, -4.05, -3.9], 0.25, "max").unwrap();
        assert_eq!(h.origin, -4.25);
        assert_eq!(h.bins, vec![Bin { lower: -4.25, count: 2 }, Bin { lower: -4.0, count: 1 }]);
        let single = histogram(&[-2.0], 0.5, "t1").unwrap();
        assert_eq!(single.bins, vec![Bin { lower: -2.0, count: 1 }]);
        assert!(matches!(histogram(&[], 0.5, "max"), Err(ReportError::Empty)));
        assert!(matches!(histogram(&[1.0], 0.0, "max"), Err(ReportError::BadWidth(_))));
    }

    #[test]
    fn sweep_rows() {
        let scores: Vec<DocScore> =
            (0..1000).map(|i| DocScore::scored(i.to_string(), if i < 37 { -3.0 } else { -5.0 }, "t")).collect();
        let rows = threshold_sweep(&scores, &[-3.0, -4.0, -5.0]).unwrap();
        assert_eq!(rows.iter().map(|r| r.theta).collect::<Vec<_>>(), [-5.0, -4.0, -3.0]);
        assert_eq!(rows[1].removal_fraction, 0.037);
        assert_eq!(rows[2].removal_fraction, 0.0);
        assert!(matches!(threshold_sweep(&scores, &[]), Err(ReportError::NoThresholds)));
    }

    #[test]
    fn overlap_enumeration_and_missing() {
        let d = [decision("a", true), decision("b", true), decision("c", false), decision("d", false)];
        let ext: BTreeMap<String, f64> = [("a", 0.9), ("b", 0.1), ("c", 0.5), ("d", 0.2)].map(|(k, v)| (k.to_string(), v)).into();
        let t = overlap(&d, &ext, 0.5).unwrap();
        assert_eq!((t.both_removed, t.likelihood_only, t.external_only, t.neither), (1, 1, 1, 1));

        let d: Vec<_> = (0..10).map(|i| decision(&i.to_string(), i % 2 == 0)).collect();
        let ext: BTreeMap<String, f64> = (2..10).map(|i| (i.to_string(), 0.7)).collect();
        let t = overlap(&d, &ext, 0.5).unwrap();
        assert_eq!((t.compared, t.excluded), (8, 2));
        assert_eq!(t.missing_ids, ["0", "1"]);
        assert!(matches!(overlap(&d, &BTreeMap::new(), 0.5), Err(ReportError::NoOverlap)));
    }

    #[test]
    fn external_score_files() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("s.csv");
        std::fs::write(&csv, "doc_id,score\na,0.25\nb,1\n").unwrap();
        assert_eq!(load_external_scores(&csv).unwrap()["a"], 0.25);
        let jsonl = dir.path().join("s.jsonl");
        std::fs::write(&jsonl, "{\"doc_id\":\"a\",\"score\":1.5}\n").unwrap();
        assert!(load_external_scores(&jsonl).is_err());
    }

    #[test]
    fn svgs_are_well_formed_enough() {
        let h = histogram(&[-4.1, -3.9], 0.25, "max").unwrap();
        let svg = histogram_svg(&h, Some(-4.0));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 2);
        let rows = threshold_sweep(&[DocScore::scored("a", -4.0, "t")], &[-5.0, -3.0]).unwrap();
        assert!(sweep_svg(&rows).contains("<polyline"));
    }

    proptest! {
        #[test]
        fn histogram_conserves_and_refines(
            raw in proptest::collection::vec(-4000i32..0, 1..80),
            width_exp in 0u32..4,
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| *r as f64 / 1000.0).collect();
            let width = 2f64.powi(-(width_exp as i32));
            let coarse = histogram(&scores, width, "max").unwrap();
            prop_assert_eq!(coarse.total(), scores.len());
            let fine = histogram_from(&scores, width / 2.0, coarse.origin, "max").unwrap();
            let mut merged: Vec<usize> = fine.bins.chunks(2).map(|pair| pair.iter().map(|b| b.count).sum()).collect();
            merged.resize(coarse.bins.len(), 0);
            prop_assert_eq!(merged, coarse.bins.iter().map(|b| b.count).collect::<Vec<_>>());
        }

        #[test]
        fn sweep_is_non_increasing(raw in proptest::collection::vec(-80i32..0, 1..50), thetas in proptest::collection::vec(-90i32..10, 1..10)) {
            let scores: Vec<DocScore> = raw.iter().enumerate().map(|(i, s)| DocScore::scored(i.to_string(), *s as f64 / 10.0, "t")).collect();
            let thetas: Vec<f64> = thetas.iter().map(|t| *t as f64 / 10.0).collect();
            let rows = threshold_sweep(&scores, &thetas).unwrap();
            for pair in rows.windows(2) {
                prop_assert!(pair[1].removal_fraction <= pair[0].removal_fraction);
            }
        }

        #[test]
        fn overlap_is_permutation_invariant(flags in proptest::collection::vec((proptest::bool::ANY, 0.0f64..1.0), 1..30)) {
            let d: Vec<FilterDecision> = flags.iter().enumerate().map(|(i, (r, _))| decision(&i.to_string(), *r)).collect();
            let ext: BTreeMap<String, f64> = flags.iter().enumerate().map(|(i, (_, s))| (i.to_string(), *s)).collect();
            let mut rev = d.clone();
            rev.reverse();
            let a = overlap(&d, &ext, 0.5).unwrap();
            let b = overlap(&rev, &ext, 0.5).unwrap();
            prop_assert_eq!(a.both_removed + a.likelihood_only + a.external_only + a.neither, a.compared);
            prop_assert_eq!(a, b);
        }
    }
}

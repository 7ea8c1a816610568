//! The `likefilter` command line.
//!
//! Exit codes: 0 on success, 2 for configuration errors (bad flags,
//! missing inputs), 1 for failures while running.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::blocklist::{load_blocklist, scan_benchmark, Blocklist};
use crate::corpus::{ingest, Format, IngestOptions};
use crate::evalharness::{self, Bucket};
use crate::filter::{self, load_triggers, run_pipeline, Manifest, PipelineOptions, DEFAULT_BUDGET, DEFAULT_THETA};
use crate::lm::{self, ExternalConfig, ExternalScorer, NGramModel, ReferenceBackend, ScoringBackend};
use crate::report;
use crate::rundir::{self, RunConfig, RunWriter};
use crate::tokenizer::build_vocab;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn config<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "likefilter", version, about = "Filter text corpora by trigger-phrase likelihood and word blocklists")]
pub struct Cli {
    /// Seed for any randomized behavior.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the reference n-gram scorer on a corpus.
    TrainRef(TrainRefArgs),
    /// Run the blocklist + likelihood pipeline and write a run directory.
    Filter(FilterArgs),
    /// Measure what fraction of a benchmark contains blocklisted words.
    Scan(ScanArgs),
    /// Draw a seeded verification sample from both buckets of a run.
    Sample(SampleArgs),
    /// Per-bucket composition of human labels.
    Compose(ComposeArgs),
    /// Removal fraction at each of several thresholds.
    Sweep(SweepArgs),
    /// Cross-tabulate likelihood removals against external toxicity scores.
    Overlap(OverlapArgs),
    /// Serve the read/annotate HTTP API for a run directory.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: Format,
    /// Abort on the first malformed record.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct TrainRefArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
    /// Comma-separated interpolation weights, unigram first (default uniform).
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the vocabulary file here.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub triggers: PathBuf,
    #[arg(long)]
    pub blocklist: Option<PathBuf>,
    #[arg(long)]
    pub allowlist: Option<PathBuf>,
    /// `ref:<model path>`, `ext:<host:port>` or `ext:exec:<command>`.
    #[arg(long)]
    pub backend: String,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: usize,
    #[arg(long, default_value_t = DEFAULT_THETA, allow_negative_numbers = true)]
    pub theta: f64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long, default_value_t = 0.25)]
    pub hist_width: f64,
    /// External toxicity scores (doc_id, score) for an overlap report.
    #[arg(long)]
    pub external_scores: Option<PathBuf>,
    #[arg(long, default_value_t = report::DEFAULT_EXTERNAL_THRESHOLD)]
    pub external_threshold: f64,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: Format,
    #[arg(long)]
    pub blocklist: PathBuf,
    #[arg(long)]
    pub allowlist: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub sample_cap: usize,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ManifestArg {
    /// A manifest file or a run directory containing one.
    #[arg(long)]
    pub manifest: PathBuf,
}

impl ManifestArg {
    fn resolve(&self) -> CliResult<(PathBuf, Manifest)> {
        let path = if self.manifest.is_dir() { self.manifest.join(rundir::MANIFEST) } else { self.manifest.clone() };
        if !path.exists() {
            return Err(CliError::Config(format!("no manifest at {}", path.display())));
        }
        let manifest = Manifest::load(&path).map_err(runtime)?;
        Ok((path, manifest))
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    /// Only sample this bucket.
    #[arg(long)]
    pub bucket: Option<Bucket>,
    /// Write the verification set here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    /// Comma-separated thresholds.
    #[arg(long, allow_hyphen_values = true)]
    pub thetas: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    #[command(flatten)]
    pub manifest: ManifestArg,
    #[arg(long)]
    pub external: PathBuf,
    #[arg(long, default_value_t = report::DEFAULT_EXTERNAL_THRESHOLD)]
    pub external_threshold: f64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8787")]
    pub bind: String,
    /// Label store (default: labels.jsonl inside the run directory).
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("LIKEFILTER_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("likefilter: {e}");
            e.code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::TrainRef(args) => train_ref(args),
        Command::Filter(args) => filter_cmd(args, seed),
        Command::Scan(args) => scan(args),
        Command::Sample(args) => sample(args, seed),
        Command::Compose(args) => compose(args),
        Command::Sweep(args) => sweep(args),
        Command::Overlap(args) => overlap(args),
        Command::Serve(args) => serve(args, seed),
    }
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}", path.display())))
    }
}

fn parse_floats(list: &str, what: &str) -> CliResult<Vec<f64>> {
    list.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::Config(format!("bad {what} value {s:?}: {e}"))))
        .collect()
}

fn train_ref(args: TrainRefArgs) -> CliResult {
    if args.order == 0 {
        return Err(CliError::Config("--order must be at least 1".into()));
    }
    if args.min_count == 0 {
        return Err(CliError::Config("--min-count must be at least 1".into()));
    }
    require_file(&args.corpus.corpus, "corpus")?;
    let lambda = match &args.lambda {
        Some(list) => parse_floats(list, "lambda")?,
        None => lm::uniform_lambda(args.order),
    };
    let options = IngestOptions { strict: args.corpus.strict, ..Default::default() };
    let (docs, errors) = ingest(&args.corpus.corpus, args.corpus.format, options)
        .and_then(|r| r.read_all())
        .map_err(runtime)?;
    let vocab = build_vocab(&docs, args.min_count).map_err(config)?;
    let model = lm::train_ngram(&docs, args.order, vocab, &lambda).map_err(config)?;
    for path in std::iter::once(&args.out).chain(&args.vocab_out) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(runtime)?;
        }
    }
    model.save(&args.out).map_err(runtime)?;
    if let Some(path) = &args.vocab_out {
        let file = std::fs::File::create(path).map_err(runtime)?;
        model.vocab().write_to(std::io::BufWriter::new(file)).map_err(runtime)?;
    }
    println!(
        "trained order-{} model: docs={} skipped={} tokens={} vocab={} vocab_hash={}",
        model.order(),
        docs.len(),
        errors.len(),
        model.total_tokens(),
        model.vocab().len(),
        model.vocab().content_hash()
    );
    Ok(())
}

/// Builds a scoring backend from `ref:<path>` / `ext:<addr>` / `ext:exec:<cmd>`.
pub fn open_backend(spec: &str) -> CliResult<Box<dyn ScoringBackend>> {
    if let Some(path) = spec.strip_prefix("ref:") {
        let path = Path::new(path);
        require_file(path, "reference model")?;
        let model = NGramModel::load(path).map_err(runtime)?;
        return Ok(Box::new(ReferenceBackend::new(model)));
    }
    if let Some(addr) = spec.strip_prefix("ext:") {
        let scorer = if let Some(cmd) = addr.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().ok_or_else(|| CliError::Config("empty scorer command".into()))?;
            ExternalScorer::spawn(&program, &parts.collect::<Vec<_>>(), ExternalConfig::default())
        } else {
            ExternalScorer::connect(addr, ExternalConfig::default())
        };
        return Ok(Box::new(scorer.map_err(runtime)?));
    }
    Err(CliError::Config(format!("backend must be ref:<path> or ext:<addr>, got {spec:?}")))
}

fn filter_cmd(args: FilterArgs, seed: u64) -> CliResult {
    require_file(&args.corpus.corpus, "corpus")?;
    require_file(&args.triggers, "triggers file")?;
    if args.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    if !args.theta.is_finite() {
        return Err(CliError::Config("--theta must be finite".into()));
    }
    let blocklist = match &args.blocklist {
        Some(path) => {
            require_file(path, "blocklist")?;
            if let Some(a) = &args.allowlist {
                require_file(a, "allowlist")?;
            }
            load_blocklist(path, args.allowlist.as_deref()).map_err(runtime)?
        }
        None => Blocklist::default(),
    };
    let triggers = load_triggers(&args.triggers).map_err(config)?;
    filter::validate_triggers(&triggers, args.budget).map_err(config)?;
    let external = match &args.external_scores {
        Some(path) => {
            require_file(path, "external scores")?;
            Some(report::load_external_scores(path).map_err(runtime)?)
        }
        None => None,
    };
    let backend = open_backend(&args.backend)?;

    let config_record = RunConfig {
        corpus: args.corpus.corpus.clone(),
        format: args.corpus.format,
        triggers: args.triggers.clone(),
        blocklist: args.blocklist.clone(),
        allowlist: args.allowlist.clone(),
        backend: args.backend.clone(),
        budget: args.budget,
        theta: args.theta,
        seed,
        jobs: args.jobs,
        out: args.out.clone(),
        strict: args.corpus.strict,
        hist_width: args.hist_width,
        external_scores: args.external_scores.clone(),
        external_threshold: args.external_threshold,
    };

    let mut writer = RunWriter::create(&args.out, args.overwrite).map_err(config)?;
    let result = (|| -> CliResult<filter::Stats> {
        let options = IngestOptions { strict: args.corpus.strict, ..Default::default() };
        let mut reader = ingest(&args.corpus.corpus, args.corpus.format, options).map_err(runtime)?;
        let mut excerpt_error = None;
        let pipeline_options = PipelineOptions { theta: args.theta, budget: args.budget, jobs: args.jobs, ..Default::default() };
        let output = run_pipeline(&mut reader, &blocklist, &triggers, backend.as_ref(), pipeline_options, 0, |doc| {
            if let Err(e) = writer.add_excerpt(&doc.id, &doc.text) {
                excerpt_error.get_or_insert(e);
            }
        })
        .map_err(runtime)?;
        if let Some(e) = excerpt_error {
            return Err(runtime(e));
        }
        let mut manifest = output.manifest;
        manifest.stats.ingest_errors = reader.errors().len();
        writer.write_outputs(&manifest, &output.scores).map_err(runtime)?;
        let overlap = match &external {
            Some(ext) => Some(report::overlap(&manifest.decisions, ext, args.external_threshold).map_err(runtime)?),
            None => None,
        };
        rundir::write_reports(&writer, &manifest, &output.scores, &config_record, overlap.as_ref()).map_err(runtime)?;
        Ok(manifest.stats)
    })();
    match result {
        Ok(stats) => {
            writer.commit().map_err(runtime)?;
            println!("{}", stats.summary_line());
            Ok(())
        }
        Err(e) => {
            writer.abandon();
            Err(e)
        }
    }
}

fn scan(args: ScanArgs) -> CliResult {
    require_file(&args.benchmark, "benchmark")?;
    require_file(&args.blocklist, "blocklist")?;
    let bl = load_blocklist(&args.blocklist, args.allowlist.as_deref()).map_err(config)?;
    let options = IngestOptions { strict: args.strict, ..Default::default() };
    let (examples, _) = ingest(&args.benchmark, args.format, options).and_then(|r| r.read_all()).map_err(runtime)?;
    let report = scan_benchmark(&examples, &bl, args.sample_cap).map_err(runtime)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
    } else {
        print!("{}", report.render_text());
    }
    Ok(())
}

fn sample(args: SampleArgs, seed: u64) -> CliResult {
    let (path, manifest) = args.manifest.resolve()?;
    let buckets: Vec<Bucket> = args.bucket.map(|b| vec![b]).unwrap_or_else(|| Bucket::ALL.to_vec());
    let mut set = evalharness::sample_buckets(&manifest.decisions, manifest.threshold(), &buckets, args.n, seed)
        .map_err(runtime)?;
    let excerpts = rundir::load_excerpts(&path.with_file_name(rundir::EXCERPTS)).map_err(runtime)?;
    for item in &mut set.items {
        item.excerpt = excerpts.get(&item.doc_id).cloned();
    }
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).map_err(runtime)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let written = set
        .items
        .iter()
        .try_for_each(|item| writeln!(out, "{}", serde_json::to_string(item).expect("sample item serializes")))
        .and_then(|()| out.flush());
    match written {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
        other => other.map_err(runtime)?,
    }
    for w in &set.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn compose(args: ComposeArgs) -> CliResult {
    require_file(&args.labels, "labels file")?;
    let (_, manifest) = args.manifest.resolve()?;
    let import = evalharness::import_labels(&args.labels, args.strict).map_err(runtime)?;
    for e in &import.errors {
        eprintln!("warning: {e}");
    }
    let resolved = evalharness::resolve_labels(&import.records);
    let table = evalharness::manifest_composition(&resolved, &manifest).map_err(runtime)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&table).map_err(runtime)?);
    } else {
        print!("{}", table.render_text());
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> CliResult {
    let thetas = parse_floats(&args.thetas, "theta")?;
    let (_, manifest) = args.manifest.resolve()?;
    let rows = report::threshold_sweep(&manifest.doc_scores(), &thetas).map_err(config)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rows).map_err(runtime)?);
    } else {
        println!("theta\tremoved\ttotal\tremoval_fraction");
        for r in rows {
            println!("{}\t{}\t{}\t{}", r.theta, r.removed, r.total, r.removal_fraction);
        }
    }
    Ok(())
}

fn overlap(args: OverlapArgs) -> CliResult {
    require_file(&args.external, "external scores")?;
    let (_, manifest) = args.manifest.resolve()?;
    let external = report::load_external_scores(&args.external).map_err(runtime)?;
    let table = report::overlap(&manifest.decisions, &external, args.external_threshold).map_err(runtime)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&table).map_err(runtime)?);
    } else {
        println!("external threshold {}; compared {}; excluded {}", table.external_threshold, table.compared, table.excluded);
        println!("{:<22}{:>14}{:>14}", "", "external+", "external-");
        println!("{:<22}{:>14}{:>14}", "likelihood-removed", table.both_removed, table.likelihood_only);
        println!("{:<22}{:>14}{:>14}", "likelihood-kept", table.external_only, table.neither);
    }
    Ok(())
}

fn serve(args: ServeArgs, seed: u64) -> CliResult {
    if !args.run.join(rundir::MANIFEST).exists() {
        return Err(CliError::Config(format!("{} is not a completed run directory", args.run.display())));
    }
    let labels = args.labels.clone().unwrap_or_else(|| args.run.join(rundir::LABELS));
    let state = crate::server::AppState::open(&args.run, &labels, seed).map_err(runtime)?;
    let runtime_ = tokio::runtime::Runtime::new().map_err(runtime)?;
    runtime_.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.bind).await.map_err(config)?;
        eprintln!("serving {} on http://{}", args.run.display(), listener.local_addr().map_err(runtime)?);
        axum::serve(listener, crate::server::router(state)).await.map_err(runtime)
    })
}

//! `acrodis` command-line entry point.
//!
//! Subcommands cover the whole workflow: `prepare` filters a corpus to the
//! single-acronym subset, `stats` prints distribution statistics, `run`
//! executes single-pass or cascaded inference, `evaluate` scores a run,
//! `report` renders result tables, `normalize` exposes the text pipelines,
//! and `probe` health-checks a backend.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend
//! error, 5 internal error.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use acrodis::corpus::{
    self, annotate_corpus, compute_stats, filter_single_acronym, load_corpus, Corpus,
    CorpusFormat, ExtractionRule, ModeLabel,
};
use acrodis::inference::{self, Backend, BackendConfig, MockBackend, MockBehavior};
use acrodis::pipeline::{self, run_cascaded, run_single_pass, RunConfig};
use acrodis::report::{
    calibration_report, emit_tables, rows_to_csv, score_run, ScoreReport, TableFormat,
};
use acrodis::textnorm::{normalize_clean, normalize_raw};

const ENV_PREFIX: &str = "ACRODIS";

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_BACKEND: u8 = 4;
const EXIT_INTERNAL: u8 = 5;

#[derive(Parser)]
#[command(
    name = "acrodis",
    version,
    about = "Local-first acronym disambiguation pipeline and evaluation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a corpus into single-pass and cascaded files plus a review list
    Prepare(PrepareArgs),
    /// Print distribution statistics for a corpus
    Stats(StatsArgs),
    /// Execute a single-pass or cascaded run
    Run(RunArgs),
    /// Score a run log against its corpus
    Evaluate(EvaluateArgs),
    /// Render result tables for a run
    Report(ReportArgs),
    /// Normalize stdin to stdout with the raw or clean pipeline
    Normalize(NormalizeArgs),
    /// Health-check an inference backend
    Probe(ProbeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Auto,
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    SinglePass,
    Cascaded,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormModeArg {
    Raw,
    Clean,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormatArg {
    Markdown,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

/// Backend selection shared by `run` and `probe`. Endpoint and model are
/// resolved flag > environment (`ACRODIS_ENDPOINT`, `ACRODIS_MODEL`) >
/// config file > default.
#[derive(Args)]
struct BackendArgs {
    /// Backend type
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// TOML or JSON file with connection settings
    #[arg(long)]
    backend_config: Option<PathBuf>,
    /// Chat-completions endpoint URL
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent in requests
    #[arg(long)]
    model: Option<String>,
    /// Permit a non-private endpoint (privacy guard override)
    #[arg(long)]
    force_remote: bool,
    /// Mock: fraction of instances answered with a wrong payload
    #[arg(long, default_value_t = 0.0)]
    mock_error_rate: f64,
    /// Mock: corruption seed
    #[arg(long, default_value_t = 0)]
    mock_seed: u64,
    /// Mock: instance ids answered with an empty body (repeatable)
    #[arg(long)]
    mock_block_id: Vec<String>,
}

impl BackendArgs {
    fn http_config(&self) -> Result<BackendConfig, CliError> {
        let mut config = match &self.backend_config {
            Some(path) => BackendConfig::from_file(path).map_err(CliError::config)?,
            None => BackendConfig::default(),
        };
        config.apply_env_overrides(ENV_PREFIX);
        if let Some(endpoint) = &self.endpoint {
            config.endpoint = endpoint.clone();
        }
        if let Some(model) = &self.model {
            config.model = model.clone();
        }
        if self.force_remote {
            config.force_remote = true;
        }
        Ok(config)
    }

    fn build(&self, corpus: Option<&Corpus>) -> Result<Box<dyn Backend>, CliError> {
        match self.backend {
            BackendKind::Mock => {
                let (dictionary, ids) = match corpus {
                    Some(c) => {
                        let mut dict = std::collections::BTreeMap::new();
                        for instance in c.instances() {
                            dict.entry(instance.acronym.clone())
                                .or_insert_with(|| instance.expansion.clone());
                        }
                        (dict, c.ids())
                    }
                    None => (std::collections::BTreeMap::new(), Vec::new()),
                };
                let behavior = MockBehavior {
                    dictionary,
                    error_rate: self.mock_error_rate,
                    seed: self.mock_seed,
                    block_ids: self.mock_block_id.iter().cloned().collect::<BTreeSet<_>>(),
                };
                Ok(Box::new(MockBackend::new(behavior, &ids)))
            }
            BackendKind::Http => {
                let config = self.http_config()?;
                if config.model.is_empty() {
                    return Err(CliError::Config(
                        "http backend needs --model (or ACRODIS_MODEL / config file)".to_owned(),
                    ));
                }
                // Fail fast instead of logging a backend error per row.
                inference::check_privacy_guard(&config.endpoint, config.force_remote)
                    .map_err(CliError::config)?;
                Ok(Box::new(inference::HttpBackend::new(config)))
            }
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Input corpus (CSV or JSONL)
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    /// Minimum uppercase run length for the extraction rule
    #[arg(long, default_value_t = 2)]
    rule_min_len: usize,
    /// Annotate with a backend ("mock" or "http") before filtering
    #[arg(long)]
    annotate: Option<BackendKind>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Annotation parallelism
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[command(flatten)]
    backend: BackendArgs,
    /// Machine-readable summary on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct StatsArgs {
    /// Corpus file (CSV or JSONL)
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    /// JSON only (markdown suppressed)
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Corpus file (CSV or JSONL)
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Inference iterations per instance
    #[arg(long, default_value_t = 5)]
    iterations: u32,
    /// Cascaded: route the gold acronym directly (expansion-only protocol)
    #[arg(long)]
    assume_perfect_detection: bool,
    /// Directory run folders are created under
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Explicit run id (generated when absent)
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Cascaded: config file for a distinct stage-2 expander backend
    #[arg(long)]
    expander_config: Option<PathBuf>,
    /// Cascaded: endpoint for a distinct stage-2 expander backend
    #[arg(long)]
    expander_endpoint: Option<String>,
    /// Cascaded: model for a distinct stage-2 expander backend
    #[arg(long)]
    expander_model: Option<String>,
    /// Machine-readable summary on stdout
    #[arg(long)]
    json: bool,
}

impl RunArgs {
    /// The detector answers both stages unless any expander flag selects a
    /// separate HTTP backend for stage 2.
    fn expander(&self) -> Result<Option<Box<dyn Backend>>, CliError> {
        if self.expander_config.is_none()
            && self.expander_endpoint.is_none()
            && self.expander_model.is_none()
        {
            return Ok(None);
        }
        let mut config = match self.expander_config.as_ref().or(self.backend.backend_config.as_ref())
        {
            Some(path) => BackendConfig::from_file(path).map_err(CliError::config)?,
            None => BackendConfig::default(),
        };
        config.apply_env_overrides(ENV_PREFIX);
        if let Some(endpoint) = &self.expander_endpoint {
            config.endpoint = endpoint.clone();
        }
        if let Some(model) = &self.expander_model {
            config.model = model.clone();
        }
        if self.backend.force_remote {
            config.force_remote = true;
        }
        if config.model.is_empty() {
            return Err(CliError::Config(
                "expander backend needs --expander-model (or a config file)".to_owned(),
            ));
        }
        inference::check_privacy_guard(&config.endpoint, config.force_remote)
            .map_err(CliError::config)?;
        Ok(Some(Box::new(inference::HttpBackend::new(config))))
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory (or log.jsonl path)
    #[arg(long)]
    run: PathBuf,
    /// Corpus the run was executed over
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    /// Write the ScoreReport JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-row scores as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Include the confidence calibration report
    #[arg(long)]
    calibration: bool,
    /// JSON output (default for this subcommand)
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory (or log.jsonl path); repeat for a multi-model
    /// comparison summary
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
    /// Corpus the run(s) were executed over
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long = "corpus-format", value_enum, default_value = "auto")]
    corpus_format: FormatArg,
    /// Output format
    #[arg(long, value_enum, default_value = "markdown")]
    format: OutputFormatArg,
    /// Emit the per-model mean-score comparison instead of the full table
    #[arg(long)]
    comparison: bool,
    /// Shorthand for --format json
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct NormalizeArgs {
    /// Normalization pipeline
    #[arg(long, value_enum)]
    mode: NormModeArg,
    /// Emit {"normalized": [...]} instead of plain lines
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Machine-readable report on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Backend(String),
    Internal(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }
    fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
    fn backend(e: impl std::fmt::Display) -> Self {
        CliError::Backend(e.to_string())
    }
    fn internal(e: impl std::fmt::Display) -> Self {
        CliError::Internal(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Backend(m) | CliError::Internal(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare(args) => prepare(args),
        Command::Stats(args) => stats(args),
        Command::Run(args) => run(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Report(args) => report(args),
        Command::Normalize(args) => normalize_cmd(args),
        Command::Probe(args) => probe_cmd(args),
    }
}

fn corpus_format(arg: FormatArg, path: &Path) -> CorpusFormat {
    match arg {
        FormatArg::Auto => CorpusFormat::from_path(path),
        FormatArg::Csv => CorpusFormat::Csv,
        FormatArg::Jsonl => CorpusFormat::Jsonl,
    }
}

fn load(path: &Path, format: FormatArg) -> Result<Corpus, CliError> {
    load_corpus(path, corpus_format(format, path)).map_err(CliError::data)
}

fn prepare(args: PrepareArgs) -> Result<(), CliError> {
    let corpus = load(&args.input, args.format)?;
    let rule = ExtractionRule::new(args.rule_min_len).map_err(CliError::config)?;

    let flags = match args.annotate {
        Some(kind) => {
            let mut backend_args = args.backend;
            backend_args.backend = kind;
            let annotator = backend_args.build(Some(&corpus))?;
            Some(annotate_corpus(&corpus, annotator.as_ref(), &rule, args.parallelism.max(1)))
        }
        None => None,
    };

    let outcome = filter_single_acronym(&corpus, &rule, flags.as_deref());

    std::fs::create_dir_all(&args.out).map_err(CliError::data)?;
    let cascaded_path = args.out.join("cascaded.csv");
    let single_pass_path = args.out.join("single_pass.csv");
    let review_path = args.out.join("review.csv");

    corpus::write_corpus_csv(&corpus, &cascaded_path).map_err(CliError::data)?;
    corpus::write_corpus_csv(&outcome.corpus, &single_pass_path).map_err(CliError::data)?;

    let mut review = csv::Writer::from_path(&review_path).map_err(CliError::data)?;
    review
        .write_record(["id", "detected_items", "rule_items"])
        .map_err(CliError::data)?;
    if let Some(flags) = &flags {
        for flag in flags.iter().filter(|f| f.needs_review) {
            let instance = corpus.get(&flag.id).expect("flag ids come from the corpus");
            review
                .write_record([
                    flag.id.as_str(),
                    &flag.detected_items.join("|"),
                    &corpus::extract_acronyms(&instance.text, &rule).join("|"),
                ])
                .map_err(CliError::data)?;
        }
    }
    review.flush().map_err(CliError::data)?;

    let summary = serde_json::json!({
        "input_instances": corpus.len(),
        "single_pass_instances": outcome.corpus.len(),
        "rejected": outcome.rejected.len(),
        "flagged_for_review": flags.as_ref().map(|f| f.iter().filter(|x| x.needs_review).count()).unwrap_or(0),
        "cascaded_file": cascaded_path.display().to_string(),
        "single_pass_file": single_pass_path.display().to_string(),
        "review_file": review_path.display().to_string(),
    });
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary).map_err(CliError::internal)?);
    } else {
        println!(
            "prepared {} instances: {} single-pass, {} rejected, {} flagged for review",
            corpus.len(),
            outcome.corpus.len(),
            outcome.rejected.len(),
            summary["flagged_for_review"]
        );
        for rejected in &outcome.rejected {
            println!("  rejected {}: {}", rejected.id, rejected.reason);
        }
    }
    Ok(())
}

fn stats(args: StatsArgs) -> Result<(), CliError> {
    let corpus = load(&args.corpus, args.format)?;
    let stats = compute_stats(&corpus).map_err(CliError::data)?;
    let label = args
        .corpus
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_owned();
    let mode = match corpus.mode_label() {
        ModeLabel::SinglePass => "Single-pass",
        ModeLabel::Cascaded => "Cascaded",
    };
    let json = serde_json::to_string_pretty(&stats).map_err(CliError::internal)?;
    if args.json {
        println!("{json}");
    } else {
        print!("{}", stats.to_markdown(&label, mode));
        println!();
        println!("{json}");
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let loaded = load(&args.corpus, args.format)?;

    let mut config = match args.mode {
        ModeArg::SinglePass => RunConfig::single_pass(),
        ModeArg::Cascaded => RunConfig::cascaded(args.assume_perfect_detection),
    }
    .iterations(args.iterations);
    if let Some(run_id) = &args.run_id {
        config = config.run_id(run_id.clone());
    }

    let log = match args.mode {
        ModeArg::SinglePass => {
            // Loaded corpora carry the cascaded label; re-filtering is
            // idempotent on an already-filtered file.
            let rule = ExtractionRule::default();
            let outcome = filter_single_acronym(&loaded, &rule, None);
            if !outcome.rejected.is_empty() {
                eprintln!(
                    "warning: {} instance(s) are not single-acronym and were dropped; run `prepare` to inspect them",
                    outcome.rejected.len()
                );
            }
            let corpus = outcome.corpus;
            if corpus.is_empty() {
                return Err(CliError::Data("no single-acronym instances to run".to_owned()));
            }
            let backend = args.backend.build(Some(&corpus))?;
            run_single_pass(&corpus, backend.as_ref(), &config).map_err(CliError::data)?
        }
        ModeArg::Cascaded => {
            let detector = args.backend.build(Some(&loaded))?;
            match args.expander()? {
                Some(expander) => {
                    run_cascaded(&loaded, detector.as_ref(), expander.as_ref(), &config)
                        .map_err(CliError::data)?
                }
                None => run_cascaded(&loaded, detector.as_ref(), detector.as_ref(), &config)
                    .map_err(CliError::data)?,
            }
        }
    };

    let dir = pipeline::write_run_dir(&log, &args.out).map_err(CliError::data)?;
    if args.json {
        let summary = serde_json::json!({
            "run_id": log.run_id,
            "path": dir.display().to_string(),
            "entries": log.entries.len(),
        });
        println!("{}", serde_json::to_string_pretty(&summary).map_err(CliError::internal)?);
    } else {
        println!("run {} complete: {} entries -> {}", log.run_id, log.entries.len(), dir.display());
    }
    Ok(())
}

fn load_run_report(run: &Path, corpus_path: &Path, format: FormatArg) -> Result<ScoreReport, CliError> {
    let corpus = load(corpus_path, format)?;
    let log = pipeline::load_log(&pipeline::locate_log(run)).map_err(CliError::data)?;
    score_run(&log, &corpus).map_err(CliError::data)
}

fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let report = load_run_report(&args.run, &args.corpus, args.format)?;
    let json = report.to_json();
    match &args.out {
        Some(path) => std::fs::write(path, &json).map_err(CliError::data)?,
        None => println!("{json}"),
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, rows_to_csv(&report)).map_err(CliError::data)?;
    }
    if args.calibration {
        let calibration = calibration_report(&report);
        println!(
            "{}",
            serde_json::to_string_pretty(&calibration).map_err(CliError::internal)?
        );
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), CliError> {
    let reports: Vec<ScoreReport> = args
        .run
        .iter()
        .map(|run| load_run_report(run, &args.corpus, args.corpus_format))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&ScoreReport> = reports.iter().collect();
    let format = if args.json { OutputFormatArg::Json } else { args.format };
    let comparison = args.comparison || refs.len() > 1;
    match format {
        OutputFormatArg::Markdown if comparison => {
            print!("{}", acrodis::report::emit_comparison(&refs, TableFormat::Markdown));
        }
        OutputFormatArg::Csv if comparison => {
            print!("{}", acrodis::report::emit_comparison(&refs, TableFormat::Csv));
        }
        OutputFormatArg::Markdown => print!("{}", emit_tables(refs[0], TableFormat::Markdown)),
        OutputFormatArg::Csv => print!("{}", emit_tables(refs[0], TableFormat::Csv)),
        OutputFormatArg::Json => {
            let docs: Vec<serde_json::Value> = reports
                .iter()
                .map(|r| serde_json::from_str(&r.to_json()).expect("report json"))
                .collect();
            if docs.len() == 1 {
                println!("{}", reports[0].to_json());
            } else {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&docs).map_err(CliError::internal)?
                );
            }
        }
    }
    Ok(())
}

fn normalize_cmd(args: NormalizeArgs) -> Result<(), CliError> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut normalized = Vec::new();
    for line in stdin.lock().lines() {
        let line = line.map_err(CliError::data)?;
        let result = match args.mode {
            NormModeArg::Raw => normalize_raw(&line),
            NormModeArg::Clean => normalize_clean(&line),
        };
        if args.json {
            normalized.push(result);
        } else {
            writeln!(out, "{result}").map_err(CliError::internal)?;
        }
    }
    if args.json {
        let doc = serde_json::json!({ "normalized": normalized });
        writeln!(out, "{}", serde_json::to_string(&doc).map_err(CliError::internal)?)
            .map_err(CliError::internal)?;
    }
    Ok(())
}

fn probe_cmd(args: ProbeArgs) -> Result<(), CliError> {
    let report = match args.backend.backend {
        BackendKind::Mock => args.backend.build(None)?.probe(),
        BackendKind::Http => inference::probe(&args.backend.http_config()?),
    };
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(CliError::internal)?
        );
    } else {
        println!("{:?}: {}", report.status, report.detail);
    }
    if report.is_healthy() {
        Ok(())
    } else {
        Err(CliError::backend(format!("{:?}: {}", report.status, report.detail)))
    }
}

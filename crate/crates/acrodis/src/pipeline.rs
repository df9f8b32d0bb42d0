//! Orchestration of single-pass and cascaded runs over a corpus.
//!
//! Iterations are sequenced; instances within an iteration may run
//! concurrently up to the backend's parallelism bound, with results
//! appended in corpus order so the log layout is deterministic for a
//! deterministic backend. Failures degrade per instance: a backend error
//! becomes a log entry and the run continues.
//!
//! Run logs persist as JSONL with a versioned header line, one entry per
//! line, inside `runs/<run-id>/{config.json, log.jsonl}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Instance, ModeLabel};
use crate::inference::{Backend, CompletionRecord};
use crate::prompting::{self, ExpectedShape, ParseOutcome, ParseStatus, ParsedPayload};

pub const RUN_LOG_SCHEMA: &str = "acrodis.run-log";
pub const RUN_LOG_VERSION: u32 = 1;

/// Settings for one run. `iterations` defaults to 5;
/// `assume_perfect_detection` routes the gold acronym straight to the
/// expander (the expansion-only protocol).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: ModeLabel,
    pub iterations: u32,
    pub assume_perfect_detection: bool,
    /// Explicit run id; generated when absent.
    pub run_id: Option<String>,
}

impl RunConfig {
    pub fn single_pass() -> Self {
        Self {
            mode: ModeLabel::SinglePass,
            iterations: 5,
            assume_perfect_detection: false,
            run_id: None,
        }
    }

    pub fn cascaded(assume_perfect_detection: bool) -> Self {
        Self {
            mode: ModeLabel::Cascaded,
            iterations: 5,
            assume_perfect_detection,
            run_id: None,
        }
    }

    pub fn iterations(mut self, iterations: u32) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn run_id(mut self, run_id: impl Into<String>) -> Self {
        self.run_id = Some(run_id.into());
        self
    }
}

/// Snapshot of the configuration a log was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogConfig {
    pub mode: ModeLabel,
    pub iterations: u32,
    pub assume_perfect_detection: bool,
    pub detector_backend: String,
    pub expander_backend: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SinglePass,
    Detection,
    Expansion,
}

/// Observable status of one log entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    Repaired,
    Blocked,
    ParseFailure,
    BackendError,
    RenderError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub instance_id: String,
    pub iteration: u32,
    pub stage: Stage,
    /// The acronym a stage-2 expansion call was routed with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routed_acronym: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ParseOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timestamp_ms: u64,
}

impl LogEntry {
    pub fn status(&self) -> EntryStatus {
        if let Some(outcome) = &self.outcome {
            return match outcome.status {
                ParseStatus::Ok => EntryStatus::Ok,
                ParseStatus::Repaired => EntryStatus::Repaired,
                ParseStatus::Blocked => EntryStatus::Blocked,
                ParseStatus::ParseFailure => EntryStatus::ParseFailure,
            };
        }
        match &self.error {
            Some(e) if e.starts_with("render:") => EntryStatus::RenderError,
            _ => EntryStatus::BackendError,
        }
    }
}

/// Append-only record of every inference call in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub run_id: String,
    pub config: LogConfig,
    pub created_at_ms: u64,
    pub entries: Vec<LogEntry>,
}

impl RunLog {
    /// Copy with timestamps and latencies zeroed, for byte-level
    /// reproducibility comparisons.
    pub fn with_zeroed_volatiles(&self) -> RunLog {
        let mut log = self.clone();
        log.created_at_ms = 0;
        for entry in &mut log.entries {
            entry.timestamp_ms = 0;
            if let Some(completion) = &mut entry.completion {
                completion.latency_ms = 0;
            }
        }
        log
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("corpus is not labeled single_pass; run `prepare` (or the filter) first")]
    WrongCorpusMode,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("iterations must be >= 1")]
    ZeroIterations,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("log file is empty: {path}")]
    Empty { path: String },
    #[error("line {line}: malformed log line: {message}")]
    BadLine { line: usize, message: String },
    #[error("unsupported log schema `{schema}` version {version} (expected {expected_schema} v{expected_version})")]
    SchemaVersion {
        schema: String,
        version: u32,
        expected_schema: String,
        expected_version: u32,
    },
    #[error("run directory already exists: {path}")]
    RunIdCollision { path: String },
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Time-plus-entropy run id; collisions across runs in one directory are
/// effectively impossible and are still detected at write time.
pub fn generate_run_id() -> String {
    let entropy: u32 = rand::random();
    format!("run-{:013}-{:08x}", now_ms(), entropy)
}

fn resolve_run_id(config: &RunConfig) -> String {
    config.run_id.clone().unwrap_or_else(generate_run_id)
}

/// One inference call per instance per iteration: render the single-pass
/// prompt, complete, parse. Every outcome is logged, including backend
/// errors; only corpus/config problems abort the run.
pub fn run_single_pass(
    corpus: &Corpus,
    backend: &dyn Backend,
    config: &RunConfig,
) -> Result<RunLog, PipelineError> {
    if corpus.mode_label() != ModeLabel::SinglePass {
        return Err(PipelineError::WrongCorpusMode);
    }
    validate(corpus, config)?;

    let mut entries = Vec::with_capacity(corpus.len() * config.iterations as usize);
    for iteration in 1..=config.iterations {
        let batch = process_iteration(corpus, backend.parallelism(), |instance| {
            vec![single_pass_entry(instance, backend, iteration)]
        });
        entries.extend(batch);
    }

    Ok(RunLog {
        run_id: resolve_run_id(config),
        config: LogConfig {
            mode: ModeLabel::SinglePass,
            iterations: config.iterations,
            assume_perfect_detection: false,
            detector_backend: backend.id().to_owned(),
            expander_backend: None,
        },
        created_at_ms: now_ms(),
        entries,
    })
}

/// Cascaded run. With `assume_perfect_detection` the gold acronym is
/// routed straight to the expander; otherwise stage 1 asks the detector
/// for acronyms and each detected acronym gets its own stage-2 call.
pub fn run_cascaded(
    corpus: &Corpus,
    detector: &dyn Backend,
    expander: &dyn Backend,
    config: &RunConfig,
) -> Result<RunLog, PipelineError> {
    validate(corpus, config)?;
    let parallelism = detector.parallelism().max(expander.parallelism());

    let mut entries = Vec::new();
    for iteration in 1..=config.iterations {
        let batch = process_iteration(corpus, parallelism, |instance| {
            if config.assume_perfect_detection {
                vec![expansion_entry(instance, &instance.acronym, expander, iteration)]
            } else {
                cascaded_entries(instance, detector, expander, iteration)
            }
        });
        entries.extend(batch);
    }

    Ok(RunLog {
        run_id: resolve_run_id(config),
        config: LogConfig {
            mode: ModeLabel::Cascaded,
            iterations: config.iterations,
            assume_perfect_detection: config.assume_perfect_detection,
            detector_backend: detector.id().to_owned(),
            expander_backend: Some(expander.id().to_owned()),
        },
        created_at_ms: now_ms(),
        entries,
    })
}

fn validate(corpus: &Corpus, config: &RunConfig) -> Result<(), PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    if config.iterations == 0 {
        return Err(PipelineError::ZeroIterations);
    }
    Ok(())
}

// Runs `work` over all instances, in corpus order in the output, with the
// requested parallelism.
fn process_iteration<F>(corpus: &Corpus, parallelism: usize, work: F) -> Vec<LogEntry>
where
    F: Fn(&Instance) -> Vec<LogEntry> + Send + Sync,
{
    if parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| {
            corpus
                .instances()
                .par_iter()
                .map(&work)
                .collect::<Vec<_>>()
                .into_iter()
                .flatten()
                .collect()
        })
    } else {
        corpus.instances().iter().flat_map(work).collect()
    }
}

fn single_pass_entry(instance: &Instance, backend: &dyn Backend, iteration: u32) -> LogEntry {
    let prompt = match prompting::render_single_pass(&instance.text) {
        Ok(p) => p,
        Err(e) => return render_error_entry(instance, Stage::SinglePass, None, iteration, e),
    };
    match backend.complete(&prompt.text, &instance.id) {
        Ok(completion) => {
            let outcome = prompting::parse_output(&completion.response, ExpectedShape::Expansion);
            LogEntry {
                instance_id: instance.id.clone(),
                iteration,
                stage: Stage::SinglePass,
                routed_acronym: None,
                completion: Some(completion),
                outcome: Some(outcome),
                error: None,
                timestamp_ms: now_ms(),
            }
        }
        Err(e) => backend_error_entry(instance, Stage::SinglePass, None, iteration, e.to_string()),
    }
}

fn cascaded_entries(
    instance: &Instance,
    detector: &dyn Backend,
    expander: &dyn Backend,
    iteration: u32,
) -> Vec<LogEntry> {
    let mut entries = Vec::new();
    let prompt = match prompting::render_cascaded_detection(&instance.text) {
        Ok(p) => p,
        Err(e) => {
            return vec![render_error_entry(instance, Stage::Detection, None, iteration, e)];
        }
    };
    let detected: Vec<String> = match detector.complete(&prompt.text, &instance.id) {
        Ok(completion) => {
            let outcome = prompting::parse_output(&completion.response, ExpectedShape::Detection);
            let acronyms = match &outcome.payload {
                Some(ParsedPayload::Detection(d)) => d.acronyms.clone(),
                // Stage-1 detection failure: stage 2 is skipped for this
                // instance-iteration.
                _ => Vec::new(),
            };
            entries.push(LogEntry {
                instance_id: instance.id.clone(),
                iteration,
                stage: Stage::Detection,
                routed_acronym: None,
                completion: Some(completion),
                outcome: Some(outcome),
                error: None,
                timestamp_ms: now_ms(),
            });
            acronyms
        }
        Err(e) => {
            entries.push(backend_error_entry(
                instance,
                Stage::Detection,
                None,
                iteration,
                e.to_string(),
            ));
            Vec::new()
        }
    };

    for acronym in detected {
        entries.push(expansion_entry(instance, &acronym, expander, iteration));
    }
    entries
}

fn expansion_entry(
    instance: &Instance,
    acronym: &str,
    expander: &dyn Backend,
    iteration: u32,
) -> LogEntry {
    let routed = Some(acronym.to_owned());
    let prompt = match prompting::render_cascaded_expansion(&instance.text, acronym) {
        Ok(p) => p,
        Err(e) => {
            return render_error_entry(instance, Stage::Expansion, routed, iteration, e);
        }
    };
    match expander.complete(&prompt.text, &instance.id) {
        Ok(completion) => {
            let outcome = prompting::parse_output(&completion.response, ExpectedShape::Expansion);
            LogEntry {
                instance_id: instance.id.clone(),
                iteration,
                stage: Stage::Expansion,
                routed_acronym: routed,
                completion: Some(completion),
                outcome: Some(outcome),
                error: None,
                timestamp_ms: now_ms(),
            }
        }
        Err(e) => {
            backend_error_entry(instance, Stage::Expansion, routed, iteration, e.to_string())
        }
    }
}

fn render_error_entry(
    instance: &Instance,
    stage: Stage,
    routed_acronym: Option<String>,
    iteration: u32,
    error: prompting::RenderError,
) -> LogEntry {
    LogEntry {
        instance_id: instance.id.clone(),
        iteration,
        stage,
        routed_acronym,
        completion: None,
        outcome: None,
        error: Some(format!("render: {error}")),
        timestamp_ms: now_ms(),
    }
}

fn backend_error_entry(
    instance: &Instance,
    stage: Stage,
    routed_acronym: Option<String>,
    iteration: u32,
    error: String,
) -> LogEntry {
    LogEntry {
        instance_id: instance.id.clone(),
        iteration,
        stage,
        routed_acronym,
        completion: None,
        outcome: None,
        error: Some(error),
        timestamp_ms: now_ms(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogHeader {
    schema: String,
    version: u32,
    run_id: String,
    created_at_ms: u64,
    config: LogConfig,
}

/// Serializes a run log to JSONL: header line first, one entry per line.
pub fn log_to_jsonl(log: &RunLog) -> String {
    let header = LogHeader {
        schema: RUN_LOG_SCHEMA.to_owned(),
        version: RUN_LOG_VERSION,
        run_id: log.run_id.clone(),
        created_at_ms: log.created_at_ms,
        config: log.config.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for entry in &log.entries {
        out.push_str(&serde_json::to_string(entry).expect("entry serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSONL produced by `log_to_jsonl`; errors name the offending line.
pub fn log_from_jsonl(text: &str, source: &str) -> Result<RunLog, LogError> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| LogError::Empty { path: source.to_owned() })?;
    let header: LogHeader = serde_json::from_str(header_line)
        .map_err(|e| LogError::BadLine { line: 1, message: e.to_string() })?;
    if header.schema != RUN_LOG_SCHEMA || header.version != RUN_LOG_VERSION {
        return Err(LogError::SchemaVersion {
            schema: header.schema,
            version: header.version,
            expected_schema: RUN_LOG_SCHEMA.to_owned(),
            expected_version: RUN_LOG_VERSION,
        });
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let entry: LogEntry = serde_json::from_str(line)
            .map_err(|e| LogError::BadLine { line: idx + 1, message: e.to_string() })?;
        entries.push(entry);
    }
    Ok(RunLog {
        run_id: header.run_id,
        config: header.config,
        created_at_ms: header.created_at_ms,
        entries,
    })
}

pub fn persist_log(log: &RunLog, path: &Path) -> Result<(), LogError> {
    let mut file = fs::File::create(path).map_err(|source| LogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(log_to_jsonl(log).as_bytes())
        .map_err(|source| LogError::Io { path: path.display().to_string(), source })
}

pub fn load_log(path: &Path) -> Result<RunLog, LogError> {
    let text = fs::read_to_string(path).map_err(|source| LogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    log_from_jsonl(&text, &path.display().to_string())
}

/// Creates `base/<run-id>/` containing `config.json` and `log.jsonl`.
pub fn write_run_dir(log: &RunLog, base: &Path) -> Result<PathBuf, LogError> {
    let dir = base.join(&log.run_id);
    if dir.exists() {
        return Err(LogError::RunIdCollision { path: dir.display().to_string() });
    }
    fs::create_dir_all(&dir).map_err(|source| LogError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let header = LogHeader {
        schema: RUN_LOG_SCHEMA.to_owned(),
        version: RUN_LOG_VERSION,
        run_id: log.run_id.clone(),
        created_at_ms: log.created_at_ms,
        config: log.config.clone(),
    };
    let config_path = dir.join("config.json");
    fs::write(
        &config_path,
        serde_json::to_string_pretty(&header).expect("header serializes"),
    )
    .map_err(|source| LogError::Io { path: config_path.display().to_string(), source })?;
    persist_log(log, &dir.join("log.jsonl"))?;
    Ok(dir)
}

/// Resolves a run argument: either a run directory containing `log.jsonl`
/// or a direct path to a log file.
pub fn locate_log(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("log.jsonl")
    } else {
        path.to_path_buf()
    }
}

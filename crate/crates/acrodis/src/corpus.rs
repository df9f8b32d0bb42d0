//! Corpus loading, validation, filtering, and statistics.
//!
//! A corpus row ties a context text to one target acronym (short form) and
//! its gold expansion (long form). Input is CSV with the exact header
//! `id,text,acronym,expansion,domain`, or JSONL with the same keys.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::Backend;
use crate::prompting;
use crate::textnorm::normalize_clean;

pub const CORPUS_SCHEMA_VERSION: &str = "1";
const CSV_HEADER: [&str; 5] = ["id", "text", "acronym", "expansion", "domain"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Biomedical,
    General,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Biomedical => write!(f, "biomedical"),
            Domain::General => write!(f, "general"),
        }
    }
}

/// One corpus row. Invariants: all text fields non-empty, and the acronym
/// occurs in the text as a token-bounded substring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    pub acronym: String,
    pub expansion: String,
    pub domain: Domain,
}

/// Whether a corpus has been reduced to the single-acronym subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeLabel {
    SinglePass,
    Cascaded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub schema_version: String,
}

/// Validated, immutable corpus; ids are unique and row order is preserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    instances: Vec<Instance>,
    mode_label: ModeLabel,
    provenance: Provenance,
}

impl Corpus {
    /// Builds a corpus from in-memory instances, checking every Instance
    /// invariant plus id uniqueness. Row positions in errors are 1-based.
    pub fn new(
        instances: Vec<Instance>,
        mode_label: ModeLabel,
        provenance: Provenance,
    ) -> Result<Self, LoadError> {
        let mut seen = HashSet::new();
        for (idx, instance) in instances.iter().enumerate() {
            let row = idx + 1;
            validate_instance(instance, row)?;
            if !seen.insert(instance.id.clone()) {
                return Err(LoadError::DuplicateId { row, id: instance.id.clone() });
            }
        }
        Ok(Self { instances, mode_label, provenance })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn mode_label(&self) -> ModeLabel {
        self.mode_label
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.instances.iter().map(|i| i.id.clone()).collect()
    }
}

/// The token-bounded uppercase-run extraction rule with a minimum run
/// length (>= 2) and optional per-id override lists of manually confirmed
/// acronyms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionRule {
    min_len: usize,
    overrides: BTreeMap<String, Vec<String>>,
}

impl ExtractionRule {
    pub fn new(min_len: usize) -> Result<Self, LoadError> {
        if min_len < 2 {
            return Err(LoadError::InvalidRule { min_len });
        }
        Ok(Self { min_len, overrides: BTreeMap::new() })
    }

    pub fn with_overrides(mut self, overrides: BTreeMap<String, Vec<String>>) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn min_len(&self) -> usize {
        self.min_len
    }

    pub fn override_for(&self, id: &str) -> Option<&[String]> {
        self.overrides.get(id).map(Vec::as_slice)
    }

    /// Checks that every override id exists in the corpus.
    pub fn validate_overrides(&self, corpus: &Corpus) -> Result<(), LoadError> {
        let ids: HashSet<&str> = corpus.instances().iter().map(|i| i.id.as_str()).collect();
        for id in self.overrides.keys() {
            if !ids.contains(id.as_str()) {
                return Err(LoadError::UnknownOverrideId { id: id.clone() });
            }
        }
        Ok(())
    }
}

impl Default for ExtractionRule {
    fn default() -> Self {
        Self { min_len: 2, overrides: BTreeMap::new() }
    }
}

/// Per-dataset aggregates in the layout of the distribution table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_instances: usize,
    pub average_tokens: f64,
    pub unique_acronyms: usize,
    pub unique_expansions: usize,
    pub overshadowed_instances: usize,
    pub overshadowed_ratio: f64,
}

impl CorpusStats {
    /// Markdown table row set matching the distribution table columns.
    pub fn to_markdown(&self, dataset: &str, mode: &str) -> String {
        let mut out = String::new();
        out.push_str("| Dataset | Mode | Total Instances | Average Tokens | Unique Acronym | Unique Expansion | Overshadowed Instances | Overshadowed Ratio (%) |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        out.push_str(&format!(
            "| {dataset} | {mode} | {} | {:.2} | {} | {} | {} | {:.2} |\n",
            self.total_instances,
            self.average_tokens,
            self.unique_acronyms,
            self.unique_expansions,
            self.overshadowed_instances,
            self.overshadowed_ratio * 100.0,
        ));
        out
    }
}

/// Output of the annotator pass over one instance. `needs_review` is set
/// whenever the annotator's item list disagrees with the rule-based
/// extraction (or the annotator failed outright).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFlags {
    pub id: String,
    pub detected_items: Vec<String>,
    pub needs_review: bool,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {source}")]
    Csv {
        row: usize,
        #[source]
        source: csv::Error,
    },
    #[error("row {row}: invalid JSON: {message}")]
    Json { row: usize, message: String },
    #[error("header mismatch: expected `id,text,acronym,expansion,domain`, found `{found}`")]
    HeaderMismatch { found: String },
    #[error("file contains no data rows")]
    EmptyFile,
    #[error("row {row}: field `{field}` is empty")]
    EmptyField { row: usize, field: &'static str },
    #[error("row {row}: invalid domain `{value}` (expected biomedical or general)")]
    InvalidDomain { row: usize, value: String },
    #[error("row {row}: duplicate id `{id}`")]
    DuplicateId { row: usize, id: String },
    #[error("row {row}: acronym `{acronym}` does not occur token-bounded in its text (id `{id}`)")]
    AcronymAbsent { row: usize, id: String, acronym: String },
    #[error("extraction rule minimum length must be >= 2, got {min_len}")]
    InvalidRule { min_len: usize },
    #[error("override references unknown instance id `{id}`")]
    UnknownOverrideId { id: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("cannot compute statistics for an empty corpus (ratio undefined)")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Csv,
    Jsonl,
}

impl CorpusFormat {
    /// Picks the format from the file extension; defaults to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Csv,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawRow {
    id: String,
    text: String,
    acronym: String,
    expansion: String,
    domain: String,
}

/// Loads and validates a corpus file. Row numbers in errors refer to
/// physical lines in the file. Loaded corpora carry the `cascaded` label;
/// `filter_single_acronym` produces the single-pass subset.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, LoadError> {
    let file = File::open(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let rows = match format {
        CorpusFormat::Csv => read_csv_rows(file)?,
        CorpusFormat::Jsonl => read_jsonl_rows(file)?,
    };
    if rows.is_empty() {
        return Err(LoadError::EmptyFile);
    }

    let mut instances = Vec::with_capacity(rows.len());
    let mut seen = HashSet::new();
    for (row, raw) in rows {
        let domain = match raw.domain.as_str() {
            "biomedical" => Domain::Biomedical,
            "general" => Domain::General,
            other => {
                return Err(LoadError::InvalidDomain { row, value: other.to_owned() });
            }
        };
        let instance = Instance {
            id: raw.id,
            text: raw.text,
            acronym: raw.acronym,
            expansion: raw.expansion,
            domain,
        };
        validate_instance(&instance, row)?;
        if !seen.insert(instance.id.clone()) {
            return Err(LoadError::DuplicateId { row, id: instance.id });
        }
        instances.push(instance);
    }

    Ok(Corpus {
        instances,
        mode_label: ModeLabel::Cascaded,
        provenance: Provenance {
            source: path.display().to_string(),
            schema_version: CORPUS_SCHEMA_VERSION.to_owned(),
        },
    })
}

fn read_csv_rows(file: File) -> Result<Vec<(usize, RawRow)>, LoadError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|source| LoadError::Csv { row: 1, source })?
        .clone();
    let found: Vec<&str> = headers.iter().collect();
    if found != CSV_HEADER {
        return Err(LoadError::HeaderMismatch { found: found.join(",") });
    }
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|source| {
            let row = source
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(rows.len() + 2);
            LoadError::Csv { row, source }
        })?;
        let row = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(rows.len() + 2);
        let raw: RawRow = record
            .deserialize(Some(&headers))
            .map_err(|source| LoadError::Csv { row, source })?;
        rows.push((row, raw));
    }
    Ok(rows)
}

fn read_jsonl_rows(file: File) -> Result<Vec<(usize, RawRow)>, LoadError> {
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line.map_err(|source| LoadError::Io { path: format!("line {row}"), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRow = serde_json::from_str(&line)
            .map_err(|e| LoadError::Json { row, message: e.to_string() })?;
        rows.push((row, raw));
    }
    Ok(rows)
}

fn validate_instance(instance: &Instance, row: usize) -> Result<(), LoadError> {
    for (field, value) in [
        ("id", &instance.id),
        ("text", &instance.text),
        ("acronym", &instance.acronym),
        ("expansion", &instance.expansion),
    ] {
        if value.trim().is_empty() {
            return Err(LoadError::EmptyField { row, field });
        }
    }
    if !contains_token_bounded(&instance.text, &instance.acronym) {
        return Err(LoadError::AcronymAbsent {
            row,
            id: instance.id.clone(),
            acronym: instance.acronym.clone(),
        });
    }
    Ok(())
}

/// True when `needle` occurs in `haystack` with no word character
/// (alphanumeric or underscore) adjacent on either side.
pub fn contains_token_bounded(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    for (start, matched) in haystack.match_indices(needle) {
        let before_ok = haystack[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !is_word_char(c));
        let after_ok = haystack[start + matched.len()..]
            .chars()
            .next()
            .is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok {
            return true;
        }
    }
    false
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Returns every maximal run of ASCII uppercase letters at least
/// `rule.min_len()` long that sits at token boundaries, in order of
/// appearance, duplicates preserved. Runs adjacent to other word
/// characters (e.g. the `ABC` in `ABCdef`) are skipped entirely.
pub fn extract_acronyms(text: &str, rule: &ExtractionRule) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_uppercase() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_uppercase() {
                i += 1;
            }
            let bounded_left = start == 0 || !is_word_char(chars[start - 1]);
            let bounded_right = i == chars.len() || !is_word_char(chars[i]);
            if i - start >= rule.min_len() && bounded_left && bounded_right {
                out.push(chars[start..i].iter().collect());
            }
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum RejectReason {
    NoCandidates,
    MultipleCandidates { items: Vec<String> },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::NoCandidates => write!(f, "no acronym candidates"),
            RejectReason::MultipleCandidates { items } => {
                write!(f, "multiple candidates: {}", items.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedInstance {
    pub id: String,
    pub reason: RejectReason,
}

/// Result of the single-acronym filter: the retained subset plus every
/// rejected row with its reason.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub corpus: Corpus,
    pub rejected: Vec<RejectedInstance>,
}

/// Keeps the instances whose candidate count is exactly one.
///
/// Candidate source priority per instance: a manual override list on the
/// rule, then the annotator's item list (when present and non-empty),
/// then the rule-based extraction. Rule extraction counts occurrences;
/// override and annotator lists are de-duplicated before counting since
/// they enumerate item kinds, not positions. The returned corpus carries
/// the `single_pass` label.
pub fn filter_single_acronym(
    corpus: &Corpus,
    rule: &ExtractionRule,
    flags: Option<&[AnnotationFlags]>,
) -> FilterOutcome {
    let flag_map: HashMap<&str, &AnnotationFlags> = flags
        .unwrap_or_default()
        .iter()
        .map(|f| (f.id.as_str(), f))
        .collect();

    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for instance in corpus.instances() {
        let candidates: Vec<String> = if let Some(list) = rule.override_for(&instance.id) {
            dedup_preserving(list)
        } else if let Some(flag) = flag_map.get(instance.id.as_str()) {
            if flag.detected_items.is_empty() {
                extract_acronyms(&instance.text, rule)
            } else {
                dedup_preserving(&flag.detected_items)
            }
        } else {
            extract_acronyms(&instance.text, rule)
        };
        match candidates.len() {
            1 => kept.push(instance.clone()),
            0 => rejected.push(RejectedInstance {
                id: instance.id.clone(),
                reason: RejectReason::NoCandidates,
            }),
            _ => rejected.push(RejectedInstance {
                id: instance.id.clone(),
                reason: RejectReason::MultipleCandidates { items: candidates },
            }),
        }
    }

    FilterOutcome {
        corpus: Corpus {
            instances: kept,
            mode_label: ModeLabel::SinglePass,
            provenance: corpus.provenance.clone(),
        },
        rejected,
    }
}

fn dedup_preserving(items: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .iter()
        .filter(|i| !i.trim().is_empty())
        .filter(|i| seen.insert(i.as_str()))
        .cloned()
        .collect()
}

/// True iff, among all corpus instances sharing the same acronym
/// (case-sensitive), this instance's gold expansion is strictly less
/// frequent than the most frequent expansion. Expansion identity uses
/// clean normalization so formatting variants count as one sense.
/// Precondition: `instance` is a member of `corpus`.
pub fn is_overshadowed(instance: &Instance, corpus: &Corpus) -> bool {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for other in corpus.instances() {
        if other.acronym == instance.acronym {
            *counts.entry(normalize_clean(&other.expansion)).or_default() += 1;
        }
    }
    let own = counts
        .get(&normalize_clean(&instance.expansion))
        .copied()
        .unwrap_or(0);
    let max = counts.values().copied().max().unwrap_or(0);
    own < max
}

/// Computes the full distribution statistics. Token counts are
/// whitespace-split tokens of the original text; acronym and expansion
/// uniqueness count distinct literal strings.
pub fn compute_stats(corpus: &Corpus) -> Result<CorpusStats, StatsError> {
    if corpus.is_empty() {
        return Err(StatsError::EmptyCorpus);
    }
    let total = corpus.len();
    let token_sum: usize = corpus
        .instances()
        .iter()
        .map(|i| i.text.split_whitespace().count())
        .sum();

    let unique_acronyms: HashSet<&str> =
        corpus.instances().iter().map(|i| i.acronym.as_str()).collect();
    let unique_expansions: HashSet<&str> =
        corpus.instances().iter().map(|i| i.expansion.as_str()).collect();

    // Group once: sense counts per acronym under clean normalization.
    let mut sense_counts: HashMap<&str, HashMap<String, usize>> = HashMap::new();
    for instance in corpus.instances() {
        *sense_counts
            .entry(instance.acronym.as_str())
            .or_default()
            .entry(normalize_clean(&instance.expansion))
            .or_default() += 1;
    }
    let overshadowed = corpus
        .instances()
        .iter()
        .filter(|instance| {
            let senses = &sense_counts[instance.acronym.as_str()];
            let own = senses[&normalize_clean(&instance.expansion)];
            let max = senses.values().copied().max().unwrap_or(0);
            own < max
        })
        .count();

    Ok(CorpusStats {
        total_instances: total,
        average_tokens: token_sum as f64 / total as f64,
        unique_acronyms: unique_acronyms.len(),
        unique_expansions: unique_expansions.len(),
        overshadowed_instances: overshadowed,
        overshadowed_ratio: overshadowed as f64 / total as f64,
    })
}

/// Runs the annotator backend over one instance and compares its item
/// list against the rule-based extraction. Backend failures or
/// unparseable output yield empty items flagged for review. Never
/// mutates the corpus; review is a human step.
pub fn annotate_candidates(
    instance: &Instance,
    annotator: &dyn Backend,
    rule: &ExtractionRule,
) -> AnnotationFlags {
    let rule_items: BTreeSet<String> =
        extract_acronyms(&instance.text, rule).into_iter().collect();
    let failed = AnnotationFlags {
        id: instance.id.clone(),
        detected_items: Vec::new(),
        needs_review: true,
    };

    let prompt = match prompting::render_annotation(&instance.text) {
        Ok(p) => p,
        Err(_) => return failed,
    };
    let record = match annotator.complete(&prompt.text, &instance.id) {
        Ok(r) => r,
        Err(_) => return failed,
    };
    match prompting::parse_item_list(&record.response) {
        Some(items) => {
            let detected = dedup_preserving(&items);
            let detected_set: BTreeSet<String> = detected.iter().cloned().collect();
            AnnotationFlags {
                id: instance.id.clone(),
                needs_review: detected_set != rule_items,
                detected_items: detected,
            }
        }
        None => failed,
    }
}

/// Annotates a whole corpus with bounded parallelism; output order
/// matches corpus order.
pub fn annotate_corpus(
    corpus: &Corpus,
    annotator: &dyn Backend,
    rule: &ExtractionRule,
    parallelism: usize,
) -> Vec<AnnotationFlags> {
    if parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            corpus
                .instances()
                .par_iter()
                .map(|i| annotate_candidates(i, annotator, rule))
                .collect()
        })
    } else {
        corpus
            .instances()
            .iter()
            .map(|i| annotate_candidates(i, annotator, rule))
            .collect()
    }
}

/// Writes a corpus back out as CSV with the canonical header.
pub fn write_corpus_csv(corpus: &Corpus, path: &Path) -> Result<(), LoadError> {
    let file = File::create(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record(CSV_HEADER)
        .map_err(|source| LoadError::Csv { row: 1, source })?;
    for (idx, instance) in corpus.instances().iter().enumerate() {
        writer
            .write_record([
                instance.id.as_str(),
                instance.text.as_str(),
                instance.acronym.as_str(),
                instance.expansion.as_str(),
                &instance.domain.to_string(),
            ])
            .map_err(|source| LoadError::Csv { row: idx + 2, source })?;
    }
    writer
        .flush()
        .map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

/// Reads a whole file into a string (shared by CLI helpers).
pub fn read_to_string(path: &Path) -> Result<String, LoadError> {
    let mut file = File::open(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut buf = String::new();
    file.read_to_string(&mut buf).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn rule() -> ExtractionRule {
        ExtractionRule::default()
    }

    fn make_instance(id: &str, text: &str, acronym: &str, expansion: &str) -> Instance {
        Instance {
            id: id.to_owned(),
            text: text.to_owned(),
            acronym: acronym.to_owned(),
            expansion: expansion.to_owned(),
            domain: Domain::Biomedical,
        }
    }

    fn make_corpus(instances: Vec<Instance>) -> Corpus {
        Corpus::new(
            instances,
            ModeLabel::Cascaded,
            Provenance { source: "test".into(), schema_version: CORPUS_SCHEMA_VERSION.into() },
        )
        .unwrap()
    }

    #[test]
    fn extracts_uppercase_runs_in_order() {
        assert_eq!(
            extract_acronyms(
                "Correlation of PT and famous face and voice recognition was performed.",
                &rule()
            ),
            vec!["PT"]
        );
        assert_eq!(
            extract_acronyms(
                "ED staff cardiac device interrogations are faster , and with similar 30- day outcomes , as compared to SP .",
                &rule()
            ),
            vec!["ED", "SP"]
        );
        assert_eq!(extract_acronyms("no shorthand here", &rule()), Vec::<String>::new());
    }

    #[test]
    fn extraction_respects_token_boundaries() {
        assert_eq!(extract_acronyms("ABCdef", &rule()), Vec::<String>::new());
        assert_eq!(extract_acronyms("xAB", &rule()), Vec::<String>::new());
        assert_eq!(extract_acronyms("AB_CD", &rule()), Vec::<String>::new());
        assert_eq!(extract_acronyms("(AB)", &rule()), vec!["AB"]);
        assert_eq!(extract_acronyms("COVID19", &rule()), Vec::<String>::new());
        assert_eq!(extract_acronyms("E=mc2 and MS", &rule()), vec!["MS"]);
    }

    #[test]
    fn extraction_preserves_duplicates() {
        assert_eq!(extract_acronyms("ED then ED again", &rule()), vec!["ED", "ED"]);
    }

    #[test]
    fn extraction_min_len_is_enforced() {
        let rule3 = ExtractionRule::new(3).unwrap();
        assert_eq!(extract_acronyms("ED and ICU", &rule3), vec!["ICU"]);
        assert!(ExtractionRule::new(1).is_err());
    }

    proptest! {
        // The scanner must agree with the reference regex oracle.
        #[test]
        fn extraction_matches_regex_oracle(s in "[A-Za-z0-9 \\t\\n_.,()=/*éÉß-]{0,80}") {
            let oracle = regex::Regex::new(r"\b[A-Z]{2,}\b").unwrap();
            let expected: Vec<String> = oracle.find_iter(&s).map(|m| m.as_str().to_owned()).collect();
            prop_assert_eq!(extract_acronyms(&s, &rule()), expected);
        }

        #[test]
        fn extraction_concatenation_property(a in "[A-Za-z ]{0,30}", b in "[A-Za-z ]{0,30}") {
            let joined = format!("{a} {b}");
            let mut expected = extract_acronyms(&a, &rule());
            expected.extend(extract_acronyms(&b, &rule()));
            prop_assert_eq!(extract_acronyms(&joined, &rule()), expected);
        }
    }

    #[test]
    fn loads_well_formed_csv() {
        let mut file = tempfile::NamedTempFile::with_suffix(".csv").unwrap();
        writeln!(file, "id,text,acronym,expansion,domain").unwrap();
        writeln!(file, "a,The MS patient improved.,MS,multiple sclerosis,biomedical").unwrap();
        writeln!(file, "b,\"PT was prolonged, repeat ordered.\",PT,prothrombin time,biomedical").unwrap();
        writeln!(file, "c,ED crowding persisted.,ED,emergency department,general").unwrap();
        let corpus = load_corpus(file.path(), CorpusFormat::Csv).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.ids(), vec!["a", "b", "c"]);
        assert_eq!(corpus.mode_label(), ModeLabel::Cascaded);
    }

    #[test]
    fn load_rejects_absent_acronym_with_row_number() {
        let mut file = tempfile::NamedTempFile::with_suffix(".csv").unwrap();
        writeln!(file, "id,text,acronym,expansion,domain").unwrap();
        writeln!(file, "a,The MS patient improved.,MS,multiple sclerosis,biomedical").unwrap();
        writeln!(file, "b,no shorthand at all.,PT,prothrombin time,biomedical").unwrap();
        let err = load_corpus(file.path(), CorpusFormat::Csv).unwrap_err();
        match err {
            LoadError::AcronymAbsent { row, id, acronym } => {
                assert_eq!(row, 3);
                assert_eq!(id, "b");
                assert_eq!(acronym, "PT");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn load_rejects_duplicate_ids_header_mismatch_and_empty() {
        let mut file = tempfile::NamedTempFile::with_suffix(".csv").unwrap();
        writeln!(file, "id,text,acronym,expansion,domain").unwrap();
        writeln!(file, "a,MS here.,MS,multiple sclerosis,biomedical").unwrap();
        writeln!(file, "a,MS again.,MS,multiple sclerosis,biomedical").unwrap();
        assert!(matches!(
            load_corpus(file.path(), CorpusFormat::Csv),
            Err(LoadError::DuplicateId { row: 3, .. })
        ));

        let mut file = tempfile::NamedTempFile::with_suffix(".csv").unwrap();
        writeln!(file, "id,text,shortform,expansion,domain").unwrap();
        writeln!(file, "a,MS here.,MS,multiple sclerosis,biomedical").unwrap();
        assert!(matches!(
            load_corpus(file.path(), CorpusFormat::Csv),
            Err(LoadError::HeaderMismatch { .. })
        ));

        let mut file = tempfile::NamedTempFile::with_suffix(".csv").unwrap();
        writeln!(file, "id,text,acronym,expansion,domain").unwrap();
        assert!(matches!(
            load_corpus(file.path(), CorpusFormat::Csv),
            Err(LoadError::EmptyFile)
        ));
    }

    #[test]
    fn loads_jsonl_with_same_keys() {
        let mut file = tempfile::NamedTempFile::with_suffix(".jsonl").unwrap();
        writeln!(
            file,
            r#"{{"id":"a","text":"The MS patient improved.","acronym":"MS","expansion":"multiple sclerosis","domain":"biomedical"}}"#
        )
        .unwrap();
        let corpus = load_corpus(file.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(corpus.len(), 1);

        let mut file = tempfile::NamedTempFile::with_suffix(".jsonl").unwrap();
        writeln!(file, "{{not json").unwrap();
        assert!(matches!(
            load_corpus(file.path(), CorpusFormat::Jsonl),
            Err(LoadError::Json { row: 1, .. })
        ));
    }

    #[test]
    fn filter_keeps_single_acronym_texts() {
        let corpus = make_corpus(vec![
            make_instance("one", "Only MS here.", "MS", "multiple sclerosis"),
            make_instance("two", "Both ED and SP appear.", "ED", "emergency department"),
        ]);
        let outcome = filter_single_acronym(&corpus, &rule(), None);
        assert_eq!(outcome.corpus.len(), 1);
        assert_eq!(outcome.corpus.instances()[0].id, "one");
        assert_eq!(outcome.corpus.mode_label(), ModeLabel::SinglePass);
        assert_eq!(outcome.rejected.len(), 1);
        assert!(matches!(
            outcome.rejected[0].reason,
            RejectReason::MultipleCandidates { .. }
        ));
    }

    #[test]
    fn filter_applies_annotation_flags_and_overrides() {
        let corpus = make_corpus(vec![make_instance(
            "eq",
            "An equation E=mc2 appeared beside the MS notation.",
            "MS",
            "multiple sclerosis",
        )]);
        // Rule alone sees exactly one acronym.
        assert_eq!(filter_single_acronym(&corpus, &rule(), None).corpus.len(), 1);
        // Annotator listed the equation too, so the row is rejected.
        let flags = vec![AnnotationFlags {
            id: "eq".into(),
            detected_items: vec!["MS".into(), "E=mc2".into()],
            needs_review: true,
        }];
        let outcome = filter_single_acronym(&corpus, &rule(), Some(&flags));
        assert_eq!(outcome.corpus.len(), 0);
        // A manual override wins over the flags.
        let overrides = BTreeMap::from([("eq".to_owned(), vec!["MS".to_owned()])]);
        let rule_ov = ExtractionRule::default().with_overrides(overrides);
        let outcome = filter_single_acronym(&corpus, &rule_ov, Some(&flags));
        assert_eq!(outcome.corpus.len(), 1);
    }

    #[test]
    fn filter_is_idempotent() {
        let corpus = make_corpus(vec![
            make_instance("one", "Only MS here.", "MS", "multiple sclerosis"),
            make_instance("two", "Both ED and SP appear.", "ED", "emergency department"),
            make_instance("three", "PT rechecked.", "PT", "prothrombin time"),
        ]);
        let once = filter_single_acronym(&corpus, &rule(), None);
        let twice = filter_single_acronym(&once.corpus, &rule(), None);
        assert_eq!(once.corpus, twice.corpus);
        assert!(twice.rejected.is_empty());
    }

    fn overshadow_corpus() -> Corpus {
        // The worked example: 100 MS sentences split 80x Multiple
        // Sclerosis, 15x Mitral Stenosis, 5x Morphine Sulfate, plus a
        // singleton acronym.
        let mut instances = Vec::new();
        for i in 0..80 {
            instances.push(make_instance(
                &format!("maj{i:02}"),
                "MS noted.",
                "MS",
                "Multiple Sclerosis",
            ));
        }
        for i in 0..15 {
            instances.push(make_instance(
                &format!("mid{i:02}"),
                "MS noted.",
                "MS",
                "Mitral Stenosis",
            ));
        }
        for i in 0..5 {
            instances.push(make_instance(
                &format!("min{i:02}"),
                "MS noted.",
                "MS",
                "Morphine Sulfate",
            ));
        }
        instances.push(make_instance("solo", "CT clear.", "CT", "computed tomography"));
        make_corpus(instances)
    }

    #[test]
    fn overshadow_majority_minority_and_singleton() {
        let corpus = overshadow_corpus();
        assert!(is_overshadowed(corpus.get("mid00").unwrap(), &corpus));
        assert!(is_overshadowed(corpus.get("min00").unwrap(), &corpus));
        assert!(!is_overshadowed(corpus.get("maj00").unwrap(), &corpus));
        assert!(!is_overshadowed(corpus.get("solo").unwrap(), &corpus));
    }

    #[test]
    fn overshadow_tie_is_not_overshadowed() {
        let corpus = make_corpus(vec![
            make_instance("a", "RA one.", "RA", "rheumatoid arthritis"),
            make_instance("b", "RA two.", "RA", "right atrium"),
        ]);
        for instance in corpus.instances() {
            assert!(!is_overshadowed(instance, &corpus));
        }
    }

    #[test]
    fn overshadow_uses_clean_normalized_expansions() {
        // "B-cell" and "B cell" must count as the same sense.
        let corpus = make_corpus(vec![
            make_instance("a", "BCL noted.", "BCL", "B-cell lymphoma"),
            make_instance("b", "BCL noted.", "BCL", "B cell lymphoma"),
            make_instance("c", "BCL noted.", "BCL", "basal cell lesion"),
        ]);
        assert!(is_overshadowed(corpus.get("c").unwrap(), &corpus));
        assert!(!is_overshadowed(corpus.get("a").unwrap(), &corpus));
    }

    #[test]
    fn stats_match_brute_force_on_small_corpus() {
        let corpus = overshadow_corpus();
        let stats = compute_stats(&corpus).unwrap();
        let brute: usize = corpus
            .instances()
            .iter()
            .filter(|i| is_overshadowed(i, &corpus))
            .count();
        assert_eq!(stats.overshadowed_instances, brute);
        assert_eq!(stats.overshadowed_instances, 20);
        assert!((stats.overshadowed_ratio - 20.0 / 101.0).abs() < 1e-12);
        assert_eq!(stats.total_instances, 101);
        assert_eq!(stats.unique_acronyms, 2);
        assert_eq!(stats.unique_expansions, 4);
    }

    #[test]
    fn stats_error_on_empty_and_single_sense_corpus_has_zero_overshadow() {
        let empty = make_corpus(vec![]);
        assert_eq!(compute_stats(&empty), Err(StatsError::EmptyCorpus));

        let corpus = make_corpus(vec![
            make_instance("a", "MS one.", "MS", "multiple sclerosis"),
            make_instance("b", "MS two.", "MS", "multiple sclerosis"),
            make_instance("c", "CT one.", "CT", "computed tomography"),
        ]);
        let stats = compute_stats(&corpus).unwrap();
        assert_eq!(stats.overshadowed_instances, 0);
        assert_eq!(stats.overshadowed_ratio, 0.0);
    }

    proptest! {
        #[test]
        fn stats_are_permutation_invariant(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let corpus = overshadow_corpus();
            let mut shuffled = corpus.instances().to_vec();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let shuffled = make_corpus(shuffled);
            prop_assert_eq!(compute_stats(&corpus).unwrap(), compute_stats(&shuffled).unwrap());
        }
    }

    #[test]
    fn average_tokens_is_whitespace_split_mean() {
        let corpus = make_corpus(vec![
            make_instance("a", "MS one two", "MS", "multiple sclerosis"),
            make_instance("b", "PT four tokens here", "PT", "prothrombin time"),
        ]);
        let stats = compute_stats(&corpus).unwrap();
        assert!((stats.average_tokens - 3.5).abs() < 1e-12);
    }

    #[test]
    fn markdown_stats_layout() {
        let stats = CorpusStats {
            total_instances: 20,
            average_tokens: 7.55,
            unique_acronyms: 11,
            unique_expansions: 13,
            overshadowed_instances: 2,
            overshadowed_ratio: 0.1,
        };
        let md = stats.to_markdown("mini", "Cascaded");
        assert!(md.contains("| mini | Cascaded | 20 | 7.55 | 11 | 13 | 2 | 10.00 |"));
    }

    #[test]
    fn override_validation_detects_unknown_ids() {
        let corpus = make_corpus(vec![make_instance("a", "MS here.", "MS", "multiple sclerosis")]);
        let rule_ok = ExtractionRule::default()
            .with_overrides(BTreeMap::from([("a".to_owned(), vec!["MS".to_owned()])]));
        assert!(rule_ok.validate_overrides(&corpus).is_ok());
        let rule_bad = ExtractionRule::default()
            .with_overrides(BTreeMap::from([("ghost".to_owned(), vec!["MS".to_owned()])]));
        assert!(matches!(
            rule_bad.validate_overrides(&corpus),
            Err(LoadError::UnknownOverrideId { .. })
        ));
    }

    struct GarbageAnnotator;
    impl crate::inference::Backend for GarbageAnnotator {
        fn id(&self) -> &str {
            "garbage"
        }
        fn complete(
            &self,
            prompt: &str,
            _key: &str,
        ) -> Result<crate::inference::CompletionRecord, crate::inference::BackendError> {
            Ok(crate::inference::CompletionRecord {
                prompt: prompt.to_owned(),
                response: "certainly! here are the items you asked about".to_owned(),
                latency_ms: 0,
                attempt: 1,
                backend_id: "garbage".to_owned(),
            })
        }
        fn probe(&self) -> crate::inference::HealthReport {
            crate::inference::HealthReport {
                status: crate::inference::HealthStatus::Healthy,
                detail: String::new(),
            }
        }
    }

    #[test]
    fn annotation_agreement_disagreement_and_failure_contract() {
        use crate::inference::{MockBackend, MockBehavior};

        let plain = make_instance("p", "The MS patient improved.", "MS", "multiple sclerosis");
        let equation = make_instance(
            "eq",
            "An equation E=mc2 appeared beside the MS notation.",
            "MS",
            "multiple sclerosis",
        );
        let corpus = make_corpus(vec![plain.clone(), equation.clone()]);
        let mock = MockBackend::new(MockBehavior::perfect(BTreeMap::new()), &corpus.ids());

        // Annotator agrees with the rule: not flagged.
        let flags = annotate_candidates(&plain, &mock, &rule());
        assert!(!flags.needs_review);
        assert_eq!(flags.detected_items, vec!["MS"]);

        // Annotator lists the equation the rule cannot see: flagged.
        let flags = annotate_candidates(&equation, &mock, &rule());
        assert!(flags.needs_review);
        assert_eq!(flags.detected_items, vec!["MS", "E=mc2"]);

        // Malformed annotator output: flagged with empty items.
        let flags = annotate_candidates(&plain, &GarbageAnnotator, &rule());
        assert!(flags.needs_review);
        assert!(flags.detected_items.is_empty());
    }

    #[test]
    fn annotate_corpus_parallel_matches_sequential() {
        use crate::inference::{MockBackend, MockBehavior};

        let corpus = make_corpus(vec![
            make_instance("a", "The MS patient improved.", "MS", "multiple sclerosis"),
            make_instance("b", "Both ED and SP appear.", "ED", "emergency department"),
            make_instance("c", "An equation E=mc2 beside PT.", "PT", "prothrombin time"),
        ]);
        let mock = MockBackend::new(MockBehavior::perfect(BTreeMap::new()), &corpus.ids());
        let sequential = annotate_corpus(&corpus, &mock, &rule(), 1);
        let parallel = annotate_corpus(&corpus, &mock, &rule(), 4);
        assert_eq!(sequential, parallel);
        assert_eq!(sequential.len(), 3);
    }

    #[test]
    fn csv_round_trip_preserves_rows() {
        let corpus = make_corpus(vec![
            make_instance("a", "The MS patient, as noted, improved.", "MS", "multiple sclerosis"),
            make_instance("b", "PT \"checked\" twice.", "PT", "prothrombin time"),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_corpus_csv(&corpus, &path).unwrap();
        let reloaded = load_corpus(&path, CorpusFormat::Csv).unwrap();
        assert_eq!(reloaded.instances(), corpus.instances());
    }
}

//! Scoring of run logs against a corpus, plus report emission.
//!
//! Scoring is a pure read over the log: per instance-iteration it applies
//! exact-match detection and computes BLEU / METEOR / ROUGE-L for the
//! candidate expansion against gold under both normalization modes.
//! Blocked, failed, and missing outputs score 0 everywhere so denominators
//! always equal corpus size. Tables render deterministically, so golden
//! file comparisons are byte-stable.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

use crate::corpus::{Corpus, ModeLabel};
use crate::metrics::{
    self, aggregate, detection_match, stratify_band, AggregateError, AggregateReport, Band,
    BandConfig, BandCounts, MeteorParams, MetricScore,
};
use crate::pipeline::{EntryStatus, LogEntry, RunLog, Stage};
use crate::prompting::ParsedPayload;
use crate::textnorm::{normalize, tokenize, NormalizationMode};

pub const SCORE_REPORT_VERSION: u32 = 1;

/// Scores for one instance-iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub instance_id: String,
    pub iteration: u32,
    pub status: EntryStatus,
    /// Absent when the run had no detection-bearing stage
    /// (cascaded with assumed-perfect detection).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub raw: MetricScore,
    pub clean: MetricScore,
}

/// Per-row and aggregate scores for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub run_id: String,
    pub mode: ModeLabel,
    pub iterations: u32,
    pub detector_backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expander_backend: Option<String>,
    pub rows: Vec<ScoreRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<AggregateReport>,
    pub bleu_raw: AggregateReport,
    pub bleu_clean: AggregateReport,
    pub meteor_raw: AggregateReport,
    pub meteor_clean: AggregateReport,
    pub rouge_l_raw: AggregateReport,
    pub rouge_l_clean: AggregateReport,
}

impl ScoreReport {
    /// The model a table row is attributed to: the expander when the run
    /// had one, otherwise the single backend.
    pub fn model(&self) -> &str {
        self.expander_backend.as_deref().unwrap_or(&self.detector_backend)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("log references unknown instance id `{id}` (corrupt log or wrong corpus)")]
    UnknownInstanceId { id: String },
    #[error("log is missing entries for instance `{id}` iteration {iteration}; a filtered run must be scored against the filtered corpus file (see `prepare`)")]
    MissingEntry { id: String, iteration: u32 },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

/// Scores a run log against its corpus with default banding and METEOR
/// parameters.
pub fn score_run(log: &RunLog, corpus: &Corpus) -> Result<ScoreReport, ScoreError> {
    score_run_with(log, corpus, &BandConfig::default(), &MeteorParams::default())
}

pub fn score_run_with(
    log: &RunLog,
    corpus: &Corpus,
    band: &BandConfig,
    meteor_params: &MeteorParams,
) -> Result<ScoreReport, ScoreError> {
    let known: HashMap<&str, &crate::corpus::Instance> =
        corpus.instances().iter().map(|i| (i.id.as_str(), i)).collect();
    for entry in &log.entries {
        if !known.contains_key(entry.instance_id.as_str()) {
            return Err(ScoreError::UnknownInstanceId { id: entry.instance_id.clone() });
        }
    }

    let mut grouped: HashMap<(&str, u32), Vec<&LogEntry>> = HashMap::new();
    for entry in &log.entries {
        grouped
            .entry((entry.instance_id.as_str(), entry.iteration))
            .or_default()
            .push(entry);
    }

    let has_detection_stage = log.config.mode == ModeLabel::SinglePass
        || !log.config.assume_perfect_detection;

    let mut rows = Vec::with_capacity(corpus.len() * log.config.iterations as usize);
    for instance in corpus.instances() {
        for iteration in 1..=log.config.iterations {
            let entries = grouped
                .get(&(instance.id.as_str(), iteration))
                .ok_or_else(|| ScoreError::MissingEntry {
                    id: instance.id.clone(),
                    iteration,
                })?;
            rows.push(score_instance_iteration(
                instance,
                iteration,
                entries,
                log.config.mode,
                has_detection_stage,
                meteor_params,
            ));
        }
    }

    let iterations = log.config.iterations as usize;
    let matrix = |f: &dyn Fn(&ScoreRow) -> f64| -> Vec<Vec<f64>> {
        rows.chunks(iterations)
            .map(|chunk| chunk.iter().map(f).collect())
            .collect()
    };

    let detection = if has_detection_stage {
        Some(aggregate(&matrix(&|r| r.detection.unwrap_or(0.0)), band)?)
    } else {
        None
    };

    Ok(ScoreReport {
        schema_version: SCORE_REPORT_VERSION,
        run_id: log.run_id.clone(),
        mode: log.config.mode,
        iterations: log.config.iterations,
        detector_backend: log.config.detector_backend.clone(),
        expander_backend: log.config.expander_backend.clone(),
        detection,
        bleu_raw: aggregate(&matrix(&|r| r.raw.bleu), band)?,
        bleu_clean: aggregate(&matrix(&|r| r.clean.bleu), band)?,
        meteor_raw: aggregate(&matrix(&|r| r.raw.meteor), band)?,
        meteor_clean: aggregate(&matrix(&|r| r.clean.meteor), band)?,
        rouge_l_raw: aggregate(&matrix(&|r| r.raw.rouge_l), band)?,
        rouge_l_clean: aggregate(&matrix(&|r| r.clean.rouge_l), band)?,
        rows,
    })
}

fn score_instance_iteration(
    instance: &crate::corpus::Instance,
    iteration: u32,
    entries: &[&LogEntry],
    mode: ModeLabel,
    has_detection_stage: bool,
    meteor_params: &MeteorParams,
) -> ScoreRow {
    // The expansion whose routed acronym matches gold carries the score;
    // other detected acronyms stay logged but unscored.
    let expansion_entry = entries.iter().find(|e| match e.stage {
        Stage::SinglePass => true,
        Stage::Expansion => match mode {
            ModeLabel::SinglePass => true,
            ModeLabel::Cascaded => e.routed_acronym.as_deref() == Some(instance.acronym.as_str()),
        },
        Stage::Detection => false,
    });
    let detection_entry = entries.iter().find(|e| e.stage == Stage::Detection);

    let expansion_payload = expansion_entry.and_then(|e| {
        e.outcome.as_ref().and_then(|o| match &o.payload {
            Some(ParsedPayload::Expansion(exp)) => Some(exp),
            _ => None,
        })
    });

    let detection = if !has_detection_stage {
        None
    } else if mode == ModeLabel::SinglePass {
        Some(detection_match(
            expansion_payload.map(|p| p.acronym.as_str()),
            &instance.acronym,
        ))
    } else {
        // Cascaded stage 1: the gold acronym must appear in the detected
        // list (exact match after trimming).
        let detected = detection_entry.and_then(|e| {
            e.outcome.as_ref().and_then(|o| match &o.payload {
                Some(ParsedPayload::Detection(d)) => Some(&d.acronyms),
                _ => None,
            })
        });
        let hit = detected.is_some_and(|list| {
            list.iter().any(|a| a.trim() == instance.acronym.trim())
        });
        Some(if hit { 1.0 } else { 0.0 })
    };

    let status = expansion_entry
        .or(detection_entry)
        .map(|e| e.status())
        .unwrap_or(EntryStatus::BackendError);

    let (raw, clean) = match expansion_payload {
        Some(payload) => {
            let score = |mode: NormalizationMode| {
                let cand = tokenize(&normalize(&payload.expansion, mode));
                let gold = tokenize(&normalize(&instance.expansion, mode));
                MetricScore {
                    bleu: metrics::bleu(&cand, &gold),
                    meteor: metrics::meteor_with(&cand, &gold, meteor_params),
                    rouge_l: metrics::rouge_l(&cand, &gold),
                    mode,
                }
            };
            (score(NormalizationMode::Raw), score(NormalizationMode::Clean))
        }
        None => (
            MetricScore::zero(NormalizationMode::Raw),
            MetricScore::zero(NormalizationMode::Clean),
        ),
    };

    ScoreRow {
        instance_id: instance.id.clone(),
        iteration,
        status,
        detection,
        confidence: expansion_payload.and_then(|p| p.confidence),
        raw,
        clean,
    }
}

/// One confidence bin of width 0.1; the last bin includes 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Fraction of rows in the bin whose clean ROUGE-L band is high;
    /// absent for empty bins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    /// Set when a confident bin (lo >= 0.9) is wrong more often than right.
    pub overconfident: bool,
}

pub fn calibration_report(report: &ScoreReport) -> CalibrationReport {
    calibration_report_with(report, &BandConfig::default())
}

pub fn calibration_report_with(report: &ScoreReport, band: &BandConfig) -> CalibrationReport {
    let confident_rows: Vec<&ScoreRow> =
        report.rows.iter().filter(|r| r.confidence.is_some()).collect();
    if confident_rows.is_empty() {
        return CalibrationReport { bins: Vec::new(), overconfident: false };
    }

    let mut counts = [0usize; 10];
    let mut highs = [0usize; 10];
    for row in &confident_rows {
        let confidence = row.confidence.expect("filtered to Some");
        let bin = ((confidence * 10.0).floor() as usize).min(9);
        counts[bin] += 1;
        if stratify_band(row.clean.rouge_l, band) == Band::High {
            highs[bin] += 1;
        }
    }

    let bins: Vec<CalibrationBin> = (0..10)
        .map(|i| CalibrationBin {
            lo: i as f64 / 10.0,
            hi: (i + 1) as f64 / 10.0,
            count: counts[i],
            empirical_accuracy: if counts[i] > 0 {
                Some(highs[i] as f64 / counts[i] as f64)
            } else {
                None
            },
        })
        .collect();

    let overconfident = bins.iter().any(|b| {
        b.lo >= 0.9 && b.count > 0 && b.empirical_accuracy.is_some_and(|a| a < 0.5)
    });

    CalibrationReport { bins, overconfident }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

/// One (model, text mode) row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub text_mode: NormalizationMode,
    pub detection_mean: Option<f64>,
    pub detection_std: Option<f64>,
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub bleu_bands: BandCounts,
    pub meteor_bands: BandCounts,
    pub rouge_l_bands: BandCounts,
}

/// Results table with a raw and a clean row per scored model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<TableRow>,
}

impl ResultsTable {
    pub fn from_reports(reports: &[&ScoreReport]) -> Self {
        let mut rows = Vec::new();
        for report in reports {
            for mode in [NormalizationMode::Raw, NormalizationMode::Clean] {
                let (bleu, meteor, rouge) = match mode {
                    NormalizationMode::Raw => {
                        (&report.bleu_raw, &report.meteor_raw, &report.rouge_l_raw)
                    }
                    NormalizationMode::Clean => {
                        (&report.bleu_clean, &report.meteor_clean, &report.rouge_l_clean)
                    }
                };
                rows.push(TableRow {
                    model: report.model().to_owned(),
                    text_mode: mode,
                    detection_mean: report.detection.as_ref().map(|d| d.overall_mean),
                    detection_std: report.detection.as_ref().map(|d| d.overall_std),
                    bleu: bleu.overall_mean,
                    meteor: meteor.overall_mean,
                    rouge_l: rouge.overall_mean,
                    bleu_bands: bleu.band_counts,
                    meteor_bands: meteor.band_counts,
                    rouge_l_bands: rouge.band_counts,
                });
            }
        }
        Self { rows }
    }

    pub fn render(&self, format: TableFormat) -> String {
        match format {
            TableFormat::Markdown => self.to_markdown(),
            TableFormat::Csv => self.to_csv(),
        }
    }

    fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "| Model | Text | Det. Acc. | BLEU | METEOR | ROUGE-L | BLEU H/M/L | METEOR H/M/L | ROUGE-L H/M/L |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for row in &self.rows {
            let det = match (row.detection_mean, row.detection_std) {
                (Some(mean), Some(std)) => format!("{mean:.3} \u{b1} {std:.3}"),
                _ => "-".to_owned(),
            };
            out.push_str(&format!(
                "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {} | {} | {} |\n",
                row.model,
                row.text_mode.label(),
                det,
                row.bleu,
                row.meteor,
                row.rouge_l,
                bands(&row.bleu_bands),
                bands(&row.meteor_bands),
                bands(&row.rouge_l_bands),
            ));
        }
        out
    }

    fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "model",
                "text",
                "det_acc_mean",
                "det_acc_std",
                "bleu",
                "meteor",
                "rouge_l",
                "bleu_high",
                "bleu_medium",
                "bleu_low",
                "meteor_high",
                "meteor_medium",
                "meteor_low",
                "rouge_l_high",
                "rouge_l_medium",
                "rouge_l_low",
            ])
            .expect("csv header");
        for row in &self.rows {
            writer
                .write_record([
                    row.model.clone(),
                    row.text_mode.label().to_owned(),
                    row.detection_mean.map(|v| format!("{v:.6}")).unwrap_or_default(),
                    row.detection_std.map(|v| format!("{v:.6}")).unwrap_or_default(),
                    format!("{:.6}", row.bleu),
                    format!("{:.6}", row.meteor),
                    format!("{:.6}", row.rouge_l),
                    row.bleu_bands.high.to_string(),
                    row.bleu_bands.medium.to_string(),
                    row.bleu_bands.low.to_string(),
                    row.meteor_bands.high.to_string(),
                    row.meteor_bands.medium.to_string(),
                    row.meteor_bands.low.to_string(),
                    row.rouge_l_bands.high.to_string(),
                    row.rouge_l_bands.medium.to_string(),
                    row.rouge_l_bands.low.to_string(),
                ])
                .expect("csv row");
        }
        String::from_utf8(writer.into_inner().expect("csv buffer")).expect("csv utf8")
    }
}

fn bands(counts: &BandCounts) -> String {
    format!("{}/{}/{}", counts.high, counts.medium, counts.low)
}

/// Renders the per-run results table.
pub fn emit_tables(report: &ScoreReport, format: TableFormat) -> String {
    ResultsTable::from_reports(&[report]).render(format)
}

/// Per-model mean expansion accuracy summary (plot-ready in CSV form:
/// one row per model, text mode, and metric).
pub fn emit_comparison(reports: &[&ScoreReport], format: TableFormat) -> String {
    match format {
        TableFormat::Markdown => {
            let mut out = String::new();
            out.push_str("| Model | Text | BLEU | METEOR | ROUGE-L |\n");
            out.push_str("|---|---|---|---|---|\n");
            for report in reports {
                for mode in [NormalizationMode::Raw, NormalizationMode::Clean] {
                    let (b, m, r) = means_for(report, mode);
                    out.push_str(&format!(
                        "| {} | {} | {:.3} | {:.3} | {:.3} |\n",
                        report.model(),
                        mode.label(),
                        b,
                        m,
                        r
                    ));
                }
            }
            out
        }
        TableFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer
                .write_record(["model", "text", "metric", "mean", "std"])
                .expect("csv header");
            for report in reports {
                for mode in [NormalizationMode::Raw, NormalizationMode::Clean] {
                    for (metric, agg) in metric_aggregates(report, mode) {
                        writer
                            .write_record([
                                report.model().to_owned(),
                                mode.label().to_owned(),
                                metric.to_owned(),
                                format!("{:.6}", agg.overall_mean),
                                format!("{:.6}", agg.overall_std),
                            ])
                            .expect("csv row");
                    }
                }
            }
            String::from_utf8(writer.into_inner().expect("csv buffer")).expect("csv utf8")
        }
    }
}

fn means_for(report: &ScoreReport, mode: NormalizationMode) -> (f64, f64, f64) {
    match mode {
        NormalizationMode::Raw => (
            report.bleu_raw.overall_mean,
            report.meteor_raw.overall_mean,
            report.rouge_l_raw.overall_mean,
        ),
        NormalizationMode::Clean => (
            report.bleu_clean.overall_mean,
            report.meteor_clean.overall_mean,
            report.rouge_l_clean.overall_mean,
        ),
    }
}

fn metric_aggregates(
    report: &ScoreReport,
    mode: NormalizationMode,
) -> Vec<(&'static str, &AggregateReport)> {
    match mode {
        NormalizationMode::Raw => vec![
            ("BLEU", &report.bleu_raw),
            ("METEOR", &report.meteor_raw),
            ("ROUGE-L", &report.rouge_l_raw),
        ],
        NormalizationMode::Clean => vec![
            ("BLEU", &report.bleu_clean),
            ("METEOR", &report.meteor_clean),
            ("ROUGE-L", &report.rouge_l_clean),
        ],
    }
}

fn status_label(status: EntryStatus) -> &'static str {
    match status {
        EntryStatus::Ok => "ok",
        EntryStatus::Repaired => "repaired",
        EntryStatus::Blocked => "blocked",
        EntryStatus::ParseFailure => "parse_failure",
        EntryStatus::BackendError => "backend_error",
        EntryStatus::RenderError => "render_error",
    }
}

/// Per-row score export: one CSV row per instance per iteration per
/// normalization mode.
pub fn rows_to_csv(report: &ScoreReport) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "run_id",
            "instance_id",
            "iteration",
            "mode",
            "status",
            "detection",
            "confidence",
            "bleu",
            "meteor",
            "rouge_l",
        ])
        .expect("csv header");
    for row in &report.rows {
        for score in [&row.raw, &row.clean] {
            writer
                .write_record([
                    report.run_id.clone(),
                    row.instance_id.clone(),
                    row.iteration.to_string(),
                    score.mode.label().to_owned(),
                    status_label(row.status).to_owned(),
                    row.detection.map(|v| format!("{v:.1}")).unwrap_or_default(),
                    row.confidence.map(|v| format!("{v:.4}")).unwrap_or_default(),
                    format!("{:.6}", score.bleu),
                    format!("{:.6}", score.meteor),
                    format!("{:.6}", score.rouge_l),
                ])
                .expect("csv row");
        }
    }
    String::from_utf8(writer.into_inner().expect("csv buffer")).expect("csv utf8")
}

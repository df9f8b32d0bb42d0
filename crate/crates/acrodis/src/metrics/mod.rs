//! Detection and expansion scoring.
//!
//! Exact-match detection, smoothed sentence-level BLEU, LCS-based ROUGE-L,
//! METEOR with exact/stem/synonym alignment stages, band stratification at
//! the >=0.7 / <=0.3 thresholds, and multi-iteration aggregation.
//!
//! All scores are bounded in [0, 1]. The BLEU variant is sentence-level
//! with the n-gram order capped by both sequence lengths, add-one
//! smoothing above order 1, and the standard brevity penalty; unsmoothed
//! BLEU-4 would zero out nearly every short expansion.

pub mod stemmer;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textnorm::NormalizationMode;

/// Expansion metric values for one candidate/reference pair under one
/// normalization mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub mode: NormalizationMode,
}

impl MetricScore {
    pub fn zero(mode: NormalizationMode) -> Self {
        Self { bleu: 0.0, meteor: 0.0, rouge_l: 0.0, mode }
    }
}

/// Band thresholds; defaults are the >=0.7 high and <=0.3 low cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub high_threshold: f64,
    pub low_threshold: f64,
}

impl BandConfig {
    pub fn new(low_threshold: f64, high_threshold: f64) -> Result<Self, AggregateError> {
        if !(0.0..=1.0).contains(&low_threshold)
            || !(0.0..=1.0).contains(&high_threshold)
            || low_threshold >= high_threshold
        {
            return Err(AggregateError::InvalidBandConfig { low: low_threshold, high: high_threshold });
        }
        Ok(Self { high_threshold, low_threshold })
    }
}

impl Default for BandConfig {
    fn default() -> Self {
        Self { high_threshold: 0.7, low_threshold: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    High,
    Medium,
    Low,
}

/// Per-band row counts for one metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandCounts {
    pub high: usize,
    pub medium: usize,
    pub low: usize,
}

impl BandCounts {
    pub fn total(&self) -> usize {
        self.high + self.medium + self.low
    }
}

/// Aggregate over a per-row x per-iteration score matrix for one metric.
///
/// `overall_std` is the population standard deviation over all
/// (row, iteration) outcomes; for binary outcomes it equals
/// sqrt(p * (1 - p)). Band counts are taken over per-row means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_row_means: Vec<f64>,
    pub overall_mean: f64,
    pub overall_std: f64,
    pub band_counts: BandCounts,
    pub iterations: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("no rows to aggregate")]
    Empty,
    #[error("ragged iteration counts: row {row} has {got} values, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("invalid band thresholds: low {low} must be < high {high}, both in [0,1]")]
    InvalidBandConfig { low: f64, high: f64 },
}

/// Exact string match after whitespace trimming, case-sensitive.
/// `None` models a null/blocked output and scores 0.
pub fn detection_match(detected: Option<&str>, gold: &str) -> f64 {
    match detected {
        Some(d) if d.trim() == gold.trim() => 1.0,
        _ => 0.0,
    }
}

/// Smoothed sentence-level BLEU.
///
/// Orders run 1..=min(4, |candidate|, |reference|); order 1 is unsmoothed,
/// higher orders get add-one smoothing on numerator and denominator;
/// uniform weights; brevity penalty exp(1 - |ref|/|cand|) when the
/// candidate is shorter. Empty candidate or reference scores 0.
pub fn bleu<C: AsRef<str>, R: AsRef<str>>(candidate: &[C], reference: &[R]) -> f64 {
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refr: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let max_order = 4.min(cand.len()).min(refr.len());
    let mut log_sum = 0.0;
    for order in 1..=max_order {
        let matches = clipped_matches(&cand, &refr, order) as f64;
        let total = (cand.len() - order + 1) as f64;
        let precision = if order == 1 {
            matches / total
        } else {
            (matches + 1.0) / (total + 1.0)
        };
        if precision == 0.0 {
            return 0.0;
        }
        log_sum += precision.ln();
    }
    let geometric_mean = (log_sum / max_order as f64).exp();
    let brevity = if cand.len() < refr.len() {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    brevity * geometric_mean
}

fn clipped_matches(cand: &[&str], refr: &[&str], order: usize) -> usize {
    let mut ref_counts: HashMap<&[&str], usize> = HashMap::new();
    for window in refr.windows(order) {
        *ref_counts.entry(window).or_default() += 1;
    }
    let mut cand_counts: HashMap<&[&str], usize> = HashMap::new();
    for window in cand.windows(order) {
        *cand_counts.entry(window).or_default() += 1;
    }
    cand_counts
        .iter()
        .map(|(window, count)| (*count).min(ref_counts.get(window).copied().unwrap_or(0)))
        .sum()
}

/// ROUGE-L: LCS-based F1 with P = LCS/|cand| and R = LCS/|ref|.
pub fn rouge_l<C: AsRef<str>, R: AsRef<str>>(candidate: &[C], reference: &[R]) -> f64 {
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refr: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refr);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / refr.len() as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut current = vec![0usize; b.len() + 1];
    for token_a in a {
        for (j, token_b) in b.iter().enumerate() {
            current[j + 1] = if token_a == token_b {
                prev[j] + 1
            } else {
                prev[j + 1].max(current[j])
            };
        }
        std::mem::swap(&mut prev, &mut current);
    }
    prev[b.len()]
}

/// Optional synonym stage for METEOR; matches are symmetric.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    entries: HashMap<String, Vec<String>>,
}

impl SynonymTable {
    pub fn from_groups<I, G, S>(groups: I) -> Self
    where
        I: IntoIterator<Item = G>,
        G: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries: HashMap<String, Vec<String>> = HashMap::new();
        for group in groups {
            let words: Vec<String> = group.into_iter().map(Into::into).collect();
            for word in &words {
                let peers = entries.entry(word.clone()).or_default();
                for other in &words {
                    if other != word && !peers.contains(other) {
                        peers.push(other.clone());
                    }
                }
            }
        }
        Self { entries }
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.entries.get(a).is_some_and(|peers| peers.iter().any(|p| p == b))
            || self.entries.get(b).is_some_and(|peers| peers.iter().any(|p| p == a))
    }
}

/// METEOR parameters; the defaults are the widely used alpha = 0.9,
/// gamma = 0.5, beta = 3, with the synonym stage disabled.
pub struct MeteorParams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub synonyms: Option<SynonymTable>,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self { alpha: 0.9, gamma: 0.5, beta: 3.0, synonyms: None }
    }
}

/// METEOR with staged unigram alignment (exact, stem, synonym) and a
/// fragmentation penalty.
///
/// Note the identity quirk: meteor(x, x) = 1 - gamma / |x|^beta because a
/// perfect alignment is still one chunk, so single-token identity scores
/// 0.5 under the defaults.
pub fn meteor<C: AsRef<str>, R: AsRef<str>>(candidate: &[C], reference: &[R]) -> f64 {
    meteor_with(candidate, reference, &MeteorParams::default())
}

pub fn meteor_with<C: AsRef<str>, R: AsRef<str>>(
    candidate: &[C],
    reference: &[R],
    params: &MeteorParams,
) -> f64 {
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refr: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }

    let cand_stems: Vec<String> = cand.iter().map(|t| stemmer::stem(t)).collect();
    let ref_stems: Vec<String> = refr.iter().map(|t| stemmer::stem(t)).collect();

    // alignment[i] = Some(j) pairs candidate token i with reference token j
    let mut alignment: Vec<Option<usize>> = vec![None; cand.len()];
    let mut ref_used = vec![false; refr.len()];

    enum Stage {
        Exact,
        Stem,
        Synonym,
    }
    for stage in [Stage::Exact, Stage::Stem, Stage::Synonym] {
        if matches!(stage, Stage::Synonym) && params.synonyms.is_none() {
            continue;
        }
        for i in 0..cand.len() {
            if alignment[i].is_some() {
                continue;
            }
            for j in 0..refr.len() {
                if ref_used[j] {
                    continue;
                }
                let hit = match stage {
                    Stage::Exact => cand[i] == refr[j],
                    Stage::Stem => cand_stems[i] == ref_stems[j],
                    Stage::Synonym => params
                        .synonyms
                        .as_ref()
                        .is_some_and(|table| table.are_synonyms(cand[i], refr[j])),
                };
                if hit {
                    alignment[i] = Some(j);
                    ref_used[j] = true;
                    break;
                }
            }
        }
    }

    let pairs: Vec<(usize, usize)> = alignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let matches = pairs.len();
    if matches == 0 {
        return 0.0;
    }

    let p = matches as f64 / cand.len() as f64;
    let r = matches as f64 / refr.len() as f64;
    let fmean = p * r / (params.alpha * p + (1.0 - params.alpha) * r);

    let mut chunks = 1usize;
    for window in pairs.windows(2) {
        let (ci, cj) = window[0];
        let (ni, nj) = window[1];
        if ni != ci + 1 || nj != cj + 1 {
            chunks += 1;
        }
    }
    let penalty = params.gamma * (chunks as f64 / matches as f64).powf(params.beta);
    fmean * (1.0 - penalty)
}

/// Buckets a score: high iff >= high threshold, low iff <= low threshold,
/// medium otherwise.
pub fn stratify_band(score: f64, config: &BandConfig) -> Band {
    if score >= config.high_threshold {
        Band::High
    } else if score <= config.low_threshold {
        Band::Low
    } else {
        Band::Medium
    }
}

/// Aggregates a per-row x per-iteration score matrix for one metric.
pub fn aggregate(rows: &[Vec<f64>], band: &BandConfig) -> Result<AggregateReport, AggregateError> {
    if rows.is_empty() {
        return Err(AggregateError::Empty);
    }
    let iterations = rows[0].len();
    if iterations == 0 {
        return Err(AggregateError::Empty);
    }
    for (row, values) in rows.iter().enumerate() {
        if values.len() != iterations {
            return Err(AggregateError::Ragged { row, got: values.len(), expected: iterations });
        }
    }

    let count = (rows.len() * iterations) as f64;
    let mean = rows.iter().flatten().sum::<f64>() / count;
    let variance = rows
        .iter()
        .flatten()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / count;

    let per_row_means: Vec<f64> = rows
        .iter()
        .map(|values| values.iter().sum::<f64>() / iterations as f64)
        .collect();

    let mut band_counts = BandCounts::default();
    for row_mean in &per_row_means {
        match stratify_band(*row_mean, band) {
            Band::High => band_counts.high += 1,
            Band::Medium => band_counts.medium += 1,
            Band::Low => band_counts.low += 1,
        }
    }

    Ok(AggregateReport {
        per_row_means,
        overall_mean: mean,
        overall_std: variance.sqrt(),
        band_counts,
        iterations,
    })
}

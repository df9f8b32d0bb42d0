//! The two text normalization pipelines applied before metric computation.
//!
//! `raw` keeps punctuation: NFC normalization, Unicode lowercasing, and
//! whitespace collapsing. `clean` additionally removes markup remnants
//! (code fences, angle-bracket tags, asterisk emphasis), substitutes
//! hyphens and underscores with spaces, and strips every remaining
//! non-alphanumeric, non-space character. Digits survive `clean` because
//! expansions like "interleukin 6" carry them.
//!
//! Both pipelines are idempotent, and `clean` is a fixed point extension
//! of `raw`: `normalize_clean(x) == normalize_clean(normalize_raw(x))`.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Which preprocessing pipeline produced a string or score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    Raw,
    Clean,
}

impl NormalizationMode {
    pub fn label(self) -> &'static str {
        match self {
            NormalizationMode::Raw => "Raw",
            NormalizationMode::Clean => "Clean",
        }
    }
}

/// Markup patterns removed by the clean pipeline, applied in order after
/// raw normalization. The defaults cover code fences (with an optional
/// language tag), angle-bracket tags, and asterisk emphasis markers.
pub struct MarkupRules {
    patterns: Vec<Regex>,
}

impl MarkupRules {
    pub fn new(patterns: Vec<Regex>) -> Self {
        Self { patterns }
    }
}

impl Default for MarkupRules {
    fn default() -> Self {
        Self {
            patterns: vec![
                Regex::new(r"```[a-z0-9]*").unwrap(),
                Regex::new(r"<[^<>]*>").unwrap(),
                Regex::new(r"\*+").unwrap(),
            ],
        }
    }
}

static DEFAULT_MARKUP: LazyLock<MarkupRules> = LazyLock::new(MarkupRules::default);

/// Minimal normalization: NFC, Unicode lowercase (non-locale), whitespace
/// runs collapsed to single spaces, leading/trailing whitespace removed.
/// Punctuation is preserved.
pub fn normalize_raw(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    collapse_whitespace(&nfc.to_lowercase())
}

/// Aggressive normalization: `normalize_raw`, then markup removal,
/// hyphen/underscore substitution, and stripping of all remaining
/// non-alphanumeric, non-space characters.
pub fn normalize_clean(text: &str) -> String {
    normalize_clean_with(text, &DEFAULT_MARKUP)
}

/// `normalize_clean` with a caller-supplied markup rule set.
pub fn normalize_clean_with(text: &str, rules: &MarkupRules) -> String {
    let mut s = normalize_raw(text);
    for pattern in &rules.patterns {
        s = pattern.replace_all(&s, "").into_owned();
    }
    let stripped: String = s
        .chars()
        .map(|c| if c == '-' || c == '_' { ' ' } else { c })
        .filter(|c| c.is_alphanumeric() || *c == ' ')
        .collect();
    collapse_whitespace(&stripped)
}

/// Applies the pipeline selected by `mode`.
pub fn normalize(text: &str, mode: NormalizationMode) -> String {
    match mode {
        NormalizationMode::Raw => normalize_raw(text),
        NormalizationMode::Clean => normalize_clean(text),
    }
}

/// Splits an already-normalized string on single spaces; never yields
/// empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

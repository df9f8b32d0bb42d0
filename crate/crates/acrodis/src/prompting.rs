//! Zero-shot prompt templates and strict-JSON output parsing.
//!
//! Every prompt is serialized as a single one-line JSON object sent as the
//! user message body:
//!
//! ```text
//! {"Task":"...","Text":"...","Acronym":"...","Rules":["..."]}
//! ```
//!
//! The `Acronym` slot appears only in cascaded expansion prompts. Model
//! replies are expected to be strict JSON; a bounded three-rung repair
//! ladder (strict parse, code-fence strip, first balanced object) recovers
//! the common deviations, and anything beyond that is recorded as a
//! blocked or failed parse rather than an error.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Verbatim single-pass task: the model both finds and expands the acronym.
pub const SINGLE_PASS_TASK: &str =
    "Find the acronym in the text and expand the meaning of the acronym in the given text.";
/// Verbatim cascaded stage-2 task: the acronym is supplied alongside the text.
pub const CASCADED_EXPANSION_TASK: &str =
    "Read the input text carefully, understand the context and expand the meaning of the acronym in the given text.";
/// Cascaded stage-1 detection task (this harness's own wording).
pub const CASCADED_DETECTION_TASK: &str = "List every acronym present in the text.";
/// Annotator task used during corpus preparation (paraphrase of the
/// annotation instruction; the original wording is not public).
pub const ANNOTATION_TASK: &str =
    "Detect and list all possible acronyms, equations, and alphanumeric identifiers in the input text.";

pub const STRICT_JSON_RULE: &str = "Output strict JSON on one line";
pub const DETECTION_SCHEMA_RULE: &str = "Use the output schema {\"acronyms\": []}";
pub const ANNOTATION_SCHEMA_RULE: &str = "Use the output schema {\"items\": []}";
pub const EXPANSION_SCHEMA_RULE: &str =
    "Use the output schema {\"acronym\": \"\", \"expansion\": \"\", \"confidence\": 0.0, \"rationale\": \"\"}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    SinglePass,
    CascadedDetection,
    CascadedExpansion,
    Annotation,
}

/// A fully rendered prompt; `text` is the serialized one-line JSON body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("input text is empty")]
    EmptyText,
    #[error("acronym is empty")]
    EmptyAcronym,
    #[error("acronym `{acronym}` does not occur in the input text")]
    AcronymNotInText { acronym: String },
}

// Field order here fixes the wire byte order: Task, Text, Acronym, Rules.
#[derive(Serialize)]
struct PromptBody<'a> {
    #[serde(rename = "Task")]
    task: &'a str,
    #[serde(rename = "Text")]
    text: &'a str,
    #[serde(rename = "Acronym", skip_serializing_if = "Option::is_none")]
    acronym: Option<&'a str>,
    #[serde(rename = "Rules")]
    rules: Vec<&'a str>,
}

fn render(kind: PromptKind, body: &PromptBody<'_>) -> RenderedPrompt {
    RenderedPrompt {
        kind,
        text: serde_json::to_string(body).expect("prompt body serializes"),
    }
}

/// Single-pass prompt: detection and expansion in one call.
pub fn render_single_pass(input_text: &str) -> Result<RenderedPrompt, RenderError> {
    if input_text.is_empty() {
        return Err(RenderError::EmptyText);
    }
    Ok(render(
        PromptKind::SinglePass,
        &PromptBody {
            task: SINGLE_PASS_TASK,
            text: input_text,
            acronym: None,
            rules: vec![STRICT_JSON_RULE, EXPANSION_SCHEMA_RULE],
        },
    ))
}

/// Cascaded stage-2 prompt carrying the detected (or gold) acronym.
pub fn render_cascaded_expansion(
    input_text: &str,
    acronym: &str,
) -> Result<RenderedPrompt, RenderError> {
    if input_text.is_empty() {
        return Err(RenderError::EmptyText);
    }
    if acronym.is_empty() {
        return Err(RenderError::EmptyAcronym);
    }
    if !input_text.contains(acronym) {
        return Err(RenderError::AcronymNotInText { acronym: acronym.to_owned() });
    }
    Ok(render(
        PromptKind::CascadedExpansion,
        &PromptBody {
            task: CASCADED_EXPANSION_TASK,
            text: input_text,
            acronym: Some(acronym),
            rules: vec![STRICT_JSON_RULE, EXPANSION_SCHEMA_RULE],
        },
    ))
}

/// Cascaded stage-1 detection prompt; expected reply `{"acronyms":[...]}`.
pub fn render_cascaded_detection(input_text: &str) -> Result<RenderedPrompt, RenderError> {
    if input_text.is_empty() {
        return Err(RenderError::EmptyText);
    }
    Ok(render(
        PromptKind::CascadedDetection,
        &PromptBody {
            task: CASCADED_DETECTION_TASK,
            text: input_text,
            acronym: None,
            rules: vec![STRICT_JSON_RULE, DETECTION_SCHEMA_RULE],
        },
    ))
}

/// Annotator prompt used in corpus preparation; expected reply
/// `{"items":[...]}`.
pub fn render_annotation(input_text: &str) -> Result<RenderedPrompt, RenderError> {
    if input_text.is_empty() {
        return Err(RenderError::EmptyText);
    }
    Ok(render(
        PromptKind::Annotation,
        &PromptBody {
            task: ANNOTATION_TASK,
            text: input_text,
            acronym: None,
            rules: vec![STRICT_JSON_RULE, ANNOTATION_SCHEMA_RULE],
        },
    ))
}

/// Parsed view of a serialized prompt; used by the mock backend to answer
/// deterministically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub task: String,
    pub text: String,
    pub acronym: Option<String>,
}

pub fn parse_prompt(serialized: &str) -> Option<ParsedPrompt> {
    #[derive(Deserialize)]
    struct Body {
        #[serde(rename = "Task")]
        task: String,
        #[serde(rename = "Text")]
        text: String,
        #[serde(rename = "Acronym", default)]
        acronym: Option<String>,
    }
    let body: Body = serde_json::from_str(serialized).ok()?;
    Some(ParsedPrompt { task: body.task, text: body.text, acronym: body.acronym })
}

/// Ordered list of acronyms from a stage-1 reply; entries are non-empty
/// and de-duplicated preserving first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub acronyms: Vec<String>,
}

/// A single expansion with the model's self-assessed confidence.
/// Confidence is clamped into [0, 1] at parse time, never rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionResult {
    pub acronym: String,
    pub expansion: String,
    pub confidence: Option<f64>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ParsedPayload {
    Detection(DetectionResult),
    Expansion(ExpansionResult),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Repaired,
    Blocked,
    ParseFailure,
}

/// What to parse a raw model reply as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectedShape {
    Detection,
    Expansion,
}

/// Outcome of parsing one raw model reply. `payload` is present exactly
/// when status is `ok` or `repaired`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub status: ParseStatus,
    pub payload: Option<ParsedPayload>,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ParseOutcome {
    fn blocked(raw: &str) -> Self {
        Self { status: ParseStatus::Blocked, payload: None, raw: raw.to_owned(), notes: Vec::new() }
    }

    fn failure(raw: &str, note: String) -> Self {
        Self {
            status: ParseStatus::ParseFailure,
            payload: None,
            raw: raw.to_owned(),
            notes: vec![note],
        }
    }
}

/// Parses a raw model reply with the three-rung repair ladder:
/// strict parse of the whole string, code-fence strip, then extraction of
/// the first balanced JSON object or array. Empty replies and refusal
/// prose with no JSON-shaped content are `blocked`; JSON that does not
/// carry the expected payload shape is a `parse_failure`.
pub fn parse_output(raw: &str, expected: ExpectedShape) -> ParseOutcome {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return ParseOutcome::blocked(raw);
    }

    if let Ok(value) = serde_json::from_str::<Value>(trimmed) {
        return build_outcome(raw, value, expected, false);
    }

    let stripped = strip_code_fences(trimmed);
    if stripped != trimmed {
        if let Ok(value) = serde_json::from_str::<Value>(stripped) {
            return build_outcome(raw, value, expected, true);
        }
    }

    match first_balanced_json(trimmed) {
        Some(fragment) => match serde_json::from_str::<Value>(&fragment) {
            Ok(value) => build_outcome(raw, value, expected, true),
            Err(e) => ParseOutcome::failure(raw, format!("balanced fragment is not JSON: {e}")),
        },
        None => ParseOutcome::blocked(raw),
    }
}

fn build_outcome(raw: &str, value: Value, expected: ExpectedShape, repaired: bool) -> ParseOutcome {
    let mut notes = Vec::new();
    if repaired {
        notes.push("recovered JSON from non-strict output".to_owned());
    }
    let payload = match expected {
        ExpectedShape::Detection => build_detection(&value).map(ParsedPayload::Detection),
        ExpectedShape::Expansion => build_expansion(&value, &mut notes).map(ParsedPayload::Expansion),
    };
    match payload {
        Some(payload) => ParseOutcome {
            status: if notes.is_empty() { ParseStatus::Ok } else { ParseStatus::Repaired },
            payload: Some(payload),
            raw: raw.to_owned(),
            notes,
        },
        None => ParseOutcome::failure(raw, "JSON does not match the expected schema".to_owned()),
    }
}

fn build_detection(value: &Value) -> Option<DetectionResult> {
    let list = match value {
        Value::Object(map) => map.get("acronyms")?.as_array()?,
        Value::Array(items) => items,
        _ => return None,
    };
    let mut seen = std::collections::HashSet::new();
    let acronyms = list
        .iter()
        .filter_map(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .filter(|s| seen.insert(s.to_owned()))
        .map(str::to_owned)
        .collect();
    Some(DetectionResult { acronyms })
}

fn build_expansion(value: &Value, notes: &mut Vec<String>) -> Option<ExpansionResult> {
    let map = value.as_object()?;
    let expansion = map.get("expansion")?.as_str()?.trim().to_owned();
    if expansion.is_empty() {
        return None;
    }
    let acronym = map
        .get("acronym")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .trim()
        .to_owned();
    let rationale = map
        .get("rationale")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_owned();
    let confidence = match map.get("confidence") {
        None | Some(Value::Null) => None,
        Some(value) => {
            let parsed = value.as_f64().or_else(|| {
                value.as_str().and_then(|s| {
                    let p = s.trim().trim_end_matches('%').parse::<f64>().ok();
                    if p.is_some() {
                        notes.push("confidence parsed from string".to_owned());
                    }
                    p
                })
            });
            match parsed {
                Some(c) => {
                    let clamped = c.clamp(0.0, 1.0);
                    if (clamped - c).abs() > f64::EPSILON {
                        notes.push(format!("confidence clamped from {c} to {clamped}"));
                    }
                    Some(clamped)
                }
                None => {
                    notes.push("unreadable confidence dropped".to_owned());
                    None
                }
            }
        }
    };
    Some(ExpansionResult { acronym, expansion, confidence, rationale })
}

/// Item list from an annotator reply: `{"items": [...]}` or a bare array.
pub fn parse_item_list(raw: &str) -> Option<Vec<String>> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return None;
    }
    let value = serde_json::from_str::<Value>(trimmed)
        .ok()
        .or_else(|| serde_json::from_str(strip_code_fences(trimmed)).ok())
        .or_else(|| first_balanced_json(trimmed).and_then(|f| serde_json::from_str(&f).ok()))?;
    let list = match &value {
        Value::Object(map) => map.get("items")?.as_array()?.clone(),
        Value::Array(items) => items.clone(),
        _ => return None,
    };
    Some(
        list.iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}

fn strip_code_fences(s: &str) -> &str {
    let s = s.trim();
    let s = s
        .strip_prefix("```json")
        .or_else(|| s.strip_prefix("```"))
        .unwrap_or(s);
    let s = s.strip_suffix("```").unwrap_or(s);
    s.trim()
}

/// Extracts the first balanced JSON object or array, skipping string
/// contents and escapes.
fn first_balanced_json(s: &str) -> Option<String> {
    let mut in_string = false;
    let mut escaped = false;
    let mut stack: Vec<char> = Vec::new();
    let mut start: Option<usize> = None;

    for (i, ch) in s.char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            continue;
        }
        match ch {
            '"' if !stack.is_empty() => in_string = true,
            '{' | '[' => {
                if start.is_none() {
                    start = Some(i);
                }
                stack.push(ch);
            }
            '}' | ']' => {
                if let Some(open) = stack.pop() {
                    let balanced = (open == '{' && ch == '}') || (open == '[' && ch == ']');
                    if !balanced {
                        stack.clear();
                        start = None;
                        continue;
                    }
                    if stack.is_empty() {
                        let from = start.unwrap_or(0);
                        return Some(s[from..=i].to_owned());
                    }
                } else {
                    start = None;
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pass_rendering_carries_verbatim_task() {
        let prompt = render_single_pass("The MS patient improved.").unwrap();
        assert!(prompt.text.contains(SINGLE_PASS_TASK));
        assert!(prompt.text.contains("The MS patient improved."));
        assert!(prompt.text.contains(STRICT_JSON_RULE));
        assert!(!prompt.text.contains('\n'));
        assert_eq!(render_single_pass(""), Err(RenderError::EmptyText));
    }

    #[test]
    fn rendering_escapes_embedded_quotes() {
        let prompt = render_single_pass(r#"The "MS" patient improved."#).unwrap();
        let value: Value = serde_json::from_str(&prompt.text).unwrap();
        assert_eq!(value["Text"], r#"The "MS" patient improved."#);
        assert_eq!(value["Task"], SINGLE_PASS_TASK);
    }

    #[test]
    fn cascaded_expansion_requires_acronym_in_text() {
        let ok = render_cascaded_expansion("Compared to SP .", "SP").unwrap();
        assert!(ok.text.contains(CASCADED_EXPANSION_TASK));
        assert!(ok.text.contains("\"Acronym\":\"SP\""));
        assert_eq!(
            render_cascaded_expansion("no such thing", "ZZ"),
            Err(RenderError::AcronymNotInText { acronym: "ZZ".into() })
        );
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_cascaded_expansion("ED was busy.", "ED").unwrap();
        let b = render_cascaded_expansion("ED was busy.", "ED").unwrap();
        assert_eq!(a, b);
        let c = render_cascaded_detection("ED and SP present.").unwrap();
        let d = render_cascaded_detection("ED and SP present.").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn wire_format_field_order_is_fixed() {
        let prompt = render_cascaded_expansion("ED busy.", "ED").unwrap();
        let task_pos = prompt.text.find("\"Task\"").unwrap();
        let text_pos = prompt.text.find("\"Text\"").unwrap();
        let acr_pos = prompt.text.find("\"Acronym\"").unwrap();
        let rules_pos = prompt.text.find("\"Rules\"").unwrap();
        assert!(task_pos < text_pos && text_pos < acr_pos && acr_pos < rules_pos);
    }

    #[test]
    fn prompt_round_trips_through_parse_prompt() {
        let prompt = render_cascaded_expansion("ED busy.", "ED").unwrap();
        let parsed = parse_prompt(&prompt.text).unwrap();
        assert_eq!(parsed.task, CASCADED_EXPANSION_TASK);
        assert_eq!(parsed.text, "ED busy.");
        assert_eq!(parsed.acronym.as_deref(), Some("ED"));
    }

    #[test]
    fn strict_expansion_parses_ok() {
        let raw = r#"{"acronym":"PT","expansion":"prothrombin time","confidence":0.9,"rationale":"clotting context"}"#;
        let outcome = parse_output(raw, ExpectedShape::Expansion);
        assert_eq!(outcome.status, ParseStatus::Ok);
        match outcome.payload.unwrap() {
            ParsedPayload::Expansion(e) => {
                assert_eq!(e.acronym, "PT");
                assert_eq!(e.expansion, "prothrombin time");
                assert_eq!(e.confidence, Some(0.9));
            }
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn fenced_output_with_trailing_prose_is_repaired() {
        let raw = "```json\n{\"acronym\":\"ED\",\"expansion\":\"emergency department\",\"confidence\":0.8,\"rationale\":\"\"}\n``` Here is my answer.";
        let outcome = parse_output(raw, ExpectedShape::Expansion);
        assert_eq!(outcome.status, ParseStatus::Repaired);
        match outcome.payload.unwrap() {
            ParsedPayload::Expansion(e) => assert_eq!(e.expansion, "emergency department"),
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn empty_and_refusal_outputs_are_blocked() {
        assert_eq!(parse_output("", ExpectedShape::Expansion).status, ParseStatus::Blocked);
        assert_eq!(
            parse_output("   \n", ExpectedShape::Detection).status,
            ParseStatus::Blocked
        );
        let refusal = "I cannot assist with analyzing clinical content.";
        assert_eq!(parse_output(refusal, ExpectedShape::Expansion).status, ParseStatus::Blocked);
    }

    #[test]
    fn wrong_schema_is_parse_failure() {
        let outcome = parse_output(r#"{"answer": 42}"#, ExpectedShape::Expansion);
        assert_eq!(outcome.status, ParseStatus::ParseFailure);
        assert!(outcome.payload.is_none());
        let outcome = parse_output(r#"{"expansion": ""}"#, ExpectedShape::Expansion);
        assert_eq!(outcome.status, ParseStatus::ParseFailure);
    }

    #[test]
    fn confidence_is_clamped_with_note() {
        let raw = r#"{"expansion":"emergency department","confidence":98}"#;
        let outcome = parse_output(raw, ExpectedShape::Expansion);
        assert_eq!(outcome.status, ParseStatus::Repaired);
        match outcome.payload.unwrap() {
            ParsedPayload::Expansion(e) => assert_eq!(e.confidence, Some(1.0)),
            other => panic!("unexpected payload {other:?}"),
        }
        assert!(outcome.notes.iter().any(|n| n.contains("clamped")));
    }

    #[test]
    fn detection_list_is_deduped_preserving_order() {
        let raw = r#"{"acronyms":["ED","SP","ED",""]}"#;
        let outcome = parse_output(raw, ExpectedShape::Detection);
        assert_eq!(outcome.status, ParseStatus::Ok);
        match outcome.payload.unwrap() {
            ParsedPayload::Detection(d) => assert_eq!(d.acronyms, vec!["ED", "SP"]),
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn bare_array_is_accepted_for_detection() {
        let outcome = parse_output(r#"["ED","SP"]"#, ExpectedShape::Detection);
        assert_eq!(outcome.status, ParseStatus::Ok);
    }

    #[test]
    fn prose_wrapped_json_is_repaired() {
        let raw = r#"Sure! The answer is {"acronyms":["MS"]} as requested."#;
        let outcome = parse_output(raw, ExpectedShape::Detection);
        assert_eq!(outcome.status, ParseStatus::Repaired);
    }

    #[test]
    fn item_list_parses_object_and_bare_forms() {
        assert_eq!(
            parse_item_list(r#"{"items":["MS","E=mc2"]}"#),
            Some(vec!["MS".to_owned(), "E=mc2".to_owned()])
        );
        assert_eq!(parse_item_list(r#"["MS"]"#), Some(vec!["MS".to_owned()]));
        assert_eq!(parse_item_list("total garbage"), None);
    }

    proptest! {
        #[test]
        fn expansion_round_trip(
            acronym in "[A-Z]{2,5}",
            expansion in "[a-z]{1,8}( [a-z]{1,8}){0,3}",
            confidence in 0.0f64..=1.0,
            rationale in "[ -~]{0,40}",
        ) {
            let payload = ExpansionResult {
                acronym,
                expansion,
                confidence: Some(confidence),
                rationale,
            };
            let raw = serde_json::to_string(&payload).unwrap();
            let outcome = parse_output(&raw, ExpectedShape::Expansion);
            prop_assert_eq!(outcome.status, ParseStatus::Ok);
            prop_assert_eq!(outcome.payload, Some(ParsedPayload::Expansion(payload)));
        }

        #[test]
        fn detection_round_trip(acronyms in proptest::collection::vec("[A-Z]{2,4}", 0..5)) {
            let mut seen = std::collections::HashSet::new();
            let deduped: Vec<String> = acronyms.iter().filter(|a| seen.insert((*a).clone())).cloned().collect();
            let payload = DetectionResult { acronyms: deduped };
            let raw = serde_json::to_string(&payload).unwrap();
            let outcome = parse_output(&raw, ExpectedShape::Detection);
            prop_assert_eq!(outcome.status, ParseStatus::Ok);
            prop_assert_eq!(outcome.payload, Some(ParsedPayload::Detection(payload)));
        }

        #[test]
        fn rendered_prompts_never_contain_unfilled_slots(text in "[a-zA-Z ]{1,40}") {
            let prompt = render_single_pass(&text).unwrap();
            let text_slot = "{input_text}";
            let acronym_slot = "{acronym}";
            prop_assert!(!prompt.text.contains(text_slot));
            prop_assert!(!prompt.text.contains(acronym_slot));
            let value: Value = serde_json::from_str(&prompt.text).unwrap();
            prop_assert_eq!(value["Text"].as_str().unwrap(), text.as_str());
        }
    }
}

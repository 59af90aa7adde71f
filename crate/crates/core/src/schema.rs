//! Parsing of model responses into outcome data.
//!
//! A response is free text that should contain one `<think>...</think>`
//! trace followed by a YAML-like block:
//!
//! ```text
//! outcome_type: binary
//! intervention:
//! events: 8 total: 23
//! comparator:
//! events: 2 total: 22
//! ```
//!
//! Two `key: value` pairs may share a line, and the usual indented nested
//! layout is accepted too. Only the two outcome schemas are recognised; this
//! is not a general YAML parser.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::outcome::{
    Arm, BinaryArmWire, BinaryArms, ContinuousArmWire, ContinuousArms, InvalidOutcome, OutcomeData,
    OutcomeType, OutcomeWire,
};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaErrorKind {
    NoYamlBlock,
    MissingKey,
    WrongOutcomeType,
    NonNumericValue,
    NegativeValue,
    EventsExceedTotal,
    /// A group size or total of zero.
    EmptyGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaError {
    pub kind: SchemaErrorKind,
    pub detail: String,
}

impl SchemaError {
    fn new(kind: SchemaErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

impl std::error::Error for SchemaError {}

impl From<InvalidOutcome> for SchemaError {
    fn from(err: InvalidOutcome) -> Self {
        let kind = match err {
            InvalidOutcome::EventsExceedTotal { .. } => SchemaErrorKind::EventsExceedTotal,
            InvalidOutcome::EmptyGroup { .. } => SchemaErrorKind::EmptyGroup,
            InvalidOutcome::NegativeValue { .. } => SchemaErrorKind::NegativeValue,
            InvalidOutcome::NonFinite { .. } => SchemaErrorKind::NonNumericValue,
        };
        SchemaError::new(kind, err.to_string())
    }
}

/// A parsed model response.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionOutput {
    pub raw_text: String,
    pub thought: Option<String>,
    pub data: Option<OutcomeData>,
    pub yaml_valid: bool,
    pub thought_format_valid: bool,
    /// Why `data` is missing, when it is.
    pub error: Option<SchemaError>,
}

impl ExtractionOutput {
    pub fn outcome_type(&self) -> Option<OutcomeType> {
        self.data.as_ref().map(OutcomeData::outcome_type)
    }
}

/// Parse a raw response. Never fails: malformed input is reported through
/// the flags and `error`.
pub fn parse_response(raw: &str) -> ExtractionOutput {
    let lines = split_lines(raw);
    let starts: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| is_block_start(l.text))
        .map(|(i, _)| i)
        .collect();

    let mut data = None;
    let mut error = None;
    // Last well-formed block wins; if none parses, report the last failure.
    for &start in starts.iter().rev() {
        match parse_block(&lines[start..]) {
            Ok(parsed) => {
                data = Some(parsed);
                error = None;
                break;
            }
            Err(err) => {
                if error.is_none() {
                    error = Some(err);
                }
            }
        }
    }
    if starts.is_empty() {
        error = Some(SchemaError::new(
            SchemaErrorKind::NoYamlBlock,
            "no line starting with `outcome_type:`",
        ));
    }

    let (thought, thought_format_valid) = match think_span(raw) {
        Some((open, close)) => {
            let body_end = close + THINK_CLOSE.len();
            let leading_ok = raw[..open].trim().is_empty();
            let block_after = lines
                .iter()
                .any(|l| l.offset >= body_end && is_block_start(l.text));
            (
                Some(raw[open + THINK_OPEN.len()..close].trim().to_string()),
                leading_ok && block_after,
            )
        }
        None => (None, false),
    };

    ExtractionOutput {
        raw_text: raw.to_string(),
        thought,
        yaml_valid: data.is_some(),
        data,
        thought_format_valid,
        error,
    }
}

/// True iff the response carries a well-formed block, matching `expected`
/// when given.
pub fn validate_format(out: &ExtractionOutput, expected: Option<OutcomeType>) -> bool {
    let Some(data) = out.data.as_ref() else {
        return false;
    };
    if !out.yaml_valid || data.validate().is_err() {
        return false;
    }
    expected.is_none_or(|t| t == data.outcome_type())
}

/// Render outcome data in the flattened layout of the extraction prompt.
pub fn serialize(data: &OutcomeData) -> String {
    match data {
        OutcomeData::Binary(b) => format!(
            "outcome_type: binary\nintervention:\nevents: {} total: {}\ncomparator:\nevents: {} total: {}\n",
            b.intervention_events, b.intervention_total, b.comparator_events, b.comparator_total
        ),
        OutcomeData::Continuous(c) => format!(
            "outcome_type: continuous\nintervention:\nmean: {} standard_deviation: {} group_size: {}\ncomparator:\nmean: {} standard_deviation: {} group_size: {}\n",
            c.intervention_mean,
            c.intervention_sd,
            c.intervention_n,
            c.comparator_mean,
            c.comparator_sd,
            c.comparator_n
        ),
    }
}

/// Byte offsets of the single `<think>` and `</think>` tags, if there is
/// exactly one of each and they are in order.
fn think_span(raw: &str) -> Option<(usize, usize)> {
    let opens: Vec<usize> = raw.match_indices(THINK_OPEN).map(|(i, _)| i).collect();
    let closes: Vec<usize> = raw.match_indices(THINK_CLOSE).map(|(i, _)| i).collect();
    match (opens.as_slice(), closes.as_slice()) {
        ([open], [close]) if open < close => Some((*open, *close)),
        _ => None,
    }
}

struct Line<'a> {
    offset: usize,
    text: &'a str,
}

fn split_lines(raw: &str) -> Vec<Line<'_>> {
    let mut offset = 0;
    raw.split_inclusive('\n')
        .map(|chunk| {
            let line = Line {
                offset,
                text: chunk.trim_end_matches(['\n', '\r']),
            };
            offset += chunk.len();
            line
        })
        .collect()
}

fn key_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)([A-Za-z_]+)\s*:").unwrap())
}

fn is_block_start(line: &str) -> bool {
    matches!(tokenize(line), Some(pairs) if pairs.first().is_some_and(|(k, _)| *k == "outcome_type"))
}

const SECTION_KEYS: [&str; 2] = ["intervention", "comparator"];
const BINARY_KEYS: [&str; 2] = ["events", "total"];
const CONTINUOUS_KEYS: [&str; 3] = ["mean", "standard_deviation", "group_size"];

fn is_known_key(key: &str) -> bool {
    key == "outcome_type"
        || SECTION_KEYS.contains(&key)
        || BINARY_KEYS.contains(&key)
        || CONTINUOUS_KEYS.contains(&key)
}

/// Split a line into `key: value` pairs. `None` when the line is not made
/// up entirely of known keys, which ends a block.
fn tokenize(line: &str) -> Option<Vec<(&str, &str)>> {
    let mut text = line.trim();
    if let Some(hash) = text.find(" #") {
        text = text[..hash].trim_end();
    }
    let text = text.strip_prefix("- ").unwrap_or(text).trim_start();
    if text.is_empty() {
        return Some(Vec::new());
    }
    let keys: Vec<_> = key_regex().captures_iter(text).collect();
    let first = keys.first()?.get(1)?;
    if first.start() != 0 {
        return None;
    }
    let mut pairs = Vec::with_capacity(keys.len());
    for (i, cap) in keys.iter().enumerate() {
        let key = cap.get(1)?.as_str();
        if !is_known_key(key) {
            return None;
        }
        let value_start = cap.get(0)?.end();
        let value_end = keys.get(i + 1).map_or(text.len(), |next| {
            next.get(0).map_or(text.len(), |m| m.start())
        });
        let value = unquote(text[value_start..value_end].trim());
        pairs.push((key, value));
    }
    Some(pairs)
}

fn unquote(value: &str) -> &str {
    for q in ['"', '\''] {
        if let Some(inner) = value.strip_prefix(q).and_then(|v| v.strip_suffix(q)) {
            return inner.trim();
        }
    }
    value
}

fn parse_block(lines: &[Line<'_>]) -> Result<OutcomeData, SchemaError> {
    let mut outcome_type: Option<&str> = None;
    let mut section: Option<Arm> = None;
    let mut values: HashMap<(Arm, &str), &str> = HashMap::new();

    for (idx, line) in lines.iter().enumerate() {
        let Some(pairs) = tokenize(line.text) else {
            break;
        };
        if idx > 0 && pairs.first().is_some_and(|(k, _)| *k == "outcome_type") {
            break;
        }
        for (key, value) in pairs {
            match key {
                "outcome_type" => outcome_type = Some(value),
                "intervention" | "comparator" => {
                    section = Some(if key == "intervention" {
                        Arm::Intervention
                    } else {
                        Arm::Comparator
                    });
                    if !value.is_empty() {
                        return Err(SchemaError::new(
                            SchemaErrorKind::NonNumericValue,
                            format!("`{key}` must introduce a section, found `{value}`"),
                        ));
                    }
                }
                field => {
                    let Some(arm) = section else {
                        return Err(SchemaError::new(
                            SchemaErrorKind::MissingKey,
                            format!("`{field}` appears before any intervention/comparator key"),
                        ));
                    };
                    values.insert((arm, field), value);
                }
            }
        }
    }

    let declared = outcome_type.unwrap_or_default();
    let kind: OutcomeType = declared.to_ascii_lowercase().parse().map_err(|_| {
        SchemaError::new(
            SchemaErrorKind::WrongOutcomeType,
            format!("outcome_type `{declared}` is neither binary nor continuous"),
        )
    })?;
    let (own, foreign): (&[&str], &[&str]) = match kind {
        OutcomeType::Binary => (&BINARY_KEYS, &CONTINUOUS_KEYS),
        OutcomeType::Continuous => (&CONTINUOUS_KEYS, &BINARY_KEYS),
    };
    if let Some((arm, key)) = values.keys().find(|(_, k)| foreign.contains(k)) {
        return Err(SchemaError::new(
            SchemaErrorKind::WrongOutcomeType,
            format!("{arm}.{key} does not belong to a {kind} outcome"),
        ));
    }
    for arm in [Arm::Intervention, Arm::Comparator] {
        for key in own {
            if !values.contains_key(&(arm, *key)) {
                return Err(SchemaError::new(
                    SchemaErrorKind::MissingKey,
                    format!("missing {arm}.{key}"),
                ));
            }
        }
    }

    let get = |arm: Arm, key: &str| values[&(arm, key)];
    let data = match kind {
        OutcomeType::Binary => OutcomeData::Binary(BinaryArms {
            intervention_events: parse_count(
                Arm::Intervention,
                "events",
                get(Arm::Intervention, "events"),
            )?,
            intervention_total: parse_count(
                Arm::Intervention,
                "total",
                get(Arm::Intervention, "total"),
            )?,
            comparator_events: parse_count(
                Arm::Comparator,
                "events",
                get(Arm::Comparator, "events"),
            )?,
            comparator_total: parse_count(Arm::Comparator, "total", get(Arm::Comparator, "total"))?,
        }),
        OutcomeType::Continuous => OutcomeData::Continuous(ContinuousArms {
            intervention_mean: parse_real(
                Arm::Intervention,
                "mean",
                get(Arm::Intervention, "mean"),
            )?,
            intervention_sd: parse_real(
                Arm::Intervention,
                "standard_deviation",
                get(Arm::Intervention, "standard_deviation"),
            )?,
            intervention_n: parse_count(
                Arm::Intervention,
                "group_size",
                get(Arm::Intervention, "group_size"),
            )?,
            comparator_mean: parse_real(Arm::Comparator, "mean", get(Arm::Comparator, "mean"))?,
            comparator_sd: parse_real(
                Arm::Comparator,
                "standard_deviation",
                get(Arm::Comparator, "standard_deviation"),
            )?,
            comparator_n: parse_count(
                Arm::Comparator,
                "group_size",
                get(Arm::Comparator, "group_size"),
            )?,
        }),
    };
    data.validate()?;
    Ok(data)
}

fn real_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$").unwrap())
}

fn count_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([+-]?)(\d+)(\.0*)?$").unwrap())
}

fn parse_count(arm: Arm, field: &str, value: &str) -> Result<u64, SchemaError> {
    let Some(caps) = count_regex().captures(value) else {
        return Err(SchemaError::new(
            SchemaErrorKind::NonNumericValue,
            format!("{arm}.{field}: `{value}` is not a whole number"),
        ));
    };
    let digits = &caps[2];
    if &caps[1] == "-" && digits.bytes().any(|b| b != b'0') {
        return Err(SchemaError::new(
            SchemaErrorKind::NegativeValue,
            format!("{arm}.{field}: `{value}` is negative"),
        ));
    }
    digits.parse().map_err(|_| {
        SchemaError::new(
            SchemaErrorKind::NonNumericValue,
            format!("{arm}.{field}: `{value}` is out of range"),
        )
    })
}

fn parse_real(arm: Arm, field: &str, value: &str) -> Result<f64, SchemaError> {
    if !real_regex().is_match(value) {
        return Err(SchemaError::new(
            SchemaErrorKind::NonNumericValue,
            format!("{arm}.{field}: `{value}` is not a number"),
        ));
    }
    let parsed: f64 = value.parse().map_err(|_| {
        SchemaError::new(
            SchemaErrorKind::NonNumericValue,
            format!("{arm}.{field}: `{value}` is not a number"),
        )
    })?;
    if !parsed.is_finite() {
        return Err(SchemaError::new(
            SchemaErrorKind::NonNumericValue,
            format!("{arm}.{field}: `{value}` is not finite"),
        ));
    }
    Ok(parsed)
}

fn wire_count(arm: Arm, field: &str, value: f64) -> Result<u64, SchemaError> {
    if !value.is_finite() {
        return Err(SchemaError::new(
            SchemaErrorKind::NonNumericValue,
            format!("{arm}.{field}: not finite"),
        ));
    }
    if value < 0.0 {
        return Err(SchemaError::new(
            SchemaErrorKind::NegativeValue,
            format!("{arm}.{field}: {value} is negative"),
        ));
    }
    if value.fract() != 0.0 || value > 9_007_199_254_740_992.0 {
        return Err(SchemaError::new(
            SchemaErrorKind::NonNumericValue,
            format!("{arm}.{field}: {value} is not a whole number"),
        ));
    }
    Ok(value as u64)
}

fn wire_binary(arm: Arm, w: &BinaryArmWire) -> Result<(u64, u64), SchemaError> {
    Ok((
        wire_count(arm, "events", w.events)?,
        wire_count(arm, "total", w.total)?,
    ))
}

fn wire_continuous(arm: Arm, w: &ContinuousArmWire) -> Result<(f64, f64, u64), SchemaError> {
    Ok((
        w.mean,
        w.standard_deviation,
        wire_count(arm, "group_size", w.group_size)?,
    ))
}

/// Validated conversion from the JSON wire form.
pub(crate) fn outcome_from_wire(wire: &OutcomeWire) -> Result<OutcomeData, SchemaError> {
    let data = match wire {
        OutcomeWire::Binary {
            intervention,
            comparator,
        } => {
            let (ie, it) = wire_binary(Arm::Intervention, intervention)?;
            let (ce, ct) = wire_binary(Arm::Comparator, comparator)?;
            OutcomeData::Binary(BinaryArms {
                intervention_events: ie,
                intervention_total: it,
                comparator_events: ce,
                comparator_total: ct,
            })
        }
        OutcomeWire::Continuous {
            intervention,
            comparator,
        } => {
            let (im, isd, i_n) = wire_continuous(Arm::Intervention, intervention)?;
            let (cm, csd, c_n) = wire_continuous(Arm::Comparator, comparator)?;
            OutcomeData::Continuous(ContinuousArms {
                intervention_mean: im,
                intervention_sd: isd,
                intervention_n: i_n,
                comparator_mean: cm,
                comparator_sd: csd,
                comparator_n: c_n,
            })
        }
    };
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HAWKEY_TARGET: &str =
        "outcome_type: binary\nintervention:\nevents: 8 total: 23\ncomparator:\nevents: 2 total: 22";

    fn hawkey() -> OutcomeData {
        OutcomeData::Binary(BinaryArms::new(8, 23, 2, 22).unwrap())
    }

    #[test]
    fn thought_then_flattened_block() {
        let raw = format!("<think>Clinical remission is yes/no.</think>\n{HAWKEY_TARGET}");
        let out = parse_response(&raw);
        assert_eq!(out.data, Some(hawkey()));
        assert!(out.yaml_valid);
        assert!(out.thought_format_valid);
        assert_eq!(
            out.thought.as_deref(),
            Some("Clinical remission is yes/no.")
        );
        assert!(out.error.is_none());
    }

    #[test]
    fn continuous_without_think_tag() {
        let raw = "outcome_type: continuous\nintervention:\nmean: 5.22 standard_deviation: 2.22 group_size: 48\ncomparator:\nmean: 3.08 standard_deviation: 1.81 group_size: 51\n";
        let out = parse_response(raw);
        assert!(out.yaml_valid);
        assert!(!out.thought_format_valid);
        let expected = ContinuousArms::new(5.22, 2.22, 48, 3.08, 1.81, 51).unwrap();
        assert_eq!(out.data, Some(OutcomeData::Continuous(expected)));
    }

    #[test]
    fn free_text_has_no_block() {
        let out = parse_response("the answer is 8");
        assert!(out.data.is_none());
        assert!(!out.yaml_valid);
        assert_eq!(out.error.unwrap().kind, SchemaErrorKind::NoYamlBlock);
    }

    #[test]
    fn nested_yaml_layout() {
        let raw = "```yaml\noutcome_type: \"binary\"\nintervention:\n  events: 8\n  total: 23.0\ncomparator:\n  events: 2\n  total: 22\n```\nDone.";
        assert_eq!(parse_response(raw).data, Some(hawkey()));
    }

    #[test]
    fn last_well_formed_block_wins() {
        let raw = format!(
            "<think>first guess\noutcome_type: binary\nintervention:\nevents: 1 total: 23\ncomparator:\nevents: 2 total: 22\n</think>\n{HAWKEY_TARGET}\n\noutcome_type: binary\nintervention:\nevents: 8"
        );
        let out = parse_response(&raw);
        assert_eq!(out.data, Some(hawkey()));
        assert!(out.thought_format_valid);
    }

    #[test]
    fn value_errors_are_classified() {
        let cases = [
            (
                HAWKEY_TARGET.replace("events: 8", "events: 30"),
                SchemaErrorKind::EventsExceedTotal,
            ),
            (
                HAWKEY_TARGET.replace("events: 8", "events: -8"),
                SchemaErrorKind::NegativeValue,
            ),
            (
                HAWKEY_TARGET.replace("total: 23", "total: 1,023"),
                SchemaErrorKind::NonNumericValue,
            ),
            (
                HAWKEY_TARGET.replace("total: 23", "total: 23.5"),
                SchemaErrorKind::NonNumericValue,
            ),
            (
                HAWKEY_TARGET.replace("total: 23", "total: NUMBER"),
                SchemaErrorKind::NonNumericValue,
            ),
            (
                HAWKEY_TARGET
                    .replace("total: 23", "total: 0")
                    .replace("events: 8", "events: 0"),
                SchemaErrorKind::EmptyGroup,
            ),
            (
                HAWKEY_TARGET.replace("binary", "dichotomous"),
                SchemaErrorKind::WrongOutcomeType,
            ),
            (
                HAWKEY_TARGET.replace("binary", "continuous"),
                SchemaErrorKind::WrongOutcomeType,
            ),
            (
                HAWKEY_TARGET.replace(" total: 22", ""),
                SchemaErrorKind::MissingKey,
            ),
        ];
        for (raw, kind) in cases {
            let out = parse_response(&raw);
            assert!(!out.yaml_valid, "{raw}");
            assert_eq!(out.error.map(|e| e.kind), Some(kind), "{raw}");
        }
    }

    #[test]
    fn negative_sd_rejected() {
        let raw = "outcome_type: continuous\nintervention:\nmean: -1.5 standard_deviation: -2 group_size: 4\ncomparator:\nmean: 1 standard_deviation: 2 group_size: 4";
        assert_eq!(
            parse_response(raw).error.unwrap().kind,
            SchemaErrorKind::NegativeValue
        );
    }

    #[test]
    fn format_validation_checks_declared_type() {
        let out = parse_response(HAWKEY_TARGET);
        assert!(validate_format(&out, Some(OutcomeType::Binary)));
        assert!(validate_format(&out, None));
        assert!(!validate_format(&out, Some(OutcomeType::Continuous)));
    }

    #[test]
    fn every_key_deletion_mutant_fails_validation() {
        // Drop each `key: value` token of the target in turn.
        let tokens = [
            "outcome_type: binary",
            "intervention:",
            "events: 8",
            "total: 23",
            "comparator:",
            "events: 2",
            "total: 22",
        ];
        let layout = |skip: usize| {
            let kept: Vec<&str> = tokens
                .iter()
                .enumerate()
                .map(|(i, t)| if i == skip { "" } else { *t })
                .collect();
            format!(
                "{}\n{}\n{} {}\n{}\n{} {}",
                kept[0], kept[1], kept[2], kept[3], kept[4], kept[5], kept[6]
            )
        };
        assert!(validate_format(
            &parse_response(&layout(usize::MAX)),
            Some(OutcomeType::Binary)
        ));
        for skip in 0..tokens.len() {
            let raw = layout(skip);
            let out = parse_response(&raw);
            assert!(
                !validate_format(&out, Some(OutcomeType::Binary)),
                "mutant {skip}: {raw}"
            );
        }
    }

    #[test]
    fn think_tag_rules() {
        let two = format!("<think>a</think><think>b</think>\n{HAWKEY_TARGET}");
        assert!(!parse_response(&two).thought_format_valid);
        let yaml_first = format!("{HAWKEY_TARGET}\n<think>a</think>");
        assert!(!parse_response(&yaml_first).thought_format_valid);
        let reversed = format!("</think>a<think>\n{HAWKEY_TARGET}");
        assert!(!parse_response(&reversed).thought_format_valid);
        let spaced = format!("  \n<think>\n a \n</think>\n\n   {HAWKEY_TARGET}");
        let out = parse_response(&spaced);
        assert!(out.thought_format_valid);
        assert_eq!(out.thought.as_deref(), Some("a"));
        let prefixed = format!("Sure!<think>a</think>\n{HAWKEY_TARGET}");
        assert!(!parse_response(&prefixed).thought_format_valid);
    }

    #[test]
    fn serialize_matches_prompt_layout() {
        assert_eq!(serialize(&hawkey()), format!("{HAWKEY_TARGET}\n"));
    }

    #[test]
    fn wire_conversion_reports_kinds() {
        let wire: OutcomeWire = serde_json::from_str(
            r#"{"outcome_type":"binary","intervention":{"events":-1,"total":23},"comparator":{"events":2,"total":22}}"#,
        )
        .unwrap();
        assert_eq!(
            outcome_from_wire(&wire).unwrap_err().kind,
            SchemaErrorKind::NegativeValue
        );
    }
}

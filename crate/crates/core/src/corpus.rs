//! JSONL study corpus and prediction files.
//!
//! One study per line. `gold_data` nests under the same keys the extraction
//! schema uses, so a gold record and a model answer share a vocabulary:
//!
//! ```json
//! {"id": "hawkey2015", "study_text": "...", "comparison": "Stem cells versus Control",
//!  "outcome_name": "Clinical remission", "outcome_type": "binary",
//!  "gold_data": {"outcome_type": "binary", "intervention": {"events": 8, "total": 23},
//!                "comparator": {"events": 2, "total": 22}},
//!  "gold_point": 3.83, "gold_ci": [0.91, 16.07], "gold_conclusion": "inconclusive"}
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::outcome::{estimate, Conclusion, OutcomeData, OutcomeType, OutcomeWire};
use crate::schema::{outcome_from_wire, parse_response, ExtractionOutput, SchemaErrorKind};

/// Absolute tolerance between stored and recomputed gold values, after
/// rounding the recomputed ones to two decimals.
pub const GOLD_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub id: String,
    pub study_text: String,
    pub comparison: String,
    pub outcome_name: String,
    pub outcome_type: OutcomeType,
    pub gold_data: OutcomeData,
    /// `None` when the gold data admit no estimate.
    pub gold_point: Option<f64>,
    pub gold_ci: Option<(f64, f64)>,
    pub gold_conclusion: Conclusion,
    pub thought: Option<String>,
}

impl StudyRecord {
    /// Record whose gold estimate, interval and conclusion are computed from
    /// `gold_data`, rounded to two decimals.
    pub fn from_gold(
        id: impl Into<String>,
        study_text: impl Into<String>,
        comparison: impl Into<String>,
        outcome_name: impl Into<String>,
        gold_data: OutcomeData,
    ) -> Result<Self> {
        let (est, conclusion) = estimate(&gold_data)?;
        Ok(Self {
            id: id.into(),
            study_text: study_text.into(),
            comparison: comparison.into(),
            outcome_name: outcome_name.into(),
            outcome_type: gold_data.outcome_type(),
            gold_data,
            gold_point: est.estimable.then(|| round2(est.point)),
            gold_ci: est
                .estimable
                .then(|| (round2(est.ci_low), round2(est.ci_high))),
            gold_conclusion: conclusion,
            thought: None,
        })
    }

    /// Differences between the stored gold values and those recomputed
    /// from `gold_data`; empty when consistent.
    pub fn consistency_issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let Ok((est, conclusion)) = estimate(&self.gold_data) else {
            issues.push("gold data admit no estimate".to_string());
            return issues;
        };
        if conclusion != self.gold_conclusion {
            issues.push(format!(
                "gold_conclusion {} but interval gives {}",
                self.gold_conclusion, conclusion
            ));
        }
        if !est.estimable {
            if self.gold_point.is_some() {
                issues.push("gold_point given for a non-estimable outcome".to_string());
            }
            return issues;
        }
        let mut check = |name: &str, stored: Option<f64>, computed: f64| match stored {
            Some(v) if (round2(computed) - v).abs() <= GOLD_TOLERANCE + 1e-9 => {}
            Some(v) => issues.push(format!("{name} {v} but recomputed {computed:.4}")),
            None => issues.push(format!("{name} missing, recomputed {computed:.4}")),
        };
        check("gold_point", self.gold_point, est.point);
        check("gold_ci.low", self.gold_ci.map(|c| c.0), est.ci_low);
        check("gold_ci.high", self.gold_ci.map(|c| c.1), est.ci_high);
        issues
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordWire {
    id: String,
    study_text: String,
    comparison: String,
    outcome_name: String,
    outcome_type: OutcomeType,
    gold_data: OutcomeWire,
    gold_point: Option<f64>,
    gold_ci: Option<(f64, f64)>,
    gold_conclusion: Conclusion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thought: Option<String>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    study_text: &'a str,
    comparison: &'a str,
    outcome_name: &'a str,
    outcome_type: OutcomeType,
    gold_data: &'a OutcomeData,
    gold_point: Option<f64>,
    gold_ci: Option<(f64, f64)>,
    gold_conclusion: Conclusion,
    #[serde(skip_serializing_if = "Option::is_none")]
    thought: Option<&'a str>,
}

impl Serialize for StudyRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RecordOut {
            id: &self.id,
            study_text: &self.study_text,
            comparison: &self.comparison,
            outcome_name: &self.outcome_name,
            outcome_type: self.outcome_type,
            gold_data: &self.gold_data,
            gold_point: self.gold_point,
            gold_ci: self.gold_ci,
            gold_conclusion: self.gold_conclusion,
            thought: self.thought.as_deref(),
        }
        .serialize(serializer)
    }
}

/// A problem with one line of a corpus file.
#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    /// 1-based.
    pub line: usize,
    /// Set when the failure is a schema violation of the gold data.
    pub kind: Option<SchemaErrorKind>,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// A loaded record whose stored gold values disagree with its data.
#[derive(Debug, Clone, PartialEq)]
pub struct Inconsistency {
    pub line: usize,
    pub id: String,
    pub issues: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Skip bad lines and report them.
    #[default]
    Tolerant,
    /// Fail on the first bad line.
    Strict,
}

#[derive(Debug, Default)]
pub struct CorpusLoad {
    pub records: Vec<StudyRecord>,
    pub errors: Vec<LineError>,
    /// Kept records that fail the gold-consistency check.
    pub inconsistencies: Vec<Inconsistency>,
}

impl CorpusLoad {
    /// Fraction of loaded records passing the gold-consistency check.
    pub fn consistency_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 1.0;
        }
        1.0 - self.inconsistencies.len() as f64 / self.records.len() as f64
    }
}

fn parse_record(line: &str) -> std::result::Result<StudyRecord, (Option<SchemaErrorKind>, String)> {
    let wire: RecordWire = serde_json::from_str(line).map_err(|e| (None, e.to_string()))?;
    let gold_data =
        outcome_from_wire(&wire.gold_data).map_err(|e| (Some(e.kind), e.to_string()))?;
    if gold_data.outcome_type() != wire.outcome_type {
        return Err((
            Some(SchemaErrorKind::WrongOutcomeType),
            format!(
                "outcome_type {} but gold_data is {}",
                wire.outcome_type,
                gold_data.outcome_type()
            ),
        ));
    }
    Ok(StudyRecord {
        id: wire.id,
        study_text: wire.study_text,
        comparison: wire.comparison,
        outcome_name: wire.outcome_name,
        outcome_type: wire.outcome_type,
        gold_data,
        gold_point: wire.gold_point,
        gold_ci: wire.gold_ci,
        gold_conclusion: wire.gold_conclusion,
        thought: wire.thought,
    })
}

/// Non-empty lines of a file with their 1-based numbers; invalid UTF-8
/// is reported per line.
fn read_lines(path: &Path) -> Result<Vec<(usize, std::result::Result<String, String>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .split(|b| *b == b'\n')
        .enumerate()
        .filter(|(_, l)| l.iter().any(|b| !b.is_ascii_whitespace()))
        .map(|(i, l)| {
            (
                i + 1,
                String::from_utf8(l.to_vec()).map_err(|e| format!("invalid UTF-8: {e}")),
            )
        })
        .collect())
}

pub fn load_corpus(path: impl AsRef<Path>, mode: LoadMode) -> Result<CorpusLoad> {
    let path = path.as_ref();
    let mut load = CorpusLoad::default();
    let mut seen = HashSet::new();
    for (line_no, text) in read_lines(path)? {
        let parsed = text
            .map_err(|m| (None, m))
            .and_then(|t| parse_record(&t))
            .and_then(|r| {
                if seen.insert(r.id.clone()) {
                    Ok(r)
                } else {
                    Err((None, format!("duplicate id `{}`", r.id)))
                }
            });
        match parsed {
            Ok(record) => {
                let issues = record.consistency_issues();
                if !issues.is_empty() {
                    warn!("line {line_no} ({}): {}", record.id, issues.join("; "));
                    load.inconsistencies.push(Inconsistency {
                        line: line_no,
                        id: record.id.clone(),
                        issues,
                    });
                }
                load.records.push(record);
            }
            Err((kind, message)) => {
                let err = LineError {
                    line: line_no,
                    kind,
                    message,
                };
                if mode == LoadMode::Strict {
                    return Err(Error::Validation(format!("{}: {err}", path.display())));
                }
                load.errors.push(err);
            }
        }
    }
    Ok(load)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Validation(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn save_corpus(path: impl AsRef<Path>, records: &[StudyRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

/// One raw model answer for a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub raw_response: String,
    /// Set when the response could not be obtained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, raw_response: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            raw_response: raw_response.into(),
            error: None,
        }
    }
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(line_no, text)| {
            text.and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
                .map_err(|m| Error::Validation(format!("{}: line {line_no}: {m}", path.display())))
        })
        .collect()
}

pub fn save_predictions(path: impl AsRef<Path>, predictions: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), predictions)
}

#[derive(Debug)]
pub struct Joined<'a> {
    /// In corpus order.
    pub pairs: Vec<(&'a StudyRecord, ExtractionOutput)>,
    /// Prediction ids with no study.
    pub unmatched_ids: Vec<String>,
    /// Study ids with no prediction.
    pub missing_ids: Vec<String>,
    /// Ids predicted more than once; the last prediction was kept.
    pub duplicate_ids: Vec<String>,
}

/// Inner join of predictions onto the corpus by id.
pub fn join_predictions<'a>(
    corpus: &'a [StudyRecord],
    predictions: &[PredictionRecord],
) -> Joined<'a> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    let mut duplicate_ids = Vec::new();
    for p in predictions {
        if by_id.insert(p.id.as_str(), p).is_some() && !duplicate_ids.contains(&p.id) {
            warn!("duplicate prediction for `{}`; keeping the last", p.id);
            duplicate_ids.push(p.id.clone());
        }
    }
    let known: HashSet<&str> = corpus.iter().map(|r| r.id.as_str()).collect();
    let mut unmatched_ids = Vec::new();
    for p in predictions {
        if !known.contains(p.id.as_str()) && !unmatched_ids.contains(&p.id) {
            warn!("prediction `{}` has no matching study", p.id);
            unmatched_ids.push(p.id.clone());
        }
    }
    let mut pairs = Vec::new();
    let mut missing_ids = Vec::new();
    for record in corpus {
        match by_id.get(record.id.as_str()) {
            Some(p) => pairs.push((record, parse_response(&p.raw_response))),
            None => missing_ids.push(record.id.clone()),
        }
    }
    Joined {
        pairs,
        unmatched_ids,
        missing_ids,
        duplicate_ids,
    }
}

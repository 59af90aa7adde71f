//! Per-study scoring of extractions and batch evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::corpus::StudyRecord;
use crate::error::{Error, Result};
use crate::outcome::{estimate, Conclusion, Scale};
use crate::rewards::match_vector;
use crate::schema::ExtractionOutput;

/// Labels averaged over by the macro F1.
pub const F1_LABELS: [Conclusion; 3] = [
    Conclusion::FavorsIntervention,
    Conclusion::FavorsComparator,
    Conclusion::Inconclusive,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyScore {
    pub fields_matched: usize,
    pub fields_total: usize,
    pub exact_match: bool,
    pub any_match: bool,
    pub pred_conclusion: Conclusion,
    pub gold_conclusion: Conclusion,
    pub pred_point: Option<f64>,
    pub gold_point: Option<f64>,
    pub pred_scale: Option<Scale>,
    pub gold_scale: Option<Scale>,
}

impl StudyScore {
    /// Any field wrong, including a parse failure or type mismatch.
    pub fn is_extraction_error(&self) -> bool {
        !self.exact_match
    }

    pub fn conclusion_flipped(&self) -> bool {
        self.pred_conclusion != self.gold_conclusion
    }
}

pub fn score_study(pred: &ExtractionOutput, gold: &StudyRecord) -> StudyScore {
    let fields_total = gold.gold_data.outcome_type().field_count();
    let matches = pred
        .data
        .as_ref()
        .and_then(|d| match_vector(d, &gold.gold_data));
    let fields_matched = matches
        .as_ref()
        .map_or(0, |m| m.iter().filter(|x| **x).count());

    let (pred_point, pred_scale, pred_conclusion) = match pred.data.as_ref().map(estimate) {
        Some(Ok((est, conclusion))) => (
            est.estimable.then_some(est.point),
            Some(est.scale),
            conclusion,
        ),
        _ => (None, None, Conclusion::NotEstimable),
    };
    let (gold_point, gold_scale) = match estimate(&gold.gold_data) {
        Ok((est, _)) => (est.estimable.then_some(est.point), Some(est.scale)),
        Err(_) => (None, None),
    };

    StudyScore {
        fields_matched,
        fields_total,
        exact_match: matches.as_ref().is_some_and(|m| m.iter().all(|x| *x)),
        any_match: fields_matched > 0,
        pred_conclusion,
        gold_conclusion: gold.gold_conclusion,
        pred_point,
        gold_point,
        pred_scale,
        gold_scale,
    }
}

/// Scale on which squared point errors are averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MseScale {
    /// Ratios and differences as reported.
    #[default]
    Natural,
    /// Ratios on the log scale, differences unchanged.
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub f1: f64,
    pub em: f64,
    pub em_at_1: f64,
    pub mse: f64,
    pub eir: f64,
    pub n_studies: usize,
    pub n_extraction_errors: usize,
    pub n_flips: usize,
    /// Studies contributing to `mse`.
    #[serde(skip)]
    pub n_mse_studies: usize,
}

impl EvalReport {
    /// False when no study had an extraction error, in which case `eir` is
    /// reported as 0.
    pub fn eir_defined(&self) -> bool {
        self.n_extraction_errors > 0
    }

    /// `key: value` lines, metrics to four decimals.
    pub fn to_text(&self) -> String {
        format!(
            "accuracy: {:.4}\nf1: {:.4}\nem: {:.4}\nem_at_1: {:.4}\nmse: {:.4}\neir: {:.4}\nn_studies: {}\nn_extraction_errors: {}\nn_flips: {}\n",
            self.accuracy,
            self.f1,
            self.em,
            self.em_at_1,
            self.mse,
            self.eir,
            self.n_studies,
            self.n_extraction_errors,
            self.n_flips
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn aggregate(scores: &[StudyScore]) -> Result<EvalReport> {
    aggregate_with(scores, MseScale::Natural)
}

pub fn aggregate_with(scores: &[StudyScore], mse_scale: MseScale) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::Validation("cannot aggregate zero studies".into()));
    }
    let n = scores.len() as f64;
    let frac =
        |pred: &dyn Fn(&StudyScore) -> bool| scores.iter().filter(|s| pred(s)).count() as f64 / n;

    let accuracy = frac(&|s| s.pred_conclusion == s.gold_conclusion);
    let em = frac(&|s| s.exact_match);
    let em_at_1 = frac(&|s| s.any_match);

    let n_extraction_errors = scores.iter().filter(|s| s.is_extraction_error()).count();
    let n_flips = scores
        .iter()
        .filter(|s| s.is_extraction_error() && s.conclusion_flipped())
        .count();
    let eir = if n_extraction_errors > 0 {
        n_flips as f64 / n_extraction_errors as f64
    } else {
        0.0
    };

    let transform = |v: f64, scale: Option<Scale>| match (mse_scale, scale) {
        (MseScale::Log, Some(Scale::Ratio)) => v.ln(),
        _ => v,
    };
    let mut sq_sum = 0.0;
    let mut n_mse_studies = 0;
    for s in scores {
        if let (Some(p), Some(g)) = (s.pred_point, s.gold_point) {
            sq_sum += (transform(p, s.pred_scale) - transform(g, s.gold_scale)).powi(2);
            n_mse_studies += 1;
        }
    }
    let mse = if n_mse_studies > 0 {
        sq_sum / n_mse_studies as f64
    } else {
        0.0
    };

    Ok(EvalReport {
        accuracy,
        f1: macro_f1(scores),
        em,
        em_at_1,
        mse,
        eir,
        n_studies: scores.len(),
        n_extraction_errors,
        n_flips,
        n_mse_studies,
    })
}

/// One-vs-rest F1 averaged over [`F1_LABELS`]. A not-estimable prediction is
/// a miss for the gold label and a false positive for no label. Labels that
/// never occur in either gold or predictions are left out of the average.
pub fn macro_f1(scores: &[StudyScore]) -> f64 {
    let mut sum = 0.0;
    let mut counted = 0;
    for label in F1_LABELS {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for s in scores {
            let pred = s.pred_conclusion == label;
            let gold = s.gold_conclusion == label;
            match (pred, gold) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            sum += 2.0 * tp as f64 / denom as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::StudyRecord;
    use crate::outcome::{BinaryArms, ContinuousArms, OutcomeData};
    use crate::schema::{parse_response, serialize};

    fn record(data: OutcomeData) -> StudyRecord {
        StudyRecord::from_gold("s", "text", "A versus B", "outcome", data).unwrap()
    }

    fn pred(data: &OutcomeData) -> ExtractionOutput {
        parse_response(&serialize(data))
    }

    fn score(conclusions: (Conclusion, Conclusion), exact: bool, any: bool) -> StudyScore {
        StudyScore {
            fields_matched: usize::from(any),
            fields_total: 4,
            exact_match: exact,
            any_match: any,
            pred_conclusion: conclusions.0,
            gold_conclusion: conclusions.1,
            pred_point: None,
            gold_point: None,
            pred_scale: None,
            gold_scale: None,
        }
    }

    #[test]
    fn identical_prediction() {
        let gold = OutcomeData::Binary(BinaryArms::new(8, 23, 2, 22).unwrap());
        let s = score_study(&pred(&gold), &record(gold));
        assert!(s.exact_match && s.any_match);
        assert_eq!(s.pred_conclusion, s.gold_conclusion);
        assert_eq!(s.pred_point, s.gold_point);
        assert_eq!((s.fields_matched, s.fields_total), (4, 4));
    }

    #[test]
    fn swapped_events_match_vector() {
        // Gold (8, 23, 2, 22); swapping events gives (2, 23, 8, 22):
        // match vector [false, true, false, true].
        let gold = OutcomeData::Binary(BinaryArms::new(8, 23, 2, 22).unwrap());
        let p = OutcomeData::Binary(BinaryArms::new(2, 23, 8, 22).unwrap());
        let s = score_study(&pred(&p), &record(gold));
        assert!(!s.exact_match);
        assert!(s.any_match);
        assert_eq!(s.fields_matched, 2);
        // Swapping whole arms misaligns the totals too.
        let p = OutcomeData::Binary(BinaryArms::new(2, 22, 8, 23).unwrap());
        let s = score_study(&pred(&p), &record(gold));
        assert!(!s.any_match);
        assert_eq!(s.fields_matched, 0);
    }

    #[test]
    fn variant_mismatch_and_parse_failure() {
        let gold = OutcomeData::Binary(BinaryArms::new(8, 23, 2, 22).unwrap());
        let p = OutcomeData::Continuous(ContinuousArms::new(8.0, 1.0, 23, 2.0, 1.0, 22).unwrap());
        let s = score_study(&pred(&p), &record(gold));
        assert!(!s.exact_match && !s.any_match);
        let s = score_study(&parse_response("nothing"), &record(gold));
        assert!(!s.any_match);
        assert_eq!(s.pred_conclusion, Conclusion::NotEstimable);
        assert_eq!(s.pred_point, None);
    }

    #[test]
    fn perfect_batch_flags_undefined_eir() {
        let c = Conclusion::Inconclusive;
        let report = aggregate(&[score((c, c), true, true), score((c, c), true, true)]).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.em, 1.0);
        assert_eq!(report.n_extraction_errors, 0);
        assert!(!report.eir_defined());
        assert_eq!(report.eir, 0.0);
    }

    #[test]
    fn eir_quarter() {
        use Conclusion::*;
        let scores = vec![
            score((Inconclusive, FavorsIntervention), false, true),
            score((Inconclusive, Inconclusive), false, true),
            score((FavorsComparator, FavorsComparator), false, false),
            score((Inconclusive, Inconclusive), false, true),
            score((FavorsIntervention, FavorsIntervention), true, true),
        ];
        let r = aggregate(&scores).unwrap();
        assert_eq!((r.n_extraction_errors, r.n_flips), (4, 1));
        assert_eq!(r.eir, 0.25);
        assert_eq!(r.em, 0.2);
        assert_eq!(r.em_at_1, 0.8);
        assert_eq!(r.accuracy, 0.8);
    }

    #[test]
    fn macro_f1_by_hand() {
        use Conclusion::*;
        // FI: tp1 fp0 fn1 -> 2/3. FC: tp1 fp1 fn0 -> 2/3. IN: tp0 fp0 fn1 -> 0.
        let scores = vec![
            score((FavorsIntervention, FavorsIntervention), true, true),
            score((FavorsComparator, FavorsIntervention), true, true),
            score((FavorsComparator, FavorsComparator), true, true),
            score((NotEstimable, Inconclusive), false, false),
        ];
        let f1 = macro_f1(&scores);
        assert!((f1 - (2.0 / 3.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mse_excludes_not_estimable_and_supports_log_scale() {
        let mut a = score(
            (Conclusion::Inconclusive, Conclusion::Inconclusive),
            false,
            true,
        );
        a.pred_point = Some(2.0);
        a.gold_point = Some(4.0);
        a.pred_scale = Some(Scale::Ratio);
        a.gold_scale = Some(Scale::Ratio);
        let mut b = a.clone();
        b.pred_point = None;
        let natural = aggregate(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(natural.mse, 4.0);
        assert_eq!(natural.n_mse_studies, 1);
        let log = aggregate_with(&[a, b], MseScale::Log).unwrap();
        assert!((log.mse - 2f64.ln().powi(2)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn json_keys_are_exact() {
        let c = Conclusion::Inconclusive;
        let report = aggregate(&[score((c, c), true, true)]).unwrap();
        let value: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        let keys: std::collections::BTreeSet<&str> = value
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        let expected: std::collections::BTreeSet<&str> = [
            "accuracy",
            "f1",
            "em",
            "em_at_1",
            "mse",
            "eir",
            "n_studies",
            "n_extraction_errors",
            "n_flips",
        ]
        .into_iter()
        .collect();
        assert_eq!(keys, expected);
        assert!(report.to_text().starts_with("accuracy: 1.0000\n"));
    }
}

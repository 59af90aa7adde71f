//! Outcome data and fixed-effect estimates.
//!
//! Binary outcomes are summarised as a risk ratio with a log-scale confidence
//! interval, continuous outcomes as a mean difference. A study-level
//! conclusion is read off the 95% interval relative to the null value.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normal quantile used for every 95% interval.
pub const Z_95: f64 = 1.96;

/// Added to all four cells of a 2x2 table when exactly one arm has no events.
pub const CONTINUITY_CORRECTION: f64 = 0.5;

/// Which group a value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Intervention,
    Comparator,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Intervention => "intervention",
            Arm::Comparator => "comparator",
        })
    }
}

/// Broken invariant on arm-level data.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvalidOutcome {
    #[error("{arm}: events ({events}) exceed total ({total})")]
    EventsExceedTotal { arm: Arm, events: u64, total: u64 },
    #[error("{arm}: group size must be at least 1")]
    EmptyGroup { arm: Arm },
    #[error("{arm}.{field}: value {value} is negative")]
    NegativeValue {
        arm: Arm,
        field: &'static str,
        value: f64,
    },
    #[error("{arm}.{field}: value is not finite")]
    NonFinite { arm: Arm, field: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryArms {
    pub intervention_events: u64,
    pub intervention_total: u64,
    pub comparator_events: u64,
    pub comparator_total: u64,
}

impl BinaryArms {
    /// Build and validate in one step.
    pub fn new(
        intervention_events: u64,
        intervention_total: u64,
        comparator_events: u64,
        comparator_total: u64,
    ) -> Result<Self, InvalidOutcome> {
        let arms = Self {
            intervention_events,
            intervention_total,
            comparator_events,
            comparator_total,
        };
        arms.validate()?;
        Ok(arms)
    }

    pub fn validate(&self) -> Result<(), InvalidOutcome> {
        check_binary_arm(
            Arm::Intervention,
            self.intervention_events,
            self.intervention_total,
        )?;
        check_binary_arm(
            Arm::Comparator,
            self.comparator_events,
            self.comparator_total,
        )
    }

    /// Intervention and comparator exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            intervention_events: self.comparator_events,
            intervention_total: self.comparator_total,
            comparator_events: self.intervention_events,
            comparator_total: self.intervention_total,
        }
    }
}

fn check_binary_arm(arm: Arm, events: u64, total: u64) -> Result<(), InvalidOutcome> {
    if total == 0 {
        return Err(InvalidOutcome::EmptyGroup { arm });
    }
    if events > total {
        return Err(InvalidOutcome::EventsExceedTotal { arm, events, total });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousArms {
    pub intervention_mean: f64,
    pub intervention_sd: f64,
    pub intervention_n: u64,
    pub comparator_mean: f64,
    pub comparator_sd: f64,
    pub comparator_n: u64,
}

impl ContinuousArms {
    pub fn new(
        intervention_mean: f64,
        intervention_sd: f64,
        intervention_n: u64,
        comparator_mean: f64,
        comparator_sd: f64,
        comparator_n: u64,
    ) -> Result<Self, InvalidOutcome> {
        let arms = Self {
            intervention_mean,
            intervention_sd,
            intervention_n,
            comparator_mean,
            comparator_sd,
            comparator_n,
        };
        arms.validate()?;
        Ok(arms)
    }

    pub fn validate(&self) -> Result<(), InvalidOutcome> {
        check_continuous_arm(
            Arm::Intervention,
            self.intervention_mean,
            self.intervention_sd,
            self.intervention_n,
        )?;
        check_continuous_arm(
            Arm::Comparator,
            self.comparator_mean,
            self.comparator_sd,
            self.comparator_n,
        )
    }

    pub fn swapped(&self) -> Self {
        Self {
            intervention_mean: self.comparator_mean,
            intervention_sd: self.comparator_sd,
            intervention_n: self.comparator_n,
            comparator_mean: self.intervention_mean,
            comparator_sd: self.intervention_sd,
            comparator_n: self.intervention_n,
        }
    }
}

fn check_continuous_arm(arm: Arm, mean: f64, sd: f64, n: u64) -> Result<(), InvalidOutcome> {
    if !mean.is_finite() {
        return Err(InvalidOutcome::NonFinite { arm, field: "mean" });
    }
    if !sd.is_finite() {
        return Err(InvalidOutcome::NonFinite {
            arm,
            field: "standard_deviation",
        });
    }
    if sd < 0.0 {
        return Err(InvalidOutcome::NegativeValue {
            arm,
            field: "standard_deviation",
            value: sd,
        });
    }
    if n == 0 {
        return Err(InvalidOutcome::EmptyGroup { arm });
    }
    Ok(())
}

/// Variant tag of [`OutcomeData`], spelled as in the extraction schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeType {
    Binary,
    Continuous,
}

impl OutcomeType {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutcomeType::Binary => "binary",
            OutcomeType::Continuous => "continuous",
        }
    }

    /// Number of numeric fields the schema carries for this type.
    pub fn field_count(&self) -> usize {
        match self {
            OutcomeType::Binary => 4,
            OutcomeType::Continuous => 6,
        }
    }
}

impl fmt::Display for OutcomeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OutcomeType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(OutcomeType::Binary),
            "continuous" => Ok(OutcomeType::Continuous),
            other => Err(format!("unknown outcome type `{other}`")),
        }
    }
}

/// One extracted numeric field, typed as the schema types it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldValue {
    Count(u64),
    Real(f64),
}

/// Arm-level numbers for one study outcome.
///
/// Serializes to the same nested layout as the extraction schema:
/// `{"outcome_type": "binary", "intervention": {"events": .., "total": ..}, ...}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutcomeData {
    Binary(BinaryArms),
    Continuous(ContinuousArms),
}

impl OutcomeData {
    pub fn outcome_type(&self) -> OutcomeType {
        match self {
            OutcomeData::Binary(_) => OutcomeType::Binary,
            OutcomeData::Continuous(_) => OutcomeType::Continuous,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidOutcome> {
        match self {
            OutcomeData::Binary(arms) => arms.validate(),
            OutcomeData::Continuous(arms) => arms.validate(),
        }
    }

    /// Numeric fields in canonical comparison order.
    ///
    /// Binary: intervention events, intervention total, comparator events,
    /// comparator total. Continuous: intervention mean, sd, n, then the
    /// comparator in the same order.
    pub fn fields(&self) -> Vec<FieldValue> {
        match self {
            OutcomeData::Binary(b) => vec![
                FieldValue::Count(b.intervention_events),
                FieldValue::Count(b.intervention_total),
                FieldValue::Count(b.comparator_events),
                FieldValue::Count(b.comparator_total),
            ],
            OutcomeData::Continuous(c) => vec![
                FieldValue::Real(c.intervention_mean),
                FieldValue::Real(c.intervention_sd),
                FieldValue::Count(c.intervention_n),
                FieldValue::Real(c.comparator_mean),
                FieldValue::Real(c.comparator_sd),
                FieldValue::Count(c.comparator_n),
            ],
        }
    }

    pub fn swapped(&self) -> Self {
        match self {
            OutcomeData::Binary(b) => OutcomeData::Binary(b.swapped()),
            OutcomeData::Continuous(c) => OutcomeData::Continuous(c.swapped()),
        }
    }
}

/// Scale an estimate lives on; fixes the null value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Ratio,
    Difference,
}

impl Scale {
    /// Value of no effect.
    pub fn null_value(&self) -> f64 {
        match self {
            Scale::Ratio => 1.0,
            Scale::Difference => 0.0,
        }
    }

    /// Map a natural-scale value onto the scale intervals are symmetric on.
    pub fn to_analysis(&self, value: f64) -> f64 {
        match self {
            Scale::Ratio => value.ln(),
            Scale::Difference => value,
        }
    }

    pub fn from_analysis(&self, value: f64) -> f64 {
        match self {
            Scale::Ratio => value.exp(),
            Scale::Difference => value,
        }
    }
}

/// Point estimate with its 95% interval.
///
/// `std_error` is on the analysis scale: log scale for ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub point: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub scale: Scale,
    pub estimable: bool,
}

impl EffectEstimate {
    pub fn not_estimable(scale: Scale) -> Self {
        Self {
            point: f64::NAN,
            std_error: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            scale,
            estimable: false,
        }
    }

    /// Build from an analysis-scale centre and standard error.
    pub fn from_analysis(scale: Scale, centre: f64, std_error: f64) -> Self {
        let half = Z_95 * std_error;
        Self {
            point: scale.from_analysis(centre),
            std_error,
            ci_low: scale.from_analysis(centre - half),
            ci_high: scale.from_analysis(centre + half),
            scale,
            estimable: true,
        }
    }

    /// Width of the interval on the analysis scale.
    pub fn analysis_width(&self) -> f64 {
        self.scale.to_analysis(self.ci_high) - self.scale.to_analysis(self.ci_low)
    }
}

/// Study-level conclusion drawn from the interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conclusion {
    FavorsIntervention,
    FavorsComparator,
    Inconclusive,
    NotEstimable,
}

impl Conclusion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Conclusion::FavorsIntervention => "favors_intervention",
            Conclusion::FavorsComparator => "favors_comparator",
            Conclusion::Inconclusive => "inconclusive",
            Conclusion::NotEstimable => "not_estimable",
        }
    }

    /// The label a study would get with its arms exchanged.
    pub fn mirrored(&self) -> Self {
        match self {
            Conclusion::FavorsIntervention => Conclusion::FavorsComparator,
            Conclusion::FavorsComparator => Conclusion::FavorsIntervention,
            other => *other,
        }
    }
}

impl fmt::Display for Conclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Conclusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "favors_intervention" => Ok(Conclusion::FavorsIntervention),
            "favors_comparator" => Ok(Conclusion::FavorsComparator),
            "inconclusive" => Ok(Conclusion::Inconclusive),
            "not_estimable" => Ok(Conclusion::NotEstimable),
            other => Err(format!("unknown conclusion `{other}`")),
        }
    }
}

/// Cell counts after the zero-cell policy, or `None` when no relative
/// effect can be estimated (no events in either arm).
///
/// Returns `(a, b, c, d)`: events and non-events per arm.
pub fn corrected_cells(arms: &BinaryArms) -> Option<(f64, f64, f64, f64)> {
    let a = arms.intervention_events as f64;
    let b = (arms.intervention_total - arms.intervention_events) as f64;
    let c = arms.comparator_events as f64;
    let d = (arms.comparator_total - arms.comparator_events) as f64;
    match (arms.intervention_events, arms.comparator_events) {
        (0, 0) => None,
        (0, _) | (_, 0) => {
            let k = CONTINUITY_CORRECTION;
            Some((a + k, b + k, c + k, d + k))
        }
        _ => Some((a, b, c, d)),
    }
}

/// Risk ratio with a log-scale 95% interval.
pub fn estimate_binary(arms: &BinaryArms) -> Result<EffectEstimate, InvalidOutcome> {
    arms.validate()?;
    let Some((a, b, c, d)) = corrected_cells(arms) else {
        return Ok(EffectEstimate::not_estimable(Scale::Ratio));
    };
    let n1 = a + b;
    let n2 = c + d;
    let log_rr = ((a / n1) / (c / n2)).ln();
    let variance = 1.0 / a - 1.0 / n1 + 1.0 / c - 1.0 / n2;
    // Rounding can push the variance of two full-event arms a hair below zero.
    let std_error = variance.max(0.0).sqrt();
    let estimate = EffectEstimate::from_analysis(Scale::Ratio, log_rr, std_error);
    if !(estimate.point.is_finite() && estimate.point > 0.0 && estimate.ci_low > 0.0) {
        return Ok(EffectEstimate::not_estimable(Scale::Ratio));
    }
    Ok(estimate)
}

/// Mean difference with a normal 95% interval.
pub fn estimate_continuous(arms: &ContinuousArms) -> Result<EffectEstimate, InvalidOutcome> {
    arms.validate()?;
    let md = arms.intervention_mean - arms.comparator_mean;
    let std_error = (arms.intervention_sd.powi(2) / arms.intervention_n as f64
        + arms.comparator_sd.powi(2) / arms.comparator_n as f64)
        .sqrt();
    Ok(EffectEstimate::from_analysis(
        Scale::Difference,
        md,
        std_error,
    ))
}

/// Conclusion from the interval's position relative to the null.
/// A bound equal to the null is inconclusive.
pub fn derive_conclusion(est: &EffectEstimate) -> Conclusion {
    if !est.estimable {
        return Conclusion::NotEstimable;
    }
    let null = est.scale.null_value();
    if est.ci_low > null {
        Conclusion::FavorsIntervention
    } else if est.ci_high < null {
        Conclusion::FavorsComparator
    } else {
        Conclusion::Inconclusive
    }
}

pub fn estimate(data: &OutcomeData) -> Result<(EffectEstimate, Conclusion), InvalidOutcome> {
    let est = match data {
        OutcomeData::Binary(arms) => estimate_binary(arms)?,
        OutcomeData::Continuous(arms) => estimate_continuous(arms)?,
    };
    Ok((est, derive_conclusion(&est)))
}

// Wire form shared by the JSONL corpus and the YAML extraction schema.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct BinaryArmWire {
    pub events: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ContinuousArmWire {
    pub mean: f64,
    pub standard_deviation: f64,
    pub group_size: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "outcome_type", rename_all = "lowercase")]
pub(crate) enum OutcomeWire {
    Binary {
        intervention: BinaryArmWire,
        comparator: BinaryArmWire,
    },
    Continuous {
        intervention: ContinuousArmWire,
        comparator: ContinuousArmWire,
    },
}

#[derive(Serialize)]
struct BinaryArmOut {
    events: u64,
    total: u64,
}

#[derive(Serialize)]
struct ContinuousArmOut {
    mean: f64,
    standard_deviation: f64,
    group_size: u64,
}

#[derive(Serialize)]
#[serde(tag = "outcome_type", rename_all = "lowercase")]
enum OutcomeOut {
    Binary {
        intervention: BinaryArmOut,
        comparator: BinaryArmOut,
    },
    Continuous {
        intervention: ContinuousArmOut,
        comparator: ContinuousArmOut,
    },
}

impl Serialize for OutcomeData {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let out = match self {
            OutcomeData::Binary(b) => OutcomeOut::Binary {
                intervention: BinaryArmOut {
                    events: b.intervention_events,
                    total: b.intervention_total,
                },
                comparator: BinaryArmOut {
                    events: b.comparator_events,
                    total: b.comparator_total,
                },
            },
            OutcomeData::Continuous(c) => OutcomeOut::Continuous {
                intervention: ContinuousArmOut {
                    mean: c.intervention_mean,
                    standard_deviation: c.intervention_sd,
                    group_size: c.intervention_n,
                },
                comparator: ContinuousArmOut {
                    mean: c.comparator_mean,
                    standard_deviation: c.comparator_sd,
                    group_size: c.comparator_n,
                },
            },
        };
        out.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for OutcomeData {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = OutcomeWire::deserialize(deserializer)?;
        crate::schema::outcome_from_wire(&wire).map_err(serde::de::Error::custom)
    }
}

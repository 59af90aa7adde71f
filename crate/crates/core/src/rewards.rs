//! Rule-based rewards for extraction responses and the group-relative
//! policy optimisation arithmetic built on them.
//!
//! Everything here is a pure function over already-computed quantities:
//! per-token probability ratios and KL terms are inputs, not something this
//! module samples or differentiates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::outcome::{FieldValue, OutcomeData};
use crate::schema::{validate_format, ExtractionOutput};

/// Absolute tolerance for comparing real-valued fields.
pub const REAL_TOLERANCE: f64 = 1e-3;

pub const CORRECTNESS_WEIGHT: f64 = 0.8;
pub const FORMAT_WEIGHT: f64 = 0.1;
pub const THOUGHT_FORMAT_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub correctness: f64,
    pub format: u8,
    pub thought_format: u8,
    pub exact: u8,
    pub combined: f64,
}

/// Whether two fields agree: exact for counts, within [`REAL_TOLERANCE`]
/// for reals.
pub fn field_matches(predicted: FieldValue, gold: FieldValue) -> bool {
    match (predicted, gold) {
        (FieldValue::Count(p), FieldValue::Count(g)) => p == g,
        (FieldValue::Real(p), FieldValue::Real(g)) => (p - g).abs() < REAL_TOLERANCE,
        _ => false,
    }
}

/// Positional match vector, or `None` when the variants differ.
pub fn match_vector(predicted: &OutcomeData, gold: &OutcomeData) -> Option<Vec<bool>> {
    if predicted.outcome_type() != gold.outcome_type() {
        return None;
    }
    Some(
        predicted
            .fields()
            .into_iter()
            .zip(gold.fields())
            .map(|(p, g)| field_matches(p, g))
            .collect(),
    )
}

/// Smoothed fraction of matching fields: `(1 + matches) / (1 + n)`, or 0
/// when parsing failed or the outcome types differ.
pub fn correctness_reward(candidate: &ExtractionOutput, gold: &OutcomeData) -> f64 {
    let Some(matches) = candidate.data.as_ref().and_then(|d| match_vector(d, gold)) else {
        return 0.0;
    };
    let hits = matches.iter().filter(|m| **m).count();
    (1 + hits) as f64 / (1 + matches.len()) as f64
}

pub fn format_reward(candidate: &ExtractionOutput) -> u8 {
    u8::from(validate_format(candidate, candidate.outcome_type()))
}

pub fn thought_format_reward(candidate: &ExtractionOutput) -> u8 {
    u8::from(candidate.thought_format_valid)
}

/// 1 only when every field matches.
pub fn exact_reward(candidate: &ExtractionOutput, gold: &OutcomeData) -> u8 {
    let all = candidate
        .data
        .as_ref()
        .and_then(|d| match_vector(d, gold))
        .is_some_and(|m| m.iter().all(|x| *x));
    u8::from(all)
}

pub fn combined_reward(candidate: &ExtractionOutput, gold: &OutcomeData) -> RewardBreakdown {
    let correctness = correctness_reward(candidate, gold);
    let format = format_reward(candidate);
    let thought_format = thought_format_reward(candidate);
    RewardBreakdown {
        correctness,
        format,
        thought_format,
        exact: exact_reward(candidate, gold),
        combined: CORRECTNESS_WEIGHT * correctness
            + FORMAT_WEIGHT * f64::from(format)
            + THOUGHT_FORMAT_WEIGHT * f64::from(thought_format),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRewards {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Normalise rewards within one group: `(r - mean) / sd` with the
/// population standard deviation. A group whose rewards are all equal gets
/// zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<GroupRewards> {
    group_advantages_with_epsilon(rewards, 0.0)
}

/// As [`group_advantages`], with `epsilon` added to the variance under the
/// square root.
pub fn group_advantages_with_epsilon(rewards: &[f64], epsilon: f64) -> Result<GroupRewards> {
    if rewards.len() < 2 {
        return Err(Error::Validation(format!(
            "a reward group needs at least 2 responses, got {}",
            rewards.len()
        )));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Validation(format!("reward {bad} is not finite")));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Validation(format!("epsilon {epsilon} must be >= 0")));
    }
    let first = rewards[0];
    let advantages = if rewards.iter().all(|r| *r == first) {
        vec![0.0; rewards.len()]
    } else {
        let g = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / g;
        let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
        let sd = (variance + epsilon).sqrt();
        rewards.iter().map(|r| (r - mean) / sd).collect()
    };
    Ok(GroupRewards {
        rewards: rewards.to_vec(),
        advantages,
    })
}

/// Per-token quantities for one sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    /// Current over old policy probability, per token.
    pub ratio: Vec<f64>,
    /// KL penalty to the reference policy, per token.
    pub ref_kl: Vec<f64>,
}

impl TokenTrace {
    pub fn new(ratio: Vec<f64>, ref_kl: Vec<f64>) -> Result<Self> {
        let trace = Self { ratio, ref_kl };
        trace.validate()?;
        Ok(trace)
    }

    pub fn len(&self) -> usize {
        self.ratio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratio.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.ratio.is_empty() || self.ratio.len() != self.ref_kl.len() {
            return Err(Error::Validation(format!(
                "trace needs equal, non-zero lengths (ratio {}, ref_kl {})",
                self.ratio.len(),
                self.ref_kl.len()
            )));
        }
        if let Some(r) = self.ratio.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::Validation(format!(
                "probability ratio {r} must be positive"
            )));
        }
        if let Some(k) = self.ref_kl.iter().find(|k| !(**k >= 0.0 && k.is_finite())) {
            return Err(Error::Validation(format!("KL term {k} must be >= 0")));
        }
        Ok(())
    }
}

/// Per-token KL estimate `r - ln r - 1` with `r = pi_ref / pi_theta`,
/// from the two log-probabilities of the sampled token.
pub fn kl_estimate(policy_logprob: f64, ref_logprob: f64) -> f64 {
    let log_r = ref_logprob - policy_logprob;
    log_r.exp() - log_r - 1.0
}

/// Clipped, KL-regularised surrogate objective averaged over tokens then
/// over the group. This is the value to maximise; a loss is its negation.
pub fn grpo_objective(
    traces: &[TokenTrace],
    advantages: &[f64],
    epsilon: f64,
    beta: f64,
) -> Result<f64> {
    if traces.is_empty() || traces.len() != advantages.len() {
        return Err(Error::Validation(format!(
            "{} traces for {} advantages",
            traces.len(),
            advantages.len()
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Validation(format!(
            "epsilon {epsilon} must lie in (0, 1)"
        )));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Validation(format!("beta {beta} must be >= 0")));
    }
    let mut total = 0.0;
    for (trace, &advantage) in traces.iter().zip(advantages) {
        trace.validate()?;
        let per_token: f64 = trace
            .ratio
            .iter()
            .zip(&trace.ref_kl)
            .map(|(&ratio, &kl)| {
                let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
                (ratio * advantage).min(clipped * advantage) - beta * kl
            })
            .sum();
        total += per_token / trace.len() as f64;
    }
    Ok(total / traces.len() as f64)
}

/// Negative log-likelihood of the target tokens.
pub fn sft_nll(target_logprobs: &[f64]) -> Result<f64> {
    if let Some(lp) = target_logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
        return Err(Error::Validation(format!(
            "log-probability {lp} must be <= 0"
        )));
    }
    Ok(-target_logprobs.iter().sum::<f64>())
}

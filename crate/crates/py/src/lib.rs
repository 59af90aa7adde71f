//! Python bindings for the evisynth core library.

// pyo3 0.22 macro expansion trips this lint on every `PyResult` function.
#![allow(clippy::useless_conversion)]

use evisynth::forestplot::{pool_fixed_effect, render_svg, PlotRow, PlotSpec};
use evisynth::outcome::{self, BinaryArms, ContinuousArms, OutcomeData, Scale};
use evisynth::rewards::{self, TokenTrace};
use evisynth::{schema, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyIOError::new_err(e.to_string())
    }
}

fn invalid(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scale_name(scale: Scale) -> &'static str {
    match scale {
        Scale::Ratio => "ratio",
        Scale::Difference => "difference",
    }
}

/// Point estimate with its 95% interval. `std_error` is on the log scale
/// for ratios.
#[pyclass(name = "EffectEstimate", module = "evisynth", frozen)]
#[derive(Clone)]
pub struct PyEffectEstimate {
    inner: outcome::EffectEstimate,
}

#[pymethods]
impl PyEffectEstimate {
    #[getter]
    fn point(&self) -> f64 {
        self.inner.point
    }

    #[getter]
    fn std_error(&self) -> f64 {
        self.inner.std_error
    }

    #[getter]
    fn ci_low(&self) -> f64 {
        self.inner.ci_low
    }

    #[getter]
    fn ci_high(&self) -> f64 {
        self.inner.ci_high
    }

    /// `"ratio"` or `"difference"`.
    #[getter]
    fn scale(&self) -> &'static str {
        scale_name(self.inner.scale)
    }

    #[getter]
    fn estimable(&self) -> bool {
        self.inner.estimable
    }

    fn conclusion(&self) -> &'static str {
        outcome::derive_conclusion(&self.inner).as_str()
    }

    fn __repr__(&self) -> String {
        let e = &self.inner;
        if !e.estimable {
            return format!(
                "EffectEstimate(scale='{}', estimable=False)",
                scale_name(e.scale)
            );
        }
        format!(
            "EffectEstimate(point={:.4}, ci=({:.4}, {:.4}), scale='{}')",
            e.point,
            e.ci_low,
            e.ci_high,
            scale_name(e.scale)
        )
    }
}

/// Result of parsing one model response.
#[pyclass(name = "ExtractionOutput", module = "evisynth", frozen)]
pub struct PyExtractionOutput {
    inner: schema::ExtractionOutput,
}

#[pymethods]
impl PyExtractionOutput {
    #[getter]
    fn raw_text(&self) -> &str {
        &self.inner.raw_text
    }

    #[getter]
    fn thought(&self) -> Option<&str> {
        self.inner.thought.as_deref()
    }

    #[getter]
    fn outcome_type(&self) -> Option<&'static str> {
        self.inner.outcome_type().map(|t| t.as_str())
    }

    #[getter]
    fn yaml_valid(&self) -> bool {
        self.inner.yaml_valid
    }

    #[getter]
    fn thought_format_valid(&self) -> bool {
        self.inner.thought_format_valid
    }

    #[getter]
    fn error(&self) -> Option<String> {
        self.inner.error.as_ref().map(|e| e.to_string())
    }

    /// Extracted values in schema order, or `None` if parsing failed.
    #[getter]
    fn fields(&self) -> Option<Vec<f64>> {
        self.inner.data.as_ref().map(|d| {
            d.fields()
                .into_iter()
                .map(|f| match f {
                    outcome::FieldValue::Count(n) => n as f64,
                    outcome::FieldValue::Real(x) => x,
                })
                .collect()
        })
    }

    /// Extracted data as corpus JSON, or `None` if parsing failed.
    fn data_json(&self) -> Option<String> {
        self.inner
            .data
            .as_ref()
            .map(|d| serde_json::to_string(d).expect("outcome data serializes"))
    }

    fn __repr__(&self) -> String {
        let py_bool = |b: bool| if b { "True" } else { "False" };
        let outcome_type = self
            .outcome_type()
            .map_or_else(|| "None".to_string(), |t| format!("'{t}'"));
        format!(
            "ExtractionOutput(outcome_type={outcome_type}, yaml_valid={}, thought_format_valid={})",
            py_bool(self.inner.yaml_valid),
            py_bool(self.inner.thought_format_valid)
        )
    }
}

#[pyclass(name = "RewardBreakdown", module = "evisynth", frozen, get_all)]
pub struct PyRewardBreakdown {
    correctness: f64,
    format: u8,
    thought_format: u8,
    exact: u8,
    combined: f64,
}

#[pymethods]
impl PyRewardBreakdown {
    fn __repr__(&self) -> String {
        format!(
            "RewardBreakdown(correctness={:.4}, format={}, thought_format={}, exact={}, combined={:.4})",
            self.correctness, self.format, self.thought_format, self.exact, self.combined
        )
    }
}

fn gold_from_json(gold: &str) -> PyResult<OutcomeData> {
    serde_json::from_str(gold).map_err(invalid)
}

/// Risk ratio of intervention events `a` of `n1` against comparator
/// events `c` of `n2`.
#[pyfunction]
fn estimate_binary(a: u64, n1: u64, c: u64, n2: u64) -> PyResult<PyEffectEstimate> {
    let arms = BinaryArms::new(a, n1, c, n2).map_err(invalid)?;
    let inner = outcome::estimate_binary(&arms).map_err(invalid)?;
    Ok(PyEffectEstimate { inner })
}

/// Mean difference between two arms given mean, SD and size of each.
#[pyfunction]
fn estimate_continuous(
    m1: f64,
    sd1: f64,
    n1: u64,
    m2: f64,
    sd2: f64,
    n2: u64,
) -> PyResult<PyEffectEstimate> {
    let arms = ContinuousArms::new(m1, sd1, n1, m2, sd2, n2).map_err(invalid)?;
    let inner = outcome::estimate_continuous(&arms).map_err(invalid)?;
    Ok(PyEffectEstimate { inner })
}

#[pyfunction]
fn derive_conclusion(estimate: &PyEffectEstimate) -> &'static str {
    outcome::derive_conclusion(&estimate.inner).as_str()
}

#[pyfunction]
fn parse_response(raw: &str) -> PyExtractionOutput {
    PyExtractionOutput {
        inner: schema::parse_response(raw),
    }
}

/// Reward of a raw response against gold data given as corpus JSON.
#[pyfunction]
fn combined_reward(response: &str, gold_json: &str) -> PyResult<PyRewardBreakdown> {
    let gold = gold_from_json(gold_json)?;
    let b = rewards::combined_reward(&schema::parse_response(response), &gold);
    Ok(PyRewardBreakdown {
        correctness: b.correctness,
        format: b.format,
        thought_format: b.thought_format,
        exact: b.exact,
        combined: b.combined,
    })
}

#[pyfunction]
fn correctness_reward(response: &str, gold_json: &str) -> PyResult<f64> {
    let gold = gold_from_json(gold_json)?;
    Ok(rewards::correctness_reward(
        &schema::parse_response(response),
        &gold,
    ))
}

#[pyfunction]
fn group_advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    rewards::group_advantages(&rewards)
        .map(|g| g.advantages)
        .map_err(to_py_err)
}

#[pyfunction]
fn kl_estimate(policy_logprob: f64, ref_logprob: f64) -> f64 {
    rewards::kl_estimate(policy_logprob, ref_logprob)
}

/// Clipped surrogate objective; `ratios[i]` and `ref_kl[i]` are the
/// per-token values of response `i`.
#[pyfunction]
fn grpo_objective(
    ratios: Vec<Vec<f64>>,
    ref_kl: Vec<Vec<f64>>,
    advantages: Vec<f64>,
    epsilon: f64,
    beta: f64,
) -> PyResult<f64> {
    if ratios.len() != ref_kl.len() {
        return Err(invalid(format!(
            "{} ratio rows for {} KL rows",
            ratios.len(),
            ref_kl.len()
        )));
    }
    let traces = ratios
        .into_iter()
        .zip(ref_kl)
        .map(|(r, k)| TokenTrace::new(r, k))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py_err)?;
    rewards::grpo_objective(&traces, &advantages, epsilon, beta).map_err(to_py_err)
}

#[pyfunction]
fn sft_nll(target_logprobs: Vec<f64>) -> PyResult<f64> {
    rewards::sft_nll(&target_logprobs).map_err(to_py_err)
}

fn plot_rows(
    labels: Vec<String>,
    estimates: &[PyRef<'_, PyEffectEstimate>],
) -> PyResult<Vec<PlotRow>> {
    if labels.len() != estimates.len() {
        return Err(invalid(format!(
            "{} labels for {} estimates",
            labels.len(),
            estimates.len()
        )));
    }
    Ok(labels
        .into_iter()
        .zip(estimates)
        .map(|(l, e)| PlotRow::new(l, e.inner))
        .collect())
}

/// Inverse-variance fixed-effect pooled estimate.
#[pyfunction]
fn pool(estimates: Vec<PyRef<'_, PyEffectEstimate>>) -> PyResult<PyEffectEstimate> {
    let labels = vec![String::new(); estimates.len()];
    let mut rows = plot_rows(labels, &estimates)?;
    evisynth::forestplot::normalize_weights(&mut rows);
    let inner = pool_fixed_effect(&rows).map_err(to_py_err)?;
    Ok(PyEffectEstimate { inner })
}

/// Forest plot as an SVG document.
#[pyfunction]
#[pyo3(signature = (labels, estimates, pooled = false))]
fn render_forest_plot(
    labels: Vec<String>,
    estimates: Vec<PyRef<'_, PyEffectEstimate>>,
    pooled: bool,
) -> PyResult<String> {
    let rows = plot_rows(labels, &estimates)?;
    let spec = PlotSpec::build(rows, pooled).map_err(to_py_err)?;
    render_svg(&spec).map_err(to_py_err)
}

#[pymodule]
#[pyo3(name = "evisynth")]
pub fn evisynth_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEffectEstimate>()?;
    m.add_class::<PyExtractionOutput>()?;
    m.add_class::<PyRewardBreakdown>()?;
    m.add_function(wrap_pyfunction!(estimate_binary, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_continuous, m)?)?;
    m.add_function(wrap_pyfunction!(derive_conclusion, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(combined_reward, m)?)?;
    m.add_function(wrap_pyfunction!(correctness_reward, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(kl_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_objective, m)?)?;
    m.add_function(wrap_pyfunction!(sft_nll, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(render_forest_plot, m)?)?;
    Ok(())
}

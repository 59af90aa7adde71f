use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::with_gil(|py| {
        let module = pyo3::wrap_pymodule!(evisynth_py::evisynth_module)(py);
        let locals = PyDict::new_bound(py);
        locals.set_item("evisynth", module).unwrap();
        if let Err(e) = py.run_bound(code, None, Some(&locals)) {
            e.print(py);
            panic!("python code failed");
        }
    });
}

#[test]
fn estimates_and_conclusions() {
    run(r#"
e = evisynth.estimate_binary(8, 23, 2, 22)
assert abs(e.point - 3.83) < 0.01 and e.scale == "ratio"
assert abs(e.ci_low - 0.91) < 0.01 and abs(e.ci_high - 16.07) < 0.01
assert e.conclusion() == "inconclusive" == evisynth.derive_conclusion(e)
d = evisynth.estimate_continuous(5.22, 2.22, 48, 3.08, 1.81, 51)
assert abs(d.point - 2.14) < 1e-12 and d.conclusion() == "favors_intervention"
assert not evisynth.estimate_binary(0, 5, 0, 5).estimable
try:
    evisynth.estimate_binary(9, 3, 1, 1)
    raise AssertionError("expected ValueError")
except ValueError as err:
    assert "exceed" in str(err)
"#);
}

#[test]
fn parsing_and_rewards() {
    run(r#"
raw = "<think>\nok\n</think>\noutcome_type: binary\nintervention:\nevents: 8 total: 23\ncomparator:\nevents: 2 total: 22\n"
out = evisynth.parse_response(raw)
assert out.yaml_valid and out.thought_format_valid and out.outcome_type == "binary"
assert out.fields == [8.0, 23.0, 2.0, 22.0]
gold = out.data_json()
r = evisynth.combined_reward(raw, gold)
assert r.correctness == 1.0 and r.combined == 1.0 and r.exact == 1
near = raw.replace("events: 2", "events: 3")
assert abs(evisynth.correctness_reward(near, gold) - 0.8) < 1e-12
bad = evisynth.parse_response("nothing here")
assert not bad.yaml_valid and bad.fields is None and bad.error
"#);
}

#[test]
fn training_math() {
    run(r#"
a = evisynth.group_advantages([1.0, 0.0])
assert a == [1.0, -1.0]
assert evisynth.group_advantages([0.5, 0.5, 0.5]) == [0.0, 0.0, 0.0]
v = evisynth.grpo_objective([[1.2]], [[0.0]], [1.0], epsilon=0.2, beta=0.0)
assert abs(v - 1.2) < 1e-12
assert evisynth.kl_estimate(-1.0, -1.0) == 0.0
assert abs(evisynth.sft_nll([-0.5, -0.25]) - 0.75) < 1e-12
try:
    evisynth.group_advantages([1.0])
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#);
}

#[test]
fn pooling_and_plots() {
    run(r#"
rows = [evisynth.estimate_binary(8, 23, 2, 22), evisynth.estimate_binary(12, 40, 6, 38)]
p = evisynth.pool(rows)
assert p.ci_high - p.ci_low < min(r.ci_high - r.ci_low for r in rows)
svg = evisynth.render_forest_plot(["Hawkey", "Other"], rows, pooled=True)
assert svg == evisynth.render_forest_plot(["Hawkey", "Other"], rows, pooled=True)
assert "Total (fixed effect)" in svg and "Hawkey" in svg
"#);
}

#[test]
fn reprs_read_as_python() {
    run(r#"
assert repr(evisynth.parse_response("x")) == "ExtractionOutput(outcome_type=None, yaml_valid=False, thought_format_valid=False)"
assert repr(evisynth.estimate_binary(0, 3, 0, 3)) == "EffectEstimate(scale='ratio', estimable=False)"
"#);
}

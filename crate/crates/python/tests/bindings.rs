use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(rd_toolkit_py::rd_toolkit_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("rd", module).unwrap();
        f(py, &globals);
    });
}

fn run(py: Python<'_>, globals: &Bound<'_, PyDict>, code: &str) {
    let code = CString::new(code).unwrap();
    if let Err(e) = py.run(&code, Some(globals), None) {
        e.print(py);
        panic!("python snippet failed");
    }
}

#[test]
fn sharp_step_through_python() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
xs = [-1 + (2 * i + 1) / 400 for i in range(400)]
s = rd.Sample(xs, [1.0 if x >= 0 else 0.0 for x in xs])
assert len(s) == 400 and s.cutoff == 0.0
r = rd.estimate(s, h=0.3, kernel="uniform")
assert abs(r["estimate"]["tau_hat"] - 1.0) < 1e-9
assert r["bandwidth"] is None
assert r["config"]["h_below"] == 0.3
"#,
        );
    });
}

#[test]
fn simulated_sample_and_auto_bandwidth() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
s = rd.Sample.simulate("linear", 2000, seed=3)
r = rd.estimate(s)
assert r["bandwidth"]["h_mse"] > 0
assert abs(r["estimate"]["tau_hat"] - 1.0) < 0.3
lo, hi = r["rbc"]["ci_rbc"]["lower"], r["rbc"]["ci_rbc"]["upper"]
assert lo < r["rbc"]["bias_corrected"] < hi
sel = rd.select_bandwidth(s, p=1)
assert sel["h_ce"] < sel["h_mse"]
"#,
        );
    });
}

#[test]
fn locrand_exact_three_units() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
s = rd.Sample([-0.2, -0.1, 0.1], [0.0, 1.0, 2.0])
f = rd.fisher_pvalue(s, 1.0)
assert f["exact"] and f["p_value"] == 2 / 3
r = rd.locrand(s, 1.0, framework="fisher")
assert r["estimate"]["tau_hat"] == 1.5
assert "neyman" not in r
"#,
        );
    });
}

#[test]
fn errors_carry_the_core_code() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
try:
    rd.Sample([0.1, 0.2], [1.0])
except rd.RdToolkitError as e:
    assert str(e).startswith("LengthMismatch"), str(e)
    assert isinstance(e, ValueError)
else:
    raise AssertionError("expected an error")
try:
    rd.estimate(rd.Sample([0.1, 0.2], [1.0, 2.0]), kernel="gaussian")
except rd.RdToolkitError as e:
    assert "unknown kernel" in str(e)
else:
    raise AssertionError("expected an error")
"#,
        );
    });
}

#[test]
fn power_and_mde() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
m = rd.mde(1.0)
assert abs(m - 2.801585) < 1e-5
assert abs(rd.power(m, 1.0) - 0.8) < 1e-9
assert abs(rd.power(0.0, 1.0, alpha=0.1) - 0.1) < 1e-12
"#,
        );
    });
}

#[test]
fn validation_and_plot_dicts() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
import random
random.seed(1)
xs = [random.uniform(-1, 1) for _ in range(800)]
z = [random.gauss(0, 1) for _ in xs]
ys = [x + (1.0 if x >= 0 else 0.0) + random.gauss(0, 0.3) for x in xs]
s = rd.Sample(xs, ys, covariates={"z": z})
assert s.covariate_names == ["z"]
rep = rd.validate(s, covariates=["z"], window=0.2, draws=499)
assert rep["balance"][0]["covariate"] == "z"
assert 0 <= rep["density"]["p_value"] <= 1
p = rd.rdplot(s, bins=(5, 5), svg=True)
assert len(p["bins_below"]) == 5 and p["svg"].rstrip().endswith("</svg>")
w = rd.select_window(s, ["z"], [0.1, 0.2, 0.4], draws=199)
assert len(w["trace"]) == 3
"#,
        );
    });
}

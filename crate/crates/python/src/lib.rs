//! Python bindings: metrics on plain lists, the reference scenario, and the
//! command-line entry point.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::thermoshield::experiments::{Setting, Setup};
use ::thermoshield::metrics;
use ::thermoshield::model::{Trace, Unit};
use ::thermoshield::report::summary_rows;
use ::thermoshield::scenario::Scenario;

fn to_py(e: ::thermoshield::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn trace(rows: Vec<Vec<f64>>, sample_interval: f64, unit: Unit, prefix: &str) -> PyResult<Trace> {
    let width = rows.first().map_or(0, Vec::len);
    let channels = (0..width).map(|c| format!("{prefix}{c}")).collect();
    Trace::from_rows(sample_interval, channels, &rows, unit).map_err(to_py)
}

/// SVF of two sample-major traces at delay `k`, pooled over tiled windows.
#[pyfunction]
#[pyo3(signature = (inst, temp, k=0, window=0, stride=0, sample_interval=2e-3))]
fn svf(
    inst: Vec<Vec<f64>>,
    temp: Vec<Vec<f64>>,
    k: usize,
    window: usize,
    stride: usize,
    sample_interval: f64,
) -> PyResult<f64> {
    let inst = trace(inst, sample_interval, Unit::Instructions, "i")?;
    let temp = trace(temp, sample_interval, Unit::Celsius, "t")?;
    let end = inst.num_samples().min(temp.num_samples()).saturating_sub(k);
    let windows = metrics::tiled_windows(0, end, window, stride);
    metrics::svf(&inst, &temp, k, &windows)
        .map(|r| r.svf)
        .map_err(to_py)
}

/// Delay in `0..=k_max` that maximizes |SVF|, with that SVF.
#[pyfunction]
#[pyo3(signature = (inst, temp, k_max, window=0, stride=0, sample_interval=2e-3))]
fn best_delay(
    inst: Vec<Vec<f64>>,
    temp: Vec<Vec<f64>>,
    k_max: usize,
    window: usize,
    stride: usize,
    sample_interval: f64,
) -> PyResult<(usize, f64)> {
    let inst = trace(inst, sample_interval, Unit::Instructions, "i")?;
    let temp = trace(temp, sample_interval, Unit::Celsius, "t")?;
    let end = inst
        .num_samples()
        .min(temp.num_samples())
        .saturating_sub(k_max);
    let windows = metrics::tiled_windows(0, end, window, stride);
    metrics::best_delay(&inst, &temp, k_max, &windows)
        .map(|(k, r)| (k, r.svf))
        .map_err(to_py)
}

#[pyfunction]
fn stsf(n: usize, m: usize) -> PyResult<f64> {
    metrics::stsf(n, m).map(|r| r.stsf).map_err(to_py)
}

#[pyfunction]
fn effective_groups(block_temps: Vec<f64>, epsilon: f64) -> usize {
    metrics::effective_groups(&block_temps, epsilon)
}

#[pyfunction]
fn reference_scenario() -> String {
    Scenario::reference().to_toml()
}

/// Summary rows `(setting, svf, mpu, power_overhead, stsf)` for one
/// benchmark of the reference scenario at the given increments.
#[pyfunction]
#[pyo3(signature = (benchmark, increments=vec![3.5, 7.0]))]
fn evaluate_reference(
    benchmark: &str,
    increments: Vec<f64>,
) -> PyResult<Vec<(String, f64, f64, f64, f64)>> {
    let mut scenario = Scenario::reference();
    scenario.workload.benchmarks = vec![benchmark.to_string()];
    let setup = Setup::new(scenario).map_err(to_py)?;
    let settings: Vec<Setting> = increments.into_iter().map(Setting::Increment).collect();
    let mut out = Vec::new();
    for w in setup.workloads().map_err(to_py)? {
        let result = setup.evaluate(&w, &settings).map_err(to_py)?;
        out.extend(
            summary_rows(&result, true)
                .into_iter()
                .map(|r| (r.setting, r.svf, r.mpu, r.power_overhead, r.stsf)),
        );
    }
    Ok(out)
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit status.
#[pyfunction]
fn main(args: Vec<String>) -> i32 {
    ::thermoshield::cli::main_with_args(std::iter::once("thermoshield".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "thermoshield")]
fn thermoshield_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(svf, m)?)?;
    m.add_function(wrap_pyfunction!(best_delay, m)?)?;
    m.add_function(wrap_pyfunction!(stsf, m)?)?;
    m.add_function(wrap_pyfunction!(effective_groups, m)?)?;
    m.add_function(wrap_pyfunction!(reference_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_reference, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}

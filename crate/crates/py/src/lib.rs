//! Python bindings: the CLI commands plus exact soft evaluation of a finite MDP.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vmbpo::dp::{value_iteration, SolverConfig};
use vmbpo::envs::{make_chain, make_gridworld, make_twist2};
use vmbpo::error::Error;
use vmbpo::harness::{cmd_check, cmd_solve, cmd_train, RunConfig};
use vmbpo::mdp::FiniteMdp;
use vmbpo::tables::{TabularPolicy, Temperature};
use vmbpo::variational::OperatorMode;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } => PyValueError::new_err(e.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load(config: &str) -> PyResult<RunConfig> {
    RunConfig::load(config).map_err(to_py)
}

/// Exact EM on the configured finite MDP; writes the solve CSVs into `out`.
#[pyfunction]
fn solve(config: &str, out: PathBuf) -> PyResult<()> {
    cmd_solve(&load(config)?, &out).map_err(to_py)
}

/// Trains one run per seed and returns the final returns.
#[pyfunction]
#[pyo3(signature = (config, out, seeds = vec![0]))]
fn train(config: &str, out: PathBuf, seeds: Vec<u64>) -> PyResult<Vec<f64>> {
    cmd_train(&load(config)?, &seeds, &out).map(|s| s.final_returns).map_err(to_py)
}

/// Runs the configured check suites; returns `(report, all_passed)`.
#[pyfunction]
#[pyo3(signature = (config, out, seeds = vec![0]))]
fn check(config: &str, out: PathBuf, seeds: Vec<u64>) -> PyResult<(String, bool)> {
    cmd_check(&load(config)?, &seeds, &out).map_err(to_py)
}

/// JSON of a built-in fixture: `"chain"`, `"twist2"` or `"gridworld"`.
#[pyfunction]
#[pyo3(signature = (name, size = 3))]
fn fixture(name: &str, size: usize) -> PyResult<String> {
    let mdp = match name {
        "chain" => make_chain(),
        "twist2" => make_twist2(),
        "gridworld" => make_gridworld(size).map_err(to_py)?,
        other => return Err(PyValueError::new_err(format!("unknown fixture {other:?}"))),
    };
    mdp.to_json_string().map_err(to_py)
}

/// Soft values `V_pi` of `policy` (one row per state) on the MDP given as JSON.
#[pyfunction]
#[pyo3(signature = (mdp_json, policy, eta = 1.0))]
fn soft_values(mdp_json: &str, policy: Vec<Vec<f64>>, eta: f64) -> PyResult<Vec<f64>> {
    let mdp = FiniteMdp::from_json_str(mdp_json).map_err(to_py)?;
    let pi = TabularPolicy::from_rows(policy).map_err(to_py)?;
    let eta = Temperature::new(eta).map_err(to_py)?;
    let sol = value_iteration(&mdp, eta, &pi, OperatorMode::ModelFree, &SolverConfig::default()).map_err(to_py)?;
    Ok(sol.v_pi.into_vec())
}

#[pymodule]
fn vmbpo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(fixture, m)?)?;
    m.add_function(wrap_pyfunction!(soft_values, m)?)?;
    Ok(())
}

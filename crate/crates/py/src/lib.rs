//! Python module `mfhinf_py`.
//!
//! Problems are passed as a fixture name (`"sysA"`, `"sysB"`, `"zero"`,
//! `"nomf"`) or as the JSON text of a problem file. Trajectories come back as
//! nested lists indexed `[node][row][col]`.

use mfhinf::brl::{brl_cdre_solve, hinf_norm, BrlOptions};
use mfhinf::closedloop::{synthesize, ClosedLoopOptions};
use mfhinf::mcsim::{self, Estimate, Policy};
use mfhinf::model::{fixtures, parse_problem};
use mfhinf::openloop::openloop_solve;
use mfhinf::{Error, InitialLaw, MFSystem, MatrixTrajectory, SolverSettings};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(mfhinf_py, Infeasible, PyException);

fn to_py(e: Error) -> PyErr {
    if e.is_infeasible() {
        Infeasible::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn load(problem: &str) -> PyResult<(MFSystem, InitialLaw, SolverSettings)> {
    let text = fixtures::text(problem).unwrap_or(problem);
    parse_problem(text).map_err(to_py)
}

fn nested(t: &MatrixTrajectory) -> Vec<Vec<Vec<f64>>> {
    let (r, c) = t.shape();
    t.values()
        .iter()
        .map(|m| (0..r).map(|i| (0..c).map(|j| m[(i, j)]).collect()).collect())
        .collect()
}

fn nodes(t: &MatrixTrajectory) -> Vec<f64> {
    t.grid().nodes().collect()
}

/// Smallest feasible attenuation level, to within `tol`.
#[pyfunction]
#[pyo3(signature = (problem, tol=None))]
fn gamma_star(problem: &str, tol: Option<f64>) -> PyResult<f64> {
    let (sys, _, st) = load(problem)?;
    hinf_norm(&sys, tol.unwrap_or(st.bisect_tol), &BrlOptions::with_delta(st.delta_margin)).map_err(to_py)
}

/// Bounded-real test at `gamma`. Raises `Infeasible` when it fails.
#[pyfunction]
#[pyo3(signature = (problem, gamma=None))]
fn brl<'py>(py: Python<'py>, problem: &str, gamma: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let (sys, law, st) = load(problem)?;
    let sol = brl_cdre_solve(&sys, gamma.unwrap_or(sys.gamma), &BrlOptions::with_delta(st.delta_margin))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("s", nodes(&sol.p))?;
    d.set_item("j1_star", sol.optimal_cost(&sys, &law))?;
    d.set_item("P", nested(&sol.p))?;
    d.set_item("Pi", nested(&sol.pi))?;
    d.set_item("F", nested(&sol.gain))?;
    d.set_item("Fbar", nested(&sol.gain_bar))?;
    d.set_item("f", nested(&sol.offset))?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (problem, gamma=None))]
fn synth_closed<'py>(py: Python<'py>, problem: &str, gamma: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let (sys, law, st) = load(problem)?;
    let opts = ClosedLoopOptions { delta1: st.delta_margin, delta2: st.delta_margin };
    let sol = synthesize(&sys, gamma.unwrap_or(sys.gamma), &law, &opts).map_err(to_py)?;
    let (r, a) = (&sol.riccati, &sol.affine);
    let d = PyDict::new(py);
    d.set_item("s", nodes(&r.p1))?;
    d.set_item("j1_star", sol.j1star)?;
    d.set_item("j2_star", sol.j2star)?;
    d.set_item("gainbound_ok", sol.gainbound_ok)?;
    for (k, t) in [
        ("P1", &r.p1),
        ("P2", &r.p2),
        ("Pi1", &r.pi1),
        ("Pi2", &r.pi2),
        ("U", &r.u),
        ("Ubar", &r.ubar),
        ("V", &r.v),
        ("Vbar", &r.vbar),
        ("U0", &a.u0),
        ("V0", &a.v0),
    ] {
        d.set_item(k, nested(t))?;
    }
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (problem, gamma=None))]
fn synth_open<'py>(py: Python<'py>, problem: &str, gamma: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let (sys, _, st) = load(problem)?;
    let sol = openloop_solve(&sys, gamma.unwrap_or(sys.gamma)).map_err(to_py)?;
    let cert = sol.certificate(&sys, st.bisect_tol).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("s", nodes(sol.k()))?;
    d.set_item("certificate", cert.to_string())?;
    d.set_item("K", nested(sol.k()))?;
    d.set_item("Ktilde", nested(sol.ktilde()))?;
    d.set_item("chi", nested(&sol.chi))?;
    Ok(d)
}

/// Monte Carlo costs under the closed-loop pair (`"closed"`), the
/// open-loop pair (`"open"`) or no inputs (`"zero"`).
/// Returns `((j1, se1), (j2, se2))`.
#[pyfunction]
#[pyo3(signature = (problem, policy="closed", paths=None, seed=None))]
fn simulate(
    problem: &str,
    policy: &str,
    paths: Option<usize>,
    seed: Option<u64>,
) -> PyResult<((f64, f64), (f64, f64))> {
    let (sys, law, st) = load(problem)?;
    let (pu, pv) = match policy {
        "zero" => (Policy::zero(sys.n_u), Policy::zero(sys.n_v)),
        "closed" => {
            let opts = ClosedLoopOptions { delta1: st.delta_margin, delta2: st.delta_margin };
            let sol = synthesize(&sys, sys.gamma, &law, &opts).map_err(to_py)?;
            (Policy::feedback(sol.control_law()), Policy::feedback(sol.disturbance_law()))
        }
        "open" => {
            let sol = openloop_solve(&sys, sys.gamma).map_err(to_py)?;
            (Policy::feedback(sol.control_law()), Policy::feedback(sol.disturbance_law()))
        }
        other => return Err(PyValueError::new_err(format!("unknown policy {other:?}"))),
    };
    let ens = mcsim::simulate(&sys, &pu, &pv, &law, paths.unwrap_or(st.mc_paths), seed.unwrap_or(st.seed))
        .map_err(to_py)?;
    let (j1, j2) = (Estimate::from_samples(&ens.j1), Estimate::from_samples(&ens.j2));
    Ok(((j1.value, j1.se), (j2.value, j2.se)))
}

#[pymodule]
fn mfhinf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("Infeasible", m.py().get_type::<Infeasible>())?;
    m.add("FIXTURES", fixtures::NAMES.to_vec())?;
    m.add_function(wrap_pyfunction!(gamma_star, m)?)?;
    m.add_function(wrap_pyfunction!(brl, m)?)?;
    m.add_function(wrap_pyfunction!(synth_closed, m)?)?;
    m.add_function(wrap_pyfunction!(synth_open, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}

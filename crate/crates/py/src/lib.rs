//! Python bindings: profiles, kernel solves, gains, simulation and the
//! experiment pipeline.

use std::path::PathBuf;

use core::controller::{evaluate_controls, gains_from_table, settling_time, ControlGains};
use core::experiment::{self, CaseSelection};
use core::geometry::{build_phi_maps, classify_speed_case, CoefficientProfile, PhiMaps, SpeedCase};
use core::grid::PlantGrid;
use core::kernel::{
    kernel_bound_check, kernel_residual, solve_kernels_with, KernelGrid, KernelName, KernelTable,
    SolveOptions, SolverDiagnostics,
};
use core::simulator::{simulate, OpenLoop, PlantState, SimConfig};
use core::Error;
use hyperbolic_backstepping as core;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(backstep, ConvergenceError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NoConvergence { .. } => ConvergenceError::new_err(e.to_string()),
        Error::Io { .. } => pyo3::exceptions::PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn kernel_name(name: &str) -> PyResult<KernelName> {
    KernelName::ALL
        .into_iter()
        .find(|k| k.as_str().eq_ignore_ascii_case(name))
        .ok_or_else(|| PyValueError::new_err(format!("unknown kernel {name:?}")))
}

/// Spatially varying coefficients `lambda, mu, b, c` on `[-1, 1]`.
#[pyclass(name = "CoefficientProfile", frozen)]
struct PyProfile {
    inner: CoefficientProfile,
}

#[pymethods]
impl PyProfile {
    /// `lambda = 3 + w^2`, `mu = 2 + w^4`, `b = 3 e^{3w}`, `c = 1 + w`.
    #[staticmethod]
    fn paper_example() -> PyResult<Self> {
        CoefficientProfile::example(experiment::PROFILE_INTERVALS)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (lam, mu, b=0.0, c=0.0))]
    fn constant(lam: f64, mu: f64, b: f64, c: f64) -> PyResult<Self> {
        CoefficientProfile::constant(lam, mu, b, c, experiment::PROFILE_INTERVALS)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// Samples on a uniform grid over `[-1, 1]` (even interval count).
    #[staticmethod]
    fn from_samples(lam: Vec<f64>, mu: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> PyResult<Self> {
        CoefficientProfile::from_samples(lam, mu, b, c)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn speeds(&self, w: f64) -> (f64, f64) {
        (self.inner.lambda(w), self.inner.mu(w))
    }

    fn couplings(&self, w: f64) -> (f64, f64) {
        (self.inner.b(w), self.inner.c(w))
    }

    /// `(case_number, margin)`.
    #[pyo3(signature = (tol=core::geometry::DEFAULT_CLASSIFICATION_TOL))]
    fn classify(&self, tol: f64) -> PyResult<(u8, f64)> {
        let c = classify_speed_case(&self.inner, tol).map_err(to_py)?;
        Ok((c.case.number(), c.margin))
    }

    fn settling_time(&self) -> PyResult<f64> {
        let (phi, case) = phi_and_case(&self.inner, None)?;
        Ok(settling_time(&phi, case))
    }

    fn __repr__(&self) -> String {
        format!(
            "CoefficientProfile(speed range [{:.4}, {:.4}])",
            self.inner.min_speed(),
            self.inner.max_speed()
        )
    }
}

fn phi_and_case(profile: &CoefficientProfile, case: Option<u8>) -> PyResult<(PhiMaps, SpeedCase)> {
    let selection = match case {
        None => CaseSelection::Auto,
        Some(n) => CaseSelection::parse(&n.to_string()).map_err(to_py)?,
    };
    let (case, _) = experiment::resolve_case(
        profile,
        selection,
        core::geometry::DEFAULT_CLASSIFICATION_TOL,
    )
    .map_err(to_py)?;
    let phi = build_phi_maps(profile, core::geometry::DEFAULT_PHI_NODES).map_err(to_py)?;
    Ok((phi, case))
}

/// Solved kernels with their solver diagnostics.
#[pyclass(name = "Kernels", frozen)]
struct PyKernels {
    profile: CoefficientProfile,
    kernels: KernelGrid,
    diag: SolverDiagnostics,
}

#[pymethods]
impl PyKernels {
    #[getter]
    fn case(&self) -> u8 {
        self.kernels.case().number()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.diag.iterations
    }

    #[getter]
    fn increments(&self) -> Vec<f64> {
        self.diag.increment_norms.clone()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.diag.warnings.clone()
    }

    #[getter]
    fn settling_time(&self) -> f64 {
        settling_time(self.kernels.phi(), self.kernels.case())
    }

    /// Kernel value at `(z, w)`; `name` is one of L11, L12, L21, L22.
    fn eval(&self, name: &str, z: f64, w: f64) -> PyResult<f64> {
        if !(w.abs() <= 1.0 && z.abs() <= w.abs()) {
            return Err(to_py(Error::OutOfDomain { z, w }));
        }
        Ok(self.kernels.eval(kernel_name(name)?, z, w))
    }

    /// `(sup, l2)` of the interior PDE residual.
    fn residual(&self) -> (f64, f64) {
        let r = kernel_residual(&self.kernels, &self.profile);
        (r.sup, r.l2)
    }

    /// `(passed, worst_slack)` of the a priori bound check.
    fn bound_check(&self) -> (bool, f64) {
        let b = kernel_bound_check(&self.kernels, &self.diag);
        (b.passed, b.worst_slack)
    }

    /// Boundary gains sampled on a plant grid of `nodes` points.
    #[pyo3(signature = (nodes=core::simulator::DEFAULT_NODES))]
    fn gains(&self, nodes: usize) -> PyResult<PyGains> {
        let grid = PlantGrid::new(nodes).map_err(to_py)?;
        let table = KernelTable::new(&self.kernels, grid);
        Ok(PyGains {
            inner: gains_from_table(&table, self.kernels.phi()),
        })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(&path)?;
        self.kernels.write_csv(std::io::BufWriter::new(f))?;
        Ok(())
    }
}

#[pyfunction]
#[pyo3(signature = (profile, case=None, nodes=core::kernel::DEFAULT_KERNEL_NODES, tol=core::kernel::DEFAULT_PICARD_TOL))]
fn solve_kernels(
    py: Python<'_>,
    profile: &PyProfile,
    case: Option<u8>,
    nodes: usize,
    tol: f64,
) -> PyResult<PyKernels> {
    let p = profile.inner.clone();
    let (phi, case) = phi_and_case(&p, case)?;
    let opts = SolveOptions {
        tol,
        ..SolveOptions::with_nodes(nodes)
    };
    let (kernels, diag) = py
        .detach(|| solve_kernels_with(&p, &phi, case, &opts))
        .map_err(to_py)?;
    Ok(PyKernels {
        profile: p,
        kernels,
        diag,
    })
}

/// Boundary gain traces `g11, g12` (at `w = -1`) and `g21, g22` (at `w = 1`).
#[pyclass(name = "Gains", frozen)]
struct PyGains {
    inner: ControlGains,
}

#[pymethods]
impl PyGains {
    #[getter]
    fn z(&self) -> Vec<f64> {
        self.inner.grid().nodes()
    }
    #[getter]
    fn g11(&self) -> Vec<f64> {
        self.inner.g11.clone()
    }
    #[getter]
    fn g12(&self) -> Vec<f64> {
        self.inner.g12.clone()
    }
    #[getter]
    fn g21(&self) -> Vec<f64> {
        self.inner.g21.clone()
    }
    #[getter]
    fn g22(&self) -> Vec<f64> {
        self.inner.g22.clone()
    }
    #[getter]
    fn tf(&self) -> f64 {
        self.inner.tf
    }

    /// `(U1, U2)` for a state sampled on the gain grid.
    fn controls(&self, u: Vec<f64>, v: Vec<f64>) -> PyResult<(f64, f64)> {
        let g = self.inner.grid();
        g.check_len("u", u.len()).map_err(to_py)?;
        g.check_len("v", v.len()).map_err(to_py)?;
        Ok(evaluate_controls(&u, &v, &self.inner))
    }
}

/// Simulates from sampled initial data; returns `(t, l2, U1, U2)` lists.
/// Without gains the boundary inputs are zero.
#[pyfunction]
#[pyo3(signature = (profile, u0, v0, t_final, gains=None, cfl=core::simulator::DEFAULT_CFL))]
fn simulate_plant(
    py: Python<'_>,
    profile: &PyProfile,
    u0: Vec<f64>,
    v0: Vec<f64>,
    t_final: f64,
    gains: Option<&PyGains>,
    cfl: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let grid = PlantGrid::new(u0.len()).map_err(to_py)?;
    let initial = PlantState::new(&grid, u0, v0).map_err(to_py)?;
    let cfg = SimConfig::new(grid.len(), cfl, t_final).map_err(to_py)?;
    if let Some(g) = gains {
        g.inner
            .grid()
            .check_len("gains", grid.len())
            .map_err(to_py)?;
    }
    let gains = gains.map(|g| &g.inner);
    let rec = py
        .detach(|| {
            let fb: &dyn core::simulator::BoundaryFeedback = match gains {
                Some(g) => g,
                None => &OpenLoop,
            };
            simulate(&profile.inner, &cfg, initial, fb, |_| {})
        })
        .map_err(to_py)?;
    let n = &rec.norms;
    Ok((
        n.iter().map(|s| s.t).collect(),
        n.iter().map(|s| s.l2).collect(),
        n.iter().map(|s| s.u1).collect(),
        n.iter().map(|s| s.u2).collect(),
    ))
}

/// Validates TOML experiment text; returns the normalized config as JSON.
#[pyfunction]
fn validate_config(raw: &str) -> PyResult<String> {
    let cfg = experiment::validate_config(raw).map_err(to_py)?;
    serde_json::to_string(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs an experiment from a TOML file, writes its artifacts and returns
/// the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn run_experiment(py: Python<'_>, config: PathBuf, out: Option<PathBuf>) -> PyResult<String> {
    let mut cfg = experiment::load_config(&config).map_err(to_py)?;
    if let Some(o) = out {
        cfg.output = o;
    }
    let run = py
        .detach(|| experiment::run_experiment(&cfg))
        .map_err(to_py)?;
    serde_json::to_string(&run.summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn backstep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProfile>()?;
    m.add_class::<PyKernels>()?;
    m.add_class::<PyGains>()?;
    m.add_function(wrap_pyfunction!(solve_kernels, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_plant, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("ConvergenceError", m.py().get_type::<ConvergenceError>())?;
    Ok(())
}

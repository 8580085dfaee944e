//! Python bindings: datasets, spectral decomposition, networks and training,
//! closed-form trajectories, metrics, the NTK check and the response model.
//! Matrices cross the boundary as row-major lists of lists.

use ocs_core::analytic::{self, Depth, TrajectoryParams};
use ocs_core::metrics::{self, metrics_series, timing_summary};
use ocs_core::network::{init_network, BiasPlacement, InitMode, NetworkConfig, NetworkState};
use ocs_core::ntk::{ntk_compare, ntk_output_step, OutputBiasTerm};
use ocs_core::response::{self, DiscretizationConfig, TemperatureRule};
use ocs_core::spectral::{self, correlation_matrices, task_svd, ModeDecomposition};
use ocs_core::task_data::{self, CorrelatedInputSpec, HierarchySpec, LevelSlice};
use ocs_core::trainer::{self, TrainConfig};
use ocs_core::{Matrix, Vector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: ocs_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn depth(name: &str) -> PyResult<Depth> {
    match name {
        "deep" => Ok(Depth::Deep),
        "shallow" => Ok(Depth::Shallow),
        _ => Err(PyValueError::new_err(format!(
            "depth must be deep or shallow, got {name}"
        ))),
    }
}

fn bias(name: &str) -> PyResult<BiasPlacement> {
    match name {
        "none" => Ok(BiasPlacement::None),
        "input" => Ok(BiasPlacement::Input),
        "output" => Ok(BiasPlacement::Output),
        "both" => Ok(BiasPlacement::Both),
        _ => Err(PyValueError::new_err(format!(
            "bias must be none, input, output or both, got {name}"
        ))),
    }
}

fn init_mode(name: &str) -> PyResult<InitMode> {
    match name {
        "spectral" => Ok(InitMode::Spectral),
        "random_small" => Ok(InitMode::RandomSmall),
        "exact_isotropy" => Ok(InitMode::ExactIsotropy),
        _ => Err(PyValueError::new_err(format!(
            "init must be spectral, random_small or exact_isotropy, got {name}"
        ))),
    }
}

fn output_term(name: &str) -> PyResult<OutputBiasTerm> {
    match name {
        "per_unit" => Ok(OutputBiasTerm::PerUnit),
        "all_units" => Ok(OutputBiasTerm::AllUnits),
        _ => Err(PyValueError::new_err(format!(
            "output_term must be per_unit or all_units, got {name}"
        ))),
    }
}

fn discretization(temperature: f64, picks: usize, multiply: bool) -> DiscretizationConfig {
    DiscretizationConfig {
        temperature,
        picks,
        seed: 0,
        rule: if multiply {
            TemperatureRule::Multiply
        } else {
            TemperatureRule::Divide
        },
    }
}

/// Inputs `x` (features x samples) with targets `y` (outputs x samples).
#[pyclass(name = "Dataset", module = "ocs_dynamics", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: task_data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (x, y, level_slices, name = "custom".to_string()))]
    fn new(
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        level_slices: Vec<LevelSlice>,
        name: String,
    ) -> PyResult<Self> {
        let inner =
            task_data::Dataset::new(name, from_rows(&x)?, from_rows(&y)?, level_slices, false)
                .map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (depth = 3, branching = 2, include_root = true))]
    fn hierarchy(depth: usize, branching: usize, include_root: bool) -> PyResult<Self> {
        let spec = HierarchySpec {
            depth,
            branching,
            include_root,
        };
        Ok(PyDataset {
            inner: task_data::build_hierarchy(&spec).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn imbalance() -> Self {
        PyDataset {
            inner: task_data::build_imbalance_case(),
        }
    }

    /// Synthetic inputs for the targets of `targets`.
    #[staticmethod]
    #[pyo3(signature = (targets, n_in, shared_scale = 1.0, noise_scale = 0.1, orthogonalized = false, seed = 0))]
    fn correlated(
        targets: &PyDataset,
        n_in: usize,
        shared_scale: f64,
        noise_scale: f64,
        orthogonalized: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = CorrelatedInputSpec {
            n: targets.inner.samples(),
            n_in,
            shared_scale,
            noise_scale,
            orthogonalized,
            seed,
        };
        Ok(PyDataset {
            inner: task_data::build_correlated(&spec, &targets.inner).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, level_slices = None))]
    fn load(path: &str, level_slices: Option<Vec<LevelSlice>>) -> PyResult<Self> {
        Ok(PyDataset {
            inner: task_data::load_dataset(path, level_slices.as_deref()).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        task_data::save_dataset(&self.inner, path).map_err(py_err)
    }

    /// Copy with a constant input feature of value 1 prepended.
    fn augment(&self) -> PyResult<Self> {
        Ok(PyDataset {
            inner: task_data::augment_bias(&self.inner).map_err(py_err)?,
        })
    }

    fn decompose(&self) -> PyResult<PyDecomposition> {
        let inner = task_svd(&correlation_matrices(&self.inner)).map_err(py_err)?;
        Ok(PyDecomposition { inner })
    }

    fn commutator_residual(&self) -> f64 {
        spectral::commutator_check(&self.inner, spectral::JOINT_DIAGONAL_TOL).residual
    }

    /// Mean target, the optimal constant solution.
    fn ocs(&self) -> Vec<f64> {
        spectral::ocs_vector(&self.inner).iter().copied().collect()
    }

    fn ocs_baseline_tnr(&self) -> PyResult<Vec<Option<f64>>> {
        metrics::ocs_baseline_tnr(&self.inner).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.x)
    }

    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.y)
    }

    #[getter]
    fn level_slices(&self) -> Vec<LevelSlice> {
        self.inner.level_slices.clone()
    }

    #[getter]
    fn samples(&self) -> usize {
        self.inner.samples()
    }

    #[getter]
    fn n_in(&self) -> usize {
        self.inner.n_in()
    }

    #[getter]
    fn n_out(&self) -> usize {
        self.inner.n_out()
    }

    #[getter]
    fn bias_augmented(&self) -> bool {
        self.inner.bias_augmented
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, samples={}, n_in={}, n_out={})",
            self.inner.name,
            self.inner.samples(),
            self.inner.n_in(),
            self.inner.n_out()
        )
    }
}

/// Task modes `Σyx = U diag(s) V^T` with input eigenvalues when jointly diagonal.
#[pyclass(name = "Decomposition", module = "ocs_dynamics", skip_from_py_object)]
#[derive(Clone)]
struct PyDecomposition {
    inner: ModeDecomposition,
}

#[pymethods]
impl PyDecomposition {
    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.inner.s.clone()
    }

    #[getter]
    fn input_eigenvalues(&self) -> Option<Vec<f64>> {
        self.inner.d().map(<[f64]>::to_vec)
    }

    #[getter]
    fn u(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.u)
    }

    #[getter]
    fn v(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.v)
    }

    #[getter]
    fn ocs_index(&self) -> Option<usize> {
        self.inner.ocs_index
    }

    #[getter]
    fn jointly_diagonal(&self) -> bool {
        self.inner.jointly_diagonal()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    /// Closed-form strength of every mode at each time.
    #[pyo3(signature = (times, a0 = 1e-4, tau = 1000.0, depth = "deep"))]
    fn trajectories(
        &self,
        times: Vec<f64>,
        a0: f64,
        tau: f64,
        depth: &str,
    ) -> PyResult<Vec<Vec<f64>>> {
        let params =
            analytic::mode_params(&self.inner, a0, tau, self::depth(depth)?).map_err(py_err)?;
        times
            .iter()
            .map(|&t| analytic::mode_strengths(&params, t).map_err(py_err))
            .collect()
    }
}

/// A shallow or two-layer linear network with optional biases.
#[pyclass(name = "Network", module = "ocs_dynamics")]
struct PyNetwork {
    inner: NetworkState,
    decomposition: Option<ModeDecomposition>,
}

#[pymethods]
impl PyNetwork {
    /// A spectral init uses the modes of `dataset`, bias-augmented when the
    /// bias acts on the inputs.
    #[new]
    #[pyo3(signature = (dataset, depth = "deep", bias = "none", init = "spectral", init_scale = 1e-4, n_hid = 16, seed = 0))]
    fn new(
        dataset: &PyDataset,
        depth: &str,
        bias: &str,
        init: &str,
        init_scale: f64,
        n_hid: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let depth = self::depth(depth)?;
        let bias = self::bias(bias)?;
        let d = &dataset.inner;
        let augmented = match depth {
            Depth::Deep => bias.input(),
            Depth::Shallow => bias.output(),
        };
        let task = if augmented {
            task_data::augment_bias(d).map_err(py_err)?
        } else {
            d.clone()
        };
        let dec = task_svd(&correlation_matrices(&task)).map_err(py_err)?;
        let cfg = NetworkConfig {
            depth,
            n_in: d.n_in(),
            n_hid: if depth == Depth::Shallow { 0 } else { n_hid },
            n_out: d.n_out(),
            bias,
            init: init_mode(init)?,
            init_scale,
            seed,
        };
        let inner = init_network(&cfg, Some(&dec)).map_err(py_err)?;
        Ok(PyNetwork {
            inner,
            decomposition: Some(dec),
        })
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = from_rows(&x)?;
        if x.nrows() != self.inner.n_in() {
            return Err(PyValueError::new_err(format!(
                "expected {} input rows, got {}",
                self.inner.n_in(),
                x.nrows()
            )));
        }
        Ok(to_rows(&self.inner.forward(&x)))
    }

    fn loss(&self, dataset: &PyDataset) -> PyResult<f64> {
        self.inner.loss(&dataset.inner).map_err(py_err)
    }

    /// Effective weights `W2 W1` (or `Ws`).
    fn product(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.product())
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.parameters()
    }

    fn gradient(&self, dataset: &PyDataset) -> PyResult<Vec<f64>> {
        let (_, g) = self
            .inner
            .loss_and_gradients(&dataset.inner)
            .map_err(py_err)?;
        Ok(g.flatten())
    }

    /// Full-batch gradient descent in place. Returns logged steps, loss, mode
    /// strengths, distance to the OCS, per-level TNR and the timing summary.
    #[pyo3(signature = (dataset, tau = 1000.0, steps = 10000, log_stride = 10, delta = 0.05))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &PyDataset,
        tau: f64,
        steps: usize,
        log_stride: usize,
        delta: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let d = &dataset.inner;
        let cfg = TrainConfig::from_tau(tau, d.samples(), steps, log_stride);
        let s = trainer::train(&mut self.inner, d, &cfg, self.decomposition.as_ref())
            .map_err(py_err)?;
        let m = metrics_series(&s, d).map_err(py_err)?;
        let t = timing_summary(&m, &s.loss, delta).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("steps", &s.steps)?;
        out.set_item("loss", &s.loss)?;
        out.set_item("modes", &s.modes)?;
        out.set_item("l1_to_ocs", &m.l1_to_ocs)?;
        out.set_item("tnr", &m.tnr)?;
        out.set_item("t_ocs", t.t_ocs)?;
        out.set_item("t_diff", t.t_diff)?;
        out.set_item("gradient_flow_warning", s.gradient_flow_warning)?;
        Ok(out)
    }

    /// Direct kernel against the closed form at the current weights.
    #[pyo3(signature = (dataset, output_term = "per_unit", epsilon = 1e-4))]
    fn ntk_check<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        output_term: &str,
        epsilon: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let c = ntk_compare(&self.inner, &dataset.inner, self::output_term(output_term)?)
            .map_err(py_err)?;
        let step = ntk_output_step(&self.inner, &dataset.inner, epsilon).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("sigma", c.sigma)?;
        out.set_item("relative_frobenius", c.relative_frobenius)?;
        out.set_item("max_abs", c.max_abs)?;
        out.set_item("one_step_relative_error", step.relative_error)?;
        out.set_item("warnings", c.warnings)?;
        Ok(out)
    }
}

#[pyfunction]
#[pyo3(signature = (s, d, a0, tau, t, depth = "deep"))]
fn mode_trajectory(s: f64, d: f64, a0: f64, tau: f64, t: f64, depth: &str) -> PyResult<f64> {
    let p = TrajectoryParams {
        s,
        d,
        a0,
        tau,
        depth: self::depth(depth)?,
    };
    analytic::mode_trajectory(&p, t).map_err(py_err)
}

#[pyfunction]
fn tnr(y_hat: Vec<f64>, y: Vec<f64>, level_slices: Vec<LevelSlice>) -> PyResult<Vec<Option<f64>>> {
    metrics::tnr(
        &Vector::from_vec(y_hat),
        &Vector::from_vec(y),
        &level_slices,
    )
    .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (y_hat, y, level_slices, temperature = 0.2, picks = 3, multiply = false))]
fn expected_tnr(
    y_hat: Vec<f64>,
    y: Vec<f64>,
    level_slices: Vec<LevelSlice>,
    temperature: f64,
    picks: usize,
    multiply: bool,
) -> PyResult<Vec<Option<f64>>> {
    response::expected_tnr(
        &Vector::from_vec(y_hat),
        &Vector::from_vec(y),
        &level_slices,
        &discretization(temperature, picks, multiply),
    )
    .map_err(py_err)
}

/// Every response set with its probability.
#[pyfunction]
#[pyo3(signature = (y_hat, temperature = 0.2, picks = 3, multiply = false))]
fn subset_distribution(
    y_hat: Vec<f64>,
    temperature: f64,
    picks: usize,
    multiply: bool,
) -> PyResult<Vec<(Vec<usize>, f64)>> {
    response::subset_distribution(
        &Vector::from_vec(y_hat),
        &discretization(temperature, picks, multiply),
    )
    .map_err(py_err)
}

#[pymodule]
fn ocs_dynamics(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyDecomposition>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(mode_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(tnr, m)?)?;
    m.add_function(wrap_pyfunction!(expected_tnr, m)?)?;
    m.add_function(wrap_pyfunction!(subset_distribution, m)?)?;
    Ok(())
}

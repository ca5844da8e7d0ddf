//! Python bindings for `focused_kv`.
//!
//! Configurations, budget tables, masks and reports cross the boundary as
//! JSON strings or plain lists so the Python side needs no extra packages.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use focused_kv::cost::memory_overhead;
use focused_kv::importance::{self, estimate_importance};
use focused_kv::rollout::{run_rollout, Policy as CorePolicy};
use focused_kv::{verify, Error, HeadBudgetTable, ModelShape, RopeSpec, RunConfig};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Shape(_) | Error::Integrity(_) => PyRuntimeError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Run configuration.
#[pyclass(name = "RunConfig", module = "focused_kv_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Small built-in configuration.
    #[staticmethod]
    fn desk_default() -> Self {
        Self {
            inner: RunConfig::desk_default(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        RunConfig::from_json_str(text).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.shape.num_layers
    }

    #[getter]
    fn heads_per_layer(&self) -> usize {
        self.inner.shape.heads_per_layer
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.shape;
        format!(
            "RunConfig(layers={}, heads={}, head_dim={}, seed={})",
            s.num_layers, s.heads_per_layer, s.head_dim, self.inner.seed
        )
    }
}

/// Frozen per-head KV budgets.
#[pyclass(name = "HeadBudgetTable", module = "focused_kv_py", skip_from_py_object)]
#[derive(Clone)]
struct PyHeadBudgetTable {
    inner: HeadBudgetTable,
}

#[pymethods]
impl PyHeadBudgetTable {
    #[staticmethod]
    #[pyo3(signature = (budgets, b_min, b_max, gamma=2.0))]
    fn from_budgets(budgets: Vec<Vec<u32>>, b_min: u32, b_max: u32, gamma: f64) -> PyResult<Self> {
        HeadBudgetTable::from_budgets(budgets, b_min, b_max, gamma)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn uniform(config: &PyRunConfig, budget: u32) -> PyResult<Self> {
        HeadBudgetTable::uniform(&config.inner.shape, budget)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        HeadBudgetTable::from_json_str(text).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn budgets(&self) -> Vec<Vec<u32>> {
        self.inner.budgets.clone()
    }

    #[getter]
    fn normalized(&self) -> Vec<Vec<f64>> {
        self.inner.normalized.clone()
    }

    #[getter]
    fn importance(&self) -> Vec<Vec<f64>> {
        self.inner.importance.clone()
    }

    fn total(&self) -> u64 {
        self.inner.total()
    }

    fn layer_sums(&self) -> Vec<u64> {
        self.inner.layer_sums()
    }

    fn __repr__(&self) -> String {
        format!(
            "HeadBudgetTable({}x{}, total={})",
            self.inner.layers,
            self.inner.heads,
            self.inner.total()
        )
    }
}

/// Output of one rollout.
#[pyclass(name = "Rollout", module = "focused_kv_py", get_all)]
struct PyRollout {
    trace_csv: String,
    masks_json: String,
    frame_costs: Vec<u64>,
    cache_frames: Vec<usize>,
    /// Flattened final hidden states, one list per generated frame.
    trajectory: Vec<Vec<f32>>,
}

#[pyfunction]
fn map_budget(normalized: f64, b_min: u32, b_max: u32, gamma: f64) -> PyResult<u32> {
    let params = focused_kv::config::BudgetParams { b_min, b_max, gamma };
    params.validate().map_err(to_py)?;
    Ok(importance::map_budget(normalized, &params))
}

#[pyfunction]
#[pyo3(signature = (scores, epsilon=1e-6))]
fn normalize_importance(scores: Vec<f64>, epsilon: f64) -> Vec<f64> {
    importance::normalize_importance(&scores, epsilon)
}

/// Masked-head importance estimation mapped to a budget table.
#[pyfunction]
#[pyo3(signature = (config, prompts=None))]
fn estimate_heads(py: Python<'_>, config: &PyRunConfig, prompts: Option<Vec<u64>>) -> PyResult<PyHeadBudgetTable> {
    let cfg = config.inner.clone();
    let prompts = prompts.unwrap_or_else(|| cfg.prompts.clone());
    py.detach(|| {
        let table = estimate_importance(&prompts, &cfg)?;
        HeadBudgetTable::from_importance(&table, &cfg.budget, cfg.epsilon)
    })
    .map(|inner| PyHeadBudgetTable { inner })
    .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (config, policy, num_chunks, budgets=None))]
fn rollout(
    py: Python<'_>,
    config: &PyRunConfig,
    policy: &str,
    num_chunks: usize,
    budgets: Option<&PyHeadBudgetTable>,
) -> PyResult<PyRollout> {
    let cfg = config.inner.clone();
    let policy = CorePolicy::parse(policy, &cfg.shape).map_err(to_py)?;
    let table = budgets.map(|b| b.inner.clone());
    let out = py
        .detach(|| run_rollout(&cfg, &policy, num_chunks, table.as_ref()))
        .map_err(to_py)?;
    Ok(PyRollout {
        trace_csv: out.trace.to_csv(),
        masks_json: out.masks.to_json().map_err(to_py)?,
        frame_costs: out.trace.chunks.iter().map(|c| c.frame_cost).collect(),
        cache_frames: out.trace.chunks.iter().map(|c| c.cache_frames).collect(),
        trajectory: out.trajectory.into_iter().map(|f| f.into_data()).collect(),
    })
}

/// Cost report as JSON. `shape_json = None` uses the reference backbone.
#[pyfunction]
#[pyo3(signature = (budgets, shape_json=None, bytes_per_element=2))]
fn cost_report(budgets: &PyHeadBudgetTable, shape_json: Option<&str>, bytes_per_element: u64) -> PyResult<String> {
    let shape = match shape_json {
        Some(s) => serde_json::from_str::<ModelShape>(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ModelShape::reference_backbone(),
    };
    let report = memory_overhead(&budgets.inner, &shape, bytes_per_element).map_err(to_py)?;
    serde_json::to_string_pretty(&report).map_err(|e| to_py(e.into()))
}

/// `(numeric, closed_form)` temporal logits for `q` at `t_q` and `k` at `t_k`.
#[pyfunction]
#[pyo3(signature = (q, k, t_q, t_k, blocks=None, base=10_000.0))]
fn temporal_logit(
    q: Vec<f64>,
    k: Vec<f64>,
    t_q: i64,
    t_k: i64,
    blocks: Option<Vec<usize>>,
    base: f64,
) -> PyResult<(f64, f64)> {
    let d = q.len();
    let spec = RopeSpec::with_base(d, blocks.unwrap_or_else(|| (0..d / 2).collect()), base).map_err(to_py)?;
    let numeric = spec.temporal_logit_numeric(&q, &k, t_q, t_k).map_err(to_py)?;
    let closed = spec.temporal_logit_closed_form(&q, &k, t_k - t_q).map_err(to_py)?;
    Ok((numeric, closed))
}

/// Runs the self-check suites; returns `(passed, report_text)`.
#[pyfunction(name = "verify")]
#[pyo3(signature = (seed=0, cases=200))]
fn run_verify(py: Python<'_>, seed: u64, cases: usize) -> PyResult<(bool, String)> {
    let report = py.detach(|| verify::run_all(seed, cases)).map_err(to_py)?;
    Ok((report.passed(), report.render()))
}

#[pymodule]
pub fn focused_kv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyHeadBudgetTable>()?;
    m.add_class::<PyRollout>()?;
    m.add_function(wrap_pyfunction!(map_budget, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_importance, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_heads, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_logit, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}

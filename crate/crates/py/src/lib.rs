//! Python bindings: tasks, flow networks, exact oracles, metrics, the two
//! meta-training loops, theory helpers and the experiment harness.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pgflow_core::env::{generate_frozen_lake, make_task};
use pgflow_core::harness::{self, ExperimentConfig, Stat};
use pgflow_core::meta::{gflowmeta_train, FlowTaskObjective, MetaConfig};
use pgflow_core::objective::PolicyTable;
use pgflow_core::pmeta::{pgflowmeta_train, PMetaConfig};
use pgflow_core::{metrics, oracle, theory, EnvKind, ParamVector, State, TaskParams, TaskSpec};

fn py_err(e: pgflow_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Cell = (usize, usize, bool);

/// `(round, task, step, loss)`.
type LossRow = (usize, usize, usize, f64);

fn cell(s: &State) -> Cell {
    (s.row, s.col, s.done)
}

fn state(c: Cell) -> State {
    State { row: c.0, col: c.1, done: c.2 }
}

/// One environment instance. States are `(row, col, done)` tuples.
#[pyclass(module = "pgflow", frozen, from_py_object)]
#[derive(Clone)]
struct Task {
    inner: pgflow_core::Task,
}

#[pymethods]
impl Task {
    #[staticmethod]
    fn grid_world(rows: usize, cols: usize, r0: f64) -> PyResult<Self> {
        let inner = make_task(EnvKind::GridWorld, rows, cols, TaskParams::GridWorld { r0 }, 0).map_err(py_err)?;
        Ok(Task { inner })
    }

    /// Random board with `holes` holes drawn from `seed`.
    #[staticmethod]
    fn frozen_lake(rows: usize, cols: usize, holes: usize, seed: u64) -> PyResult<Self> {
        Ok(Task { inner: generate_frozen_lake(rows, cols, holes, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn cliff_walking(rows: usize, cols: usize, cliff_length: usize) -> PyResult<Self> {
        let params = TaskParams::CliffWalking { cliff_length };
        Ok(Task { inner: make_task(EnvKind::CliffWalking, rows, cols, params, 0).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let spec = TaskSpec::from_toml(text).map_err(py_err)?;
        Ok(Task { inner: pgflow_core::Task::new(spec).map_err(py_err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.spec().to_toml()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn state_count(&self) -> usize {
        self.inner.state_count()
    }

    fn terminals(&self) -> Vec<(Cell, f64)> {
        self.inner.enumerate_terminals().iter().map(|(s, r)| (cell(s), *r)).collect()
    }

    fn modes(&self) -> Vec<Cell> {
        self.inner.modes().iter().map(cell).collect()
    }

    fn reward(&self, s: Cell) -> PyResult<f64> {
        self.inner.reward(&state(s)).map_err(py_err)
    }

    /// Terminal distribution proportional to reward.
    fn target_distribution(&self) -> Vec<(Cell, f64)> {
        oracle::exact_target_distribution(&self.inner).iter().map(|(s, p)| (cell(s), *p)).collect()
    }

    /// Exact edge flows keyed by `(state, action name)`.
    fn exact_flows(&self) -> Vec<((Cell, &'static str), f64)> {
        let mut flows: Vec<_> = oracle::exact_flows(&self.inner)
            .into_iter()
            .map(|((s, a), f)| ((cell(&s), a.as_str()), f))
            .collect();
        flows.sort_by(|a, b| a.0.cmp(&b.0));
        flows
    }

    fn __repr__(&self) -> String {
        format!("Task({} {}x{}, seed={})", self.kind(), self.rows(), self.cols(), self.inner.spec().seed)
    }
}

/// Edge-flow MLP sized for a task. Parameters travel as flat float lists.
#[pyclass(module = "pgflow", frozen, skip_from_py_object)]
#[derive(Clone)]
struct FlowNet {
    inner: pgflow_core::FlowNet,
}

#[pymethods]
impl FlowNet {
    #[new]
    #[pyo3(signature = (task, hidden = vec![32, 32]))]
    fn new(task: &Task, hidden: Vec<usize>) -> PyResult<Self> {
        Ok(FlowNet { inner: pgflow_core::FlowNet::for_task(&task.inner, &hidden).map_err(py_err)? })
    }

    /// Network that reproduces the task's exact flows.
    #[staticmethod]
    fn exact(task: &Task) -> PyResult<(Self, Vec<f64>)> {
        let flows = oracle::exact_flows(&task.inner);
        let (net, params) = oracle::flow_network(&task.inner, &flows).map_err(py_err)?;
        Ok((FlowNet { inner: net }, params.into_vec()))
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes().to_vec()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        self.inner.init_params(seed).into_vec()
    }

    /// Predicted outgoing edge flows of `state`, one per action slot.
    fn edge_flows(&self, task: &Task, params: Vec<f64>, state_: Cell) -> PyResult<Vec<f64>> {
        let input = pgflow_core::flownet::encode_state(&task.inner, &state(state_)).map_err(py_err)?;
        self.inner.edge_flows(&self.checked(params)?, &input).map_err(py_err)
    }

    /// Exact L1 distance between the induced terminal distribution and the target.
    fn exact_l1(&self, task: &Task, params: Vec<f64>) -> PyResult<f64> {
        let table = self.policy(task, params)?;
        metrics::exact_l1(&task.inner, &table).map_err(py_err)
    }

    /// Reward reached by following the most probable action from the root.
    fn greedy_reward(&self, task: &Task, params: Vec<f64>) -> PyResult<f64> {
        let table = self.policy(task, params)?;
        metrics::greedy_reward(&task.inner, &table).map_err(py_err)
    }

    fn expected_reward(&self, task: &Task, params: Vec<f64>) -> PyResult<f64> {
        let table = self.policy(task, params)?;
        metrics::expected_reward(&task.inner, &table).map_err(py_err)
    }
}

impl FlowNet {
    fn checked(&self, params: Vec<f64>) -> PyResult<ParamVector> {
        if params.len() != self.inner.param_count() {
            return Err(PyValueError::new_err(format!(
                "expected {} parameters, got {}",
                self.inner.param_count(),
                params.len()
            )));
        }
        Ok(ParamVector::from_vec(params))
    }

    fn policy(&self, task: &Task, params: Vec<f64>) -> PyResult<PolicyTable> {
        PolicyTable::from_net(&task.inner, &self.inner, &self.checked(params)?).map_err(py_err)
    }
}

fn objectives(tasks: &[Task], net: &FlowNet, batch_size: usize, explore_eps: f64) -> Vec<FlowTaskObjective> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| FlowTaskObjective::new(t.inner.clone(), net.inner.clone(), batch_size, explore_eps, i))
        .collect()
}

fn same_shape(tasks: &[Task], net: &FlowNet) -> PyResult<()> {
    for t in tasks {
        let expected = pgflow_core::flownet::encoding_dim(&t.inner);
        if expected != net.inner.input_dim() || t.inner.action_count() != net.inner.output_dim() {
            return Err(PyValueError::new_err("every task must match the network's input and output sizes"));
        }
    }
    Ok(())
}

/// Meta-train by averaging the tasks' SGD iterates each round. Returns the
/// meta parameters and the per-step losses in `(round, task, step, loss)` rows.
#[pyfunction]
#[pyo3(signature = (tasks, net, rounds = 30, inner_steps = 20, batch_size = 16, eta = 0.005, seed = 1, explore_eps = 0.1))]
#[allow(clippy::too_many_arguments)]
fn train_gflowmeta(
    py: Python<'_>,
    tasks: Vec<Task>,
    net: &FlowNet,
    rounds: usize,
    inner_steps: usize,
    batch_size: usize,
    eta: f64,
    seed: u64,
    explore_eps: f64,
) -> PyResult<(Vec<f64>, Vec<LossRow>)> {
    same_shape(&tasks, net)?;
    let cfg = MetaConfig { rounds, inner_steps, batch_size, eta, seed, explore_eps, ..MetaConfig::default() };
    let objs = objectives(&tasks, net, batch_size, explore_eps);
    let init = net.inner.init_params(seed);
    let (w, trace) = py
        .detach(|| gflowmeta_train(&objs, init, &cfg, &mut |_| Ok(())))
        .map_err(py_err)?;
    let rows = trace.iter().map(|r| (r.round, r.task_id, r.inner_step, r.loss)).collect();
    Ok((w.into_vec(), rows))
}

/// Personalized meta-training. Returns a dict with the meta parameters `w`,
/// per-task personalized parameters `thetas`, and per-round `grad_sq`,
/// `gap_avg` and `step_norm` lists.
#[pyfunction]
#[pyo3(signature = (
    tasks, net, rounds = 30, inner_steps = 20, batch_size = 16, eta = 0.005, seed = 1,
    lambda_ = 15.0, beta = 1.0, inner_lr = 1e-3, delta = 1e-2, max_inner_solve_steps = 50, explore_eps = 0.1
))]
#[allow(clippy::too_many_arguments)]
fn train_pgflowmeta<'py>(
    py: Python<'py>,
    tasks: Vec<Task>,
    net: &FlowNet,
    rounds: usize,
    inner_steps: usize,
    batch_size: usize,
    eta: f64,
    seed: u64,
    lambda_: f64,
    beta: f64,
    inner_lr: f64,
    delta: f64,
    max_inner_solve_steps: usize,
    explore_eps: f64,
) -> PyResult<Bound<'py, PyDict>> {
    same_shape(&tasks, net)?;
    let meta = MetaConfig { rounds, inner_steps, batch_size, eta, seed, explore_eps, ..MetaConfig::default() };
    let cfg = PMetaConfig { meta, lambda: lambda_, beta, inner_lr, delta, max_inner_solve_steps, ..PMetaConfig::default() };
    let objs = objectives(&tasks, net, batch_size, explore_eps);
    let init = net.inner.init_params(seed);
    let res = py
        .detach(|| pgflowmeta_train(&objs, init, &cfg, &mut |_| Ok(())))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("w", res.w.into_vec())?;
    out.set_item("thetas", res.thetas.into_iter().map(ParamVector::into_vec).collect::<Vec<_>>())?;
    out.set_item("grad_sq", res.rounds.iter().map(|r| r.grad_sq).collect::<Vec<_>>())?;
    out.set_item("gap_avg", res.rounds.iter().map(|r| r.gap_avg).collect::<Vec<_>>())?;
    out.set_item("step_norm", res.rounds.iter().map(|r| r.step_norm).collect::<Vec<_>>())?;
    Ok(out)
}

/// `(H0, H1, H2)` for a task: max reward, longest path, max in/out degree.
#[pyfunction]
fn env_constants(task: &Task) -> (f64, usize, usize) {
    let c = theory::compute_env_constants(&task.inner);
    (c.h0, c.h1, c.h2)
}

#[pyfunction]
fn l_ell(h0: f64, h1: f64, h2: f64, b: f64, l0: f64, l1: f64) -> f64 {
    theory::compute_l_ell(h0, h1, h2, b, l0, l1)
}

/// Squared distance bound between personalized and exact task optima, or
/// `None` when `lambda <= l_ell`.
#[pyfunction]
fn zeta_sq_bound(kappa1: f64, delta: f64, lambda_: f64, l_ell: f64) -> Option<f64> {
    theory::zeta_bound(kappa1, delta, lambda_, l_ell).zeta_sq
}

fn stat_tuple(s: &Stat) -> (f64, f64) {
    (s.mean, s.std)
}

/// Run a full experiment from TOML text into `out_dir`. Returns
/// `{method: {metric: (mean, std)}}`.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir, seeds = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_toml: &str,
    out_dir: PathBuf,
    seeds: Option<Vec<u64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = ExperimentConfig::from_toml(config_toml).map_err(py_err)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let summary = py.detach(|| harness::run_experiment(&cfg, &out_dir)).map_err(py_err)?;
    let out = PyDict::new(py);
    for (method, s) in &summary {
        let d = PyDict::new(py);
        d.set_item("avg_reward", stat_tuple(&s.avg_reward))?;
        d.set_item("l1_error", stat_tuple(&s.l1_error))?;
        d.set_item("l1_exact", stat_tuple(&s.l1_exact))?;
        d.set_item("modes_found", stat_tuple(&s.modes_found))?;
        out.set_item(method, d)?;
    }
    Ok(out)
}

/// Render the SVG charts of a finished run; returns the written paths.
#[pyfunction]
fn render_plots(run_dir: PathBuf) -> PyResult<Vec<PathBuf>> {
    harness::render_plots(&run_dir).map_err(py_err)
}

#[pyfunction]
fn compare(run_dirs: Vec<PathBuf>) -> PyResult<String> {
    harness::compare_table(&run_dirs).map_err(py_err)
}

#[pymodule]
fn pgflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Task>()?;
    m.add_class::<FlowNet>()?;
    m.add_function(wrap_pyfunction!(train_gflowmeta, m)?)?;
    m.add_function(wrap_pyfunction!(train_pgflowmeta, m)?)?;
    m.add_function(wrap_pyfunction!(env_constants, m)?)?;
    m.add_function(wrap_pyfunction!(l_ell, m)?)?;
    m.add_function(wrap_pyfunction!(zeta_sq_bound, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(render_plots, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}

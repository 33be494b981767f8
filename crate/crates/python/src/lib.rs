//! Python bindings: environments, datasets, training runs, checkpoints,
//! composition and the statistics battery.

use std::collections::BTreeMap;

use moddiff_core::checkpoint::{compose_modules, load_checkpoint, save_checkpoint, HybridAgent, Module};
use moddiff_core::eval::{evaluate_checkpoint, Agent};
use moddiff_core::{rng, stats, Error, OfflineDataset, RunOutput, Tier, ToyEnv, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(moddiff, ModdiffError, PyException);

fn to_py(e: Error) -> PyErr {
    ModdiffError::new_err(e.to_string())
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for moddiff_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

#[pyclass(name = "Env", frozen)]
struct PyEnv(ToyEnv);

#[pymethods]
impl PyEnv {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        Ok(Self(ToyEnv::by_name(name).py()?))
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.0.name()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }

    fn expert_action(&self, state: Vec<f64>) -> Vec<f64> {
        self.0.expert_action(&state)
    }

    fn normalized_return(&self, raw_return: f64) -> f64 {
        self.0.normalized_return(raw_return)
    }
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset(OfflineDataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn generate(env: &PyEnv, tier: &str, n: usize, seed: u64) -> PyResult<Self> {
        let tier: Tier = tier.parse().py()?;
        Ok(Self(moddiff_core::generate_dataset(&env.0, tier, n, seed).py()?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(OfflineDataset::load(path).py()?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).py()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn content_hash(&self) -> String {
        self.0.content_hash()
    }

    fn is_coherent(&self) -> bool {
        self.0.is_coherent()
    }
}

#[pyclass(name = "TrainConfig", frozen)]
struct PyTrainConfig(TrainConfig);

#[pymethods]
impl PyTrainConfig {
    /// Parses flat TOML; missing keys take defaults.
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self(TrainConfig::from_toml_str(toml).py()?))
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    fn content_hash(&self) -> String {
        self.0.content_hash()
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.0.total_steps
    }

    #[getter]
    fn regimen(&self) -> &'static str {
        self.0.regimen.label()
    }

    #[getter]
    fn algorithm(&self) -> String {
        self.0.algorithm.to_string()
    }
}

#[pyclass(name = "Module", frozen)]
struct PyModule_(Module);

#[pymethods]
impl PyModule_ {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(load_checkpoint(path).py()?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.0, path).py()
    }

    #[getter]
    fn kind(&self) -> String {
        format!("{:?}", self.0.kind())
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }

    #[getter]
    fn training_step(&self) -> u64 {
        self.0.training_step()
    }

    fn content_hash(&self) -> String {
        self.0.content_hash()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }
}

#[pyclass(name = "Agent", frozen)]
struct PyAgent(HybridAgent);

#[pymethods]
impl PyAgent {
    /// Normalized returns of `episodes` seeded rollouts.
    fn evaluate(&self, env: &PyEnv, episodes: usize, seed: u64) -> PyResult<Vec<f64>> {
        evaluate_checkpoint(&self.0, &env.0, episodes, seed).py()
    }

    fn act(&self, state: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
        let mut r = rng::seeded(seed);
        self.0.act(&state, &mut r).py()
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.0.lambda
    }
}

#[pyclass(name = "Run", frozen)]
struct PyRun(RunOutput);

impl PyRun {
    fn index(&self, i: isize) -> PyResult<usize> {
        let n = self.0.checkpoints.len() as isize;
        let j = if i < 0 { n + i } else { i };
        if !(0..n).contains(&j) {
            return Err(pyo3::exceptions::PyIndexError::new_err("checkpoint index out of range"));
        }
        Ok(j as usize)
    }
}

#[pymethods]
impl PyRun {
    #[getter]
    fn steps(&self) -> Vec<u64> {
        self.0.steps()
    }

    /// `(step, l_diff, l_q, l_actor)` per training step.
    #[getter]
    fn losses(&self) -> Vec<(u64, f64, f64, f64)> {
        self.0.losses.iter().map(|r| (r.step, r.l_diff, r.l_q, r.l_actor)).collect()
    }

    fn agent(&self, i: isize) -> PyResult<PyAgent> {
        Ok(PyAgent(self.0.agent(self.index(i)?).py()?))
    }

    fn guidance(&self, i: isize) -> PyResult<PyModule_> {
        Ok(PyModule_(Module::Guidance(self.0.checkpoints[self.index(i)?].guidance.clone())))
    }

    fn policy(&self, i: isize) -> PyResult<PyModule_> {
        Ok(PyModule_(Module::Policy(self.0.checkpoints[self.index(i)?].policy.clone())))
    }

    fn write_to(&self, dir: &str) -> PyResult<()> {
        self.0.write_to(dir).py().map(|_| ())
    }
}

#[pyfunction]
fn train(py: Python<'_>, config: &PyTrainConfig, dataset: &PyDataset) -> PyResult<PyRun> {
    let (cfg, ds) = (config.0.clone(), &dataset.0);
    py.detach(|| moddiff_core::train(&cfg, ds)).py().map(PyRun)
}

#[pyfunction]
#[pyo3(signature = (guidance, policy, lambda_ = 0.1))]
fn compose(guidance: &PyModule_, policy: &PyModule_, lambda_: f64) -> PyResult<PyAgent> {
    Ok(PyAgent(compose_modules(&guidance.0, &policy.0, lambda_).py()?))
}

/// `(U, p, exact)` of the two-sided Mann-Whitney test.
#[pyfunction]
fn mann_whitney_u(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64, bool)> {
    let m = stats::mann_whitney_u(&x, &y).py()?;
    Ok((m.u, m.p, m.exact))
}

/// `(F, p)` of the mean-centered Levene test.
#[pyfunction]
fn levene_test(groups: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let l = stats::levene_test(&groups).py()?;
    Ok((l.f, l.p))
}

#[pyfunction]
fn variance_stats(variances: Vec<f64>) -> PyResult<BTreeMap<&'static str, f64>> {
    let v = stats::variance_stats(&variances).py()?;
    Ok(BTreeMap::from([
        ("median_var", v.median_var),
        ("q1", v.q1),
        ("q3", v.q3),
        ("iqr", v.iqr),
        ("max_var", v.max_var),
        ("cv", v.cv),
    ]))
}

#[pyfunction]
fn reduction_pct(test_metric: f64, baseline_metric: f64) -> PyResult<f64> {
    stats::reduction_pct(test_metric, baseline_metric).py()
}

#[pyfunction]
fn curve_metrics(test: Vec<f64>, baseline: Vec<f64>) -> PyResult<BTreeMap<&'static str, f64>> {
    let c = stats::curve_metrics(&test, &baseline).py()?;
    Ok(BTreeMap::from([
        ("peak_gain_pct", c.peak_gain_pct),
        ("auc_gain_pct", c.auc_gain_pct),
        ("early_gain", c.early_gain),
    ]))
}

#[pymodule]
fn moddiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ModdiffError", m.py().get_type::<ModdiffError>())?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModule_>()?;
    m.add_class::<PyAgent>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney_u, m)?)?;
    m.add_function(wrap_pyfunction!(levene_test, m)?)?;
    m.add_function(wrap_pyfunction!(variance_stats, m)?)?;
    m.add_function(wrap_pyfunction!(reduction_pct, m)?)?;
    m.add_function(wrap_pyfunction!(curve_metrics, m)?)?;
    Ok(())
}

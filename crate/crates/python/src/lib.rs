//! Python bindings: synthetic data, run configs, trained models and the
//! command-line entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use boostbert::boosting::VoteKind;
use boostbert::cli::{self, ModelKind, SavedModel};
use boostbert::experiment::RunConfig;
use boostbert::synth::{SynthConfig, TaskSizes};
use boostbert::Error;

fn to_py(e: Error) -> PyErr {
    match cli::exit_code(&e) {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn model_kind(name: &str) -> PyResult<ModelKind> {
    Ok(match name {
        "auto" => ModelKind::Auto,
        "fusion" => ModelKind::Fusion,
        "vote" => ModelKind::Vote,
        "single" => ModelKind::Single,
        "student" => ModelKind::Student,
        "bag" => ModelKind::Bag,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown model kind `{other}`"
            )))
        }
    })
}

fn vote_kind(name: Option<&str>) -> PyResult<Option<VoteKind>> {
    match name {
        None => Ok(None),
        Some("soft") => Ok(Some(VoteKind::Soft)),
        Some("discrete") => Ok(Some(VoteKind::Discrete)),
        Some(other) => Err(PyValueError::new_err(format!("unknown vote `{other}`"))),
    }
}

#[pyfunction]
fn derive_seed(base: u64, stream: u64) -> u64 {
    boostbert::derive_seed(base, stream)
}

#[pyfunction]
fn compute_alpha(err: f64, num_classes: usize) -> f64 {
    boostbert::boosting::compute_alpha(err, num_classes)
}

/// Writes the synthetic task into `out` and returns the path of its config.
#[pyfunction]
#[pyo3(signature = (out, seed, train=2000, dev=2000, corpus=8000, label_noise=None))]
fn gen_data(
    py: Python<'_>,
    out: PathBuf,
    seed: u64,
    train: usize,
    dev: usize,
    corpus: usize,
    label_noise: Option<f64>,
) -> PyResult<PathBuf> {
    let mut cfg = SynthConfig::default();
    if let Some(noise) = label_noise {
        cfg.label_noise = noise;
    }
    let sizes = TaskSizes { train, dev, corpus };
    py.detach(|| cli::gen_data(&out, &cfg, sizes, seed))
        .map_err(to_py)
}

/// Runs the command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let full = std::iter::once("boostbert".to_string()).chain(args);
    py.detach(|| cli::run(full))
}

/// Per reference problem: name and the largest gap between engine and
/// oracle trajectories.
#[pyfunction]
#[pyo3(signature = (seed=0, rounds=5))]
fn oracle_gaps(seed: u64, rounds: usize) -> PyResult<Vec<(String, Option<f64>)>> {
    Ok(cli::oracle_gaps(seed, rounds)
        .map_err(to_py)?
        .into_iter()
        .map(|(name, gap, _, _)| (name, gap))
        .collect())
}

#[pyclass(name = "RunConfig", frozen)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Loads and validates a TOML run config; `overrides` are `key.path=value`.
    #[staticmethod]
    #[pyo3(signature = (path, overrides=Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::load(&path, &overrides).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.boost.rounds
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(seed={}, rounds={}, hash={})",
            self.inner.seed,
            self.inner.boost.rounds,
            self.inner.hash()
        )
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: SavedModel,
}

#[pymethods]
impl PyModel {
    /// Loads a trained model from a run directory. `kind` is one of auto,
    /// fusion, vote, single, student or bag.
    #[staticmethod]
    #[pyo3(signature = (run_dir, kind="auto"))]
    fn load(run_dir: PathBuf, kind: &str) -> PyResult<Self> {
        let inner = SavedModel::load(&run_dir, model_kind(kind)?).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn kind(&self) -> String {
        format!("{:?}", self.inner.kind).to_lowercase()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.names().to_vec()
    }

    /// Class scores per text, in `labels` order.
    #[pyo3(signature = (texts, vote=None))]
    fn predict_proba(
        &self,
        py: Python<'_>,
        texts: Vec<String>,
        vote: Option<&str>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let vote = vote_kind(vote)?;
        let examples = self.inner.encode_texts(&texts);
        py.detach(|| self.inner.scores(&examples, vote))
            .map_err(to_py)
    }

    #[pyo3(signature = (texts, vote=None))]
    fn predict(
        &self,
        py: Python<'_>,
        texts: Vec<String>,
        vote: Option<&str>,
    ) -> PyResult<Vec<String>> {
        let vote = vote_kind(vote)?;
        let examples = self.inner.encode_texts(&texts);
        let ids = py
            .detach(|| self.inner.predict(&examples, vote))
            .map_err(to_py)?;
        let names = self.inner.labels.names();
        Ok(ids.into_iter().map(|i| names[i].clone()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, labels={:?})", self.kind(), self.labels())
    }
}

#[pymodule]
fn pyboostbert(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(compute_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_gaps, m)?)?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}

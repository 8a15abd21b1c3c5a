use std::collections::BTreeMap;
use std::path::Path;

use coagent::experiment::{bundled, parse_config, run, write_outcome, MdpConfig, TrainSettings, BUNDLED};
use coagent::fixtures::random_params;
use coagent::gradients::{estimate_gradient, exact_gradient_with};
use coagent::mdp::DEFAULT_HORIZON;
use coagent::network::{CoagentNetwork, NetworkSpec, Params};
use coagent::reduction::{build_augmented_mdp, AugmentedMdp};
use coagent::training::train_from;
use coagent::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(coagent_py, NumericError, PyException, "A linear solve or estimate broke down numerically.");

fn to_py(err: Error) -> PyErr {
    if err.is_numeric() {
        NumericError::new_err(err.to_string())
    } else {
        PyValueError::new_err(err.to_string())
    }
}

fn from_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

/// An environment paired with a coagent network.
#[pyclass(frozen)]
struct Problem {
    mdp: coagent::mdp::TabularMdp,
    net: CoagentNetwork,
    aug: AugmentedMdp,
}

impl Problem {
    fn params(&self, flat: Vec<f64>) -> PyResult<Params> {
        let mut params = self.net.zero_params();
        if flat.len() != params.len() {
            return Err(PyValueError::new_err(format!("params: expected {} values, got {}", params.len(), flat.len())));
        }
        params.as_mut_slice().copy_from_slice(&flat);
        Ok(params)
    }
}

#[pymethods]
impl Problem {
    /// Builds from an MDP config and a network spec, both JSON.
    #[new]
    fn new(mdp_json: &str, network_json: &str) -> PyResult<Self> {
        let mdp = from_json::<MdpConfig>("mdp", mdp_json)?.build().map_err(to_py)?;
        let spec: NetworkSpec = from_json("network", network_json)?;
        let net = CoagentNetwork::new(spec, &mdp).map_err(to_py)?;
        let aug = build_augmented_mdp(&mdp, &net).map_err(to_py)?;
        Ok(Problem { mdp, net, aug })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.net.n_params()
    }

    #[getter]
    fn block_lengths(&self) -> Vec<usize> {
        self.net.block_lengths()
    }

    /// Uniform random parameters on `[-scale, scale]`.
    #[pyo3(signature = (scale=1.0, seed=0))]
    fn random_params(&self, scale: f64, seed: u64) -> Vec<f64> {
        random_params(&self.net, scale, seed).as_slice().to_vec()
    }

    /// Exact objective.
    fn objective(&self, params: Vec<f64>) -> PyResult<f64> {
        let params = self.params(params)?;
        Ok(exact_gradient_with(&self.aug, &self.net, &params).map_err(to_py)?.0)
    }

    /// Exact `(objective, gradient)`.
    fn gradient(&self, py: Python<'_>, params: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let params = self.params(params)?;
        let (j, g) = py.detach(|| exact_gradient_with(&self.aug, &self.net, &params)).map_err(to_py)?;
        Ok((j, g.as_slice().to_vec()))
    }

    /// Monte Carlo gradient estimate as `(mean, standard_error)`.
    #[pyo3(signature = (params, episodes, seed, horizon=DEFAULT_HORIZON))]
    fn estimate_gradient(&self, py: Python<'_>, params: Vec<f64>, episodes: usize, seed: u64, horizon: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let params = self.params(params)?;
        let mut est = py
            .detach(|| estimate_gradient(&self.mdp, &self.net, &params, &[episodes], seed, horizon))
            .map_err(to_py)?;
        let est = est.remove(0);
        Ok((est.mean.as_slice().to_vec(), est.std_error()))
    }

    /// Trains from `init` (default zeros) with JSON learning-rule settings;
    /// returns `(episode_returns, final_params)`.
    #[pyo3(signature = (settings_json, seed, init=None, horizon=DEFAULT_HORIZON))]
    fn train(&self, py: Python<'_>, settings_json: &str, seed: u64, init: Option<Vec<f64>>, horizon: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let settings: TrainSettings = from_json("train", settings_json)?;
        let config = settings.to_config(seed, horizon);
        config.validate(&self.net).map_err(to_py)?;
        let init = match init {
            Some(flat) => self.params(flat)?,
            None => self.net.zero_params(),
        };
        let result = py.detach(|| train_from(&self.mdp, &self.net, init, &config, |_, _| {})).map_err(to_py)?;
        Ok((result.returns, result.params.as_slice().to_vec()))
    }
}

/// Names of the bundled experiment configs.
#[pyfunction]
fn bundled_configs() -> Vec<&'static str> {
    BUNDLED.iter().map(|(name, _)| *name).collect()
}

/// JSON text of a bundled config.
#[pyfunction]
fn bundled_config(name: &str) -> PyResult<&'static str> {
    bundled(name).ok_or_else(|| PyValueError::new_err(format!("no bundled config named '{name}'")))
}

/// Runs an experiment config; returns `(passed, summary, files)`. Writes the
/// files and manifest when `out` is given.
#[pyfunction]
#[pyo3(signature = (config_json, trials=None, seed=None, out=None))]
fn run_experiment(
    py: Python<'_>,
    config_json: &str,
    trials: Option<usize>,
    seed: Option<u64>,
    out: Option<&str>,
) -> PyResult<(bool, String, BTreeMap<String, String>)> {
    let config = parse_config(config_json).and_then(|c| c.with_overrides(trials, seed)).map_err(to_py)?;
    let outcome = py.detach(|| run(&config)).map_err(to_py)?;
    if let Some(dir) = out {
        write_outcome(Path::new(dir), &config, &outcome).map_err(to_py)?;
    }
    Ok((outcome.passed, outcome.summary, outcome.files.into_iter().collect()))
}

#[pymodule]
fn coagent_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_function(wrap_pyfunction!(bundled_configs, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    Ok(())
}

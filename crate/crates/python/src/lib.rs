//! Python bindings: spline bases, GAE, CoV, the simulator and checkpoint
//! inference. Built as `quadkan_native`.

use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use quadkan::config::RunConfig;
use quadkan::envsim::{Env, Frame, Observation, TerrainKind, FRAME_LEN};
use quadkan::eval::LoadedPolicy;
use quadkan::perception::Variant;
use quadkan::policy::{deterministic_action, unit_limits};
use quadkan::spline::SplineBasis;
use quadkan::train::infer;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// All `count` B-spline basis values at each point of `u`.
#[pyfunction]
fn spline_basis(degree: usize, count: usize, lo: f64, hi: f64, u: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let b = SplineBasis::clamped_uniform(degree, count, lo, hi).map_err(value_err)?;
    Ok(u.iter().map(|&x| b.eval(x)).collect())
}

/// Generalized advantage estimates and returns for one trajectory.
#[pyfunction]
#[pyo3(signature = (rewards, values, dones, last_value, gamma=0.99, lam=0.95))]
fn gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    last_value: f64,
    gamma: f64,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(PyValueError::new_err("rewards, values and dones must have equal length"));
    }
    Ok(quadkan::ppo::gae(&rewards, &values, &dones, last_value, gamma, lam))
}

/// Sample std over mean.
#[pyfunction]
fn cov(returns: Vec<f64>) -> PyResult<f64> {
    quadkan::eval::cov(&returns).map_err(value_err)
}

#[pyfunction]
fn metrics_cov(path: &str) -> PyResult<f64> {
    quadkan::eval::compute_cov(std::path::Path::new(path)).map_err(value_err)
}

type PyObs = (Vec<f64>, Option<Vec<Vec<f32>>>);

fn obs_to_py(o: &Observation) -> PyObs {
    (o.proprio.clone(), o.depth.as_ref().map(|fs| fs.iter().map(|f| f.to_vec()).collect()))
}

fn obs_from_py(proprio: Vec<f64>, depth: Option<Vec<Vec<f32>>>) -> PyResult<Observation> {
    let depth = match depth {
        None => None,
        Some(frames) => {
            if frames.len() != 4 || frames.iter().any(|f| f.len() != FRAME_LEN) {
                return Err(PyValueError::new_err(format!("depth must be 4 frames of {FRAME_LEN} values")));
            }
            let fs: Vec<Frame> = frames.into_iter().map(Arc::from).collect();
            Some([fs[0].clone(), fs[1].clone(), fs[2].clone(), fs[3].clone()])
        }
    };
    Ok(Observation { proprio, depth })
}

#[pyclass(name = "Env", unsendable)]
struct PyEnv {
    inner: Env,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (terrain="thin_obstacle", seed=0, render=true, density=0.4))]
    fn new(terrain: &str, seed: u64, render: bool, density: f64) -> PyResult<Self> {
        let mut cfg = RunConfig::default();
        cfg.terrain = terrain.parse::<TerrainKind>().map_err(value_err)?;
        cfg.density = density;
        let mut ecfg = cfg.env_config();
        ecfg.render = render;
        Ok(Self { inner: Env::new(ecfg, seed) })
    }

    /// Returns `(proprio, depth)`; depth is `None` without rendering.
    fn reset(&mut self) -> PyObs {
        obs_to_py(&self.inner.reset())
    }

    /// Returns `((proprio, depth), reward, done, info)`.
    fn step<'py>(&mut self, py: Python<'py>, action: Vec<f64>) -> PyResult<(PyObs, f64, bool, Bound<'py, PyDict>)> {
        let r = self.inner.step(&action).map_err(value_err)?;
        let info = PyDict::new(py);
        info.set_item("collision", r.info.collision)?;
        info.set_item("dx", r.info.dx)?;
        info.set_item("vx", r.info.vx)?;
        info.set_item("tau_sq", r.info.tau_sq)?;
        info.set_item("fell", r.info.fell)?;
        info.set_item("truncated", r.info.truncated)?;
        Ok((obs_to_py(&r.obs), r.reward, r.done, info))
    }

    /// `(return, distance, collisions, steps, fell)` of the current episode.
    fn metrics(&self) -> (f64, f64, u32, usize, bool) {
        let m = self.inner.metrics();
        (m.ret, m.distance, m.collisions, m.steps, m.fell)
    }
}

#[pyclass(name = "Policy", unsendable)]
struct PyPolicy {
    inner: LoadedPolicy,
}

#[pymethods]
impl PyPolicy {
    /// Loads a checkpoint directory written by `quadkan train`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: LoadedPolicy::load(std::path::Path::new(path)).map_err(value_err)? })
    }

    /// Freshly initialised network of the given variant.
    #[staticmethod]
    #[pyo3(signature = (variant="quadkan", seed=0))]
    fn init(variant: &str, seed: u64) -> PyResult<Self> {
        let mut cfg = RunConfig::default();
        cfg.variant = variant.parse::<Variant>().map_err(value_err)?;
        cfg.seed = seed;
        Ok(Self { inner: LoadedPolicy::init(cfg).map_err(value_err)? })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.cfg.variant.name()
    }

    /// `(mu, log_std, value)` for one observation.
    #[pyo3(signature = (proprio, depth=None))]
    fn forward(&self, proprio: Vec<f64>, depth: Option<Vec<Vec<f32>>>) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
        let obs = obs_from_py(proprio, depth)?;
        let out = infer(&self.inner.net, &self.inner.store, &[&obs]).map_err(value_err)?;
        let o = out.into_iter().next().expect("one output per observation");
        Ok((o.mu, o.log_std, o.value))
    }

    /// Mean action squashed into `[-1, 1]`.
    #[pyo3(signature = (proprio, depth=None))]
    fn act(&self, proprio: Vec<f64>, depth: Option<Vec<Vec<f32>>>) -> PyResult<Vec<f64>> {
        let obs = obs_from_py(proprio, depth)?;
        let out = infer(&self.inner.net, &self.inner.store, &[&obs]).map_err(value_err)?;
        Ok(deterministic_action(&out[0], &unit_limits(self.inner.cfg.net.action_dim)))
    }

    fn param_counts(&self) -> Vec<(String, usize)> {
        let c = self.inner.net.param_counts(&self.inner.store);
        let mut rows = c.rows;
        rows.push(("total".into(), c.total));
        rows
    }
}

/// Adds every binding to `m`; shared by the extension entry point and tests.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(spline_basis, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(cov, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_cov, m)?)?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    Ok(())
}

#[pymodule]
fn quadkan_native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

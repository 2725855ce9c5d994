use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mioflow::datasets::{self, BifurcationSpec, PetalSpec};
use mioflow::evaluation::{self, MetricConfig, Metrics};
use mioflow::gae::{self, GaeConfig};
use mioflow::geometry::{self, GeodesicParams, KernelSpec, PointCloud};
use mioflow::training::{self, MioflowConfig};
use mioflow::transport::{self, DiscreteDistribution};

fn to_py(e: mioflow::Error) -> PyErr {
    match e {
        mioflow::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (mioflow::Error::Param(_)
        | mioflow::Error::Shape(_)
        | mioflow::Error::Parse { .. }
        | mioflow::Error::NoData
        | mioflow::Error::Json(_)) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for metric in evaluation::Metric::ALL {
        let key = serde_json::to_value(metric).expect("metric name");
        d.set_item(key.as_str().expect("string"), m.get(metric))?;
    }
    Ok(d)
}

/// Time-labelled point-cloud snapshots.
#[pyclass(name = "Dataset")]
pub struct PyDataset {
    inner: datasets::SnapshotDataset,
}

#[pymethods]
impl PyDataset {
    /// Build from `times` and one list of rows per time.
    #[new]
    fn new(times: Vec<u32>, snapshots: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let clouds = snapshots
            .into_iter()
            .map(|s| PointCloud::new(matrix(s)?).map_err(to_py))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: datasets::SnapshotDataset::new(times, clouds).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(Self { inner: datasets::load_csv(path).map_err(to_py)? })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        datasets::save_csv(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn times(&self) -> Vec<u32> {
        self.inner.times().to_vec()
    }

    #[getter]
    fn counts(&self) -> Vec<usize> {
        self.inner.counts()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Points observed at time label `t`.
    fn at_time(&self, t: u32) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .at_time(t)
            .map(|p| rows(p.points()))
            .ok_or_else(|| PyValueError::new_err(format!("no snapshot at time {t}")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(times={:?}, counts={:?}, dim={})", self.inner.times(), self.inner.counts(), self.inner.dim())
    }
}

#[pyfunction]
#[pyo3(signature = (n_lobes=4, points_per_lobe=25, n_times=5, noise=0.02, seed=0))]
fn gen_petal(n_lobes: usize, points_per_lobe: usize, n_times: usize, noise: f64, seed: u64) -> PyResult<PyDataset> {
    let spec = PetalSpec { n_lobes, points_per_lobe, n_times, noise, seed };
    Ok(PyDataset { inner: datasets::gen_petal(&spec).map_err(to_py)? })
}

#[pyfunction]
#[pyo3(signature = (dim=5, counts=None, asymmetry=0.5, curvature=0.5, noise=0.05, seed=0))]
fn gen_bifurcation(
    dim: usize,
    counts: Option<Vec<usize>>,
    asymmetry: f64,
    curvature: f64,
    noise: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let spec = BifurcationSpec {
        dim,
        counts: counts.unwrap_or_else(|| BifurcationSpec::default().counts),
        asymmetry,
        curvature,
        noise,
        seed,
    };
    Ok(PyDataset { inner: datasets::gen_bifurcation(&spec).map_err(to_py)? })
}

/// Multiscale diffusion geodesic distance matrix of `points`.
#[pyfunction]
#[pyo3(signature = (points, epsilon=0.1, alpha=0.49, max_scale=5))]
fn diffusion_geodesic(points: Vec<Vec<f64>>, epsilon: f64, alpha: f64, max_scale: u32) -> PyResult<Vec<Vec<f64>>> {
    let cloud = PointCloud::new(matrix(points)?).map_err(to_py)?;
    let g = geometry::geodesic_distance(&cloud, &KernelSpec::Gaussian { epsilon }, &GeodesicParams { alpha, max_scale })
        .map_err(to_py)?;
    Ok(rows(g.matrix()))
}

/// Exact `W_p` between two uniformly weighted point sets.
#[pyfunction]
#[pyo3(signature = (a, b, p=2))]
fn emd(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, p: u32) -> PyResult<f64> {
    let a = DiscreteDistribution::uniform(matrix(a)?).map_err(to_py)?;
    let b = DiscreteDistribution::uniform(matrix(b)?).map_err(to_py)?;
    Ok(transport::emd(&a, &b, p).map_err(to_py)?.0)
}

#[pyfunction]
#[pyo3(signature = (pred, truth, mmd_scales=None))]
fn compute_metrics<'py>(
    py: Python<'py>,
    pred: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
    mmd_scales: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = MetricConfig { mmd_scales: mmd_scales.unwrap_or_else(|| MetricConfig::default().mmd_scales) };
    let m = evaluation::compute_metrics(matrix(pred)?.view(), matrix(truth)?.view(), &cfg).map_err(to_py)?;
    metrics_dict(py, &m)
}

#[pyclass(name = "GeodesicAutoencoder")]
pub struct PyGae {
    inner: gae::GeodesicAutoencoder,
}

#[pymethods]
impl PyGae {
    /// Train on every snapshot of `data`. `config` is a JSON object with
    /// `GaeConfig` keys.
    #[staticmethod]
    #[pyo3(signature = (data, config=None, seed=0))]
    fn train(py: Python<'_>, data: &PyDataset, config: Option<&str>, seed: u64) -> PyResult<(Self, Vec<f64>)> {
        let cfg: GaeConfig = parse(config)?;
        let ds = data.inner.clone();
        let out = py.detach(move || gae::train_gae(&ds, &cfg, seed)).map_err(to_py)?;
        let losses = out.log.iter().map(|r| r.distance_loss).collect();
        Ok((Self { inner: out.model }, losses))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: gae::GeodesicAutoencoder::from_json(s).map_err(to_py)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn encode(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.encode(matrix(x)?.view()).map_err(to_py)?))
    }

    fn decode(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.decode(matrix(z)?.view()).map_err(to_py)?))
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }
}

/// Trained flow.
#[pyclass(name = "MioflowModel")]
pub struct PyModel {
    inner: training::MioflowModel,
}

#[pymethods]
impl PyModel {
    /// Train on every snapshot of `data`; returns the model and the per-step
    /// total losses. `config` is a JSON object with `MioflowConfig` keys.
    #[staticmethod]
    #[pyo3(signature = (data, config=None, gae=None))]
    fn train(py: Python<'_>, data: &PyDataset, config: Option<&str>, gae: Option<&PyGae>) -> PyResult<(Self, Vec<f64>)> {
        let mut cfg: MioflowConfig = parse(config)?;
        cfg.use_gae = gae.is_some();
        let ds = data.inner.clone();
        let g = gae.map(|g| g.inner.clone());
        let out = py.detach(move || training::train_mioflow(&ds, g.as_ref(), &cfg)).map_err(to_py)?;
        let losses = out.log.iter().map(|r| r.total).collect();
        Ok((Self { inner: out.model }, losses))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: training::MioflowModel::from_json(s).map_err(to_py)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Push `x0` (observed at label `start`) to each label in `to`.
    #[pyo3(signature = (x0, start, to, seed=0))]
    fn predict(&self, x0: Vec<Vec<f64>>, start: u32, to: Vec<u32>, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let b = self.inner.predict(matrix(x0)?.view(), start, &to, seed, false).map_err(to_py)?;
        Ok(b.states[1..].iter().map(rows).collect())
    }

    #[getter]
    fn sigma(&self) -> Option<Vec<f64>> {
        self.inner.sde.as_ref().map(|s| s.sigma.clone())
    }

    #[getter]
    fn times(&self) -> Vec<u32> {
        self.inner.times.clone()
    }
}

/// Hold out `held_time`, train (with a GAE first when `gae_config` is given)
/// and score the prediction. Returns `(model_metrics, baseline_metrics,
/// runtime_seconds)`.
#[pyfunction]
#[pyo3(signature = (data, held_time, config=None, gae_config=None, seed=0))]
fn evaluate_holdout<'py>(
    py: Python<'py>,
    data: &PyDataset,
    held_time: u32,
    config: Option<&str>,
    gae_config: Option<&str>,
    seed: u64,
) -> PyResult<(Bound<'py, PyDict>, Bound<'py, PyDict>, f64)> {
    let cfg: MioflowConfig = parse(config)?;
    let gae_cfg: Option<GaeConfig> = gae_config.map(|s| parse(Some(s))).transpose()?;
    let ds = data.inner.clone();
    let metrics = MetricConfig::default();
    let (out, base) = py
        .detach(|| {
            let out = evaluation::evaluate_holdout(&ds, held_time, gae_cfg.as_ref(), &cfg, &metrics, seed)?;
            let base = evaluation::baseline_row(&ds, held_time, &metrics)?;
            Ok::<_, mioflow::Error>((out, base))
        })
        .map_err(to_py)?;
    Ok((
        metrics_dict(py, &out.row.metrics)?,
        metrics_dict(py, &base.metrics)?,
        out.row.runtime_seconds,
    ))
}

#[pymodule]
fn mioflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGae>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_petal, m)?)?;
    m.add_function(wrap_pyfunction!(gen_bifurcation, m)?)?;
    m.add_function(wrap_pyfunction!(diffusion_geodesic, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_holdout, m)?)?;
    Ok(())
}

//! Python bindings: feature kernels, fusion and metrics, plus the on-disk
//! pipeline driven by a [`RunConfig`](mex3d::config::RunConfig).

use std::path::PathBuf;

use nalgebra::Point3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mex3d::cloud::PointCloudFrame;
use mex3d::curvature::{self, PrincipalCurvatures};
use mex3d::dataset;
use mex3d::feature::FeatureKind;
use mex3d::lbptop::{self, LbpTopConfig};
use mex3d::learn::{self, ClassDistribution, LogisticRegression};
use mex3d::pipeline;
use mex3d::synth::{self, SurfaceKind, SurfaceParams};
use mex3d::volume::FrameVolume;

fn err(e: mex3d::Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn points(xyz: Vec<(f64, f64, f64)>) -> Vec<Point3<f64>> {
    xyz.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect()
}

/// Key=value run configuration; unset keys keep their defaults.
#[pyclass(name = "RunConfig", skip_from_py_object)]
#[derive(Clone, Default)]
struct PyRunConfig {
    inner: mex3d::config::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => mex3d::config::RunConfig::parse(t).map_err(err)?,
            None => Default::default(),
        };
        Ok(PyRunConfig { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key '{key}'")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn preprocess_fingerprint(&self) -> String {
        self.inner.preprocess_fingerprint()
    }

    fn feature_fingerprint(&self, kind: &str) -> PyResult<String> {
        let kind: FeatureKind = kind.parse().map_err(err)?;
        Ok(self.inner.feature_fingerprint(kind))
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(work.dir={})", self.inner.work_dir.display())
    }
}

/// LBP-TOP histogram of a `frames × height × width` grey volume given as
/// row-major bytes.
#[pyfunction]
#[pyo3(signature = (data, frames, height, width, radii=(1, 1, 4), neighbors=(8, 8, 8), blocks=(5, 5), overlap=0))]
#[allow(clippy::too_many_arguments)]
fn lbp_top_histogram(
    data: Vec<u8>,
    frames: usize,
    height: usize,
    width: usize,
    radii: (usize, usize, usize),
    neighbors: (usize, usize, usize),
    blocks: (usize, usize),
    overlap: usize,
) -> PyResult<Vec<f64>> {
    let volume = FrameVolume::new(frames, height, width, data).map_err(err)?;
    let config = LbpTopConfig {
        radii,
        neighbors,
        blocks,
        overlap,
    };
    Ok(lbptop::lbp_top_histogram(&volume, &config).map_err(err)?.values)
}

/// `(p_min, p_max)` at `at`, from the points within `radius`.
#[pyfunction]
fn estimate_curvature(cloud: Vec<(f64, f64, f64)>, at: (f64, f64, f64), radius: f64) -> PyResult<(f64, f64)> {
    let cloud = PointCloudFrame::new(points(cloud)).map_err(err)?;
    let at = Point3::new(at.0, at.1, at.2);
    let pc = curvature::estimate_principal_curvatures(&cloud, &at, radius).map_err(err)?;
    Ok((pc.p_min, pc.p_max))
}

/// `(K, H)`.
#[pyfunction]
fn gaussian_mean_curvature(p_min: f64, p_max: f64) -> (f64, f64) {
    curvature::gaussian_mean_curvature(PrincipalCurvatures::new(p_min, p_max))
}

#[pyfunction]
fn shape_index(p_min: f64, p_max: f64) -> f64 {
    curvature::shape_index(PrincipalCurvatures::new(p_min, p_max))
}

/// Surface type name from the signs of `K` and `H`.
#[pyfunction]
#[pyo3(signature = (k, h, zero_eps=0.5))]
fn hk_classify(k: f64, h: f64, zero_eps: f64) -> String {
    curvature::hk_classify(k, h, zero_eps).to_string()
}

/// Noisy samples of an analytic surface with the exact curvature per point.
/// `kind` is sphere, plane, cylinder or face; sizes are in metres.
#[pyfunction]
#[pyo3(signature = (kind, n_points, noise_sigma=0.0, seed=0, radius=0.05, half_extent=0.05, center=(0.0, 0.0, 0.5)))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn make_surface(
    kind: &str,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
    radius: f64,
    half_extent: f64,
    center: (f64, f64, f64),
) -> PyResult<(Vec<(f64, f64, f64)>, Vec<(f64, f64)>)> {
    let c = Point3::new(center.0, center.1, center.2);
    let (kind, params) = match kind {
        "sphere" => (SurfaceKind::Sphere, SurfaceParams::sphere(radius, c)),
        "plane" => (SurfaceKind::Plane, SurfaceParams::plane(half_extent, c)),
        "cylinder" => (SurfaceKind::Cylinder, SurfaceParams::cylinder(radius, half_extent, c)),
        "face" => (SurfaceKind::FaceProxy, SurfaceParams::face_proxy()),
        other => return Err(PyValueError::new_err(format!("unknown surface '{other}'"))),
    };
    let s = synth::make_surface(kind, &params, n_points, noise_sigma, seed).map_err(err)?;
    let pts = s.cloud.points.iter().map(|p| (p.x, p.y, p.z)).collect();
    let oracle = s.oracle.iter().map(|pc| (pc.p_min, pc.p_max)).collect();
    Ok((pts, oracle))
}

/// `a·p1 + (1 − a)·p2` for two class distributions.
#[pyfunction]
fn fuse(p1: Vec<f64>, p2: Vec<f64>, a: f64) -> PyResult<Vec<f64>> {
    let p1 = ClassDistribution::new(p1).map_err(err)?;
    let p2 = ClassDistribution::new(p2).map_err(err)?;
    Ok(learn::fuse(&p1, &p2, a).map_err(err)?.probs().to_vec())
}

/// Accuracy, macro-F1 and `confusion[truth][prediction]`.
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    predictions: Vec<usize>,
    truths: Vec<usize>,
    n_classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = learn::metrics(&predictions, &truths, n_classes).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("f1", r.f1)?;
    d.set_item("confusion", r.confusion)?;
    Ok(d)
}

/// Agreement of two AU codings such as `"1+2"` and `"1+2+4"`.
#[pyfunction]
fn coder_reliability(coder1: &str, coder2: &str) -> PyResult<f64> {
    let a = dataset::parse_aus(coder1).map_err(err)?;
    let b = dataset::parse_aus(coder2).map_err(err)?;
    dataset::coder_reliability(&a, &b).map_err(err)
}

/// Writes the configured synthetic dataset under `out`; returns the sample count.
#[pyfunction]
fn synth_dataset(config: &PyRunConfig, out: PathBuf) -> PyResult<usize> {
    pipeline::cmd_synth(&config.inner.synth, &out).map_err(err)
}

/// Preprocess, extract and evaluate, reusing cached outputs. Returns one dict
/// per results row.
#[pyfunction]
fn run_all<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = &config.inner;
    let (rows, _) = py
        .detach(|| pipeline::run_all(cfg, &LogisticRegression { config: cfg.classifier }))
        .map_err(err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("radius", &r.radius)?;
            d.set_item("features", &r.features)?;
            d.set_item("protocol", &r.protocol)?;
            d.set_item("accuracy", r.result.accuracy)?;
            d.set_item("f1", r.result.f1)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn mex3d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(lbp_top_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_curvature, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_mean_curvature, m)?)?;
    m.add_function(wrap_pyfunction!(shape_index, m)?)?;
    m.add_function(wrap_pyfunction!(hk_classify, m)?)?;
    m.add_function(wrap_pyfunction!(make_surface, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(coder_reliability, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    Ok(())
}

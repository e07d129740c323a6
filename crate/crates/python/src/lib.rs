use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gsmap_core as core;
use gsmap_core::Vec3;
use nalgebra::Matrix3;

create_exception!(gsmap, GsmapError, PyException);

fn err(e: core::Error) -> PyErr {
    GsmapError::new_err(e.to_string())
}

fn v3(p: [f64; 3]) -> Vec3 {
    Vec3::new(p[0], p[1], p[2])
}

fn a3(p: &Vec3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

#[pyclass(name = "RigidTransform", module = "gsmap", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTransform(core::RigidTransform);

#[pymethods]
impl PyTransform {
    /// From a 4x4 nested list or 16 row-major floats.
    #[new]
    fn new(matrix: &Bound<'_, PyAny>) -> PyResult<Self> {
        let flat: Vec<f64> = match matrix.extract::<Vec<Vec<f64>>>() {
            Ok(rows) => rows.into_iter().flatten().collect(),
            Err(_) => matrix.extract::<Vec<f64>>()?,
        };
        core::RigidTransform::from_row_major(&flat, 1e-6).map(PyTransform).map_err(err)
    }

    #[staticmethod]
    fn identity() -> Self {
        PyTransform(core::RigidTransform::identity())
    }

    #[staticmethod]
    #[pyo3(signature = (axis, angle, translation = [0.0, 0.0, 0.0]))]
    fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        PyTransform(core::RigidTransform::from_axis_angle(v3(axis), angle, v3(translation)))
    }

    /// 4x4 nested list.
    fn matrix(&self) -> Vec<Vec<f64>> {
        self.0.to_row_major().chunks(4).map(|r| r.to_vec()).collect()
    }

    fn apply(&self, points: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
        points.into_iter().map(|p| a3(&self.0.apply(&v3(p)))).collect()
    }

    fn inverse(&self) -> Self {
        PyTransform(self.0.inverse())
    }

    /// `self ∘ other`: apply `other` first.
    fn compose(&self, other: &PyTransform) -> Self {
        PyTransform(self.0.compose(&other.0))
    }

    fn rotation_angle(&self) -> f64 {
        self.0.rotation_angle()
    }

    /// (rotation error in radians, translation error in metres).
    fn error_to(&self, other: &PyTransform) -> (f64, f64) {
        self.0.error_to(&other.0)
    }

    fn __repr__(&self) -> String {
        format!("RigidTransform({:?})", self.matrix())
    }
}

#[pyclass(name = "PointCloud", module = "gsmap", skip_from_py_object)]
#[derive(Clone)]
struct PyPointCloud(core::PointCloud);

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(points: Vec<[f64; 3]>) -> Self {
        PyPointCloud(core::PointCloud::new(points.into_iter().map(v3).collect()))
    }

    /// PLY or whitespace-delimited XYZ text.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        core::read_point_cloud(&path).map(PyPointCloud).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        core::write_point_cloud(&self.0, &path).map_err(err)
    }

    fn points(&self) -> Vec<[f64; 3]> {
        self.0.points.iter().map(a3).collect()
    }

    fn transformed(&self, transform: &PyTransform) -> Self {
        PyPointCloud(core::apply_transform(&self.0, &transform.0))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points)", self.0.len())
    }
}

#[pyclass(name = "GaussianMap", module = "gsmap", skip_from_py_object)]
#[derive(Clone)]
struct PyGaussianMap(core::GaussianMap);

#[pymethods]
impl PyGaussianMap {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        core::read_splat_ply(&path).map(PyGaussianMap).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        core::write_splat_ply(&self.0, &path).map_err(err)
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.0.sh_degree
    }

    #[getter]
    fn frame_label(&self) -> String {
        self.0.frame_label.clone()
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.0.gaussians.iter().map(|g| a3(&g.position)).collect()
    }

    /// Stored attributes of one Gaussian (log-scale, logit opacity, wxyz quaternion,
    /// channel-major SH).
    fn gaussian<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let g = self.0.gaussians.get(index).ok_or_else(|| {
            pyo3::exceptions::PyIndexError::new_err(format!("index {index} out of range"))
        })?;
        let d = PyDict::new(py);
        d.set_item("position", a3(&g.position))?;
        d.set_item("scale", a3(&g.scale))?;
        d.set_item("rotation", g.rotation)?;
        d.set_item("opacity", g.opacity)?;
        d.set_item("sh", g.sh.clone())?;
        Ok(d)
    }

    /// Provenance per Gaussian: original index, or None for inserted ones.
    fn origins(&self) -> Vec<Option<usize>> {
        self.0
            .origins_vec()
            .into_iter()
            .map(|o| match o {
                core::Origin::Carried(i) => Some(i),
                core::Origin::Emerging => None,
            })
            .collect()
    }

    /// Moves positions, orientations and SH colour by `transform`.
    fn transformed(&self, transform: &PyTransform) -> PyResult<Self> {
        core::update::transform_map(&self.0, &transform.0).map(PyGaussianMap).map_err(err)
    }

    /// Human-readable invariant violations; empty when the map is valid.
    fn validate(&self) -> Vec<String> {
        core::validate_map(&self.0).iter().map(|v| v.to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("GaussianMap({} gaussians, SH degree {})", self.0.len(), self.0.sh_degree)
    }
}

#[pyclass(name = "IcpResult", module = "gsmap", frozen, get_all)]
struct PyIcpResult {
    transform: PyTransform,
    rmse: f64,
    iterations: usize,
    correspondences: usize,
    rmse_history: Vec<f64>,
}

impl From<core::IcpResult> for PyIcpResult {
    fn from(r: core::IcpResult) -> Self {
        PyIcpResult {
            transform: PyTransform(r.transform),
            rmse: r.final_rmse,
            iterations: r.iterations_used,
            correspondences: r.correspondence_count,
            rmse_history: r.rmse_history,
        }
    }
}

#[pyclass(name = "ChangeReport", module = "gsmap", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyChangeReport(core::ChangeReport);

#[pymethods]
impl PyChangeReport {
    #[getter]
    fn ep(&self) -> Vec<usize> {
        self.0.ep_indices.clone()
    }

    #[getter]
    fn dp(&self) -> Vec<usize> {
        self.0.dp_indices.clone()
    }

    #[getter]
    fn ep_dist(&self) -> Vec<f64> {
        self.0.ep_mean_dist.clone()
    }

    #[getter]
    fn dp_dist(&self) -> Vec<f64> {
        self.0.dp_mean_dist.clone()
    }

    /// Same layout as the report JSON file.
    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("report serializes")
    }

    fn __repr__(&self) -> String {
        format!("ChangeReport({} emerging, {} disappearing)", self.0.ep_indices.len(), self.0.dp_indices.len())
    }
}

fn icp_params(max_dist: f64, max_iter: usize, eps: f64) -> core::IcpParams {
    core::IcpParams {
        max_correspondence_distance: max_dist,
        max_iterations: max_iter,
        convergence_epsilon: eps,
        ..Default::default()
    }
}

#[pyfunction]
#[pyo3(signature = (source, target, max_dist = 2.0, max_iter = 100, eps = 1e-7))]
fn icp_align(py: Python<'_>, source: &PyPointCloud, target: &PyPointCloud, max_dist: f64, max_iter: usize, eps: f64) -> PyResult<PyIcpResult> {
    let params = icp_params(max_dist, max_iter, eps);
    py.detach(|| core::icp_align(&source.0, &target.0, &params))
        .map(PyIcpResult::from)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (old_map, submap, transform = None, h = 10, r = 1.0, r_prime = 1.0))]
fn detect_changes(
    py: Python<'_>,
    old_map: &PyGaussianMap,
    submap: &PyPointCloud,
    transform: Option<&PyTransform>,
    h: usize,
    r: f64,
    r_prime: f64,
) -> PyResult<PyChangeReport> {
    let t = transform.map(|t| t.0).unwrap_or_default();
    let params = core::DetectionParams { h, r, r_prime };
    py.detach(|| core::detect_changes(&old_map.0, &submap.0, &t, &params))
        .map(PyChangeReport)
        .map_err(err)
}

/// Full pipeline. Returns (updated map, change report, ICP result).
#[pyfunction]
#[pyo3(signature = (old_map, submap, max_dist = 2.0, max_iter = 100, h = 10, r = 1.0, r_prime = 1.0, e = 10))]
#[allow(clippy::too_many_arguments)]
fn update_map(
    py: Python<'_>,
    old_map: &PyGaussianMap,
    submap: &PyPointCloud,
    max_dist: f64,
    max_iter: usize,
    h: usize,
    r: f64,
    r_prime: f64,
    e: usize,
) -> PyResult<(PyGaussianMap, PyChangeReport, PyIcpResult)> {
    let icp = icp_params(max_dist, max_iter, 1e-7);
    let det = core::DetectionParams { h, r, r_prime };
    let upd = core::UpdateParams { e, ..Default::default() };
    let out = py
        .detach(|| core::update_pipeline(&old_map.0, &submap.0, &icp, &det, &upd))
        .map_err(err)?;
    Ok((PyGaussianMap(out.map), PyChangeReport(out.report), out.icp.into()))
}

/// `k` nearest points of `points` for each query, as (index, distance) lists.
#[pyfunction]
fn knn(points: Vec<[f64; 3]>, queries: Vec<[f64; 3]>, k: usize) -> PyResult<Vec<Vec<(usize, f64)>>> {
    let pts: Vec<Vec3> = points.into_iter().map(v3).collect();
    let idx = core::KdIndex::from_points(&pts).map_err(err)?;
    Ok(queries
        .into_iter()
        .map(|q| idx.knn(&v3(q), k).into_iter().map(|n| (n.index, n.distance)).collect())
        .collect())
}

/// Rotates one channel-major SH vector (3 channels) by a 3x3 rotation matrix.
#[pyfunction]
fn rotate_sh(sh: Vec<f64>, rotation: [[f64; 3]; 3], degree: usize) -> PyResult<Vec<f64>> {
    let m = nalgebra_matrix(rotation);
    let rot = core::sh_rotation_from(&m, degree).map_err(err)?;
    core::rotate_sh(&sh, &rot).map_err(err)
}

fn nalgebra_matrix(r: [[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
}

/// Real SH basis values (3DGS sign convention) at a unit direction.
#[pyfunction]
fn eval_sh_basis(degree: usize, direction: [f64; 3]) -> PyResult<Vec<f64>> {
    core::sh::eval_real_sh_basis(degree, &v3(direction)).map_err(err)
}

fn depth_map(rows: Vec<Vec<f64>>) -> PyResult<core::DepthMap> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != w) {
        return Err(GsmapError::new_err("depth rows have different lengths"));
    }
    core::DepthMap::new(w, h, rows.into_iter().flatten().collect()).map_err(err)
}

/// `1 - corr(a, b)` over pixels finite in both; returns {"loss", "n_valid", "degenerate"}.
#[pyfunction]
fn pearson_loss<'py>(py: Python<'py>, estimated: Vec<Vec<f64>>, rendered: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let r = core::pearson_loss(&depth_map(estimated)?, &depth_map(rendered)?).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("loss", r.loss)?;
    d.set_item("n_valid", r.n_valid)?;
    d.set_item("degenerate", r.degenerate)?;
    Ok(d)
}

/// Synthetic pair from a ScenePairSpec JSON string (defaults if None).
/// Returns (old map, submap, truth dict with "added"/"removed" indices, transform).
#[pyfunction]
#[pyo3(signature = (spec_json = None, seed = None))]
fn gen_scene_pair<'py>(
    py: Python<'py>,
    spec_json: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(PyGaussianMap, PyPointCloud, Bound<'py, PyDict>, PyTransform)> {
    let mut spec: core::ScenePairSpec = match spec_json {
        Some(s) => serde_json::from_str(s).map_err(|e| GsmapError::new_err(format!("bad spec: {e}")))?,
        None => Default::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let pair = core::gen_scene_pair(&spec).map_err(err)?;
    let truth = PyDict::new(py);
    truth.set_item("added", pair.truth.ep_indices())?;
    truth.set_item("removed", pair.truth.dp_indices())?;
    Ok((
        PyGaussianMap(pair.old_map),
        PyPointCloud(pair.submap),
        truth,
        PyTransform(pair.transform),
    ))
}

/// Precision/recall of a report against index lists of true emerging and
/// disappearing elements.
#[pyfunction]
fn eval_detection<'py>(
    py: Python<'py>,
    report: &PyChangeReport,
    added: Vec<usize>,
    removed: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mark = |n: usize, idx: &[usize]| -> PyResult<Vec<bool>> {
        let mut v = vec![false; n];
        for &i in idx {
            *v.get_mut(i).ok_or_else(|| GsmapError::new_err(format!("label index {i} out of range")))? = true;
        }
        Ok(v)
    };
    let truth = core::TruthLabels {
        added: mark(report.0.ep_mean_dist.len(), &added)?,
        removed: mark(report.0.dp_mean_dist.len(), &removed)?,
    };
    let s = core::eval_detection(&report.0, &truth).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("ep_precision", s.ep_precision)?;
    d.set_item("ep_recall", s.ep_recall)?;
    d.set_item("dp_precision", s.dp_precision)?;
    d.set_item("dp_recall", s.dp_recall)?;
    Ok(d)
}

#[pymodule]
fn gsmap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GsmapError", m.py().get_type::<GsmapError>())?;
    m.add_class::<PyTransform>()?;
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyGaussianMap>()?;
    m.add_class::<PyIcpResult>()?;
    m.add_class::<PyChangeReport>()?;
    m.add_function(wrap_pyfunction!(icp_align, m)?)?;
    m.add_function(wrap_pyfunction!(detect_changes, m)?)?;
    m.add_function(wrap_pyfunction!(update_map, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_sh, m)?)?;
    m.add_function(wrap_pyfunction!(eval_sh_basis, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gen_scene_pair, m)?)?;
    m.add_function(wrap_pyfunction!(eval_detection, m)?)?;
    Ok(())
}

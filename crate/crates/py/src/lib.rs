//! Python bindings for the pose-transfer toolkit: meshes, the synthetic body
//! generator, the transport solver, metrics, and checkpointed transfer.

use ndarray::Array2;
use numpy::{IntoPyArray, PyArray2, PyReadonlyArray2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use posewarp::correspondence::{self, TransportPlan};
use posewarp::dataset::{
    sample_pairs, Generator as CoreGenerator, GeneratorConfig, IdentityParams, PoseParams,
};
use posewarp::mesh;
use posewarp::metrics;
use posewarp::refinement::BlendMode;
use posewarp::training::{self, Checkpoint as CoreCheckpoint, TrainConfig};

fn err(e: posewarp::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vertices_array<'py>(py: Python<'py>, m: &mesh::Mesh) -> Bound<'py, PyArray2<f64>> {
    Array2::from_shape_fn((m.vertex_count(), 3), |(i, k)| m.vertices[i][k]).into_pyarray(py)
}

fn rows_to_points(a: &PyReadonlyArray2<f64>) -> PyResult<Vec<[f64; 3]>> {
    let arr = a.as_array();
    if arr.dim().1 != 3 {
        return Err(PyValueError::new_err("expected an (n, 3) array"));
    }
    Ok(arr.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
}

/// Triangle mesh with an explicit vertex order.
#[pyclass(name = "Mesh")]
struct PyMesh {
    inner: mesh::Mesh,
}

#[pymethods]
impl PyMesh {
    #[new]
    #[pyo3(signature = (vertices, faces, name="mesh"))]
    fn new(
        vertices: PyReadonlyArray2<f64>,
        faces: PyReadonlyArray2<i64>,
        name: &str,
    ) -> PyResult<Self> {
        let verts = rows_to_points(&vertices)?;
        let f = faces.as_array();
        if f.dim().1 != 3 {
            return Err(PyValueError::new_err("faces must be an (m, 3) array"));
        }
        let faces: Vec<[usize; 3]> = f
            .rows()
            .into_iter()
            .map(|r| {
                if r.iter().any(|&v| v < 0) {
                    Err(PyValueError::new_err("negative face index"))
                } else {
                    Ok([r[0] as usize, r[1] as usize, r[2] as usize])
                }
            })
            .collect::<PyResult<_>>()?;
        Ok(PyMesh { inner: mesh::Mesh::new(verts, faces, name).map_err(err)? })
    }

    #[staticmethod]
    fn load_obj(path: &str) -> PyResult<Self> {
        Ok(PyMesh { inner: mesh::load_obj(path).map_err(err)? })
    }

    fn save_obj(&self, path: &str) -> PyResult<()> {
        mesh::save_obj(&self.inner, path).map_err(err)
    }

    #[getter]
    fn vertices<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        vertices_array(py, &self.inner)
    }

    #[getter]
    fn faces<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<i64>> {
        Array2::from_shape_fn((self.inner.face_count(), 3), |(i, k)| self.inner.faces[i][k] as i64)
            .into_pyarray(py)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    fn vertex_count(&self) -> usize {
        self.inner.vertex_count()
    }

    fn face_count(&self) -> usize {
        self.inner.face_count()
    }

    /// Translate so the bounding-box center sits at the origin.
    fn center(&self) -> PyMesh {
        PyMesh { inner: mesh::center_mesh(&self.inner) }
    }

    /// Seeded vertex shuffle; returns (mesh, permutation old->new).
    fn shuffle(&self, seed: u64) -> (PyMesh, Vec<usize>) {
        let (m, perm) = mesh::shuffle_vertices(&self.inner, seed);
        (PyMesh { inner: m }, perm)
    }

    /// Sorted edge neighbors of every vertex.
    fn neighbors(&self) -> Vec<Vec<usize>> {
        mesh::vertex_neighbors(&self.inner).neighbors
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(name={:?}, vertices={}, faces={})",
            self.inner.name,
            self.inner.vertex_count(),
            self.inner.face_count()
        )
    }
}

/// Transport plan with uniform marginals.
#[pyclass(name = "TransportPlan")]
struct PyTransportPlan {
    inner: TransportPlan,
}

#[pymethods]
impl PyTransportPlan {
    #[getter]
    fn matrix<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        self.inner.matrix.clone().into_pyarray(py)
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    fn row_sum_error(&self) -> f64 {
        self.inner.row_sum_error()
    }

    fn col_marginal_l1_error(&self) -> f64 {
        self.inner.col_marginal_l1_error()
    }

    fn row_argmax(&self) -> Vec<usize> {
        self.inner.row_argmax()
    }
}

/// Entropic optimal transport between uniform marginals on a cost matrix.
#[pyfunction]
#[pyo3(signature = (cost, epsilon=0.03, iterations=5))]
fn sinkhorn(cost: PyReadonlyArray2<f64>, epsilon: f64, iterations: usize) -> PyResult<PyTransportPlan> {
    let plan =
        correspondence::sinkhorn(&cost.as_array().to_owned(), epsilon, iterations).map_err(err)?;
    Ok(PyTransportPlan { inner: plan })
}

/// Warp (n_pose, 3) coordinates through a transport plan into the identity
/// mesh's vertex order.
#[pyfunction]
fn warp<'py>(
    py: Python<'py>,
    plan: &PyTransportPlan,
    pose_vertices: PyReadonlyArray2<f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let v = correspondence::warp(&plan.inner, &pose_vertices.as_array().to_owned()).map_err(err)?;
    Ok(v.into_pyarray(py))
}

/// Mean squared per-vertex distance between equally ordered point sets.
#[pyfunction]
fn pmd(a: PyReadonlyArray2<f64>, b: PyReadonlyArray2<f64>) -> PyResult<f64> {
    metrics::pmd(&rows_to_points(&a)?, &rows_to_points(&b)?).map_err(err)
}

/// Squared-distance Chamfer distance between point sets.
#[pyfunction]
fn chamfer(a: PyReadonlyArray2<f64>, b: PyReadonlyArray2<f64>) -> PyResult<f64> {
    metrics::chamfer(&rows_to_points(&a)?, &rows_to_points(&b)?).map_err(err)
}

/// Exact Earth Mover's Distance between equal-size point sets.
#[pyfunction]
fn emd(a: PyReadonlyArray2<f64>, b: PyReadonlyArray2<f64>) -> PyResult<f64> {
    metrics::emd(&rows_to_points(&a)?, &rows_to_points(&b)?).map_err(err)
}

/// Deterministic articulated-body generator.
#[pyclass(name = "Generator")]
struct PyGenerator {
    inner: CoreGenerator,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (total_vertices=386, sides=6, quadruped=false, joint_limit=1.0))]
    fn new(total_vertices: usize, sides: usize, quadruped: bool, joint_limit: f64) -> PyResult<Self> {
        let config = GeneratorConfig { total_vertices, sides, quadruped, joint_limit };
        Ok(PyGenerator { inner: CoreGenerator::new(config).map_err(err)? })
    }

    /// Build one mesh from per-segment (length, radius) scales and joint
    /// angles.
    fn build_mesh(&self, identity_scales: Vec<(f64, f64)>, joint_angles: Vec<f64>) -> PyResult<PyMesh> {
        let id = IdentityParams { scales: identity_scales };
        let pose = PoseParams { angles: joint_angles };
        Ok(PyMesh { inner: self.inner.build_mesh(&id, &pose).map_err(err)? })
    }

    /// Draw training triples (identity, pose, ground truth), centered and
    /// shuffled the way training expects them.
    fn sample_pairs(
        &self,
        n: usize,
        id_pool: usize,
        pose_pool: usize,
        seed: u64,
    ) -> PyResult<Vec<(PyMesh, PyMesh, PyMesh)>> {
        let samples = sample_pairs(&self.inner, n, id_pool, pose_pool, seed).map_err(err)?;
        Ok(samples
            .into_iter()
            .map(|s| (PyMesh { inner: s.m_id }, PyMesh { inner: s.m_pose }, PyMesh { inner: s.m_gt }))
            .collect())
    }
}

/// Model state plus training provenance.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Freshly initialized model (no training).
    #[staticmethod]
    #[pyo3(signature = (seed=0, width_scale=1))]
    fn fresh(seed: u64, width_scale: usize) -> PyResult<Self> {
        let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
        if width_scale > 1 {
            cfg.arch = cfg.arch.scaled_down(width_scale);
        }
        Ok(PyCheckpoint { inner: CoreCheckpoint::fresh(cfg).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCheckpoint { inner: CoreCheckpoint::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    /// Per-epoch (epoch, rec, edge, total) losses.
    fn loss_history(&self) -> Vec<(usize, f64, f64, f64)> {
        self.inner.loss_history.iter().map(|r| (r.epoch, r.rec, r.edge, r.total)).collect()
    }

    /// Run the transfer path; returns (output, plan, warped).
    #[pyo3(signature = (identity, pose, i_max=None))]
    fn transfer(
        &self,
        identity: &PyMesh,
        pose: &PyMesh,
        i_max: Option<usize>,
    ) -> PyResult<(PyMesh, PyTransportPlan, PyMesh)> {
        let (out, plan, warped) = training::transfer_with(
            &identity.inner,
            &pose.inner,
            &self.inner.params,
            self.inner.train_config.epsilon,
            i_max.unwrap_or(self.inner.train_config.i_max),
            self.inner.train_config.blend_mode,
            self.inner.train_config.warp_only,
        )
        .map_err(err)?;
        Ok((PyMesh { inner: out }, PyTransportPlan { inner: plan }, PyMesh { inner: warped }))
    }
}

/// Train on (identity, pose, ground_truth) triples. The ground truth must
/// share the identity mesh's vertex order.
#[pyfunction]
#[pyo3(signature = (pairs, epochs=10, seed=0, width_scale=1, batch_size=8, parallel=false))]
fn train_pairs(
    pairs: Vec<(PyRef<PyMesh>, PyRef<PyMesh>, PyRef<PyMesh>)>,
    epochs: usize,
    seed: u64,
    width_scale: usize,
    batch_size: usize,
    parallel: bool,
) -> PyResult<PyCheckpoint> {
    let samples: Vec<posewarp::dataset::PairSample> = pairs
        .iter()
        .enumerate()
        .map(|(i, (m_id, m_pose, m_gt))| posewarp::dataset::PairSample {
            sample_id: i,
            m_id: m_id.inner.clone(),
            m_pose: m_pose.inner.clone(),
            m_gt: m_gt.inner.clone(),
            identity_index: 0,
            pose_index: 0,
            id_perm: Vec::new(),
            pose_perm: Vec::new(),
        })
        .collect();
    let mut cfg = TrainConfig { epochs, seed, batch_size, parallel, ..TrainConfig::default() };
    if width_scale > 1 {
        cfg.arch = cfg.arch.scaled_down(width_scale);
    }
    cfg.blend_mode = BlendMode::Adaptive;
    let ckpt = training::train_on_samples(&cfg, &samples).map_err(err)?;
    Ok(PyCheckpoint { inner: ckpt })
}

/// Run the finite-difference gradient suite; returns (name, error,
/// tolerance, passed) per check.
#[pyfunction]
#[pyo3(signature = (seed=7))]
fn gradient_check_suite(seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let items = training::gradient_check_suite(seed).map_err(err)?;
    Ok(items
        .into_iter()
        .map(|i| (i.name.to_string(), i.max_rel_err, i.tolerance, i.passed()))
        .collect())
}

#[pymodule]
fn posewarp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PyTransportPlan>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(pmd, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(train_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check_suite, m)?)?;
    Ok(())
}

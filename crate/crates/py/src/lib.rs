//! Python bindings: shapes with exact signed distances, nearest-neighbor
//! queries, Chamfer distance, marching cubes, and trained-model inference.

use gensdf::error::Error;
use gensdf::evaluation::{chamfer as chamfer_rs, ChamferFlavor};
use gensdf::geometry::{
    exact_sdf, sample_surface, KdTree, Point3, PointCloud, Pose, ShapeFamily, ShapeInstance,
};
use gensdf::model::{load_checkpoint, ConditionalSdfModel, LatentFeatures};
use gensdf::reconstruction::{evaluate_grid, marching_cubes as marching_cubes_rs, GridField};
use gensdf::training::refine as refine_rs;
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray1, PyReadonlyArray2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Usage(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn cloud_from_array(points: PyReadonlyArray2<'_, f64>) -> PyResult<PointCloud> {
    let view = points.as_array();
    if view.ncols() != 3 {
        return Err(PyValueError::new_err(format!(
            "expected an (n, 3) array, got (n, {})",
            view.ncols()
        )));
    }
    let pts: Vec<Point3> = view
        .rows()
        .into_iter()
        .map(|r| Point3::new(r[0], r[1], r[2]))
        .collect();
    PointCloud::new(pts).map_err(to_py_err)
}

fn cloud_to_array<'py>(py: Python<'py>, cloud: &PointCloud) -> Bound<'py, PyArray2<f64>> {
    let mut data = Vec::with_capacity(cloud.len() * 3);
    for p in cloud.points() {
        data.extend_from_slice(&p.as_array());
    }
    numpy::ndarray::Array2::from_shape_vec((cloud.len(), 3), data)
        .expect("sized")
        .into_pyarray(py)
}

fn mesh_to_arrays<'py>(
    py: Python<'py>,
    mesh: &gensdf::reconstruction::TriangleMesh,
) -> (Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<u32>>) {
    let mut vdata = Vec::with_capacity(mesh.vertices.len() * 3);
    for v in &mesh.vertices {
        vdata.extend_from_slice(&v.as_array());
    }
    let mut tdata = Vec::with_capacity(mesh.triangles.len() * 3);
    for t in &mesh.triangles {
        tdata.extend_from_slice(t);
    }
    (
        numpy::ndarray::Array2::from_shape_vec((mesh.vertices.len(), 3), vdata)
            .expect("sized")
            .into_pyarray(py),
        numpy::ndarray::Array2::from_shape_vec((mesh.triangles.len(), 3), tdata)
            .expect("sized")
            .into_pyarray(py),
    )
}

/// An analytic shape with an exact signed distance function.
#[pyclass(name = "Shape")]
struct PyShape {
    inner: ShapeInstance,
}

#[pymethods]
impl PyShape {
    /// Signed distances at an (n, 3) array of query points.
    fn sdf<'py>(
        &self,
        py: Python<'py>,
        points: PyReadonlyArray2<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let view = points.as_array();
        if view.ncols() != 3 {
            return Err(PyValueError::new_err("expected an (n, 3) array"));
        }
        let out: Vec<f64> = view
            .rows()
            .into_iter()
            .map(|r| exact_sdf(&self.inner, &Point3::new(r[0], r[1], r[2])))
            .collect();
        Ok(out.into_pyarray(py))
    }

    /// Approximately area-uniform surface samples, deterministic per seed.
    fn sample_surface<'py>(
        &self,
        py: Python<'py>,
        n: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let cloud = sample_surface(&self.inner, n, seed).map_err(to_py_err)?;
        Ok(cloud_to_array(py, &cloud))
    }

    #[getter]
    fn category_id(&self) -> String {
        self.inner.category_id.clone()
    }

    fn __repr__(&self) -> String {
        format!("Shape({})", self.inner.family.name())
    }
}

#[pyfunction]
fn sphere(radius: f64) -> PyResult<PyShape> {
    ShapeInstance::new(ShapeFamily::Sphere { radius }, Pose::default(), "sphere")
        .map(|inner| PyShape { inner })
        .map_err(to_py_err)
}

#[pyfunction]
#[pyo3(name = "box")]
fn box_shape(hx: f64, hy: f64, hz: f64) -> PyResult<PyShape> {
    ShapeInstance::new(
        ShapeFamily::Box {
            half_extents: [hx, hy, hz],
        },
        Pose::default(),
        "box",
    )
    .map(|inner| PyShape { inner })
    .map_err(to_py_err)
}

#[pyfunction]
fn torus(major_radius: f64, minor_radius: f64) -> PyResult<PyShape> {
    ShapeInstance::new(
        ShapeFamily::Torus {
            major_radius,
            minor_radius,
        },
        Pose::default(),
        "torus",
    )
    .map(|inner| PyShape { inner })
    .map_err(to_py_err)
}

#[pyfunction]
fn capsule(half_height: f64, radius: f64) -> PyResult<PyShape> {
    ShapeInstance::new(
        ShapeFamily::Capsule {
            half_height,
            radius,
        },
        Pose::default(),
        "capsule",
    )
    .map(|inner| PyShape { inner })
    .map_err(to_py_err)
}

#[pyfunction]
fn cylinder(half_height: f64, radius: f64) -> PyResult<PyShape> {
    ShapeInstance::new(
        ShapeFamily::Cylinder {
            half_height,
            radius,
        },
        Pose::default(),
        "cylinder",
    )
    .map(|inner| PyShape { inner })
    .map_err(to_py_err)
}

/// Exact nearest-neighbor index over a point cloud.
#[pyclass(name = "KdTree")]
struct PyKdTree {
    inner: KdTree,
}

#[pymethods]
impl PyKdTree {
    #[new]
    fn new(points: PyReadonlyArray2<'_, f64>) -> PyResult<Self> {
        let cloud = cloud_from_array(points)?;
        Ok(Self {
            inner: KdTree::build(&cloud).map_err(to_py_err)?,
        })
    }

    /// Nearest cloud point to `query`: `((x, y, z), distance, index)`.
    fn nearest(&self, query: PyReadonlyArray1<'_, f64>) -> PyResult<((f64, f64, f64), f64, usize)> {
        let q = query.as_array();
        if q.len() != 3 {
            return Err(PyValueError::new_err("expected a length-3 query"));
        }
        let (p, d, i) = self.inner.nearest(&Point3::new(q[0], q[1], q[2]));
        Ok(((p.x, p.y, p.z), d, i))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Symmetric Chamfer distance between two (n, 3) clouds.
#[pyfunction]
#[pyo3(signature = (a, b, squared = true))]
fn chamfer(
    a: PyReadonlyArray2<'_, f64>,
    b: PyReadonlyArray2<'_, f64>,
    squared: bool,
) -> PyResult<f64> {
    let ca = cloud_from_array(a)?;
    let cb = cloud_from_array(b)?;
    let flavor = if squared {
        ChamferFlavor::Squared
    } else {
        ChamferFlavor::Unsquared
    };
    Ok(chamfer_rs(&ca, &cb, flavor))
}

/// Zero-level-set extraction from a flat field over [-1, 1]^3.
///
/// `values` holds resolution^3 samples in x-major order (x slowest).
/// Returns `(vertices, triangles)`.
#[pyfunction]
#[pyo3(signature = (values, resolution, iso = 0.0))]
fn marching_cubes<'py>(
    py: Python<'py>,
    values: PyReadonlyArray1<'py, f64>,
    resolution: usize,
    iso: f64,
) -> PyResult<(Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<u32>>)> {
    let field =
        GridField::from_values(resolution, values.as_array().to_vec()).map_err(to_py_err)?;
    let mesh = marching_cubes_rs(&field, iso).map_err(to_py_err)?;
    Ok(mesh_to_arrays(py, &mesh))
}

/// A trained conditional SDF model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ConditionalSdfModel,
}

impl PyModel {
    fn encode(&self, cloud: &PointCloud) -> PyResult<LatentFeatures> {
        self.inner.encode(cloud).map_err(to_py_err)
    }
}

#[pymethods]
impl PyModel {
    /// Loads a `.gsdf` checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(std::path::Path::new(path)).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    /// Predicted signed distances at `queries`, conditioned on `cloud`.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        queries: PyReadonlyArray2<'py, f64>,
        cloud: PyReadonlyArray2<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let cloud = cloud_from_array(cloud)?;
        let feats = self.encode(&cloud)?;
        let qview = queries.as_array();
        if qview.ncols() != 3 {
            return Err(PyValueError::new_err("expected an (n, 3) query array"));
        }
        let xs: Vec<Point3> = qview
            .rows()
            .into_iter()
            .map(|r| Point3::new(r[0], r[1], r[2]))
            .collect();
        let preds = self.inner.predict_batch(&xs, &feats).map_err(to_py_err)?;
        Ok(preds.into_pyarray(py))
    }

    /// Reconstructs the zero level set from a conditioning cloud.
    /// Returns `(vertices, triangles)`.
    #[pyo3(signature = (cloud, resolution = 64, refine_iters = 0, refine_lr = 1e-4))]
    fn reconstruct<'py>(
        &self,
        py: Python<'py>,
        cloud: PyReadonlyArray2<'py, f64>,
        resolution: usize,
        refine_iters: usize,
        refine_lr: f64,
    ) -> PyResult<(Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<u32>>)> {
        let cloud = cloud_from_array(cloud)?;
        let model = if refine_iters > 0 {
            refine_rs(&self.inner, &cloud, refine_iters, refine_lr).map_err(to_py_err)?
        } else {
            self.inner.clone()
        };
        let field = evaluate_grid(&model, &cloud, resolution).map_err(to_py_err)?;
        let mesh = marching_cubes_rs(&field, 0.0).map_err(to_py_err)?;
        Ok(mesh_to_arrays(py, &mesh))
    }
}

#[pymodule]
fn gensdf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyShape>()?;
    m.add_class::<PyKdTree>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sphere, m)?)?;
    m.add_function(wrap_pyfunction!(box_shape, m)?)?;
    m.add_function(wrap_pyfunction!(torus, m)?)?;
    m.add_function(wrap_pyfunction!(capsule, m)?)?;
    m.add_function(wrap_pyfunction!(cylinder, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(marching_cubes, m)?)?;
    Ok(())
}

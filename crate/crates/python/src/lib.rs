//! Python bindings. Arrays cross the boundary as numpy arrays indexed
//! `[x, y, z]`; volumes are float64 and masks are bool.

use std::path::PathBuf;

use numpy::ndarray::{Array3, ShapeBuilder};
use numpy::{IntoPyArray, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lesionmap::himap::PointNet;
use lesionmap::nifti::DataType;
use lesionmap::phantom::PhantomSpec;
use lesionmap::pipeline::{PipelineConfig, StageStatus};
use lesionmap::preprocess::NlmParams;
use lesionmap::wmmask::{LabelVolume, WmEstimationConfig};
use lesionmap::{BinaryMask, Dims, Error, Volume3D};

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for lesionmap::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(|e| {
            let msg = e.to_string();
            match e {
                Error::MissingInput { .. } => PyFileNotFoundError::new_err(msg),
                Error::Io(_) => PyOSError::new_err(msg),
                Error::Shape { .. }
                | Error::Dims(_)
                | Error::Domain(_)
                | Error::Param(_)
                | Error::Spec(_)
                | Error::Format { .. }
                | Error::DegenerateRange { .. }
                | Error::DegenerateStats(_) => PyValueError::new_err(msg),
                _ => PyRuntimeError::new_err(msg),
            }
        })
    }
}

fn dims_of(shape: &[usize]) -> PyResult<Dims> {
    Dims::new(shape[0], shape[1], shape[2]).py_err()
}

/// Flattens an `[x, y, z]` array into x-fastest order.
fn flatten<T: Copy>(a: &numpy::ndarray::ArrayView3<'_, T>) -> Vec<T> {
    let (nx, ny, nz) = a.dim();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.push(a[[x, y, z]]);
            }
        }
    }
    out
}

fn to_array<T>(dims: Dims, data: Vec<T>) -> Array3<T> {
    Array3::from_shape_vec((dims.nx, dims.ny, dims.nz).f(), data).expect("length matches dims")
}

/// A 3-D scalar image with voxel spacing.
#[pyclass(name = "Volume", module = "lesionmap", frozen)]
struct PyVolume {
    inner: Volume3D,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (array, spacing = (1.0, 1.0, 1.0)))]
    fn new(array: PyReadonlyArray3<'_, f64>, spacing: (f64, f64, f64)) -> PyResult<Self> {
        let view = array.as_array();
        let dims = dims_of(view.shape())?;
        let inner = Volume3D::new(dims, [spacing.0, spacing.1, spacing.2], flatten(&view)).py_err()?;
        Ok(PyVolume { inner })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.dims().as_tuple()
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let s = self.inner.spacing();
        (s[0], s[1], s[2])
    }

    fn to_numpy<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f64>> {
        to_array(self.inner.dims(), self.inner.data().to_vec()).into_pyarray(py)
    }

    fn min_max(&self) -> (f64, f64) {
        self.inner.min_max()
    }

    fn __repr__(&self) -> String {
        let (nx, ny, nz) = self.shape();
        format!("Volume(shape=({nx}, {ny}, {nz}))")
    }
}

/// A boolean 3-D mask.
#[pyclass(name = "Mask", module = "lesionmap", frozen)]
struct PyMask {
    inner: BinaryMask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(array: PyReadonlyArray3<'_, bool>) -> PyResult<Self> {
        let view = array.as_array();
        let dims = dims_of(view.shape())?;
        Ok(PyMask {
            inner: BinaryMask::new(dims, flatten(&view)).py_err()?,
        })
    }

    /// Voxels strictly above `threshold`.
    #[staticmethod]
    fn threshold(volume: &PyVolume, threshold: f64) -> Self {
        PyMask {
            inner: BinaryMask::threshold(&volume.inner, threshold),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.dims().as_tuple()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn to_numpy<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<bool>> {
        to_array(self.inner.dims(), self.inner.data().to_vec()).into_pyarray(py)
    }

    fn union(&self, other: &PyMask) -> PyResult<Self> {
        Ok(PyMask {
            inner: self.inner.union(&other.inner).py_err()?,
        })
    }

    fn difference(&self, other: &PyMask) -> PyResult<Self> {
        Ok(PyMask {
            inner: self.inner.difference(&other.inner).py_err()?,
        })
    }

    fn is_subset_of(&self, other: &PyMask) -> bool {
        self.inner.is_subset_of(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.count()
    }

    fn __eq__(&self, other: &PyMask) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let (nx, ny, nz) = self.shape();
        format!("Mask(shape=({nx}, {ny}, {nz}), count={})", self.inner.count())
    }
}

fn vol(inner: Volume3D) -> PyVolume {
    PyVolume { inner }
}

fn mask(inner: BinaryMask) -> PyMask {
    PyMask { inner }
}

#[pyfunction]
fn read_volume(py: Python<'_>, path: PathBuf) -> PyResult<PyVolume> {
    py.detach(|| lesionmap::nifti::read_volume(&path)).py_err().map(vol)
}

#[pyfunction]
fn read_mask(py: Python<'_>, path: PathBuf) -> PyResult<PyMask> {
    py.detach(|| lesionmap::nifti::read_mask(&path)).py_err().map(mask)
}

/// Writes float32 unless `dtype` is one of "uint8", "int16", "float64".
#[pyfunction]
#[pyo3(signature = (volume, path, dtype = "float32"))]
fn write_volume(volume: &PyVolume, path: PathBuf, dtype: &str) -> PyResult<()> {
    let dt = match dtype {
        "uint8" => DataType::U8,
        "int16" => DataType::I16,
        "float32" => DataType::F32,
        "float64" => DataType::F64,
        other => return Err(PyValueError::new_err(format!("unsupported dtype {other}"))),
    };
    lesionmap::nifti::write_volume(&volume.inner, path, dt).py_err()
}

#[pyfunction]
fn write_mask(m: &PyMask, path: PathBuf) -> PyResult<()> {
    lesionmap::nifti::write_mask(&m.inner, path, None).py_err()
}

#[pyfunction]
#[pyo3(signature = (volume, brain, sigma = 15.0, patch_radius = 1, search_radius = 5, h = None))]
fn nlm_denoise(
    py: Python<'_>,
    volume: &PyVolume,
    brain: &PyMask,
    sigma: f64,
    patch_radius: usize,
    search_radius: usize,
    h: Option<f64>,
) -> PyResult<PyVolume> {
    let params = NlmParams {
        sigma,
        patch_radius,
        search_radius,
        filter_h: h,
    };
    py.detach(|| lesionmap::preprocess::nlm_denoise(&volume.inner, &brain.inner, &params))
        .py_err()
        .map(vol)
}

#[pyfunction]
fn normalize_intensity(volume: &PyVolume, brain: &PyMask) -> PyResult<PyVolume> {
    lesionmap::preprocess::normalize_intensity(&volume.inner, &brain.inner)
        .py_err()
        .map(vol)
}

#[pyfunction]
fn sobel_magnitude(volume: &PyVolume) -> PyResult<PyVolume> {
    lesionmap::preprocess::sobel_magnitude(&volume.inner).py_err().map(vol)
}

/// Returns the intermediate image and a dict with the per-bin tables.
#[pyfunction]
#[pyo3(signature = (flair_norm, sobel, brain, bins = 1024))]
fn build_intermediate<'py>(
    py: Python<'py>,
    flair_norm: &PyVolume,
    sobel: &PyVolume,
    brain: &PyMask,
    bins: usize,
) -> PyResult<(PyVolume, Bound<'py, PyDict>)> {
    let (img, hist) = py
        .detach(|| {
            lesionmap::preprocess::build_intermediate(&flair_norm.inner, &sobel.inner, &brain.inner, bins)
        })
        .py_err()?;
    let d = PyDict::new(py);
    d.set_item("bin_count", hist.bin_count)?;
    d.set_item("range", hist.range)?;
    d.set_item("h", hist.h.clone())?;
    d.set_item("q", hist.q.clone())?;
    d.set_item("q_rescaled", hist.q_rescaled.clone())?;
    Ok((vol(img), d))
}

/// Point net of one slice as a list of (x, y) points in discovery order.
#[pyfunction]
#[pyo3(signature = (brain, z, radius = 10, theta_step = 60))]
fn build_point_net(brain: &PyMask, z: usize, radius: usize, theta_step: u32) -> PyResult<Vec<(usize, usize)>> {
    lesionmap::himap::build_point_net(&brain.inner, z, radius, theta_step).py_err()
}

/// Returns the hyperintensity map and whether it was zeroed for lack of
/// contrast.
#[pyfunction]
#[pyo3(signature = (intermediate, brain, radius = 10, theta_step = 60, neighborhood_radius = 1))]
fn score_map(
    py: Python<'_>,
    intermediate: &PyVolume,
    brain: &PyMask,
    radius: usize,
    theta_step: u32,
    neighborhood_radius: usize,
) -> PyResult<(PyVolume, bool)> {
    let hi = py
        .detach(|| {
            let net = PointNet::build(&brain.inner, radius, theta_step)?;
            lesionmap::himap::score_map(&intermediate.inner, &brain.inner, &net, neighborhood_radius)
        })
        .py_err()?;
    Ok((vol(hi.map), hi.degenerate))
}

/// k-means labels (0 outside the brain, 1..k ordered by the first
/// channel's centroid) as a uint8 array.
#[pyfunction]
#[pyo3(signature = (channels, brain, k = 3, seed = 0))]
fn initial_segmentation<'py>(
    py: Python<'py>,
    channels: Vec<PyRef<'py, PyVolume>>,
    brain: &PyMask,
    k: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyArray3<u8>>> {
    let refs: Vec<&Volume3D> = channels.iter().map(|c| &c.inner).collect();
    let labels = lesionmap::wmmask::initial_segmentation(&refs, &brain.inner, k, seed).py_err()?;
    Ok(to_array(labels.dims(), labels.labels().to_vec()).into_pyarray(py))
}

#[pyfunction]
fn select_cluster_by_atlas(labels: PyReadonlyArray3<'_, u8>, atlas: &PyVolume) -> PyResult<PyMask> {
    let view = labels.as_array();
    let lv = LabelVolume::new(dims_of(view.shape())?, flatten(&view)).py_err()?;
    lesionmap::wmmask::select_cluster_by_atlas(&lv, &atlas.inner)
        .py_err()
        .map(mask)
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (wm_initial, hi_map, wm_atlas, brain, k_sigma = 3.0, neighborhood_radius = 1, iterate_to_fixpoint = false))]
fn estimate_wm(
    py: Python<'_>,
    wm_initial: &PyMask,
    hi_map: &PyVolume,
    wm_atlas: &PyVolume,
    brain: &PyMask,
    k_sigma: f64,
    neighborhood_radius: usize,
    iterate_to_fixpoint: bool,
) -> PyResult<PyMask> {
    let cfg = WmEstimationConfig {
        k_sigma,
        neighborhood_radius,
        iterate_to_fixpoint,
    };
    py.detach(|| {
        lesionmap::wmmask::estimate_wm(&wm_initial.inner, &hi_map.inner, &wm_atlas.inner, &cfg, &brain.inner)
    })
    .py_err()
    .map(mask)
}

#[pyfunction]
fn dsc(a: &PyMask, b: &PyMask) -> PyResult<f64> {
    lesionmap::metrics::dsc(&a.inner, &b.inner).py_err()
}

#[pyfunction]
fn lesion_intersection(lesion_gt: &PyMask, estimated: &PyMask) -> PyResult<f64> {
    lesionmap::metrics::lesion_intersection(&lesion_gt.inner, &estimated.inner).py_err()
}

#[pyfunction]
fn ipd(image: &PyVolume, lesion: &PyMask, tissue: &PyMask) -> PyResult<f64> {
    lesionmap::metrics::ipd(&image.inner, &lesion.inner, &tissue.inner).py_err()
}

/// Synthetic phantom as a dict of volumes and masks. `preset` is "default"
/// or "full"; `spec` may be a JSON string overriding it.
#[pyfunction]
#[pyo3(signature = (preset = "default", spec = None, seed = None, noise_sigma = None))]
fn generate_phantom<'py>(
    py: Python<'py>,
    preset: &str,
    spec: Option<&str>,
    seed: Option<u64>,
    noise_sigma: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut s = match (spec, preset) {
        (Some(json), _) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?,
        (None, "default") => PhantomSpec::default(),
        (None, "full") => PhantomSpec::full_size(),
        (None, other) => return Err(PyValueError::new_err(format!("unknown preset {other}"))),
    };
    if let Some(v) = seed {
        s.seed = v;
    }
    if let Some(v) = noise_sigma {
        s.noise_sigma = v;
    }
    let p = py.detach(|| lesionmap::phantom::generate_phantom(&s)).py_err()?;
    let d = PyDict::new(py);
    for (name, v) in [
        ("flair", p.flair),
        ("t1", p.t1),
        ("wm_atlas", p.wm_atlas),
        ("gm_atlas", p.gm_atlas),
    ] {
        d.set_item(name, vol(v))?;
    }
    for (name, m) in [
        ("brain", p.brain),
        ("wm", p.wm),
        ("gm", p.gm),
        ("csf", p.csf),
        ("lesion", p.lesion),
    ] {
        d.set_item(name, mask(m))?;
    }
    Ok(d)
}

/// Runs the full pipeline from a JSON config file. Returns a dict mapping
/// stage names to "ran" or "reused", and the metrics report as a JSON
/// string (None when no lesion ground truth was given).
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config: PathBuf,
    out_dir: Option<PathBuf>,
) -> PyResult<(Bound<'py, PyDict>, Option<String>)> {
    let mut cfg = PipelineConfig::from_json_file(&config).py_err()?;
    if let Some(o) = out_dir {
        cfg.out_dir = o;
    }
    let outcome = py.detach(|| lesionmap::pipeline::run_pipeline(&cfg)).py_err()?;
    let stages = PyDict::new(py);
    for s in &outcome.stages {
        let status = match s.status {
            StageStatus::Ran => "ran",
            StageStatus::Reused => "reused",
        };
        stages.set_item(&s.name, status)?;
    }
    let report = outcome.report.map(|r| r.to_json()).transpose().py_err()?;
    Ok((stages, report))
}

#[pymodule]
#[pyo3(name = "lesionmap")]
fn lesionmap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(read_mask, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_mask, m)?)?;
    m.add_function(wrap_pyfunction!(nlm_denoise, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(sobel_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(build_intermediate, m)?)?;
    m.add_function(wrap_pyfunction!(build_point_net, m)?)?;
    m.add_function(wrap_pyfunction!(score_map, m)?)?;
    m.add_function(wrap_pyfunction!(initial_segmentation, m)?)?;
    m.add_function(wrap_pyfunction!(select_cluster_by_atlas, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_wm, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(lesion_intersection, m)?)?;
    m.add_function(wrap_pyfunction!(ipd, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}

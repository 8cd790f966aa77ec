//! Python bindings for the maeseg core: volumes, phantom generation,
//! segmentation inference from checkpoints, and the evaluation metrics.

use std::path::PathBuf;
use std::str::FromStr;

use numpy::{IntoPyArray, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use maeseg::checkpoint::Checkpoint;
use maeseg::error::Error;
use maeseg::phantom::{self, Family};
use maeseg::rng::{seeded, STREAM_MASK};
use maeseg::unetr::SegModel;
use maeseg::volume::{self, VolumeKind};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A 3D scalar volume with voxel spacing in mm. Arrays are indexed [z, y, x];
/// spacing is reported as (sx, sy, sz).
#[pyclass(frozen, module = "maeseg_py")]
pub struct Volume {
    inner: volume::Volume,
}

#[pymethods]
impl Volume {
    #[new]
    fn new(data: PyReadonlyArray3<'_, f32>, spacing: (f64, f64, f64), kind: &str) -> PyResult<Self> {
        let kind = match kind {
            "image" => VolumeKind::Image,
            "label" => VolumeKind::Label,
            "prediction" => VolumeKind::Prediction,
            other => {
                return Err(PyValueError::new_err(format!(
                    "kind must be 'image', 'label', or 'prediction', got {other:?}"
                )))
            }
        };
        let arr = data.as_array().to_owned();
        let inner = volume::Volume::new(arr, [spacing.0, spacing.1, spacing.2], kind)
            .map_err(to_py)?;
        Ok(Volume { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Volume { inner: volume::Volume::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_numpy<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        self.inner.data.clone().into_pyarray(py)
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let s = self.inner.spacing;
        (s[0], s[1], s[2])
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind {
            VolumeKind::Image => "image",
            VolumeKind::Label => "label",
            VolumeKind::Prediction => "prediction",
        }
    }

    /// Array shape as (nz, ny, nx), matching `to_numpy()`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.data.dim()
    }

    fn __repr__(&self) -> String {
        let (nz, ny, nx) = self.inner.data.dim();
        format!(
            "Volume(kind={:?}, shape=({nz}, {ny}, {nx}), spacing={:?})",
            self.kind(),
            self.inner.spacing
        )
    }
}

/// Dice similarity coefficient of two binary label volumes.
#[pyfunction]
fn dsc(pred: &Volume, gt: &Volume) -> PyResult<f64> {
    maeseg::metrics::dsc(&pred.inner, &gt.inner).map_err(to_py)
}

/// Average symmetric surface distance in mm.
#[pyfunction]
fn assd(pred: &Volume, gt: &Volume) -> PyResult<f64> {
    maeseg::metrics::assd(&pred.inner, &gt.inner).map_err(to_py)
}

/// 95th percentile Hausdorff distance in mm.
#[pyfunction]
fn hd95(pred: &Volume, gt: &Volume) -> PyResult<f64> {
    maeseg::metrics::hd95(&pred.inner, &gt.inner).map_err(to_py)
}

/// Clamp an image to [lo, hi] HU and rescale to [0, 1].
#[pyfunction]
fn clamp_and_normalize(vol: &Volume, lo: f64, hi: f64) -> PyResult<Volume> {
    Ok(Volume { inner: volume::clamp_and_normalize(&vol.inner, lo, hi).map_err(to_py)? })
}

/// Resample a volume to a new (sx, sy, sz) spacing.
#[pyfunction]
fn resample(vol: &Volume, spacing: (f64, f64, f64)) -> PyResult<Volume> {
    let target = [spacing.0, spacing.1, spacing.2];
    Ok(Volume { inner: volume::resample(&vol.inner, target).map_err(to_py)? })
}

/// Synthesize one fractured-bone phantom. Returns (image, label); the image
/// is in HU, the label marks bone foreground. `family` is "tibia-like" or
/// "pelvis-like"; the cube edge must be a multiple of 16.
#[pyfunction]
#[pyo3(signature = (family, edge, seed))]
fn generate_phantom(family: &str, edge: usize, seed: u64) -> PyResult<(Volume, Volume)> {
    let fam = Family::from_str(family).map_err(to_py)?;
    let name = match fam {
        Family::TibiaLike => "tibia-like",
        Family::PelvisLike => "pelvis-like",
    };
    let cfg = maeseg::config::Config::parse(&format!(
        "[data]\nedge = {edge}\nfamily = \"{name}\"\n"
    ))
    .map_err(to_py)?;
    let spec = cfg.phantom_spec(seed).map_err(to_py)?;
    let (img, lab) = phantom::generate(&spec).map_err(to_py)?;
    Ok((Volume { inner: img }, Volume { inner: lab }))
}

/// Draw a random token mask: returns (masked, visible) index lists.
#[pyfunction]
fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let mut rng = seeded(seed, STREAM_MASK);
    let plan = maeseg::mae::sample_mask(n_tokens, ratio, &mut rng).map_err(to_py)?;
    Ok((plan.masked, plan.visible))
}

/// A trained segmentation model restored from a checkpoint file.
#[pyclass(frozen, module = "maeseg_py")]
pub struct Segmenter {
    model: SegModel,
}

#[pymethods]
impl Segmenter {
    /// Restore from a fine-tuned or semi-supervised checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        let model = maeseg::train::seg_from_checkpoint(&ck).map_err(to_py)?;
        Ok(Segmenter { model })
    }

    /// Segment a normalized image (see `clamp_and_normalize`) into a binary
    /// label volume.
    fn predict(&self, py: Python<'_>, vol: &Volume) -> PyResult<Volume> {
        let inner = py.detach(|| self.model.predict(&vol.inner)).map_err(to_py)?;
        Ok(Volume { inner })
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.model.encoder.cfg.patch_size
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.model.encoder.cfg.embed_dim
    }

    #[getter]
    fn depth(&self) -> usize {
        self.model.encoder.cfg.depth
    }

    fn __repr__(&self) -> String {
        let c = &self.model.encoder.cfg;
        format!(
            "Segmenter(patch_size={}, embed_dim={}, depth={}, heads={})",
            c.patch_size, c.embed_dim, c.depth, c.heads
        )
    }
}

#[pymodule]
fn maeseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Volume>()?;
    m.add_class::<Segmenter>()?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(assd, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(clamp_and_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

//! Python bindings for the oct-restore toolkit.
//!
//! Images cross the boundary as 2-D float32 numpy arrays with intensities in
//! [0,1]. The module exposes phantom generation, the noise model, the core
//! image operations, the quality metrics, the loss arithmetic, and
//! checkpoint-based inference; the CLI remains the entry point for training.

use numpy::{IntoPyArray, PyArray2, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use oct_restore::bscan::{BScan, ImagePair, ScanKind, ShadowMask};
use oct_restore::dataset;
use oct_restore::error::Error;
use oct_restore::losses;
use oct_restore::metrics;
use oct_restore::noise;
use oct_restore::phantom;

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Argument(_) | Error::Config(_) | Error::Format(_) => {
            PyValueError::new_err(err.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn scan_from_array(array: PyReadonlyArray2<f32>, kind: ScanKind) -> PyResult<BScan> {
    let pixels = array.as_array().to_owned();
    BScan::new(pixels, "py", kind).map_err(to_py_err)
}

fn mask_from_array(array: PyReadonlyArray2<f32>, binary: bool) -> PyResult<ShadowMask> {
    ShadowMask::new(array.as_array().to_owned(), binary).map_err(to_py_err)
}

/// Renders one random layered-retina phantom. Returns (clean, mask,
/// spec_json) where the arrays are float32 (H, W) and the sidecar JSON
/// records the exact geometry.
#[pyfunction]
#[pyo3(signature = (height, width, seed, texture_amplitude=None))]
fn generate_phantom(
    py: Python<'_>,
    height: usize,
    width: usize,
    seed: u64,
    texture_amplitude: Option<f32>,
) -> PyResult<(Py<PyArray2<f32>>, Py<PyArray2<f32>>, String)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_0000);
    let mut spec = phantom::PhantomSpec::sample(height, width, &mut rng);
    if let Some(amp) = texture_amplitude {
        spec.texture_amplitude = amp;
    }
    let pair = phantom::generate_phantom(&spec, seed).map_err(to_py_err)?;
    let json = serde_json::to_string(&spec)
        .map_err(|e| PyRuntimeError::new_err(format!("spec encode: {e}")))?;
    Ok((
        pair.clean.pixels.into_pyarray(py).unbind(),
        pair.mask.values.into_pyarray(py).unbind(),
        json,
    ))
}

/// Applies the multiplicative vessel shadows recorded in a spec sidecar.
#[pyfunction]
fn apply_shadow(
    py: Python<'_>,
    clean: PyReadonlyArray2<f32>,
    mask: PyReadonlyArray2<f32>,
    spec_json: &str,
) -> PyResult<Py<PyArray2<f32>>> {
    let spec: phantom::PhantomSpec = serde_json::from_str(spec_json)
        .map_err(|e| PyValueError::new_err(format!("bad spec json: {e}")))?;
    let clean = scan_from_array(clean, ScanKind::Clean)?;
    let mask = mask_from_array(mask, true)?;
    let out = phantom::apply_shadow(&clean, &mask, &spec.vessels, phantom::ShadowDepthMode::Constant)
        .map_err(to_py_err)?;
    Ok(out.pixels.into_pyarray(py).unbind())
}

/// Per-pixel Gaussian noise scaled by a per-image uniform amplitude draw.
#[pyfunction]
#[pyo3(signature = (height, width, seed, amplitude_low=0.02, amplitude_high=0.5))]
fn sample_noise(
    py: Python<'_>,
    height: usize,
    width: usize,
    seed: u64,
    amplitude_low: f32,
    amplitude_high: f32,
) -> PyResult<Py<PyArray2<f32>>> {
    let params = noise::NoiseParams {
        amplitude_low,
        amplitude_high,
        ..noise::NoiseParams::default()
    };
    params.validate().map_err(to_py_err)?;
    let field = noise::sample_noise(height, width, &params, seed);
    Ok(field.into_pyarray(py).unbind())
}

/// Adds a noise field and clips back into [0,1].
#[pyfunction]
fn add_noise(
    py: Python<'_>,
    image: PyReadonlyArray2<f32>,
    field: PyReadonlyArray2<f32>,
) -> PyResult<Py<PyArray2<f32>>> {
    let scan = scan_from_array(image, ScanKind::Clean)?;
    let out = noise::add_noise(&scan, &field.as_array().to_owned()).map_err(to_py_err)?;
    Ok(out.pixels.into_pyarray(py).unbind())
}

/// One seeded augmentation draw applied jointly to an image and its mask.
#[pyfunction]
fn augment(
    py: Python<'_>,
    image: PyReadonlyArray2<f32>,
    mask: PyReadonlyArray2<f32>,
    seed: u64,
) -> PyResult<(Py<PyArray2<f32>>, Py<PyArray2<f32>>)> {
    let pair = ImagePair::new(
        scan_from_array(image, ScanKind::Clean)?,
        mask_from_array(mask, true)?,
        None,
    )
    .map_err(to_py_err)?;
    let out = noise::augment(&pair, &noise::AugmentParams::default(), seed);
    Ok((
        out.clean.pixels.into_pyarray(py).unbind(),
        out.mask.values.into_pyarray(py).unbind(),
    ))
}

#[pyfunction]
fn resize(
    py: Python<'_>,
    image: PyReadonlyArray2<f32>,
    height: usize,
    width: usize,
) -> PyResult<Py<PyArray2<f32>>> {
    let scan = scan_from_array(image, ScanKind::Clean)?;
    let out = oct_restore::bscan::resize(&scan, height, width).map_err(to_py_err)?;
    Ok(out.pixels.into_pyarray(py).unbind())
}

#[pyfunction]
fn min_max_scale(py: Python<'_>, image: PyReadonlyArray2<f32>) -> PyResult<Py<PyArray2<f32>>> {
    let out = oct_restore::bscan::min_max_scale_array(&image.as_array().to_owned());
    Ok(out.into_pyarray(py).unbind())
}

#[pyfunction]
fn agm(image: PyReadonlyArray2<f32>) -> PyResult<f64> {
    Ok(metrics::agm(&scan_from_array(image, ScanKind::Clean)?))
}

#[pyfunction]
fn psnr_paper(processed: PyReadonlyArray2<f32>, reference: PyReadonlyArray2<f32>) -> PyResult<f64> {
    metrics::psnr_paper(
        &scan_from_array(processed, ScanKind::Processed)?,
        &scan_from_array(reference, ScanKind::Multiframe)?,
    )
    .map_err(to_py_err)
}

#[pyfunction]
fn psnr_standard(
    processed: PyReadonlyArray2<f32>,
    reference: PyReadonlyArray2<f32>,
) -> PyResult<f64> {
    metrics::psnr_standard(
        &scan_from_array(processed, ScanKind::Processed)?,
        &scan_from_array(reference, ScanKind::Multiframe)?,
    )
    .map_err(to_py_err)
}

#[pyfunction]
fn ssim(x: PyReadonlyArray2<f32>, y: PyReadonlyArray2<f32>) -> PyResult<f64> {
    metrics::ssim(
        &scan_from_array(x, ScanKind::Processed)?,
        &scan_from_array(y, ScanKind::Multiframe)?,
    )
    .map_err(to_py_err)
}

/// Normalized detector-response score: sum(pred) / sum(gt).
#[pyfunction]
fn shadow_loss(pred: PyReadonlyArray2<f32>, gt: PyReadonlyArray2<f32>) -> PyResult<f64> {
    losses::shadow_loss(&mask_from_array(pred, false)?, &mask_from_array(gt, true)?)
        .map_err(to_py_err)
}

/// Channel Gram matrix of a (C, H, W) float64 feature map.
#[pyfunction]
fn gram(py: Python<'_>, feature: PyReadonlyArray3<f64>) -> PyResult<Py<PyArray2<f64>>> {
    let g = losses::gram(&feature.as_array().to_owned().into_dyn());
    Ok(g.into_pyarray(py).unbind())
}

#[pyfunction]
fn content_loss(
    feats_d: Vec<PyReadonlyArray3<f64>>,
    feats_c: Vec<PyReadonlyArray3<f64>>,
) -> PyResult<f64> {
    let d: Vec<_> = feats_d.iter().map(|f| f.as_array().to_owned().into_dyn()).collect();
    let c: Vec<_> = feats_c.iter().map(|f| f.as_array().to_owned().into_dyn()).collect();
    losses::content_loss(&d, &c).map_err(to_py_err)
}

#[pyfunction]
fn style_loss(
    feats_d: Vec<PyReadonlyArray3<f64>>,
    feats_c: Vec<PyReadonlyArray3<f64>>,
) -> PyResult<f64> {
    let d: Vec<_> = feats_d.iter().map(|f| f.as_array().to_owned().into_dyn()).collect();
    let c: Vec<_> = feats_c.iter().map(|f| f.as_array().to_owned().into_dyn()).collect();
    losses::style_loss(&d, &c).map_err(to_py_err)
}

/// Weighted total loss; defaults to the published weights.
#[pyfunction]
#[pyo3(signature = (content, style, shadow, content_weights=None, style_weights=None))]
fn total_loss(
    content: Vec<f64>,
    style: Vec<f64>,
    shadow: f64,
    content_weights: Option<[f64; 3]>,
    style_weights: Option<[f64; 3]>,
) -> PyResult<f64> {
    let default = losses::LossWeights::default();
    let weights = losses::LossWeights {
        content: content_weights.unwrap_or(default.content),
        style: style_weights.unwrap_or(default.style),
    };
    losses::total_loss(&content, &style, shadow, &weights).map_err(to_py_err)
}

/// Writes a phantom dataset in the standard directory layout.
#[pyfunction]
#[pyo3(signature = (out_dir, count, height, width, seed))]
fn generate_dataset(
    out_dir: &str,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> PyResult<usize> {
    let ds = dataset::generate_dataset(
        std::path::Path::new(out_dir),
        count,
        height,
        width,
        seed,
        None,
        &noise::NoiseParams::default(),
    )
    .map_err(to_py_err)?;
    Ok(ds.len())
}

/// A trained network loaded from a checkpoint directory.
#[pyclass]
struct Checkpoint {
    inner: oct_restore::checkpoint::Checkpoint<f32>,
}

#[pymethods]
impl Checkpoint {
    #[new]
    fn new(dir: &str) -> PyResult<Self> {
        let inner =
            oct_restore::checkpoint::Checkpoint::<f32>::load(std::path::Path::new(dir))
                .map_err(to_py_err)?;
        Ok(Checkpoint { inner })
    }

    /// "detector" or "processor".
    #[getter]
    fn kind(&self) -> String {
        self.inner.manifest.kind.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.net.parameter_count()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.manifest.input_size
    }

    /// Runs the network on one scan. Processor checkpoints resize to their
    /// training size and back; detector checkpoints return the probability
    /// mask at the input size.
    fn infer<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray2<f32>,
    ) -> PyResult<Bound<'py, PyArray2<f32>>> {
        let scan = scan_from_array(image, ScanKind::Noisy)?;
        if self.inner.manifest.kind == "processor" {
            let (out, _) = oct_restore::pipeline::infer_scan(&scan, &self.inner).map_err(to_py_err)?;
            Ok(out.pixels.into_pyarray(py))
        } else {
            let out = self.inner.net.infer(&scan.pixels).map_err(to_py_err)?;
            Ok(out.into_pyarray(py))
        }
    }
}

#[pymodule]
fn oct_restore_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(apply_shadow, m)?)?;
    m.add_function(wrap_pyfunction!(sample_noise, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(resize, m)?)?;
    m.add_function(wrap_pyfunction!(min_max_scale, m)?)?;
    m.add_function(wrap_pyfunction!(agm, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_paper, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_standard, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(shadow_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gram, m)?)?;
    m.add_function(wrap_pyfunction!(content_loss, m)?)?;
    m.add_function(wrap_pyfunction!(style_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}

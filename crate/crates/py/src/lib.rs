//! Python bindings. Images cross the boundary as flat `3*H*W` float lists in
//! channel-major order together with their height and width.

use inncrypt_core::fed::{self, Architecture, CipherContainer, FedModel};
use inncrypt_core::keygen::{self, KeySchedule};
use inncrypt_core::metrics::{self, Rendering8};
use inncrypt_core::numerics::Tensor;
use inncrypt_core::{imageio, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image_tensor(data: Vec<f32>, height: usize, width: usize) -> PyResult<Tensor<f32>> {
    Tensor::new(vec![3, height, width], data).map_err(to_py)
}

fn rendering(data: Vec<u8>, height: usize, width: usize) -> PyResult<Rendering8> {
    if data.len() != 3 * height * width {
        return Err(PyValueError::new_err(format!(
            "expected {} bytes for a 3x{height}x{width} picture, got {}",
            3 * height * width,
            data.len()
        )));
    }
    Ok(Rendering8 {
        channels: 3,
        height,
        width,
        data,
        min: 0.0,
        max: 255.0,
    })
}

#[pyclass(name = "Model", module = "inncrypt")]
struct PyModel(FedModel<f32>);

#[pymethods]
impl PyModel {
    /// Freshly initialized model.
    #[new]
    #[pyo3(signature = (blocks = fed::DEFAULT_BLOCKS, growth = fed::DEFAULT_GROWTH, slope = fed::DEFAULT_SLOPE, seed = 0))]
    fn new(blocks: usize, growth: usize, slope: f32, seed: u64) -> PyResult<Self> {
        let arch = Architecture { blocks, growth, slope };
        FedModel::init(arch, seed).map(PyModel).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        fed::load_weights(path).map(PyModel).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        fed::save_weights(&self.0, path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn blocks(&self) -> usize {
        self.0.architecture().blocks
    }

    #[getter]
    fn growth(&self) -> usize {
        self.0.architecture().growth
    }

    fn architecture_hash<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.architecture_hash())
    }

    fn encrypt(&self, image: Vec<f32>, height: usize, width: usize, password: &[u8]) -> PyResult<PyCipher> {
        let t = image_tensor(image, height, width)?;
        fed::encrypt(&t, password, &self.0).map(PyCipher).map_err(to_py)
    }

    /// Unclamped float recovery.
    fn decrypt(&self, cipher: &PyCipher, password: &[u8]) -> PyResult<Vec<f32>> {
        fed::decrypt(&cipher.0, password, &self.0)
            .map(Tensor::into_data)
            .map_err(to_py)
    }
}

#[pyclass(name = "Cipher", module = "inncrypt")]
struct PyCipher(CipherContainer);

#[pymethods]
impl PyCipher {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        fed::cipher_from_bytes(data).map(PyCipher).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        fed::load_cipher(path).map(PyCipher).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        fed::save_cipher(&self.0, path).map_err(to_py)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &fed::cipher_to_bytes(&self.0))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    fn payload(&self) -> Vec<f32> {
        self.0.payload.data().to_vec()
    }

    /// 8-bit min-max picture of the cipher, channel-major.
    fn render8<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let r = metrics::render8(&self.0.payload).map_err(to_py)?;
        Ok(PyBytes::new(py, &r.data))
    }
}

/// Returns `(pixels, height, width)`.
#[pyfunction]
fn load_image(path: &str) -> PyResult<(Vec<f32>, usize, usize)> {
    let t = imageio::load_image(path).map_err(to_py)?;
    let (_, h, w) = t.dims3().map_err(to_py)?;
    Ok((t.into_data(), h, w))
}

#[pyfunction]
fn save_image(image: Vec<f32>, height: usize, width: usize, path: &str) -> PyResult<()> {
    imageio::save_image(&image_tensor(image, height, width)?, path).map_err(to_py)
}

/// Returns `(mask bits row-major, secret map values)`.
#[pyfunction]
#[pyo3(signature = (password, width, height, iterations = keygen::DEFAULT_ITERATIONS))]
fn key_schedule(password: &[u8], width: usize, height: usize, iterations: u32) -> PyResult<(Vec<bool>, Vec<f32>)> {
    let s = KeySchedule::derive_with(password, width, height, iterations).map_err(to_py)?;
    Ok((s.mask.bits().to_vec(), s.secret.tensor().data().to_vec()))
}

#[pyfunction]
fn perturb_key<'py>(py: Python<'py>, password: &[u8], bit: usize) -> PyResult<Bound<'py, PyBytes>> {
    let k = keygen::perturb_key(password, bit).map_err(to_py)?;
    Ok(PyBytes::new(py, &k))
}

/// Returns `(psnr, ssim, mae, rmse)`.
#[pyfunction]
fn quality_metrics(reference: Vec<f32>, test: Vec<f32>, height: usize, width: usize) -> PyResult<(f64, f64, f64, f64)> {
    let q = metrics::quality_metrics(&image_tensor(reference, height, width)?, &image_tensor(test, height, width)?)
        .map_err(to_py)?;
    Ok((q.psnr, q.ssim, q.mae, q.rmse))
}

#[pyfunction]
fn entropy8(picture: Vec<u8>, height: usize, width: usize) -> PyResult<f64> {
    Ok(metrics::entropy8(&rendering(picture, height, width)?))
}

/// Returns `(npcr %, uaci %)` of two 8-bit pictures.
#[pyfunction]
fn npcr_uaci(a: Vec<u8>, b: Vec<u8>, height: usize, width: usize) -> PyResult<(f64, f64)> {
    let d = metrics::npcr_uaci(&rendering(a, height, width)?, &rendering(b, height, width)?).map_err(to_py)?;
    Ok((d.npcr, d.uaci))
}

#[pymodule]
fn inncrypt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyCipher>()?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(key_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_key, m)?)?;
    m.add_function(wrap_pyfunction!(quality_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(entropy8, m)?)?;
    m.add_function(wrap_pyfunction!(npcr_uaci, m)?)?;
    Ok(())
}

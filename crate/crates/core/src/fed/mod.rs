//! Invertible encryption network, cipher containers and their file formats.

mod format;
mod model;

pub use format::write_atomic;
pub use format::{
    cipher_from_bytes, cipher_to_bytes, load_cipher, load_weights, save_cipher, save_weights, weights_from_bytes,
    weights_to_bytes, CIPHER_MAGIC, CIPHER_VERSION, WEIGHTS_MAGIC,
};
pub use model::{
    inb_forward, inb_inverse, subnet_param_base, Architecture, FedModel, InbParams, DEFAULT_BLOCKS, DEFAULT_GROWTH,
    DEFAULT_SLOPE, INIT_HEAD_DAMPING, INIT_STD,
};

use crate::error::{invalid, Error, Result};
use crate::keygen::KeySchedule;
use crate::numerics::{Eager, Tensor};
use crate::splitmerge::{SplitLayout, IMAGE_CHANNELS};

/// Full-precision cipher canvas plus the hash of the model that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct CipherContainer {
    pub width: usize,
    pub height: usize,
    pub model_hash: [u8; 32],
    /// Planar `3 x H x W` cipher values.
    pub payload: Tensor<f32>,
}

impl CipherContainer {
    pub fn new(payload: Tensor<f32>, model_hash: [u8; 32]) -> Result<Self> {
        let (c, height, width) = payload.dims3()?;
        if c != IMAGE_CHANNELS {
            return invalid(format!("cipher payload must have {IMAGE_CHANNELS} channels, got {c}"));
        }
        if width == 0 || height == 0 || width % 2 != 0 {
            return invalid(format!("cipher dimensions {width}x{height} need a nonzero even width"));
        }
        Ok(CipherContainer {
            width,
            height,
            model_hash,
            payload,
        })
    }
}

fn check_plain(image: &Tensor<f32>) -> Result<(usize, usize)> {
    let (c, h, w) = image.dims3()?;
    if c != IMAGE_CHANNELS {
        return invalid(format!("image must have {IMAGE_CHANNELS} channels, got {c}"));
    }
    if w == 0 || h == 0 || w % 2 != 0 {
        return invalid(format!("image width must be even and nonzero, got {w}x{h}"));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return invalid("image values must lie in [0, 1]");
    }
    Ok((w, h))
}

fn check_schedule(schedule: &KeySchedule, width: usize, height: usize) -> Result<()> {
    if schedule.mask.width() != width || schedule.mask.height() != height {
        return invalid(format!(
            "key schedule is for {}x{}, image is {width}x{height}",
            schedule.mask.width(),
            schedule.mask.height()
        ));
    }
    Ok(())
}

/// Split, run every block forward and merge, under an already derived key.
pub fn encrypt_canvas(image: &Tensor<f32>, schedule: &KeySchedule, model: &FedModel<f32>) -> Result<Tensor<f32>> {
    let (w, h) = image.dims3().map(|(_, h, w)| (w, h))?;
    check_schedule(schedule, w, h)?;
    let layout = SplitLayout::new(&schedule.mask);
    let mut ops = Eager;
    let key = schedule.secret.tensor().clone();
    let (x, y) = layout.extract_with(&mut ops, image)?;
    let (x, y) = model.forward(&mut ops, &x, &y, &key)?;
    layout.place_with(&mut ops, &x, &y)
}

/// Inverse of [`encrypt_canvas`]; the output is not clamped.
pub fn decrypt_canvas(cipher: &Tensor<f32>, schedule: &KeySchedule, model: &FedModel<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = cipher.dims3()?;
    if c != IMAGE_CHANNELS {
        return invalid(format!("cipher must have {IMAGE_CHANNELS} channels, got {c}"));
    }
    check_schedule(schedule, w, h)?;
    let layout = SplitLayout::new(&schedule.mask);
    let mut ops = Eager;
    let key = schedule.secret.tensor().clone();
    let (x, y) = layout.extract_with(&mut ops, cipher)?;
    let (x, y) = model.inverse(&mut ops, &x, &y, &key)?;
    layout.place_with(&mut ops, &x, &y)
}

pub fn encrypt_with_schedule(
    image: &Tensor<f32>,
    schedule: &KeySchedule,
    model: &FedModel<f32>,
) -> Result<CipherContainer> {
    check_plain(image)?;
    let payload = encrypt_canvas(image, schedule, model)?;
    CipherContainer::new(payload, model.architecture_hash())
}

pub fn decrypt_with_schedule(
    cipher: &CipherContainer,
    schedule: &KeySchedule,
    model: &FedModel<f32>,
) -> Result<Tensor<f32>> {
    if cipher.model_hash != model.architecture_hash() {
        return Err(Error::IncompatibleModel(
            "cipher was produced by a different model".into(),
        ));
    }
    if cipher.payload.shape() != [IMAGE_CHANNELS, cipher.height, cipher.width] {
        return Err(Error::Format("cipher payload does not match its dimensions".into()));
    }
    decrypt_canvas(&cipher.payload, schedule, model)
}

/// Encrypt a `3 x H x W` image in `[0, 1]` under `password`.
pub fn encrypt(image: &Tensor<f32>, password: &[u8], model: &FedModel<f32>) -> Result<CipherContainer> {
    let (w, h) = check_plain(image)?;
    let schedule = KeySchedule::derive(password, w, h)?;
    encrypt_with_schedule(image, &schedule, model)
}

pub fn decrypt(cipher: &CipherContainer, password: &[u8], model: &FedModel<f32>) -> Result<Tensor<f32>> {
    if cipher.model_hash != model.architecture_hash() {
        return Err(Error::IncompatibleModel(
            "cipher was produced by a different model".into(),
        ));
    }
    let schedule = KeySchedule::derive(password, cipher.width, cipher.height)?;
    decrypt_with_schedule(cipher, &schedule, model)
}

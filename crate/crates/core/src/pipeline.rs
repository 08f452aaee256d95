//! Orchestration of key derivation, splitting, the invertible network and
//! the noise channel, shared by inference and training.

use crate::error::Result;
use crate::fed::FedModel;
use crate::keygen::{KeyMaterial, KeySchedule, SecretMap, DEFAULT_ITERATIONS, DEFAULT_SALT};
use crate::metrics::{render8, Rendering8};
use crate::noise::{apply_noise, NoiseSpec};
use crate::numerics::{Eager, Ops, Real, Tensor};
use crate::splitmerge::SplitLayout;

/// Everything one password determines for one image size. The layout and
/// secret map come from a single key stream.
#[derive(Clone, Debug)]
pub struct PipelineContext<'m> {
    pub model: &'m FedModel<f32>,
    pub schedule: KeySchedule,
    pub layout: SplitLayout,
}

impl<'m> PipelineContext<'m> {
    pub fn new(model: &'m FedModel<f32>, password: &[u8], width: usize, height: usize) -> Result<Self> {
        Self::with_iterations(model, password, width, height, DEFAULT_ITERATIONS)
    }

    pub fn with_iterations(
        model: &'m FedModel<f32>,
        password: &[u8],
        width: usize,
        height: usize,
        iterations: u32,
    ) -> Result<Self> {
        let mut material = KeyMaterial::derive_with(password, &DEFAULT_SALT, iterations)?;
        Self::from_material(model, &mut material, width, height)
    }

    pub fn from_material(
        model: &'m FedModel<f32>,
        material: &mut KeyMaterial,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let schedule = KeySchedule::from_material(material, width, height)?;
        Ok(Self::from_schedule(model, schedule))
    }

    pub fn from_schedule(model: &'m FedModel<f32>, schedule: KeySchedule) -> Self {
        let layout = SplitLayout::new(&schedule.mask);
        PipelineContext { model, schedule, layout }
    }

    pub fn secret(&self) -> &SecretMap {
        &self.schedule.secret
    }
}

/// Encryption on any [`Ops`] backend: split, all blocks forward, merge.
/// Returns the cipher canvas and the two output legs.
pub fn encrypt_ops<T: Real, O: Ops<T>>(
    ops: &mut O,
    model: &FedModel<T>,
    layout: &SplitLayout,
    key: &Tensor<T>,
    image: &O::V,
) -> Result<(O::V, O::V, O::V)> {
    let k = ops.constant(key.clone());
    let (x, y) = layout.extract_with(ops, image)?;
    let (x, y) = model.forward(ops, &x, &y, &k)?;
    let cipher = layout.place_with(ops, &x, &y)?;
    Ok((cipher, x, y))
}

/// Decryption on any [`Ops`] backend: split, all blocks inverted in reverse, merge.
pub fn decrypt_ops<T: Real, O: Ops<T>>(
    ops: &mut O,
    model: &FedModel<T>,
    layout: &SplitLayout,
    key: &Tensor<T>,
    canvas: &O::V,
) -> Result<O::V> {
    let k = ops.constant(key.clone());
    let (x, y) = layout.extract_with(ops, canvas)?;
    let (x, y) = model.inverse(ops, &x, &y, &k)?;
    layout.place_with(ops, &x, &y)
}

/// Intermediates of one encryption and distortion.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub cipher: Tensor<f32>,
    pub x_leg: Tensor<f32>,
    pub y_leg: Tensor<f32>,
    pub degraded: Tensor<f32>,
    /// 8-bit picture of the cipher; its min/max are the normalization record.
    pub cipher_rendering: Rendering8,
}

pub fn forward_with_context(ctx: &PipelineContext<'_>, image: &Tensor<f32>, noise: &NoiseSpec) -> Result<ForwardOutput> {
    let cipher = crate::fed::encrypt_with_schedule(image, &ctx.schedule, ctx.model)?.payload;
    let (x_leg, y_leg) = ctx.layout.extract_with(&mut Eager, &cipher)?;
    let degraded = apply_noise(&mut Eager, &cipher, noise)?;
    let cipher_rendering = render8(&cipher)?;
    Ok(ForwardOutput {
        cipher,
        x_leg,
        y_leg,
        degraded,
        cipher_rendering,
    })
}

pub fn forward_pipeline(
    image: &Tensor<f32>,
    password: &[u8],
    model: &FedModel<f32>,
    noise: &NoiseSpec,
) -> Result<ForwardOutput> {
    let (_, h, w) = image.dims3()?;
    let ctx = PipelineContext::new(model, password, w, h)?;
    forward_with_context(&ctx, image, noise)
}

pub fn backward_with_context(ctx: &PipelineContext<'_>, degraded: &Tensor<f32>) -> Result<Tensor<f32>> {
    crate::fed::decrypt_canvas(degraded, &ctx.schedule, ctx.model)
}

/// Decrypts an in-memory (possibly distorted) canvas; the output is not clamped.
pub fn backward_pipeline(degraded: &Tensor<f32>, password: &[u8], model: &FedModel<f32>) -> Result<Tensor<f32>> {
    let (_, h, w) = degraded.dims3()?;
    let ctx = PipelineContext::new(model, password, w, h)?;
    backward_with_context(&ctx, degraded)
}

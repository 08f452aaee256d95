//! The operation set the network, noise channel and losses are written against.
//!
//! [`Eager`] evaluates immediately on tensors; [`Tape`](super::Tape) records
//! the same calls for reverse-mode differentiation.

use std::sync::Arc;

use crate::error::Result;

use super::kernels as k;
use super::{ConvLayer, Real, Tensor};

/// Identifies a trainable tensor by its position in the model's parameter order.
pub type ParamId = usize;

pub trait Ops<T: Real> {
    type V: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    /// Convolution with the layer's weight registered as `param_base` and its
    /// bias as `param_base + 1`.
    fn conv2d(&mut self, x: &Self::V, layer: &ConvLayer<T>, param_base: ParamId) -> Result<Self::V>;
    fn leaky_relu(&mut self, x: &Self::V, slope: T) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn exp(&mut self, x: &Self::V) -> Self::V;
    fn scale(&mut self, x: &Self::V, s: T) -> Self::V;
    fn add_scalar(&mut self, x: &Self::V, s: T) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, parts: &[&Self::V]) -> Result<Self::V>;
    fn gather(&mut self, x: &Self::V, index: &Arc<[u32]>, shape: &[usize]) -> Result<Self::V>;
    fn clamp(&mut self, x: &Self::V, lo: T, hi: T) -> Self::V;

    fn mse(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn soft_hist_kl(&mut self, x: &Self::V) -> Result<Self::V>;
    fn abs_pair_corr(&mut self, x: &Self::V, pairs: &Arc<[(u32, u32)]>) -> Result<Self::V>;
    fn minmax_normalize(&mut self, x: &Self::V) -> Result<Self::V>;

    fn blur(&mut self, x: &Self::V, taps: &Arc<[f64]>) -> Result<Self::V>;
    fn dct_mask(&mut self, x: &Self::V, keep: &[bool; 64]) -> Result<Self::V>;
    fn salt_pepper(&mut self, x: &Self::V, hits: &Arc<[(u32, bool)]>) -> Result<Self::V>;
    fn range_noise(&mut self, x: &Self::V, z: Tensor<T>, sigma: f64) -> Result<Self::V>;
    /// Median filter whose backward pass is the identity.
    fn median_straight_through(&mut self, x: &Self::V, window: usize) -> Result<Self::V>;
}

/// Immediate evaluation without gradient bookkeeping.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Real> Ops<T> for Eager {
    type V = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv2d(&mut self, x: &Tensor<T>, layer: &ConvLayer<T>, _: ParamId) -> Result<Tensor<T>> {
        k::conv2d(x, &layer.weight, &layer.bias)
    }

    fn leaky_relu(&mut self, x: &Tensor<T>, slope: T) -> Tensor<T> {
        k::leaky_relu(x, slope)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        k::sigmoid(x)
    }

    fn exp(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.map(T::exp)
    }

    fn scale(&mut self, x: &Tensor<T>, s: T) -> Tensor<T> {
        x.map(|v| v * s)
    }

    fn add_scalar(&mut self, x: &Tensor<T>, s: T) -> Tensor<T> {
        x.map(|v| v + s)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.zip_map(b, |x, y| x * y)
    }

    fn concat(&mut self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        k::concat(parts)
    }

    fn gather(&mut self, x: &Tensor<T>, index: &Arc<[u32]>, shape: &[usize]) -> Result<Tensor<T>> {
        k::gather(x, index, shape)
    }

    fn clamp(&mut self, x: &Tensor<T>, lo: T, hi: T) -> Tensor<T> {
        x.map(|v| v.max(lo).min(hi))
    }

    fn mse(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(T::lit(k::mse(a, b)?)))
    }

    fn soft_hist_kl(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(T::lit(k::soft_hist_kl(x)?)))
    }

    fn abs_pair_corr(&mut self, x: &Tensor<T>, pairs: &Arc<[(u32, u32)]>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(T::lit(k::pair_correlation(x, pairs)?.abs())))
    }

    fn minmax_normalize(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        k::minmax_normalize(x)
    }

    fn blur(&mut self, x: &Tensor<T>, taps: &Arc<[f64]>) -> Result<Tensor<T>> {
        k::gaussian_blur(x, taps)
    }

    fn dct_mask(&mut self, x: &Tensor<T>, keep: &[bool; 64]) -> Result<Tensor<T>> {
        k::dct_mask(x, keep)
    }

    fn salt_pepper(&mut self, x: &Tensor<T>, hits: &Arc<[(u32, bool)]>) -> Result<Tensor<T>> {
        k::salt_pepper(x, hits)
    }

    fn range_noise(&mut self, x: &Tensor<T>, z: Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        k::add_range_noise(x, &z, sigma)
    }

    fn median_straight_through(&mut self, x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
        k::median_blur(x, window)
    }
}

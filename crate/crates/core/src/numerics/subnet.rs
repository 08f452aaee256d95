use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};

use super::ops::{Ops, ParamId};
use super::{Real, Tensor};

/// Image channels plus the secret-map channel.
pub const SUBNET_IN_CHANNELS: usize = 4;
pub const SUBNET_OUT_CHANNELS: usize = 3;
pub const SUBNET_LAYERS: usize = 5;

/// One 3x3 convolution: `out_ch x in_ch x 3 x 3` weights and `out_ch` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[out_ch, in_ch, 3, 3]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Densely connected five-layer conv stack mapping `4 x H x W` to `3 x H x W`.
///
/// Layer `i` sees the block input concatenated with every earlier layer's
/// output, so its input width is `4 + (i - 1) * growth`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSubnetParams<T: Real = f32> {
    pub growth: usize,
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> ConvSubnetParams<T> {
    pub fn layer_shapes(growth: usize) -> Vec<(usize, usize)> {
        (0..SUBNET_LAYERS)
            .map(|i| {
                let in_ch = SUBNET_IN_CHANNELS + i * growth;
                let out_ch = if i + 1 == SUBNET_LAYERS { SUBNET_OUT_CHANNELS } else { growth };
                (in_ch, out_ch)
            })
            .collect()
    }

    pub fn zeros(growth: usize) -> Self {
        ConvSubnetParams {
            growth,
            layers: Self::layer_shapes(growth)
                .into_iter()
                .map(|(i, o)| ConvLayer::zeros(i, o))
                .collect(),
        }
    }

    /// Weights drawn from `N(0, std^2)`, the output layer additionally scaled
    /// by `head_damping`; biases zero.
    pub fn random(growth: usize, std: f64, head_damping: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(growth);
        let normal = Normal::new(0.0, std).expect("finite std");
        let last = p.layers.len() - 1;
        for (i, layer) in p.layers.iter_mut().enumerate() {
            let s = if i == last { head_damping } else { 1.0 };
            for w in layer.weight.data_mut() {
                *w = T::lit(normal.sample(rng) * s);
            }
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn check(&self) -> Result<()> {
        let shapes = Self::layer_shapes(self.growth);
        if self.layers.len() != shapes.len() {
            return invalid(format!("subnet needs {} layers, has {}", shapes.len(), self.layers.len()));
        }
        for (i, (layer, (in_ch, out_ch))) in self.layers.iter().zip(shapes).enumerate() {
            if layer.weight.shape() != [out_ch, in_ch, 3, 3] || layer.bias.shape() != [out_ch] {
                return invalid(format!(
                    "subnet layer {} has weight {:?}, expected [{out_ch}, {in_ch}, 3, 3]",
                    i + 1,
                    layer.weight.shape()
                ));
            }
        }
        Ok(())
    }
}

/// Number of parameter tensors a subnet registers (weight and bias per layer).
pub const SUBNET_PARAM_TENSORS: usize = 2 * SUBNET_LAYERS;

pub fn subnet_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    input: &O::V,
    params: &ConvSubnetParams<T>,
    slope: T,
    param_base: ParamId,
) -> Result<O::V> {
    let c = ops.value(input).dims3()?.0;
    if c != SUBNET_IN_CHANNELS {
        return invalid(format!("subnet input must have {SUBNET_IN_CHANNELS} channels, got {c}"));
    }
    let last = params.layers.len() - 1;
    let mut features = vec![input.clone()];
    for (i, layer) in params.layers.iter().enumerate() {
        let x = if features.len() == 1 {
            features[0].clone()
        } else {
            let parts: Vec<&O::V> = features.iter().collect();
            ops.concat(&parts)?
        };
        let y = ops.conv2d(&x, layer, param_base + 2 * i)?;
        if i == last {
            return Ok(y);
        }
        features.push(ops.leaky_relu(&y, slope));
    }
    unreachable!("subnet has at least one layer")
}

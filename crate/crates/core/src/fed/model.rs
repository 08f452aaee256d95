use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::numerics::{subnet_forward, ConvSubnetParams, Ops, ParamId, Real, Tensor, SUBNET_PARAM_TENSORS};

pub const DEFAULT_BLOCKS: usize = 4;
pub const DEFAULT_GROWTH: usize = 32;
pub const DEFAULT_SLOPE: f32 = 0.2;
pub const INIT_STD: f64 = 0.02;
pub const INIT_HEAD_DAMPING: f64 = 0.1;

/// Shape hyper-parameters of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub blocks: usize,
    pub growth: usize,
    pub slope: f32,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            blocks: DEFAULT_BLOCKS,
            growth: DEFAULT_GROWTH,
            slope: DEFAULT_SLOPE,
        }
    }
}

impl Architecture {
    pub fn check(&self) -> Result<()> {
        if self.blocks == 0 || self.growth == 0 {
            return invalid("a model needs at least one block and a positive growth width");
        }
        if !self.slope.is_finite() {
            return invalid("slope must be finite");
        }
        Ok(())
    }
}

/// The four conditioning subnets of one invertible block.
#[derive(Clone, Debug, PartialEq)]
pub struct InbParams<T: Real = f32> {
    /// Log-scale for X, conditioned on Y.
    pub eta: ConvSubnetParams<T>,
    /// Shift for X, conditioned on Y.
    pub rho: ConvSubnetParams<T>,
    /// Log-scale for Y, conditioned on the updated X.
    pub phi: ConvSubnetParams<T>,
    /// Shift for Y, conditioned on the updated X.
    pub omega: ConvSubnetParams<T>,
}

impl<T: Real> InbParams<T> {
    pub fn subnets(&self) -> [&ConvSubnetParams<T>; 4] {
        [&self.eta, &self.rho, &self.phi, &self.omega]
    }

    pub fn subnets_mut(&mut self) -> [&mut ConvSubnetParams<T>; 4] {
        [&mut self.eta, &mut self.rho, &mut self.phi, &mut self.omega]
    }
}

/// Parameter id of subnet `subnet` (0..4 in eta, rho, phi, omega order) of `block`.
pub fn subnet_param_base(block: usize, subnet: usize) -> ParamId {
    (block * 4 + subnet) * SUBNET_PARAM_TENSORS
}

/// X' = X * exp(sigmoid(eta(Y|K))) + rho(Y|K), then
/// Y' = Y * exp(sigmoid(phi(X'|K))) + omega(X'|K).
pub fn inb_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    y: &O::V,
    key: &O::V,
    block: &InbParams<T>,
    slope: T,
    index: usize,
) -> Result<(O::V, O::V)> {
    let sx = ops.value(x).shape().to_vec();
    if ops.value(y).shape() != sx.as_slice() {
        return invalid("block inputs must have the same shape");
    }
    let yk = ops.concat(&[y, key])?;
    let log_s = subnet_forward(ops, &yk, &block.eta, slope, subnet_param_base(index, 0))?;
    let shift = subnet_forward(ops, &yk, &block.rho, slope, subnet_param_base(index, 1))?;
    let gate = ops.sigmoid(&log_s);
    let scale = ops.exp(&gate);
    let scaled = ops.mul(x, &scale)?;
    let x_next = ops.add(&scaled, &shift)?;

    let xk = ops.concat(&[&x_next, key])?;
    let log_s = subnet_forward(ops, &xk, &block.phi, slope, subnet_param_base(index, 2))?;
    let shift = subnet_forward(ops, &xk, &block.omega, slope, subnet_param_base(index, 3))?;
    let gate = ops.sigmoid(&log_s);
    let scale = ops.exp(&gate);
    let scaled = ops.mul(y, &scale)?;
    let y_next = ops.add(&scaled, &shift)?;
    Ok((x_next, y_next))
}

/// Exact inverse of [`inb_forward`]; Y is recovered first.
pub fn inb_inverse<T: Real, O: Ops<T>>(
    ops: &mut O,
    x_next: &O::V,
    y_next: &O::V,
    key: &O::V,
    block: &InbParams<T>,
    slope: T,
    index: usize,
) -> Result<(O::V, O::V)> {
    let sx = ops.value(x_next).shape().to_vec();
    if ops.value(y_next).shape() != sx.as_slice() {
        return invalid("block inputs must have the same shape");
    }
    let xk = ops.concat(&[x_next, key])?;
    let log_s = subnet_forward(ops, &xk, &block.phi, slope, subnet_param_base(index, 2))?;
    let shift = subnet_forward(ops, &xk, &block.omega, slope, subnet_param_base(index, 3))?;
    let gate = ops.sigmoid(&log_s);
    let neg = ops.scale(&gate, -T::one());
    let inv_scale = ops.exp(&neg);
    let centered = ops.sub(y_next, &shift)?;
    let y = ops.mul(&centered, &inv_scale)?;

    let yk = ops.concat(&[&y, key])?;
    let log_s = subnet_forward(ops, &yk, &block.eta, slope, subnet_param_base(index, 0))?;
    let shift = subnet_forward(ops, &yk, &block.rho, slope, subnet_param_base(index, 1))?;
    let gate = ops.sigmoid(&log_s);
    let neg = ops.scale(&gate, -T::one());
    let inv_scale = ops.exp(&neg);
    let centered = ops.sub(x_next, &shift)?;
    let x = ops.mul(&centered, &inv_scale)?;
    Ok((x, y))
}

/// Parameters of the invertible encryption network. Encryption and
/// decryption read the same tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FedModel<T: Real = f32> {
    arch: Architecture,
    blocks: Vec<InbParams<T>>,
}

impl<T: Real> FedModel<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.check()?;
        let sub = || ConvSubnetParams::zeros(arch.growth);
        Ok(FedModel {
            arch,
            blocks: (0..arch.blocks)
                .map(|_| InbParams {
                    eta: sub(),
                    rho: sub(),
                    phi: sub(),
                    omega: sub(),
                })
                .collect(),
        })
    }

    /// Default initialization: weights `N(0, 0.02^2)`, output layers damped
    /// by 0.1, biases zero. Every subnet draws independently.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        Self::init_scaled(arch, seed, INIT_STD, INIT_HEAD_DAMPING)
    }

    pub fn init_scaled(arch: Architecture, seed: u64, std: f64, head_damping: f64) -> Result<Self> {
        arch.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sub = || ConvSubnetParams::random(arch.growth, std, head_damping, &mut rng);
        let blocks = (0..arch.blocks)
            .map(|_| InbParams {
                eta: sub(),
                rho: sub(),
                phi: sub(),
                omega: sub(),
            })
            .collect();
        Ok(FedModel { arch, blocks })
    }

    pub fn from_blocks(arch: Architecture, blocks: Vec<InbParams<T>>) -> Result<Self> {
        arch.check()?;
        if blocks.len() != arch.blocks {
            return invalid(format!("expected {} blocks, got {}", arch.blocks, blocks.len()));
        }
        for b in &blocks {
            for s in b.subnets() {
                if s.growth != arch.growth {
                    return invalid("subnet growth differs from the architecture");
                }
                s.check()?;
            }
        }
        Ok(FedModel { arch, blocks })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn blocks(&self) -> &[InbParams<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [InbParams<T>] {
        &mut self.blocks
    }

    pub fn slope(&self) -> T {
        T::lit(f64::from(self.arch.slope))
    }

    /// Parameter tensors in serialization order: block, subnet
    /// (eta, rho, phi, omega), layer, weight then bias. The position is the
    /// tensor's [`ParamId`].
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for s in b.subnets() {
                for l in &s.layers {
                    out.push(&l.weight);
                    out.push(&l.bias);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for s in b.subnets_mut() {
                for l in &mut s.layers {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return invalid(format!("expected {} values, got {}", self.param_count(), flat.len()));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> FedModel<U> {
        let mut out = FedModel::<U>::zeros(self.arch).expect("architecture already validated");
        let flat: Vec<U> = self.flat_params().into_iter().map(|v| U::lit(v.f64())).collect();
        out.set_flat_params(&flat).expect("same architecture");
        out
    }

    /// All blocks in order.
    pub fn forward<O: Ops<T>>(&self, ops: &mut O, x: &O::V, y: &O::V, key: &O::V) -> Result<(O::V, O::V)> {
        let slope = self.slope();
        let (mut x, mut y) = (x.clone(), y.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            (x, y) = inb_forward(ops, &x, &y, key, b, slope, i)?;
        }
        Ok((x, y))
    }

    /// All blocks inverted in reverse order.
    pub fn inverse<O: Ops<T>>(&self, ops: &mut O, x: &O::V, y: &O::V, key: &O::V) -> Result<(O::V, O::V)> {
        let slope = self.slope();
        let (mut x, mut y) = (x.clone(), y.clone());
        for (i, b) in self.blocks.iter().enumerate().rev() {
            (x, y) = inb_inverse(ops, &x, &y, key, b, slope, i)?;
        }
        Ok((x, y))
    }
}

impl FedModel<f32> {
    /// SHA-256 over the architecture descriptor and a digest of every
    /// parameter, as stored in cipher containers.
    pub fn architecture_hash(&self) -> [u8; 32] {
        let mut params = Sha256::new();
        for t in self.params() {
            for v in t.data() {
                params.update(v.to_le_bytes());
            }
        }
        let mut h = Sha256::new();
        h.update((self.arch.blocks as u32).to_le_bytes());
        h.update((self.arch.growth as u32).to_le_bytes());
        h.update(self.arch.slope.to_le_bytes());
        h.update(params.finalize());
        h.finalize().into()
    }
}

//! Reverse-mode differentiation over a linear record of operations.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};

use super::kernels as k;
use super::ops::{Ops, ParamId};
use super::{ConvLayer, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Var },
    LeakyRelu { x: Var, slope: T },
    Sigmoid(Var),
    Exp(Var),
    Scale(Var, T),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Gather { x: Var, index: Arc<[u32]> },
    Clamp { x: Var, lo: T, hi: T },
    Mse(Var, Var),
    SoftHistKl(Var),
    AbsPairCorr { x: Var, pairs: Arc<[(u32, u32)]> },
    MinMaxNorm(Var),
    Blur { x: Var, taps: Arc<[f64]> },
    DctMask { x: Var, keep: Box<[bool; 64]> },
    SaltPepper { x: Var, hits: Arc<[(u32, bool)]> },
    RangeNoise { x: Var, z: Tensor<T>, sigma: f64 },
    StraightThrough(Var),
    /// Forward-only operation with no registered backward rule.
    Opaque { name: String, inputs: Vec<Var> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it
/// in reverse. One forward/backward pair per tape.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Grads<T: Real> {
    leaves: HashMap<Var, Tensor<T>>,
    params: HashMap<ParamId, Tensor<T>>,
    visited: Vec<usize>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss with respect to a tracked leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, value: Tensor<T>, op: Op<T>, x: Var) -> Var {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// A differentiable input whose gradient is reported by [`Grads::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a trainable parameter once; later calls return the same handle.
    pub fn param(&mut self, id: ParamId, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Records an operation that has no backward rule. Differentiating
    /// through it yields [`Error::UnsupportedOperation`].
    pub fn opaque(&mut self, name: &str, value: Tensor<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Opaque {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.get(loss).len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.get(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.get(loss).shape(), T::one()));
        let mut out = Grads {
            leaves: HashMap::new(),
            params: HashMap::new(),
            visited: Vec::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            out.visited.push(i);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                op => self.propagate(op, &node.value, g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let scalar_g = || g.item().f64();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves are handled by the caller"),
            Op::Conv2d { input, weight, bias } => {
                let cg = k::conv2d_backward(self.get(*input), self.get(*weight), self.get(*bias), &g, self.rg(*input))?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, cg.weight);
                self.accumulate(grads, *bias, cg.bias);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self.get(*x).zip_map(&g, |v, gi| if v >= T::zero() { gi } else { *slope * gi })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = out.zip_map(&g, |y, gi| gi * y * (T::one() - y))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = out.zip_map(&g, |y, gi| gi * y)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|gi| gi * s));
            }
            Op::AddScalar(x) | Op::StraightThrough(x) => self.accumulate(grads, *x, g),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.get(*b), |gi, v| gi * v)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.get(*a), |gi, v| gi * v)?);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.get(p).len();
                    if self.rg(p) {
                        let piece = Tensor::new(self.get(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                        self.accumulate(grads, p, piece);
                    }
                    offset += n;
                }
            }
            Op::Gather { x, index } => {
                let mut dx = Tensor::zeros(self.get(*x).shape());
                let d = dx.data_mut();
                for (&i, &gi) in index.iter().zip(g.data()) {
                    d[i as usize] = d[i as usize] + gi;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = self.get(*x).zip_map(&g, |v, gi| if v < *lo || v > *hi { T::zero() } else { gi })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.get(*a), self.get(*b));
                let s = T::lit(2.0 * scalar_g() / ta.len() as f64);
                let da = ta.zip_map(tb, |x, y| s * (x - y))?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SoftHistKl(x) => {
                let dx = k::soft_hist_kl_backward(self.get(*x), scalar_g());
                self.accumulate(grads, *x, dx);
            }
            Op::AbsPairCorr { x, pairs } => {
                let dx = k::abs_pair_correlation_backward(self.get(*x), pairs, scalar_g());
                self.accumulate(grads, *x, dx);
            }
            Op::MinMaxNorm(x) => {
                let dx = k::minmax_normalize_backward(self.get(*x), out, &g);
                self.accumulate(grads, *x, dx);
            }
            Op::Blur { x, taps } => {
                let dx = k::gaussian_blur_backward(&g, taps)?;
                self.accumulate(grads, *x, dx);
            }
            Op::DctMask { x, keep } => {
                let dx = k::dct_mask(&g, keep)?;
                self.accumulate(grads, *x, dx);
            }
            Op::SaltPepper { x, hits } => {
                let dx = k::salt_pepper_backward(self.get(*x), hits, &g)?;
                self.accumulate(grads, *x, dx);
            }
            Op::RangeNoise { x, z, sigma } => {
                let dx = k::add_range_noise_backward(self.get(*x), z, *sigma, &g);
                self.accumulate(grads, *x, dx);
            }
            Op::Opaque { name, inputs } => {
                if inputs.iter().any(|&v| self.rg(v)) {
                    return Err(Error::UnsupportedOperation(name.clone()));
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> Ops<T> for Tape<T> {
    type V = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.get(*v)
    }

    fn conv2d(&mut self, x: &Var, layer: &ConvLayer<T>, param_base: ParamId) -> Result<Var> {
        let weight = self.param(param_base, &layer.weight);
        let bias = self.param(param_base + 1, &layer.bias);
        let value = k::conv2d(self.get(*x), self.get(weight), self.get(bias))?;
        Ok(self.push(value, Op::Conv2d { input: *x, weight, bias }, true))
    }

    fn leaky_relu(&mut self, x: &Var, slope: T) -> Var {
        let value = k::leaky_relu(self.get(*x), slope);
        self.unary(value, Op::LeakyRelu { x: *x, slope }, *x)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let value = k::sigmoid(self.get(*x));
        self.unary(value, Op::Sigmoid(*x), *x)
    }

    fn exp(&mut self, x: &Var) -> Var {
        let value = self.get(*x).map(T::exp);
        self.unary(value, Op::Exp(*x), *x)
    }

    fn scale(&mut self, x: &Var, s: T) -> Var {
        let value = self.get(*x).map(|v| v * s);
        self.unary(value, Op::Scale(*x, s), *x)
    }

    fn add_scalar(&mut self, x: &Var, s: T) -> Var {
        let value = self.get(*x).map(|v| v + s);
        self.unary(value, Op::AddScalar(*x), *x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = self.get(*a).zip_map(self.get(*b), |x, y| x + y)?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(value, Op::Add(*a, *b), rg))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = self.get(*a).zip_map(self.get(*b), |x, y| x - y)?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(value, Op::Sub(*a, *b), rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = self.get(*a).zip_map(self.get(*b), |x, y| x * y)?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(value, Op::Mul(*a, *b), rg))
    }

    fn concat(&mut self, parts: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| self.get(**v)).collect();
        let value = k::concat(&tensors)?;
        let rg = parts.iter().any(|v| self.rg(**v));
        Ok(self.push(value, Op::Concat(parts.iter().map(|v| **v).collect()), rg))
    }

    fn gather(&mut self, x: &Var, index: &Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        let value = k::gather(self.get(*x), index, shape)?;
        Ok(self.unary(value, Op::Gather { x: *x, index: index.clone() }, *x))
    }

    fn clamp(&mut self, x: &Var, lo: T, hi: T) -> Var {
        let value = self.get(*x).map(|v| v.max(lo).min(hi));
        self.unary(value, Op::Clamp { x: *x, lo, hi }, *x)
    }

    fn mse(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = Tensor::scalar(T::lit(k::mse(self.get(*a), self.get(*b))?));
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(value, Op::Mse(*a, *b), rg))
    }

    fn soft_hist_kl(&mut self, x: &Var) -> Result<Var> {
        let value = Tensor::scalar(T::lit(k::soft_hist_kl(self.get(*x))?));
        Ok(self.unary(value, Op::SoftHistKl(*x), *x))
    }

    fn abs_pair_corr(&mut self, x: &Var, pairs: &Arc<[(u32, u32)]>) -> Result<Var> {
        let value = Tensor::scalar(T::lit(k::pair_correlation(self.get(*x), pairs)?.abs()));
        Ok(self.unary(value, Op::AbsPairCorr { x: *x, pairs: pairs.clone() }, *x))
    }

    fn minmax_normalize(&mut self, x: &Var) -> Result<Var> {
        let value = k::minmax_normalize(self.get(*x))?;
        Ok(self.unary(value, Op::MinMaxNorm(*x), *x))
    }

    fn blur(&mut self, x: &Var, taps: &Arc<[f64]>) -> Result<Var> {
        let value = k::gaussian_blur(self.get(*x), taps)?;
        Ok(self.unary(value, Op::Blur { x: *x, taps: taps.clone() }, *x))
    }

    fn dct_mask(&mut self, x: &Var, keep: &[bool; 64]) -> Result<Var> {
        let value = k::dct_mask(self.get(*x), keep)?;
        Ok(self.unary(value, Op::DctMask { x: *x, keep: Box::new(*keep) }, *x))
    }

    fn salt_pepper(&mut self, x: &Var, hits: &Arc<[(u32, bool)]>) -> Result<Var> {
        let value = k::salt_pepper(self.get(*x), hits)?;
        Ok(self.unary(value, Op::SaltPepper { x: *x, hits: hits.clone() }, *x))
    }

    fn range_noise(&mut self, x: &Var, z: Tensor<T>, sigma: f64) -> Result<Var> {
        let value = k::add_range_noise(self.get(*x), &z, sigma)?;
        Ok(self.unary(value, Op::RangeNoise { x: *x, z, sigma }, *x))
    }

    fn median_straight_through(&mut self, x: &Var, window: usize) -> Result<Var> {
        let value = k::median_blur(self.get(*x), window)?;
        Ok(self.unary(value, Op::StraightThrough(*x), *x))
    }
}

//! Parameter-holding building blocks.

use rand::Rng;

use crate::autodiff::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Uniform fan-in initialization, `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Dense projection over the leading axis: `W (out×in) · x (in×N) + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[out_dim, in_dim], in_dim, rng), group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), fan_in_uniform(&[out_dim], in_dim, rng), group));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x` is `in×N`; returns `out×N`.
    pub fn forward<'g, S: Scalar>(&self, s: &Session<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let y = s.param(self.weight).matmul(x)?;
        match self.bias {
            Some(b) => y.add(s.param(b).reshape(&[self.out_dim, 1])?),
            None => Ok(y),
        }
    }

    /// Per-pixel projection of a `C×H×W` map.
    pub fn forward_map<'g, S: Scalar>(&self, s: &Session<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let shape = x.shape();
        let [c, h, w] = shape[..] else {
            return Err(Error::invalid(format!("forward_map needs C×H×W, got {shape:?}")));
        };
        self.forward(s, x.reshape(&[c, h * w])?)?.reshape(&[self.out_dim, h, w])
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch / spec.groups * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[out_ch, in_ch / spec.groups, kernel, kernel], fan_in, rng),
            group,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), fan_in_uniform(&[out_ch], fan_in, rng), group));
        Self {
            weight,
            bias,
            spec,
            in_ch,
            out_ch,
            kernel,
        }
    }

    /// Same-padded, stride-1 convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn same<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_ch, out_ch, kernel, ConvSpec::same(kernel), bias, group, rng)
    }

    pub fn forward<'g, S: Scalar>(&self, s: &Session<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        x.conv2d(s.param(self.weight), self.bias.map(|b| s.param(b)), self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * (self.in_ch / self.spec.groups) * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_ch } else { 0 }
    }
}

/// Layer normalization over channels, per spatial position, with affine
/// scale and shift. Works on `C×N` and `C×H×W`.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl ChannelNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, group: ParamGroup) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), group);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), group);
        Self { gamma, beta, channels }
    }

    pub fn forward<'g, S: Scalar>(&self, s: &Session<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let mut bshape = vec![1; x.shape().len()];
        bshape[0] = self.channels;
        let y = x.layer_norm(0, NORM_EPS)?;
        y.mul(s.param(self.gamma).reshape(&bshape)?)?
            .add(s.param(self.beta).reshape(&bshape)?)
    }
}

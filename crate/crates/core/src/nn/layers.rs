//! Learnable building blocks bound to a [`ParamStore`].

use rand::Rng;

use crate::nn::graph::{Graph, Var};
use crate::nn::params::{he_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, stride: 1, dilation: 1, bias: true }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    /// He-initialized convolution with "same" padding for its dilation.
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, spec: ConvSpec) -> Self {
        let w = he_uniform(rng, &[spec.cout, spec.cin, spec.k, spec.k]);
        Self::with_weight(store, name, spec, w)
    }

    /// Convolution with every weight and bias set to zero.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec) -> Self {
        Self::with_weight(store, name, spec, Tensor::zeros(&[spec.cout, spec.cin, spec.k, spec.k]))
    }

    pub fn with_weight<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, w: Tensor<T>) -> Self {
        let weight = store.add(format!("{name}.weight"), w);
        let bias = spec.bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.cout])));
        Self { weight, bias, stride: spec.stride, pad: spec.dilation * (spec.k / 2), dilation: spec.dilation }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad, self.dilation)
    }
}

/// Per-channel spatial normalization with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.norm(x, gm, bt)
    }
}

/// Convolution, normalization, rectifier.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: ChannelNorm,
}

impl ConvNormRelu {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, spec: ConvSpec) -> Self {
        Self { conv: Conv2d::new(store, rng, &format!("{name}.conv"), spec.no_bias()), norm: ChannelNorm::new(store, &format!("{name}.norm"), spec.cout) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.norm.forward(g, store, y);
        g.relu(y)
    }
}

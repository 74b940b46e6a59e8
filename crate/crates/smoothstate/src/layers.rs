//! Parameterized building blocks: linear, strided conv, layer norm.
//! Weights and biases initialize uniform in [-k, k] with k = 1/sqrt(fan_in);
//! layer-norm gains start at one. Nonzero biases keep pre-activations off
//! the exact ReLU kink that all-zero image regions would otherwise hit.

use rand::Rng;

use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub fn uniform_init<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let k = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-k..k)).collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(vec![in_dim, out_dim], in_dim, rng));
        let b = store.add(format!("{name}.b"), uniform_init(vec![out_dim], in_dim, rng));
        Linear { w, b, in_dim, out_dim }
    }

    /// x (N, in_dim) -> (N, out_dim)
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w);
        tape.add_bias(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub out_channels: usize,
}

impl Conv2dLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            uniform_init(vec![out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        let b = store.add(format!("{name}.b"), uniform_init(vec![out_channels], fan_in, rng));
        Conv2dLayer { w, b, stride, out_channels }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNormLayer { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Output spatial side of a valid strided conv.
pub fn conv_out_side(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

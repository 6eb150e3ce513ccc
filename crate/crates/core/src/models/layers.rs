use islab_tensor::{Graph, PadMode, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Result, Scalar};

/// Whether a forward pass should produce gradients for the parameters it
/// reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Train,
    Frozen,
}

impl ParamMode {
    pub fn fetch<T: Scalar>(self, g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        match self {
            ParamMode::Train => g.param(store, id),
            ParamMode::Frozen => g.param_frozen(store, id),
        }
    }
}

/// Gaussian(0, 0.02) weights and zero biases, drawn from one seeded stream.
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng, std: 0.02 }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let dist = Normal::new(0.0, self.std).expect("valid std");
        Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut self.rng)))
    }

    pub fn uniform_unit(&mut self) -> f64 {
        self.rng.random()
    }
}

/// 2-D convolution with bias. `reflect` pixels of reflection padding are
/// applied before the (zero-padded) convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub reflect: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        reflect: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.normal(&[out_ch, in_ch, kernel, kernel]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Self { weight, bias, in_ch, out_ch, kernel, stride, pad, reflect })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mode: ParamMode, x: Var) -> Result<Var> {
        let w = mode.fetch(g, store, self.weight);
        let b = mode.fetch(g, store, self.bias);
        self.forward_with(g, x, w, b)
    }

    /// Same geometry with externally supplied weight and bias nodes.
    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let x = if self.reflect > 0 { g.pad(x, self.reflect, PadMode::Reflect)? } else { x };
        Ok(g.conv2d(x, w, Some(b), self.stride, self.pad)?)
    }
}

/// Stride-2 transposed convolution that exactly doubles the spatial size
/// (kernel 3, padding 1, output padding 1).
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.normal(&[in_ch, out_ch, 3, 3]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Self { weight, bias })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mode: ParamMode, x: Var) -> Result<Var> {
        let w = mode.fetch(g, store, self.weight);
        let b = mode.fetch(g, store, self.bias);
        Ok(g.conv_transpose2d(x, w, Some(b), 2, 1, 1)?)
    }
}

pub const NORM_EPS: f64 = 1e-5;

pub fn norm_relu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.instance_norm(x, T::lit(NORM_EPS))?;
    Ok(g.relu(n))
}

pub fn norm_leaky<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.instance_norm(x, T::lit(NORM_EPS))?;
    Ok(g.leaky_relu(n, T::lit(0.2)))
}

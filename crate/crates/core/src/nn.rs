//! Trainable layers built on the autodiff graph.
//!
//! A layer owns only [`ParamId`]s; values live in a [`ParamStore`] so that a
//! frozen store can be shared by many inference graphs.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const PRELU_INIT: f64 = 0.25;
const GDN_BETA_FLOOR: f64 = 1e-6;

fn xavier(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square-kernel convolution with "same" padding `k / 2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier(rng, &[c_out, c_in, k, k], c_in * k * k, c_out * k * k),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Transpose convolution that multiplies spatial size by `stride` exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier(rng, &[c_in, c_out, k, k], c_in * k * k, c_out * k * k),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        // (H-1)s - 2(k/2) + k + op = Hs when op = s - 1 for odd k
        Self {
            weight,
            bias,
            stride,
            padding: k / 2,
            output_padding: stride - 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.padding, self.output_padding)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// GDN / IGDN with `beta = b^2 + 1e-6` and `gamma = g^2` so that the
/// effective parameters stay in their valid ranges under any update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gdn {
    pub beta_raw: ParamId,
    pub gamma_raw: ParamId,
    pub inverse: bool,
}

impl Gdn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = Tensor::full(&[channels], (1.0 - GDN_BETA_FLOOR).sqrt());
        let gamma = Tensor::from_fn(&[channels, channels], |i| {
            if i / channels == i % channels {
                0.1f64.sqrt()
            } else {
                0.0
            }
        });
        Self {
            beta_raw: store.add(format!("{name}.beta"), beta),
            gamma_raw: store.add(format!("{name}.gamma"), gamma),
            inverse,
        }
    }

    pub fn effective(&self, g: &mut Graph) -> (Var, Var) {
        let b = g.param(self.beta_raw);
        let b2 = g.square(b);
        let beta = g.add_scalar(b2, GDN_BETA_FLOOR);
        let gm = g.param(self.gamma_raw);
        let gamma = g.square(gm);
        (beta, gamma)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (beta, gamma) = self.effective(g);
        g.gdn(x, beta, gamma, self.inverse)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.beta_raw, self.gamma_raw]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, &[outputs, inputs], inputs, outputs)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    /// `[N, I] -> [N, O]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            slope: store.add(format!("{name}.slope"), Tensor::full(&[channels], PRELU_INIT)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.param(self.slope);
        g.prelu(x, s)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.slope]
    }
}

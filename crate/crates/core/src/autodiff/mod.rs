//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation records its inputs and
//! whatever it needs for the backward pass; [`Graph::backward`] walks the tape
//! in reverse creation order, which is a valid topological order because an
//! operation can only consume values created before it.
//!
//! Trainable tensors live in a [`ParamStore`]. A graph borrows the store
//! immutably, so a frozen store can back several graphs on different threads.
//! After `backward`, the gradients of parameter leaves are handed back with
//! [`Graph::into_param_grads`].

pub mod gradcheck;
mod kernels;
mod params;

use std::collections::HashMap;

use num_complex::Complex64;
use thiserror::Error;

pub use params::{ParamEntry, ParamId, ParamStore};

use crate::tensor::Tensor;
use kernels::ConvGeom;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any differentiable leaf")]
    DetachedGraph,
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("parameter error: {0}")]
    Param(String),
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    MulPixel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Gdn {
        x: Var,
        beta: Var,
        gamma: Var,
        inverse: bool,
        norm: Vec<f64>,
    },
    LeakyRelu(Var, f64),
    Prelu(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Log2 {
        x: Var,
        floor: f64,
    },
    SoftmaxAxis1(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Take {
        x: Var,
        indices: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose2d(Var),
    GaussianLikelihood {
        x: Var,
        mu: Var,
        sigma: Var,
        floor: f64,
    },
    NormalizePower {
        x: Var,
        power: f64,
    },
    ComplexMul {
        x: Var,
        coeffs: Vec<Complex64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
#[derive(Debug)]
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability mass of `N(mu, sigma^2)` convolved with `U(-1/2, 1/2)` at `x`,
/// evaluated in the upper tail for precision.
pub fn gaussian_bin_probability(x: f64, mu: f64, sigma: f64) -> f64 {
    let d = (x - mu).abs();
    let upper = (0.5 - d) / sigma;
    let lower = (-0.5 - d) / sigma;
    normal_cdf(upper) - normal_cdf(lower)
}

impl<'a> Graph<'a> {
    /// A graph without parameters (inputs only).
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// A graph whose [`Graph::param`] leaves read from `store`.
    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Graph::param called on a graph built without a ParamStore");
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(shape_err(op, format!("rank mismatch {sa:?} vs {sb:?}")));
        }
        for (axis, (x, y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(shape_err(op, format!("axis {axis}: {x} vs {y} ({sa:?} vs {sb:?})")));
            }
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(t, Op::MulScalar(a, c), rg)
    }

    fn check_channel_vec(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(shape_err(op, format!("input needs rank >= 2, got {sx:?}")));
        }
        let sv = self.shape(v);
        if sv != [sx[1]] {
            return Err(shape_err(op, format!("axis 1 (channels): input has {} channels, vector has shape {sv:?}", sx[1])));
        }
        Ok(split_axis(sx, 1))
    }

    /// `x[b, c, ...] + v[c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (outer, c, inner) = self.check_channel_vec("add_channel", x, v)?;
        let vv = self.value(v).data().to_vec();
        let mut t = self.value(x).clone();
        for o in 0..outer {
            for (ch, &add) in vv.iter().enumerate().take(c) {
                t.data_mut()[(o * c + ch) * inner..][..inner].iter_mut().for_each(|e| *e += add);
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(t, Op::AddChannel(x, v), rg))
    }

    /// `x[b, c, ...] * v[c]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (outer, c, inner) = self.check_channel_vec("mul_channel", x, v)?;
        let vv = self.value(v).data().to_vec();
        let mut t = self.value(x).clone();
        for o in 0..outer {
            for (ch, &m) in vv.iter().enumerate().take(c) {
                t.data_mut()[(o * c + ch) * inner..][..inner].iter_mut().for_each(|e| *e *= m);
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(t, Op::MulChannel(x, v), rg))
    }

    /// `x[b, c, ...] * w[b, 0, ...]`: a per-pixel map broadcast over channels.
    pub fn mul_pixel(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() < 2 || sw.len() != sx.len() || sw[1] != 1 || sw[0] != sx[0] || sw[2..] != sx[2..] {
            return Err(shape_err("mul_pixel", format!("axis 1 must be broadcast: input {sx:?}, weights {sw:?}")));
        }
        let (outer, c, inner) = split_axis(&sx, 1);
        let wv = self.value(w).data().to_vec();
        let mut t = self.value(x).clone();
        for o in 0..outer {
            let wrow = &wv[o * inner..(o + 1) * inner];
            for ch in 0..c {
                let row = &mut t.data_mut()[(o * c + ch) * inner..][..inner];
                row.iter_mut().zip(wrow).for_each(|(e, m)| *e *= m);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::MulPixel(x, w), rg))
    }

    fn conv_common(&self, op: &'static str, x: Var, w: Var) -> Result<([usize; 4], [usize; 4])> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 4 {
            return Err(shape_err(op, format!("input must be [B,C,H,W], got {sx:?}")));
        }
        if sw.len() != 4 {
            return Err(shape_err(op, format!("weight must be 4-D, got {sw:?}")));
        }
        if sw[2] != sw[3] {
            return Err(shape_err(op, format!("axis 3 (kernel width) {} differs from axis 2 (kernel height) {}", sw[3], sw[2])));
        }
        Ok(([sx[0], sx[1], sx[2], sx[3]], [sw[0], sw[1], sw[2], sw[3]]))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [channels] {
                return Err(shape_err(op, format!("axis 0 (bias): expected [{channels}], got {sb:?}")));
            }
        }
        Ok(())
    }

    /// 2-D cross-correlation on NCHW input with a `[C_out, C_in, k, k]` weight.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let ([bn, ci, h, wd], [co, wci, k, _]) = self.conv_common("conv2d", x, w)?;
        if wci != ci {
            return Err(shape_err("conv2d", format!("axis 1 (input channels): input has {ci}, weight expects {wci}")));
        }
        if k % 2 == 0 {
            return Err(shape_err("conv2d", format!("axis 2 (kernel): size {k} must be odd")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1"));
        }
        self.check_bias("conv2d", b, co)?;
        if h + 2 * padding < k {
            return Err(shape_err("conv2d", format!("axis 2 (height): {h} with padding {padding} smaller than kernel {k}")));
        }
        if wd + 2 * padding < k {
            return Err(shape_err("conv2d", format!("axis 3 (width): {wd} with padding {padding} smaller than kernel {k}")));
        }
        let geom = ConvGeom {
            batch: bn,
            c_in: ci,
            h_in: h,
            w_in: wd,
            c_out: co,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (wd + 2 * padding - k) / stride + 1,
            k,
            stride,
            pad: padding,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data(), bias);
        let t = Tensor::new(vec![bn, co, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transpose convolution, the adjoint of [`Graph::conv2d`] sharing its
    /// weight layout. Output size is `(H-1)*stride - 2*padding + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let ([bn, ci, h, wd], [wci, co, k, _]) = self.conv_common("conv_transpose2d", x, w)?;
        if wci != ci {
            return Err(shape_err("conv_transpose2d", format!("axis 1 (input channels): input has {ci}, weight expects {wci}")));
        }
        if stride == 0 || output_padding >= stride {
            return Err(shape_err("conv_transpose2d", format!("output_padding {output_padding} must be < stride {stride}")));
        }
        self.check_bias("conv_transpose2d", b, co)?;
        let ho = ((h - 1) * stride + k + output_padding) as isize - 2 * padding as isize;
        let wo = ((wd - 1) * stride + k + output_padding) as isize - 2 * padding as isize;
        if ho < 1 || wo < 1 {
            return Err(shape_err("conv_transpose2d", format!("axis 2/3: output size {ho}x{wo} is empty")));
        }
        let geom = ConvGeom {
            batch: bn,
            c_in: co,
            h_in: ho as usize,
            w_in: wo as usize,
            c_out: ci,
            h_out: h,
            w_out: wd,
            k,
            stride,
            pad: padding,
        };
        let mut out = kernels::conv_grad_input(&geom, self.value(x).data(), self.value(w).data());
        if let Some(b) = b {
            let plane = geom.h_in * geom.w_in;
            let bias = self.value(b).data();
            for bi in 0..bn {
                for (c, &bv) in bias.iter().enumerate() {
                    out[(bi * co + c) * plane..][..plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let t = Tensor::new(vec![bn, co, geom.h_in, geom.w_in], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Generalized divisive normalization with effective (already
    /// reparameterized) `beta[C] > 0` and `gamma[C, C] >= 0`.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err("gdn", format!("input needs rank >= 2, got {sx:?}")));
        }
        let c = sx[1];
        if self.shape(beta) != [c] {
            return Err(shape_err("gdn", format!("axis 1 (channels): beta has shape {:?}, input has {c} channels", self.shape(beta))));
        }
        if self.shape(gamma) != [c, c] {
            return Err(shape_err("gdn", format!("axis 1 (channels): gamma has shape {:?}, expected [{c}, {c}]", self.shape(gamma))));
        }
        if let Some(bad) = self.value(beta).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(AutodiffError::Param(format!("gdn beta must be positive, found {bad}")));
        }
        let (outer, _, inner) = split_axis(&sx, 1);
        let (out, norm) = kernels::gdn_forward(
            self.value(x).data(),
            outer,
            c,
            inner,
            self.value(beta).data(),
            self.value(gamma).data(),
            inverse,
        );
        let t = Tensor::new(sx, out)?;
        let rg = self.rg(x) || self.rg(beta) || self.rg(gamma);
        Ok(self.push(
            t,
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
                norm,
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }

    /// Parametric ReLU with one slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (outer, c, inner) = self.check_channel_vec("prelu", x, slope)?;
        let a = self.value(slope).data().to_vec();
        let mut t = self.value(x).clone();
        for o in 0..outer {
            for (ch, &s) in a.iter().enumerate().take(c) {
                for v in &mut t.data_mut()[(o * c + ch) * inner..][..inner] {
                    if *v <= 0.0 {
                        *v *= s;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(t, Op::Prelu(x, slope), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// `log2(max(x, floor))`; no gradient flows where the floor is active.
    pub fn log2(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, move |v| v.max(floor).log2(), Op::Log2 { x: a, floor })
    }

    /// Softmax across axis 1 for every other index, e.g. across streams `S`
    /// of a `[B, S, C, H, W]` stack.
    pub fn softmax_axis1(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(shape_err("softmax_axis1", format!("input needs rank >= 2, got {sa:?}")));
        }
        let (outer, s, inner) = split_axis(&sa, 1);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * s + k) * inner + i;
                let m = (0..s).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..s {
                    let e = (x[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..s {
                    out[idx(k)] /= z;
                }
            }
        }
        let t = Tensor::new(sa, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SoftmaxAxis1(a), rg))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for p in parts {
            let sp = self.shape(*p);
            if sp.len() != s0.len() {
                return Err(shape_err("concat", format!("rank mismatch {s0:?} vs {sp:?}")));
            }
            for (ax, (a, b)) in s0.iter().zip(sp).enumerate() {
                if ax != axis && a != b {
                    return Err(shape_err("concat", format!("axis {ax}: {a} vs {b}")));
                }
            }
            total += sp[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`, keeping the rank.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(shape_err("narrow", format!("axis {axis}: range {start}..{} out of bounds for {sx:?}", start + len)));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| shape_err("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))))?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    /// Gathers flat elements of `x` into a 1-D tensor.
    pub fn take(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.len()) {
            return Err(shape_err("take", format!("axis 0: index {bad} out of range for {} elements", v.len())));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let t = Tensor::new(vec![indices.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Take {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Fully connected layer: `x[N, I] · w[O, I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 2 {
            return Err(shape_err("linear", format!("expected 2-D input and weight, got {sx:?} and {sw:?}")));
        }
        let (n, i_dim, o_dim) = (sx[0], sx[1], sw[0]);
        if sw[1] != i_dim {
            return Err(shape_err("linear", format!("axis 1 (features): input has {i_dim}, weight expects {}", sw[1])));
        }
        self.check_bias("linear", b, o_dim)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * o_dim];
        for r in 0..n {
            let xr = &xv[r * i_dim..(r + 1) * i_dim];
            for o in 0..o_dim {
                let wr = &wv[o * i_dim..(o + 1) * i_dim];
                let mut acc = bv.map_or(0.0, |b| b[o]);
                acc += xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                out[r * o_dim + o] = acc;
            }
        }
        let t = Tensor::new(vec![n, o_dim], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(shape_err("transpose2d", format!("expected 2-D input, got {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let v = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose2d(x), rg))
    }

    /// Elementwise `Phi((x+1/2-mu)/sigma) - Phi((x-1/2-mu)/sigma)`, floored.
    pub fn gaussian_likelihood(&mut self, x: Var, mu: Var, sigma: Var, floor: f64) -> Result<Var> {
        self.same_shape("gaussian_likelihood", x, mu)?;
        self.same_shape("gaussian_likelihood", x, sigma)?;
        let xv = self.value(x).data();
        let mv = self.value(mu).data();
        let sv = self.value(sigma).data();
        let data = (0..xv.len())
            .map(|i| gaussian_bin_probability(xv[i], mv[i], sv[i]).max(floor))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(mu) || self.rg(sigma);
        Ok(self.push(t, Op::GaussianLikelihood { x, mu, sigma, floor }, rg))
    }

    /// Scales a flat vector of interleaved (re, im) pairs so that its average
    /// complex-symbol power is `power`. A zero vector passes through.
    pub fn normalize_power(&mut self, x: Var, power: f64) -> Result<Var> {
        let v = self.value(x);
        if v.len() % 2 != 0 || v.is_empty() {
            return Err(shape_err("normalize_power", format!("axis 0: need a non-empty even number of reals, got {}", v.len())));
        }
        let norm = v.dot(v).sqrt();
        let t = if norm == 0.0 {
            v.clone()
        } else {
            let c = (power * (v.len() / 2) as f64).sqrt() / norm;
            v.map(|e| e * c)
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::NormalizePower { x, power }, rg))
    }

    /// Multiplies interleaved (re, im) pairs by fixed complex coefficients.
    pub fn complex_mul(&mut self, x: Var, coeffs: &[Complex64]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != 2 * coeffs.len() {
            return Err(shape_err("complex_mul", format!("axis 0: {} reals for {} coefficients", v.len(), coeffs.len())));
        }
        let mut out = vec![0.0; v.len()];
        for (i, c) in coeffs.iter().enumerate() {
            let z = Complex64::new(v.data()[2 * i], v.data()[2 * i + 1]) * c;
            out[2 * i] = z.re;
            out[2 * i + 1] = z.im;
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::ComplexMul {
                x,
                coeffs: coeffs.to_vec(),
            },
            rg,
        ))
    }

    /// Gradient of `v` after [`Graph::backward`], if it received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients produced by the last backward pass.
    pub fn into_param_grads(self) -> Vec<(ParamId, Tensor)> {
        let mut grads = self.grads;
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_vars
            .iter()
            .filter_map(|(id, v)| grads.get_mut(v.0).and_then(|g| g.take()).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape));
        }
        if !self.rg(loss) {
            return Err(AutodiffError::DetachedGraph);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, t: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("gradient shape");
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, like(*a, g.data().iter().zip(vb).map(|(g, y)| g * y).collect()));
                acc(*b, like(*b, g.data().iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulScalar(a, c) => acc(*a, g.map(|v| v * c)),
            Op::AddChannel(x, v) => {
                acc(*x, g.clone());
                let (outer, c, inner) = split_axis(val(*x).shape(), 1);
                acc(*v, like(*v, kernels::channel_sums(g.data(), outer, c, inner)));
            }
            Op::MulChannel(x, v) => {
                let (outer, c, inner) = split_axis(val(*x).shape(), 1);
                let vv = val(*v).data();
                let xv = val(*x).data();
                let mut gx = g.data().to_vec();
                let mut gv = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                        gv[ch] += g.data()[r.clone()].iter().zip(&xv[r.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        gx[r].iter_mut().for_each(|e| *e *= vv[ch]);
                    }
                }
                acc(*x, like(*x, gx));
                acc(*v, like(*v, gv));
            }
            Op::MulPixel(x, w) => {
                let (outer, c, inner) = split_axis(val(*x).shape(), 1);
                let (xv, wv) = (val(*x).data(), val(*w).data());
                let mut gx = g.data().to_vec();
                let mut gw = vec![0.0; wv.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for p in 0..inner {
                            gw[o * inner + p] += g.data()[base + p] * xv[base + p];
                            gx[base + p] *= wv[o * inner + p];
                        }
                    }
                }
                acc(*x, like(*x, gx));
                acc(*w, like(*w, gw));
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    acc(*x, like(*x, kernels::conv_grad_input(geom, g.data(), val(*w).data())));
                }
                if self.rg(*w) {
                    acc(*w, like(*w, kernels::conv_grad_weight(geom, val(*x).data(), g.data())));
                }
                if let Some(b) = b {
                    acc(*b, like(*b, kernels::channel_sums(g.data(), geom.batch, geom.c_out, geom.h_out * geom.w_out)));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                if self.rg(*x) {
                    acc(*x, like(*x, kernels::conv_forward(geom, g.data(), val(*w).data(), None)));
                }
                if self.rg(*w) {
                    acc(*w, like(*w, kernels::conv_grad_weight(geom, g.data(), val(*x).data())));
                }
                if let Some(b) = b {
                    acc(*b, like(*b, kernels::channel_sums(g.data(), geom.batch, geom.c_in, geom.h_in * geom.w_in)));
                }
            }
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
                norm,
            } => {
                let (outer, c, inner) = split_axis(val(*x).shape(), 1);
                let (gx, gb, gg) =
                    kernels::gdn_backward(val(*x).data(), norm, g.data(), outer, c, inner, val(*gamma).data(), *inverse);
                acc(*x, like(*x, gx));
                acc(*beta, like(*beta, gb));
                acc(*gamma, like(*gamma, gg));
            }
            Op::LeakyRelu(a, slope) => {
                let xa = val(*a).data();
                acc(*a, like(*a, g.data().iter().zip(xa).map(|(g, &x)| if x > 0.0 { *g } else { g * slope }).collect()));
            }
            Op::Prelu(x, slope) => {
                let (outer, c, inner) = split_axis(val(*x).shape(), 1);
                let (xv, sv) = (val(*x).data(), val(*slope).data());
                let mut gx = g.data().to_vec();
                let mut gs = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        for p in (o * c + ch) * inner..(o * c + ch + 1) * inner {
                            if xv[p] <= 0.0 {
                                gs[ch] += g.data()[p] * xv[p];
                                gx[p] *= sv[ch];
                            }
                        }
                    }
                }
                acc(*x, like(*x, gx));
                acc(*slope, like(*slope, gs));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, like(*a, g.data().iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, like(*a, g.data().iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()));
            }
            Op::Softplus(a) => {
                let xa = val(*a).data();
                acc(*a, like(*a, g.data().iter().zip(xa).map(|(g, &x)| g * sigmoid(x)).collect()));
            }
            Op::Square(a) => {
                let xa = val(*a).data();
                acc(*a, like(*a, g.data().iter().zip(xa).map(|(g, x)| 2.0 * g * x).collect()));
            }
            Op::Log2 { x, floor } => {
                let xa = val(*x).data();
                let ln2 = std::f64::consts::LN_2;
                acc(
                    *x,
                    like(*x, g.data().iter().zip(xa).map(|(g, &x)| if x > *floor { g / (x * ln2) } else { 0.0 }).collect()),
                );
            }
            Op::SoftmaxAxis1(a) => {
                let (outer, s, inner) = split_axis(val(*a).shape(), 1);
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for p in 0..inner {
                        let idx = |k: usize| (o * s + k) * inner + p;
                        let dot: f64 = (0..s).map(|k| y[idx(k)] * g.data()[idx(k)]).sum();
                        for k in 0..s {
                            gx[idx(k)] = y[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                acc(*a, like(*a, gx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).shape()[*axis];
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        gp.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + n) * inner]);
                    }
                    offset += n;
                    acc(*p, like(*p, gp));
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, like(*x, gx));
            }
            Op::Reshape(x) => acc(*x, like(*x, g.data().to_vec())),
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, Tensor::full(val(*x).shape(), g.item() / n));
            }
            Op::Take { x, indices } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (k, &i) in indices.iter().enumerate() {
                    gx[i] += g.data()[k];
                }
                acc(*x, like(*x, gx));
            }
            Op::Linear { x, w, b } => {
                let (n, i_dim) = (val(*x).shape()[0], val(*x).shape()[1]);
                let o_dim = val(*w).shape()[0];
                let (xv, wv, gv) = (val(*x).data(), val(*w).data(), g.data());
                let mut gx = vec![0.0; n * i_dim];
                let mut gw = vec![0.0; o_dim * i_dim];
                let mut gb = vec![0.0; o_dim];
                for r in 0..n {
                    for o in 0..o_dim {
                        let go = gv[r * o_dim + o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for k in 0..i_dim {
                            gx[r * i_dim + k] += go * wv[o * i_dim + k];
                            gw[o * i_dim + k] += go * xv[r * i_dim + k];
                        }
                    }
                }
                acc(*x, like(*x, gx));
                acc(*w, like(*w, gw));
                if let Some(b) = b {
                    acc(*b, like(*b, gb));
                }
            }
            Op::Transpose2d(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g.data()[j * r + i];
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::GaussianLikelihood { x, mu, sigma, floor } => {
                let (xv, mv, sv) = (val(*x).data(), val(*mu).data(), val(*sigma).data());
                let p = node.value.data();
                let n = xv.len();
                let (mut gx, mut gm, mut gs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    if p[i] <= *floor {
                        continue;
                    }
                    let s = sv[i];
                    let u = (xv[i] + 0.5 - mv[i]) / s;
                    let l = (xv[i] - 0.5 - mv[i]) / s;
                    let (pu, pl) = (normal_pdf(u), normal_pdf(l));
                    let dx = (pu - pl) / s;
                    gx[i] = g.data()[i] * dx;
                    gm[i] = -g.data()[i] * dx;
                    gs[i] = -g.data()[i] * (pu * u - pl * l) / s;
                }
                acc(*x, like(*x, gx));
                acc(*mu, like(*mu, gm));
                acc(*sigma, like(*sigma, gs));
            }
            Op::NormalizePower { x, power } => {
                let xv = val(*x);
                let norm = xv.dot(xv).sqrt();
                if norm == 0.0 {
                    acc(*x, g.clone());
                } else {
                    let c = (power * (xv.len() / 2) as f64).sqrt() / norm;
                    let proj = xv.dot(g) / (norm * norm);
                    acc(*x, like(*x, g.data().iter().zip(xv.data()).map(|(g, x)| c * (g - x * proj)).collect()));
                }
            }
            Op::ComplexMul { x, coeffs } => {
                let mut gx = vec![0.0; g.len()];
                for (i, c) in coeffs.iter().enumerate() {
                    let z = Complex64::new(g.data()[2 * i], g.data()[2 * i + 1]) * c.conj();
                    gx[2 * i] = z.re;
                    gx[2 * i + 1] = z.im;
                }
                acc(*x, like(*x, gx));
            }
        }
    }
}

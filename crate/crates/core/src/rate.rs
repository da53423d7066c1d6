//! Conditional rate adaptation.
//!
//! The quantized hyperprior `r_tilde` drives a Gaussian-convolved-uniform
//! entropy model for the quantized semantic features `s_tilde`. Each spatial
//! position of `s_tilde` is one patch; its information content picks an output
//! dimension from a fixed rate set, and a bank of FC layers (one per rate)
//! maps the patch to that many real channel uses. Rates are base-2 bits.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Var};
use crate::nn::{self, Conv2d, Linear, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const LIKELIHOOD_FLOOR: f64 = 1e-12;
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const DEFAULT_RHO: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RateError {
    #[error("rate set must be non-empty, positive and strictly increasing, got {0:?}")]
    RateSet(Vec<usize>),
    #[error("rate {0} is not in the rate set")]
    UnknownRate(usize),
    #[error("semantic stream has {got} reals, frame declares {expected}")]
    SymbolCount { expected: usize, got: usize },
    #[error("allocation covers {allocated} patches, features have {features}")]
    PatchCount { allocated: usize, features: usize },
    #[error("source dimension k must be positive")]
    ZeroSourceDim,
    #[error("side information holds {got} bytes, {expected} needed")]
    SideInfo { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, RateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-1/2, 1/2)` noise, a differentiable proxy.
    Train,
    /// Rounding half away from zero.
    Test,
}

pub fn quantize_tensor(t: &Tensor, mode: QuantMode, rng: &mut impl Rng) -> Tensor {
    match mode {
        QuantMode::Train => Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.random_range(-0.5..0.5)),
        QuantMode::Test => t.map(f64::round),
    }
}

/// Graph form of [`quantize_tensor`]. Test mode cuts the gradient.
pub fn quantize(g: &mut Graph, x: Var, mode: QuantMode, rng: &mut impl Rng) -> Result<Var> {
    match mode {
        QuantMode::Train => {
            let noise = Tensor::from_fn(g.shape(x), |_| rng.random_range(-0.5..0.5));
            let n = g.constant(noise);
            Ok(g.add(x, n)?)
        }
        QuantMode::Test => {
            let t = g.value(x).map(f64::round);
            Ok(g.constant(t))
        }
    }
}

/// Ordered set of admissible per-patch output dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateSet {
    values: Vec<usize>,
}

impl Default for RateSet {
    /// `{4, 8, ..., 128}`.
    fn default() -> Self {
        Self {
            values: (1..=32).map(|i| 4 * i).collect(),
        }
    }
}

impl RateSet {
    pub fn new(values: Vec<usize>) -> Result<Self> {
        let ok = !values.is_empty() && values[0] > 0 && values.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(RateError::RateSet(values));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.values.last().expect("rate set is non-empty")
    }

    pub fn index_of(&self, w: usize) -> Result<usize> {
        self.values.binary_search(&w).map_err(|_| RateError::UnknownRate(w))
    }

    /// Smallest member `>= alpha`; the largest member when none is. The flag
    /// reports clamping.
    pub fn ceil(&self, alpha: f64) -> (usize, bool) {
        match self.values.iter().find(|&&w| w as f64 >= alpha) {
            Some(&w) => (w, false),
            None => (self.max(), true),
        }
    }

    /// Bits per rate index, `ceil(log2 M)` (at least 1).
    pub fn index_bits(&self) -> usize {
        (usize::BITS - (self.values.len() - 1).leading_zeros()).max(1) as usize
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EntropyParams {
    pub mu: Var,
    pub sigma: Var,
}

/// Conv, LeakyReLU, conv; the output splits into means and raw scales.
#[derive(Debug, Clone)]
pub struct HyperSynthesis {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub channels: usize,
}

impl HyperSynthesis {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, hidden, 3, 1, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), hidden, 2 * channels, 3, 1, rng),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, r_tilde: Var) -> nn::Result<EntropyParams> {
        let h = self.conv1.forward(g, r_tilde)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, h)?;
        let mu = g.narrow(h, 1, 0, self.channels)?;
        let raw = g.narrow(h, 1, self.channels, self.channels)?;
        let sp = g.softplus(raw);
        let sigma = g.add_scalar(sp, SIGMA_FLOOR);
        Ok(EntropyParams { mu, sigma })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.conv1.params(), self.conv2.params()].concat()
    }
}

/// Per-element bin probability of `s_tilde` under the conditional model.
pub fn likelihood(g: &mut Graph, s_tilde: Var, m: &EntropyParams) -> nn::Result<Var> {
    g.gaussian_likelihood(s_tilde, m.mu, m.sigma, LIKELIHOOD_FLOOR)
}

const PRIOR_FILTERS: [usize; 4] = [1, 3, 3, 1];
const PRIOR_INIT_SCALE: f64 = 10.0;

/// Learned per-channel monotone CDF, `1 -> 3 -> 3 -> 1` with softplus-positive
/// matrices and `tanh` gates, closed by a sigmoid.
#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    pub matrices: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub gates: Vec<ParamId>,
    pub channels: usize,
}

impl FactorizedPrior {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let layers = PRIOR_FILTERS.len() - 1;
        let scale = PRIOR_INIT_SCALE.powf(1.0 / layers as f64);
        let mut prior = Self {
            matrices: Vec::new(),
            biases: Vec::new(),
            gates: Vec::new(),
            channels,
        };
        for i in 0..layers {
            let (fin, fout) = (PRIOR_FILTERS[i], PRIOR_FILTERS[i + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln();
            prior.matrices.push(store.add(format!("{name}.matrix{i}"), Tensor::full(&[channels, fout, fin], init)));
            let bias = Tensor::from_fn(&[channels, fout], |_| rng.random_range(-0.5..0.5));
            prior.biases.push(store.add(format!("{name}.bias{i}"), bias));
            if i + 1 < layers {
                prior.gates.push(store.add(format!("{name}.gate{i}"), Tensor::zeros(&[channels, fout])));
            }
        }
        prior
    }

    fn column(g: &mut Graph, p: Var, stride: usize, offset: usize) -> nn::Result<Var> {
        let c = g.shape(p)[0];
        let idx: Vec<usize> = (0..c).map(|ch| ch * stride + offset).collect();
        g.take(p, &idx)
    }

    /// CDF logits at every element of `x` (`[B, C, H, W]`).
    pub fn logits(&self, g: &mut Graph, x: Var) -> nn::Result<Var> {
        let mut h = vec![x];
        for (i, (&m, &b)) in self.matrices.iter().zip(&self.biases).enumerate() {
            let (fin, fout) = (PRIOR_FILTERS[i], PRIOR_FILTERS[i + 1]);
            let mv = g.param(m);
            let mv = g.softplus(mv);
            let bv = g.param(b);
            let gate = self.gates.get(i).map(|&a| g.param(a));
            let gate = gate.map(|a| g.tanh(a));
            let mut next = Vec::with_capacity(fout);
            for j in 0..fout {
                let mut acc: Option<Var> = None;
                for (k, &hk) in h.iter().enumerate().take(fin) {
                    let w = Self::column(g, mv, fout * fin, j * fin + k)?;
                    let t = g.mul_channel(hk, w)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, t)?,
                        None => t,
                    });
                }
                let bj = Self::column(g, bv, fout, j)?;
                let mut v = g.add_channel(acc.expect("layer has inputs"), bj)?;
                if let Some(gt) = gate {
                    let aj = Self::column(g, gt, fout, j)?;
                    let th = g.tanh(v);
                    let gated = g.mul_channel(th, aj)?;
                    v = g.add(v, gated)?;
                }
                next.push(v);
            }
            h = next;
        }
        Ok(h[0])
    }

    /// `c(x + 1/2) - c(x - 1/2)` with `c` the learned CDF.
    pub fn likelihood(&self, g: &mut Graph, x: Var) -> nn::Result<Var> {
        let up = g.add_scalar(x, 0.5);
        let lo = g.add_scalar(x, -0.5);
        let lu = self.logits(g, up)?;
        let ll = self.logits(g, lo)?;
        let cu = g.sigmoid(lu);
        let cl = g.sigmoid(ll);
        g.sub(cu, cl)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.matrices.clone(), self.biases.clone(), self.gates.clone()].concat()
    }
}

/// `-(sum log2 p_s + sum log2 p_r)` in bits.
pub fn rate_term(g: &mut Graph, p_s: Var, p_r: Option<Var>) -> Var {
    let ls = g.log2(p_s, LIKELIHOOD_FLOOR);
    let mut total = g.sum(ls);
    if let Some(p_r) = p_r {
        let lr = g.log2(p_r, LIKELIHOOD_FLOOR);
        let sr = g.sum(lr);
        total = g.add(total, sr).expect("scalars");
    }
    g.mul_scalar(total, -1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateAllocation {
    /// Scaled information content per patch.
    pub alpha: Vec<f64>,
    /// Rate-set member assigned to each patch.
    pub alpha_bar: Vec<usize>,
    /// Patches whose content exceeded the largest rate.
    pub clamped: usize,
}

impl RateAllocation {
    pub fn from_rates(alpha_bar: Vec<usize>) -> Self {
        Self {
            alpha: alpha_bar.iter().map(|&w| w as f64).collect(),
            alpha_bar,
            clamped: 0,
        }
    }

    pub fn k_s(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn total(&self) -> usize {
        self.alpha_bar.iter().sum()
    }

    /// Complex channel uses of the semantic stream, `ceil(sum / 2)`.
    pub fn semantic_symbols(&self) -> usize {
        self.total().div_ceil(2)
    }

    /// Real values carried after padding to whole complex symbols.
    pub fn padded_reals(&self) -> usize {
        2 * self.semantic_symbols()
    }
}

/// Per-patch rates from per-element likelihoods `[1, C, H, W]` or `[C, H, W]`.
pub fn allocate_rates(p: &Tensor, rho: f64, rates: &RateSet) -> RateAllocation {
    let shape = p.shape();
    let (c, hw) = match shape.len() {
        4 => (shape[1], shape[2] * shape[3]),
        3 => (shape[0], shape[1] * shape[2]),
        _ => (1, p.len()),
    };
    let mut alpha = vec![0.0; hw];
    for ch in 0..c {
        for (i, a) in alpha.iter_mut().enumerate() {
            *a -= p.data()[ch * hw + i].max(LIKELIHOOD_FLOOR).log2();
        }
    }
    let mut clamped = 0;
    let alpha: Vec<f64> = alpha.into_iter().map(|a| rho * a).collect();
    let alpha_bar = alpha
        .iter()
        .map(|&a| {
            let (w, c) = rates.ceil(a);
            clamped += usize::from(c);
            w
        })
        .collect();
    RateAllocation {
        alpha,
        alpha_bar,
        clamped,
    }
}

/// Big-endian packing of rate indices, `index_bits` each.
pub fn pack_rates(alloc: &RateAllocation, rates: &RateSet) -> Result<Vec<u8>> {
    let nb = rates.index_bits();
    let mut out = vec![0u8; (alloc.k_s() * nb).div_ceil(8)];
    let mut pos = 0;
    for &w in &alloc.alpha_bar {
        let idx = rates.index_of(w)?;
        for b in (0..nb).rev() {
            if (idx >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

pub fn unpack_rates(bytes: &[u8], k_s: usize, rates: &RateSet) -> Result<Vec<usize>> {
    let nb = rates.index_bits();
    let need = (k_s * nb).div_ceil(8);
    if bytes.len() < need {
        return Err(RateError::SideInfo {
            expected: need,
            got: bytes.len(),
        });
    }
    let mut pos = 0;
    (0..k_s)
        .map(|_| {
            let mut idx = 0usize;
            for _ in 0..nb {
                idx = (idx << 1) | usize::from(bytes[pos / 8] & (0x80 >> (pos % 8)) != 0);
                pos += 1;
            }
            rates.values().get(idx).copied().ok_or(RateError::UnknownRate(idx))
        })
        .collect()
}

/// Side-information bits and the QPSK symbols that would carry them.
pub fn side_info_cost(k_s: usize, rates: &RateSet) -> (usize, usize) {
    let bits = k_s * rates.index_bits();
    (bits, bits.div_ceil(2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbrReport {
    /// `(ceil(sum / 2) + m) / k`.
    pub cbr: f64,
    /// Same plus the rate side-information symbols.
    pub with_side_info: f64,
    /// `(sum + m) / k`, counting FC outputs as channel uses.
    pub literal: f64,
}

pub fn cbr(alloc: &RateAllocation, m: usize, k: usize, rates: &RateSet) -> Result<CbrReport> {
    if k == 0 {
        return Err(RateError::ZeroSourceDim);
    }
    let kf = k as f64;
    let sem = alloc.semantic_symbols();
    let (_, side) = side_info_cost(alloc.k_s(), rates);
    Ok(CbrReport {
        cbr: (sem + m) as f64 / kf,
        with_side_info: (sem + m + side) as f64 / kf,
        literal: (alloc.total() + m) as f64 / kf,
    })
}

/// Learned rate tokens and the forward/inverse FC banks.
#[derive(Debug, Clone)]
pub struct RaCodec {
    pub rates: RateSet,
    pub channels: usize,
    /// `[M, C]`, one embedding per rate.
    pub tokens: ParamId,
    pub enc: Vec<Linear>,
    pub dec: Vec<Linear>,
}

impl RaCodec {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rates: RateSet, rng: &mut impl Rng) -> Self {
        let tokens = store.add(format!("{name}.tokens"), Tensor::zeros(&[rates.len(), channels]));
        let enc = rates
            .values()
            .iter()
            .map(|&w| Linear::new(store, &format!("{name}.enc{w}"), channels, w, rng))
            .collect();
        let dec = rates
            .values()
            .iter()
            .map(|&w| Linear::new(store, &format!("{name}.dec{w}"), w, channels, rng))
            .collect();
        Self {
            rates,
            channels,
            tokens,
            enc,
            dec,
        }
    }

    fn token(&self, g: &mut Graph, idx: usize) -> Result<Var> {
        let t = g.param(self.tokens);
        let row: Vec<usize> = (idx * self.channels..(idx + 1) * self.channels).collect();
        let v = g.take(t, &row)?;
        Ok(g.reshape(v, &[1, self.channels])?)
    }

    /// Flattens `s [1, C, H, W]` into patches and maps each through its FC
    /// layer. Returns the real stream, zero-padded to an even length.
    pub fn encode(&self, g: &mut Graph, s: Var, alloc: &RateAllocation) -> Result<Var> {
        let shape = g.shape(s).to_vec();
        let hw = shape[2] * shape[3];
        if shape[0] != 1 || shape[1] != self.channels {
            return Err(AutodiffError::Shape {
                op: "ra_encode",
                detail: format!("expected [1, {}, H, W], got {shape:?}", self.channels),
            }
            .into());
        }
        if alloc.k_s() != hw {
            return Err(RateError::PatchCount {
                allocated: alloc.k_s(),
                features: hw,
            });
        }
        let flat = g.reshape(s, &[self.channels, hw])?;
        let patches = g.transpose2d(flat)?;
        let mut parts = Vec::with_capacity(hw + 1);
        for (i, &w) in alloc.alpha_bar.iter().enumerate() {
            let idx = self.rates.index_of(w)?;
            let p = g.narrow(patches, 0, i, 1)?;
            let tok = self.token(g, idx)?;
            let p = g.add(p, tok)?;
            let y = self.enc[idx].forward(g, p)?;
            parts.push(g.reshape(y, &[w])?);
        }
        if alloc.total() % 2 == 1 {
            parts.push(g.constant(Tensor::zeros(&[1])));
        }
        Ok(g.concat(&parts, 0)?)
    }

    /// Inverse of [`RaCodec::encode`] back to `[1, C, H, W]`.
    pub fn decode(&self, g: &mut Graph, reals: Var, alloc: &RateAllocation, height: usize, width: usize) -> Result<Var> {
        let got = g.value(reals).len();
        if got != alloc.padded_reals() {
            return Err(RateError::SymbolCount {
                expected: alloc.padded_reals(),
                got,
            });
        }
        if alloc.k_s() != height * width {
            return Err(RateError::PatchCount {
                allocated: alloc.k_s(),
                features: height * width,
            });
        }
        let flat = g.reshape(reals, &[got])?;
        let mut offset = 0;
        let mut rows = Vec::with_capacity(alloc.k_s());
        for &w in &alloc.alpha_bar {
            let idx = self.rates.index_of(w)?;
            let seg = g.narrow(flat, 0, offset, w)?;
            offset += w;
            let seg = g.reshape(seg, &[1, w])?;
            let y = self.dec[idx].forward(g, seg)?;
            let tok = self.token(g, idx)?;
            rows.push(g.sub(y, tok)?);
        }
        let patches = g.concat(&rows, 0)?;
        let t = g.transpose2d(patches)?;
        Ok(g.reshape(t, &[1, self.channels, height, width])?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.tokens];
        p.extend(self.enc.iter().flat_map(Linear::params));
        p.extend(self.dec.iter().flat_map(Linear::params));
        p
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gaussian_bin_probability;
    use crate::autodiff::gradcheck::check_params;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-a..a))
    }

    #[test]
    fn rounding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::new(vec![4], vec![2.4, -2.5, 2.5, -0.4]).unwrap();
        let q = quantize_tensor(&t, QuantMode::Test, &mut rng);
        assert_eq!(q.data(), &[2.0, -3.0, 3.0, -0.0]);
    }

    #[test]
    fn training_noise_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::zeros(&[1_000_000]);
        let q = quantize_tensor(&t, QuantMode::Train, &mut rng);
        let n = q.len() as f64;
        let mean = q.sum() / n;
        let var = q.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.002, "{mean}");
        assert!((var - 1.0 / 12.0).abs() <= 0.002, "{var}");
        assert!(q.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn graph_quantize_test_mode_detaches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![2], vec![0.6, -1.5]).unwrap());
        let q = quantize(&mut g, x, QuantMode::Test, &mut rng).unwrap();
        assert_eq!(g.value(q).data(), &[1.0, -2.0]);
        let q = quantize(&mut g, x, QuantMode::Train, &mut rng).unwrap();
        let s = g.sum(q);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn rate_set_rules() {
        let w = RateSet::default();
        assert_eq!(w.len(), 32);
        assert_eq!((w.values()[0], w.max()), (4, 128));
        assert_eq!(w.index_bits(), 5);
        assert_eq!(w.ceil(0.0), (4, false));
        assert_eq!(w.ceil(9.5), (12, false));
        assert_eq!(w.ceil(8.0), (8, false));
        assert_eq!(w.ceil(128.0), (128, false));
        assert_eq!(w.ceil(300.0), (128, true));
        assert!(RateSet::new(vec![4, 4]).is_err());
        assert!(RateSet::new(vec![]).is_err());
        assert!(RateSet::new(vec![0, 3]).is_err());
        assert_eq!(RateSet::new(vec![2]).unwrap().index_bits(), 1);
        assert_eq!(RateSet::new(vec![1, 2, 3]).unwrap().index_bits(), 2);
    }

    #[test]
    fn ceiling_property_on_random_alpha() {
        let w = RateSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prev = (f64::NEG_INFINITY, 0);
        let mut samples: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..160.0)).collect();
        samples.sort_by(f64::total_cmp);
        for a in samples {
            let (b, clamped) = w.ceil(a);
            assert!(w.values().contains(&b));
            if a <= 128.0 {
                assert!(b as f64 >= a && !clamped);
                let i = w.index_of(b).unwrap();
                assert!(i == 0 || (w.values()[i - 1] as f64) < a);
            } else {
                assert!(clamped && b == 128);
            }
            assert!(b >= prev.1 && a >= prev.0);
            prev = (a, b);
        }
    }

    #[test]
    fn hyper_synthesis_zero_input_and_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let h = HyperSynthesis::new(&mut store, "hs", 3, 5, &mut rng);
        let mut g = Graph::with_params(&store);
        let z = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let m = h.forward(&mut g, z).unwrap();
        assert!(g.value(m.mu).data().iter().all(|&v| v == 0.0));
        let want = 2f64.ln() + SIGMA_FLOOR;
        assert!(g.value(m.sigma).data().iter().all(|&v| (v - want).abs() < 1e-15));
        let big = g.constant(rand_t(&mut rng, &[1, 3, 4, 4], 1e3));
        let m = h.forward(&mut g, big).unwrap();
        assert!(g.value(m.sigma).data().iter().all(|&v| v > 0.0));
        assert_eq!(g.shape(m.mu), &[1, 3, 4, 4]);
    }

    #[test]
    fn hyper_synthesis_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let h = HyperSynthesis::new(&mut store, "hs", 2, 3, &mut rng);
        let r = rand_t(&mut rng, &[1, 2, 3, 3], 2.0);
        let s = rand_t(&mut rng, &[1, 2, 3, 3], 2.0);
        let res = check_params(&store, &h.params(), 1e-5, 20, |g| {
            let rv = g.constant(r.clone());
            let sv = g.constant(s.clone());
            let m = h.forward(g, rv)?;
            let p = g.gaussian_likelihood(sv, m.mu, m.sigma, LIKELIHOOD_FLOOR)?;
            Ok(rate_term(g, p, None))
        })
        .unwrap();
        assert!(res.max_rel_error < 1e-4, "{res:?}");
    }

    #[test]
    fn likelihood_reference_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1]));
        let mu = g.constant(Tensor::zeros(&[1]));
        let sigma = g.constant(Tensor::full(&[1], 1.0));
        let p = likelihood(&mut g, x, &EntropyParams { mu, sigma }).unwrap();
        // Phi(0.5) - Phi(-0.5) from the erf series at 0.5 / sqrt 2
        let z = 0.5 / std::f64::consts::SQRT_2;
        let erf: f64 = (0..30)
            .map(|n| {
                let n = n as i32;
                let fact: f64 = (1..=n).map(f64::from).product();
                (-1f64).powi(n) * z.powi(2 * n + 1) / (fact * f64::from(2 * n + 1))
            })
            .sum::<f64>()
            * 2.0
            / std::f64::consts::PI.sqrt();
        assert!((g.value(p).item() - erf).abs() < 1e-12);
        assert!((g.value(p).item() - 0.382925).abs() < 1e-5);
        let mut last = 1.0;
        for s in [0.5, 1.0, 2.0, 5.0, 20.0, 100.0] {
            let v = gaussian_bin_probability(0.0, 0.0, s);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn gaussian_pmf_sums_to_one() {
        for i in 0..11 {
            for j in 0..10 {
                let mu = -5.0 + i as f64;
                let sigma = 0.1 * 100f64.powf(j as f64 / 9.0);
                let total: f64 = (-1000..=1000).map(|k| gaussian_bin_probability(k as f64, mu, sigma)).sum();
                assert!((total - 1.0).abs() < 1e-6, "mu {mu} sigma {sigma}: {total}");
            }
        }
    }

    #[test]
    fn factorized_prior_is_a_pmf() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let prior = FactorizedPrior::new(&mut store, "prior", 2, &mut rng);
        for id in prior.params() {
            let v = store.value(id);
            let t = Tensor::from_fn(v.shape(), |i| v.data()[i] + rng.random_range(-0.3..0.3));
            *store.value_mut(id) = t;
        }
        let mut g = Graph::with_params(&store);
        let n = 2001;
        let x = Tensor::from_fn(&[1, 2, 1, n], |i| (i % n) as f64 - 1000.0);
        let xv = g.constant(x);
        let p = prior.likelihood(&mut g, xv).unwrap();
        let d = g.value(p).data();
        for c in 0..2 {
            let s: f64 = d[c * n..(c + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "channel {c}: {s}");
        }
        assert!(d.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn factorized_prior_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let prior = FactorizedPrior::new(&mut store, "prior", 2, &mut rng);
        for &a in &prior.gates {
            *store.value_mut(a) = rand_t(&mut rng, &[2, 3], 0.5);
        }
        let x = rand_t(&mut rng, &[1, 2, 2, 2], 3.0).map(f64::round);
        let res = check_params(&store, &prior.params(), 1e-5, 20, |g| {
            let xv = g.constant(x.clone());
            let p = prior.likelihood(g, xv)?;
            Ok(rate_term(g, p, None))
        })
        .unwrap();
        assert!(res.max_rel_error < 1e-4, "{res:?}");
    }

    #[test]
    fn rate_term_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let r = rate_term(&mut g, ones, Some(ones));
        assert_eq!(g.value(r).item(), 0.0);
        let half = g.constant(Tensor::full(&[1], 0.5));
        let r = rate_term(&mut g, half, None);
        assert!((g.value(r).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn allocation_matches_rate_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Tensor::from_fn(&[1, 4, 3, 2], |_| rng.random_range(1e-4..1.0));
        let a = allocate_rates(&p, DEFAULT_RHO, &RateSet::default());
        assert_eq!(a.k_s(), 6);
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let bits = rate_term(&mut g, pv, None);
        let sum_alpha: f64 = a.alpha.iter().sum();
        assert!((sum_alpha / DEFAULT_RHO - g.value(bits).item()).abs() < 1e-9);
        let patch0: f64 = (0..4).map(|c| -p.data()[c * 6].log2()).sum::<f64>() * DEFAULT_RHO;
        assert!((a.alpha[0] - patch0).abs() < 1e-12);
    }

    #[test]
    fn allocation_edge_cases() {
        let w = RateSet::default();
        let a = allocate_rates(&Tensor::full(&[1, 3, 2, 2], 1.0), 0.2, &w);
        assert_eq!(a.alpha_bar, vec![4; 4]);
        assert!(a.alpha.iter().all(|&v| v == 0.0));
        let a = allocate_rates(&Tensor::full(&[1, 64, 1, 1], LIKELIHOOD_FLOOR), 0.2, &w);
        assert_eq!((a.alpha_bar[0], a.clamped), (128, 1));
    }

    #[test]
    fn side_info_round_trip() {
        let w = RateSet::default();
        let alloc = RateAllocation::from_rates(vec![4, 128, 12, 64, 8]);
        let bytes = pack_rates(&alloc, &w).unwrap();
        assert_eq!(bytes.len(), 4);
        // indices 0, 31, 2, 15, 1 as 5-bit fields
        assert_eq!(bytes[0], 0b0000_0111);
        assert_eq!(unpack_rates(&bytes, 5, &w).unwrap(), alloc.alpha_bar);
        assert_eq!(side_info_cost(5, &w), (25, 13));
        assert!(unpack_rates(&bytes[..2], 5, &w).is_err());
        assert!(pack_rates(&RateAllocation::from_rates(vec![5]), &w).is_err());
    }

    #[test]
    fn cbr_examples() {
        let w = RateSet::default();
        let alloc = RateAllocation::from_rates(vec![4, 8, 40]);
        assert_eq!(alloc.total(), 52);
        let r = cbr(&alloc, 50, 768, &w).unwrap();
        assert!((r.cbr - 76.0 / 768.0).abs() < 1e-15);
        assert!((r.cbr - 0.0990).abs() < 1e-4);
        assert!((r.literal - 102.0 / 768.0).abs() < 1e-15);
        assert!((r.with_side_info - 84.0 / 768.0).abs() < 1e-15);
        assert!(r.cbr > 50.0 / 768.0);
        assert_eq!(cbr(&alloc, 50, 0, &w), Err(RateError::ZeroSourceDim));
    }

    fn codec(channels: usize, rates: Vec<usize>, seed: u64) -> (ParamStore, RaCodec) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = RaCodec::new(&mut store, "ra", channels, RateSet::new(rates).unwrap(), &mut rng);
        (store, c)
    }

    #[test]
    fn symbol_counting() {
        let (store, ra) = codec(6, (1..=32).map(|i| 4 * i).collect(), 9);
        let mut g = Graph::with_params(&store);
        let s = g.constant(Tensor::full(&[1, 6, 2, 2], 0.3));
        let y = ra.encode(&mut g, s, &RateAllocation::from_rates(vec![4; 4])).unwrap();
        assert_eq!(g.value(y).len(), 16);
        let s2 = g.constant(Tensor::full(&[1, 6, 1, 2], 0.3));
        let alloc = RateAllocation::from_rates(vec![4, 8]);
        let y = ra.encode(&mut g, s2, &alloc).unwrap();
        assert_eq!(g.value(y).len(), 12);
        assert_eq!(alloc.semantic_symbols(), 6);
        assert!(ra.encode(&mut g, s2, &RateAllocation::from_rates(vec![4])).is_err());
        let (store, ra) = codec(2, vec![3], 10);
        let mut g = Graph::with_params(&store);
        let s = g.constant(Tensor::full(&[1, 2, 1, 1], 1.0));
        let alloc = RateAllocation::from_rates(vec![3]);
        let y = ra.encode(&mut g, s, &alloc).unwrap();
        assert_eq!(g.value(y).len(), 4);
        assert_eq!(g.value(y).data()[3], 0.0);
        let back = ra.decode(&mut g, y, &alloc, 1, 1).unwrap();
        assert_eq!(g.shape(back), &[1, 2, 1, 1]);
    }

    #[test]
    fn identity_banks_round_trip() {
        let (mut store, ra) = codec(4, vec![2, 4, 8], 11);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        *store.value_mut(ra.tokens) = rand_t(&mut rng, &[3, 4], 1.0);
        *store.value_mut(ra.enc[1].weight) = eye.clone();
        *store.value_mut(ra.dec[1].weight) = eye;
        let s = rand_t(&mut rng, &[1, 4, 2, 3], 3.0);
        let alloc = RateAllocation::from_rates(vec![4; 6]);
        let mut g = Graph::with_params(&store);
        let sv = g.constant(s.clone());
        let y = ra.encode(&mut g, sv, &alloc).unwrap();
        let back = ra.decode(&mut g, y, &alloc, 2, 3).unwrap();
        for (a, b) in g.value(back).data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_framing_and_zero_input() {
        let (mut store, ra) = codec(3, vec![4, 8], 13);
        *store.value_mut(ra.dec[0].bias) = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let alloc = RateAllocation::from_rates(vec![4, 4]);
        let mut g = Graph::with_params(&store);
        let bad = g.constant(Tensor::zeros(&[6]));
        assert_eq!(
            ra.decode(&mut g, bad, &alloc, 1, 2),
            Err(RateError::SymbolCount { expected: 8, got: 6 })
        );
        let zero = g.constant(Tensor::zeros(&[8]));
        let out = ra.decode(&mut g, zero, &alloc, 1, 2).unwrap();
        assert_eq!(g.value(out).data(), &[0.1, 0.1, -0.2, -0.2, 0.3, 0.3]);
    }

    fn unwrap_graph(e: RateError) -> AutodiffError {
        match e {
            RateError::Graph(a) => a,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn ra_bank_gradients() {
        let (mut store, ra) = codec(3, vec![2, 4], 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        *store.value_mut(ra.tokens) = rand_t(&mut rng, &[2, 3], 1.0);
        let s = rand_t(&mut rng, &[1, 3, 1, 3], 1.0);
        let alloc = RateAllocation::from_rates(vec![2, 4, 2]);
        let res = check_params(&store, &ra.params(), 1e-5, 12, |g| {
            let sv = g.constant(s.clone());
            let y = ra.encode(g, sv, &alloc).map_err(unwrap_graph)?;
            let y = g.normalize_power(y, 1.0)?;
            let back = ra.decode(g, y, &alloc, 1, 3).map_err(unwrap_graph)?;
            let d = g.sub(back, sv)?;
            let sq = g.square(d);
            Ok(g.sum(sq))
        });
        let res = res.unwrap();
        assert!(res.max_rel_error < 1e-4, "{res:?}");
    }
}

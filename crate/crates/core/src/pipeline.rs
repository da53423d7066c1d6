//! End-to-end transmission of one image over the two parallel streams.
//!
//! Image stream: codec bitstream, LDPC frames, Gray QPSK, channel, soft
//! demapping, belief propagation, codec decode. A failed LDPC frame or codec
//! error raises the corruption flag; if the codec cannot parse the stream the
//! receiver substitutes a mid-gray image.
//!
//! Semantic stream: encoder, quantization, rate allocation, FC bank,
//! power normalization, channel, MMSE equalization, inverse FC bank and the
//! SNR-aware decoder fusing the received image with the semantic features.

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::channel::{self, ChannelConfig, ChannelError};
use crate::codec::{self, CodecError, Quality};
use crate::decoder::PagnetOutput;
use crate::fec::{ldpc_decode_bp, ldpc_encode, qpsk_modulate, qpsk_soft_demod, FecError, ParityCheckMatrix};
use crate::image::Image;
use crate::model::Model;
use crate::rate::{self, QuantMode, RateAllocation, RateError};
use crate::tensor::Tensor;

pub const MID_GRAY: u8 = 128;
/// Variance used for soft demapping on a noiseless channel.
const NOISELESS_SIGMA2: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Fec(#[from] FecError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error("image {width}x{height}x{channels} does not fit the model: {msg}")]
    Dims {
        width: usize,
        height: usize,
        channels: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// Image and semantic streams.
    Parallel,
    /// Image stream only; the received image is the output.
    ConventionalOnly,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub quality: Quality,
    pub code: ParityCheckMatrix,
    /// Channel shared by both streams; each stream draws its own realization.
    pub channel: ChannelConfig,
    pub mode: StreamMode,
    /// Send the semantic features through the rate-adaptive FC banks; when
    /// off they cross the channel at full dimension.
    pub rate_adapt: bool,
    pub max_iter: usize,
}

/// Per-LDPC-frame accounting of the image stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FecSegment {
    pub info_bits: usize,
    pub pad_bits: usize,
    pub coded_bits: usize,
    pub symbols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransmissionFrame {
    pub segments: Vec<FecSegment>,
    /// Image-stream complex symbols.
    pub m: usize,
    /// Per-patch rates; empty for full-dimension or disabled semantic streams.
    pub alpha_bar: Vec<usize>,
    /// Real values produced by the semantic transmitter before padding.
    pub semantic_reals: usize,
    pub semantic_symbols: usize,
    pub side_bits: usize,
    pub side_symbols: usize,
    /// Total complex channel uses.
    pub n: usize,
    /// Source dimension `H * W * C`.
    pub k: usize,
}

impl TransmissionFrame {
    pub fn cbr(&self) -> f64 {
        self.n as f64 / self.k as f64
    }
}

#[derive(Debug, Clone)]
pub struct ConventionalOutput {
    pub received: Image,
    pub corrupted: bool,
    pub frame_errors: usize,
    pub segments: Vec<FecSegment>,
    pub symbols: usize,
    pub power: f64,
}

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1)).collect()
}

pub fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << (7 - i))))
        .collect()
}

/// Sends the codec bitstream of `img` over the image stream. Without an
/// explicit fading block length, each LDPC frame fades independently.
pub fn conventional_transmit(
    img: &Image,
    quality: Quality,
    code: &ParityCheckMatrix,
    channel_cfg: &ChannelConfig,
    max_iter: usize,
) -> Result<ConventionalOutput> {
    let bytes = codec::compress(img, quality)?.to_bytes();
    let bits = bytes_to_bits(&bytes);
    let k = code.k();
    let frames = bits.len().div_ceil(k);
    let mut segments = Vec::with_capacity(frames);
    let mut coded = Vec::with_capacity(frames * code.n());
    for f in 0..frames {
        let chunk = &bits[f * k..bits.len().min((f + 1) * k)];
        let mut info = chunk.to_vec();
        info.resize(k, 0);
        coded.extend(ldpc_encode(code, &info)?);
        let symbols = code.n().div_ceil(2);
        segments.push(FecSegment {
            info_bits: chunk.len(),
            pad_bits: k - chunk.len(),
            coded_bits: code.n(),
            symbols,
        });
    }
    let (symbols, _) = qpsk_modulate(&coded);
    let z = channel::normalize_power(&symbols, channel_cfg.power);
    let power = z.iter().map(|v| v.norm_sqr()).sum::<f64>() / z.len().max(1) as f64;
    let link = ChannelConfig {
        block_len: channel_cfg.block_len.or(Some(code.n().div_ceil(2))),
        ..*channel_cfg
    };
    let (y, real) = channel::transmit(&z, &link)?;
    let sigma2 = real.sigma2.max(NOISELESS_SIGMA2);
    let llr = qpsk_soft_demod(&y, &real.h, sigma2);
    let mut rx_bits = Vec::with_capacity(bits.len());
    let mut frame_errors = 0;
    for (f, seg) in segments.iter().enumerate() {
        let r = ldpc_decode_bp(code, &llr[f * code.n()..(f + 1) * code.n()], max_iter)?;
        frame_errors += usize::from(!r.converged);
        rx_bits.extend_from_slice(&r.bits[..seg.info_bits]);
    }
    let rx_bytes = bits_to_bytes(&rx_bits);
    let (received, codec_failed) = match codec::decompress(&rx_bytes) {
        Ok(im) if im.same_dims(img) => (im, false),
        _ => (Image::filled(img.width(), img.height(), img.channels(), MID_GRAY), true),
    };
    Ok(ConventionalOutput {
        received,
        corrupted: codec_failed || frame_errors > 0,
        frame_errors,
        segments,
        symbols: symbols.len(),
        power,
    })
}

/// Tensors entering the semantic stream for one image.
#[derive(Debug, Clone)]
pub struct SemanticInputs {
    /// Original image `[1, C, H, W]` in `[0, 1]`.
    pub x: Tensor,
    /// Compression residual `x - x_c`.
    pub x_r: Tensor,
    /// Received image-stream reconstruction.
    pub x_hat_c: Tensor,
}

impl SemanticInputs {
    pub fn new(x: &Image, x_c: &Image, x_hat_c: &Image) -> Self {
        Self {
            x: x.to_tensor(),
            x_r: x.residual_tensor(x_c),
            x_hat_c: x_hat_c.to_tensor(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinkOptions {
    pub quant: QuantMode,
    pub rate_adapt: bool,
    pub channel: ChannelConfig,
}

#[derive(Debug, Clone)]
pub struct SemanticForward {
    pub x_hat: Var,
    /// `-log2 p(s_tilde) - log2 p(r_tilde)` in bits.
    pub bits: Var,
    pub s_tilde: Var,
    pub alloc: Option<RateAllocation>,
    /// Reals before padding to whole complex symbols.
    pub reals: usize,
    pub symbols: usize,
    /// Mean symbol power after normalization.
    pub power: f64,
    pub fusion: Vec<PagnetOutput>,
}

/// `conj(h) / (|h|^2 + sigma2)` per symbol, zero where both vanish.
pub fn mmse_coefficients(h: &[Complex64], sigma2: f64) -> Vec<Complex64> {
    h.iter()
        .map(|hi| {
            let d = hi.norm_sqr() + sigma2;
            if d == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                hi.conj() / d
            }
        })
        .collect()
}

/// Normalizes, fades, adds noise and equalizes an interleaved real stream.
fn analog_link(g: &mut Graph, reals: Var, cfg: &ChannelConfig) -> Result<(Var, f64)> {
    let n = g.value(reals).len() / 2;
    let z = g.normalize_power(reals, cfg.power)?;
    let power = g.value(z).dot(g.value(z)) / n as f64;
    let real = channel::realize(n, cfg)?;
    let faded = g.complex_mul(z, &real.h)?;
    let noise = Tensor::from_fn(&[2 * n], |i| {
        let c = real.noise[i / 2];
        if i % 2 == 0 {
            c.re
        } else {
            c.im
        }
    });
    let nv = g.constant(noise);
    let y = g.add(faded, nv)?;
    let eq = mmse_coefficients(&real.h, real.sigma2);
    Ok((g.complex_mul(y, &eq)?, power))
}

pub fn check_dims(model: &Model, img: &Image) -> Result<()> {
    let stride = model.config.stride();
    let err = |msg: String| PipelineError::Dims {
        width: img.width(),
        height: img.height(),
        channels: img.channels(),
        msg,
    };
    if img.channels() != model.config.image_channels {
        return Err(err(format!("model expects {} channels", model.config.image_channels)));
    }
    if img.width() % stride != 0 || img.height() % stride != 0 || img.width() == 0 || img.height() == 0 {
        return Err(err(format!("sides must be positive multiples of {stride}")));
    }
    Ok(())
}

/// Semantic stream from the encoder through the decoder, as one graph.
pub fn semantic_forward(
    g: &mut Graph,
    model: &Model,
    inputs: &SemanticInputs,
    opts: &LinkOptions,
    rng: &mut impl Rng,
) -> Result<SemanticForward> {
    let x = g.constant(inputs.x.clone());
    let x_r = g.constant(inputs.x_r.clone());
    let x_hat_c = g.constant(inputs.x_hat_c.clone());
    let enc = model.encoder.forward(g, x, x_r)?;
    let s_tilde = rate::quantize(g, enc.s, opts.quant, rng)?;
    let r_tilde = rate::quantize(g, enc.r, opts.quant, rng)?;
    let em = model.hyper.forward(g, r_tilde)?;
    let p_s = rate::likelihood(g, s_tilde, &em)?;
    let p_r = model.prior.likelihood(g, r_tilde)?;
    let bits = rate::rate_term(g, p_s, Some(p_r));
    let shape = g.shape(s_tilde).to_vec();
    let (sh, sw) = (shape[2], shape[3]);
    let (tx, alloc) = if opts.rate_adapt {
        let alloc = rate::allocate_rates(g.value(p_s), model.config.rho, model.rate_set());
        (model.ra.encode(g, s_tilde, &alloc)?, Some(alloc))
    } else {
        let len: usize = shape.iter().product();
        let flat = g.reshape(s_tilde, &[len])?;
        let flat = if len % 2 == 1 {
            let z = g.constant(Tensor::zeros(&[1]));
            g.concat(&[flat, z], 0)?
        } else {
            flat
        };
        (flat, None)
    };
    let padded = g.value(tx).len();
    let reals = alloc.as_ref().map_or(shape.iter().product(), RateAllocation::total);
    let (rx, power) = analog_link(g, tx, &opts.channel)?;
    let s_hat = match &alloc {
        Some(a) => model.ra.decode(g, rx, a, sh, sw)?,
        None => {
            let body = g.narrow(rx, 0, 0, reals)?;
            g.reshape(body, &shape)?
        }
    };
    let dec = model.decoder.forward(g, x_hat_c, s_hat, opts.channel.snr_db)?;
    Ok(SemanticForward {
        x_hat: dec.x_hat,
        bits,
        s_tilde,
        alloc,
        reals,
        symbols: padded / 2,
        power,
        fusion: dec.fusion,
    })
}

#[derive(Debug, Clone)]
pub struct Transmission {
    pub x_hat: Image,
    /// Transmitter-side codec reconstruction.
    pub x_c: Image,
    /// Receiver-side image-stream reconstruction.
    pub x_hat_c: Image,
    pub frame: TransmissionFrame,
    pub corrupted: bool,
    pub frame_errors: usize,
    /// Mean symbol power of the image and semantic streams.
    pub power: (f64, Option<f64>),
}

/// Sends `img` through the configured streams. Stream realizations are keyed
/// by `seed` with keystream 0 for the image stream and 1 for the semantic
/// stream.
pub fn transmit_image(model: Option<&Model>, img: &Image, cfg: &PipelineConfig, seed: u64) -> Result<Transmission> {
    let image_ch = ChannelConfig {
        seed,
        stream: 0,
        ..cfg.channel
    };
    let conv = conventional_transmit(img, cfg.quality, &cfg.code, &image_ch, cfg.max_iter)?;
    let x_c = codec::round_trip(img, cfg.quality)?.1;
    let mut frame = TransmissionFrame {
        segments: conv.segments.clone(),
        m: conv.symbols,
        alpha_bar: Vec::new(),
        semantic_reals: 0,
        semantic_symbols: 0,
        side_bits: 0,
        side_symbols: 0,
        n: conv.symbols,
        k: img.dims(),
    };
    let model = match (cfg.mode, model) {
        (StreamMode::Parallel, Some(m)) => m,
        _ => {
            return Ok(Transmission {
                x_hat: conv.received.clone(),
                x_c,
                x_hat_c: conv.received,
                frame,
                corrupted: conv.corrupted,
                frame_errors: conv.frame_errors,
                power: (conv.power, None),
            })
        }
    };
    check_dims(model, img)?;
    let opts = LinkOptions {
        quant: QuantMode::Test,
        rate_adapt: cfg.rate_adapt,
        channel: ChannelConfig {
            seed,
            stream: 1,
            ..cfg.channel
        },
    };
    let inputs = SemanticInputs::new(img, &x_c, &conv.received);
    let mut g = Graph::with_params(&model.store);
    let mut rng = channel::derive_rng(seed, 2);
    let out = semantic_forward(&mut g, model, &inputs, &opts, &mut rng)?;
    if let Some(a) = &out.alloc {
        let (bits, syms) = rate::side_info_cost(a.k_s(), model.rate_set());
        frame.alpha_bar = a.alpha_bar.clone();
        frame.side_bits = bits;
        frame.side_symbols = syms;
    }
    frame.semantic_reals = out.reals;
    frame.semantic_symbols = out.symbols;
    frame.n = frame.m + frame.semantic_symbols + frame.side_symbols;
    Ok(Transmission {
        x_hat: Image::from_tensor(g.value(out.x_hat), 0),
        x_c,
        x_hat_c: conv.received,
        frame,
        corrupted: conv.corrupted,
        frame_errors: conv.frame_errors,
        power: (conv.power, Some(out.power)),
    })
}

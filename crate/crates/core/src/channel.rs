//! AWGN and Rayleigh block-fading channels.
//!
//! All randomness comes from ChaCha8 (a counter-based stream cipher) keyed by
//! the 64-bit experiment seed through `seed_from_u64`, with the 64-bit
//! stream id selecting an independent keystream. Realizations are therefore
//! reproducible across platforms for a given `(seed, stream)`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("transmit power must be positive, got {0}")]
    Power(f64),
    #[error("fading block length must be at least 1")]
    BlockLen,
    #[error("unknown channel kind {0:?}; expected `awgn` or `rayleigh`")]
    Kind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl std::str::FromStr for ChannelKind {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "awgn" => Ok(Self::Awgn),
            "rayleigh" | "rayleigh_block" => Ok(Self::Rayleigh),
            other => Err(ChannelError::Kind(other.to_string())),
        }
    }
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Awgn => "awgn",
            Self::Rayleigh => "rayleigh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// `f64::INFINITY` gives a noiseless channel.
    pub snr_db: f64,
    pub power: f64,
    /// Symbols per fading block; `None` means one block for the whole vector.
    pub block_len: Option<usize>,
    pub seed: u64,
    /// Keystream selector so that different links of one trial are independent.
    pub stream: u64,
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64, seed: u64) -> Self {
        Self {
            kind,
            snr_db,
            power: 1.0,
            block_len: None,
            seed,
            stream: 0,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn with_block_len(mut self, block_len: usize) -> Self {
        self.block_len = Some(block_len);
        self
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.power > 0.0) {
            return Err(ChannelError::Power(self.power));
        }
        if self.block_len == Some(0) {
            return Err(ChannelError::BlockLen);
        }
        Ok(())
    }

    pub fn sigma2(&self) -> f64 {
        snr_to_sigma2(self.snr_db, self.power)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<Complex64>,
    pub noise: Vec<Complex64>,
    pub sigma2: f64,
}

/// RNG for `(seed, stream)`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `sigma2 = P * 10^(-snr_db / 10)`.
pub fn snr_to_sigma2(snr_db: f64, power: f64) -> f64 {
    power * 10f64.powf(-snr_db / 10.0)
}

/// Scales `z` so that its mean symbol power is `power`; zero passes through.
pub fn normalize_power(z: &[Complex64], power: f64) -> Vec<Complex64> {
    let energy: f64 = z.iter().map(|v| v.norm_sqr()).sum();
    if energy == 0.0 {
        return z.to_vec();
    }
    let c = (power * z.len() as f64 / energy).sqrt();
    z.iter().map(|v| v * c).collect()
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
pub fn complex_gaussian(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
    let sd = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(sd * re, sd * im)
}

/// Draws gains and noise for `len` symbols.
pub fn realize(len: usize, cfg: &ChannelConfig) -> Result<ChannelRealization, ChannelError> {
    cfg.validate()?;
    let mut rng = derive_rng(cfg.seed, cfg.stream);
    let h = match cfg.kind {
        ChannelKind::Awgn => vec![Complex64::new(1.0, 0.0); len],
        ChannelKind::Rayleigh => {
            let block = cfg.block_len.unwrap_or(len.max(1));
            let mut h = Vec::with_capacity(len);
            while h.len() < len {
                let g = complex_gaussian(&mut rng, 1.0);
                let take = block.min(len - h.len());
                h.extend(std::iter::repeat_n(g, take));
            }
            h
        }
    };
    let sigma2 = cfg.sigma2();
    let noise = if sigma2 == 0.0 {
        vec![Complex64::new(0.0, 0.0); len]
    } else {
        (0..len).map(|_| complex_gaussian(&mut rng, sigma2)).collect()
    };
    Ok(ChannelRealization { h, noise, sigma2 })
}

/// `z_hat = h * z + n`, elementwise.
pub fn transmit(z: &[Complex64], cfg: &ChannelConfig) -> Result<(Vec<Complex64>, ChannelRealization), ChannelError> {
    let real = realize(z.len(), cfg)?;
    let out = z
        .iter()
        .zip(&real.h)
        .zip(&real.noise)
        .map(|((zi, hi), ni)| hi * zi + ni)
        .collect();
    Ok((out, real))
}

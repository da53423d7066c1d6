//! Monte-Carlo frame error rate of the coded QPSK link.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ldpc_decode_bp, ldpc_encode, qpsk_modulate, qpsk_soft_demod, FecError, ParityCheckMatrix};
use crate::channel::{self, ChannelConfig, ChannelError, ChannelKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FerPoint {
    pub snr_db: f64,
    pub frames: usize,
    pub frame_errors: usize,
    pub bit_errors: usize,
    /// Frames whose decoder stopped without a zero syndrome.
    pub unconverged: usize,
    pub mean_iterations: f64,
}

impl FerPoint {
    pub fn fer(&self) -> f64 {
        self.frame_errors as f64 / self.frames as f64
    }

    /// Information-bit error rate.
    pub fn ber(&self, k: usize) -> f64 {
        self.bit_errors as f64 / (self.frames * k) as f64
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Fec(#[from] FecError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Random information words through encode, Gray QPSK, the channel, soft
/// demapping and belief propagation. Frame `f` uses channel seed
/// `seed ^ (f << 20)`, so points at different SNRs share noise shapes.
pub fn frame_error_rate(
    h: &ParityCheckMatrix,
    kind: ChannelKind,
    snr_db: f64,
    frames: usize,
    max_iter: usize,
    seed: u64,
) -> Result<FerPoint, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point = FerPoint {
        snr_db,
        frames,
        frame_errors: 0,
        bit_errors: 0,
        unconverged: 0,
        mean_iterations: 0.0,
    };
    let mut iterations = 0;
    for f in 0..frames {
        let info: Vec<u8> = (0..h.k()).map(|_| rng.random_range(0..2u8)).collect();
        let cw = ldpc_encode(h, &info)?;
        let (sym, _) = qpsk_modulate(&cw);
        let cfg = ChannelConfig::new(kind, snr_db, seed ^ ((f as u64) << 20));
        let (y, real) = channel::transmit(&sym, &cfg)?;
        let llr = qpsk_soft_demod(&y, &real.h, real.sigma2.max(1e-12));
        let out = ldpc_decode_bp(h, &llr[..h.n()], max_iter)?;
        iterations += out.iterations;
        point.unconverged += usize::from(!out.converged);
        let errs = out.bits[..h.k()].iter().zip(&info).filter(|(a, b)| a != b).count();
        point.bit_errors += errs;
        point.frame_errors += usize::from(out.bits != cw);
    }
    point.mean_iterations = iterations as f64 / frames.max(1) as f64;
    Ok(point)
}

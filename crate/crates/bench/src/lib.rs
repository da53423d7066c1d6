//! Fixed benchmark inputs, reproducible from a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semlink_core::channel::{self, ChannelConfig, ChannelKind};
use semlink_core::data::procedural_corpus;
use semlink_core::fec::{ldpc_encode, qpsk_modulate, qpsk_soft_demod, ParityCheckMatrix};
use semlink_core::image::Image;
use semlink_core::Tensor;

/// Channel LLRs of one random codeword sent over AWGN at `snr_db`.
pub fn noisy_llrs(h: &ParityCheckMatrix, snr_db: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let info: Vec<u8> = (0..h.k()).map(|_| rng.random_range(0..2u8)).collect();
    let cw = ldpc_encode(h, &info).expect("info length matches the code");
    let (sym, _) = qpsk_modulate(&cw);
    let cfg = ChannelConfig::new(ChannelKind::Awgn, snr_db, seed);
    let (y, real) = channel::transmit(&sym, &cfg).expect("valid channel");
    let mut llr = qpsk_soft_demod(&y, &real.h, real.sigma2);
    llr.truncate(h.n());
    llr
}

/// Uniform `[-1, 1)` tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Smooth RGB test image of side `size`.
pub fn test_image(size: usize) -> Image {
    procedural_corpus(3, size, 9).remove(2)
}

#[cfg(test)]
mod tests {
    use semlink_core::fec::{ldpc_decode_bp, ShippedCode};

    use super::*;

    #[test]
    fn fixtures_are_valid() {
        let h = ShippedCode::Desk.build();
        let llr = noisy_llrs(&h, 8.0, 1);
        assert_eq!(llr.len(), h.n());
        assert!(ldpc_decode_bp(&h, &llr, 50).unwrap().converged);
        assert_eq!(random_tensor(&[2, 3], 4), random_tensor(&[2, 3], 4));
        assert_eq!(test_image(32).width(), 32);
    }
}

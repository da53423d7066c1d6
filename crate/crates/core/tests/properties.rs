use num_complex::Complex64;
use proptest::prelude::*;
use semlink_core::codec::{compress, decompress, Quality};
use semlink_core::fec::{ldpc_decode_bp, ldpc_encode, qpsk_modulate, qpsk_soft_demod, ShippedCode};
use semlink_core::image::Image;
use semlink_core::pipeline::{bits_to_bytes, bytes_to_bits};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoder_never_panics_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = decompress(&bytes);
    }

    #[test]
    fn codec_preserves_dimensions(
        w in 1usize..40,
        h in 1usize..40,
        c in 1usize..=4,
        q in 1u32..=100,
        data_seed in any::<u64>(),
    ) {
        let img = Image::from_fn(w, h, c, |x, y, ch| {
            (data_seed.wrapping_mul(x as u64 * 31 + y as u64 * 17 + ch as u64 + 1) >> 56) as u8
        });
        let bytes = compress(&img, Quality::new(q).unwrap()).unwrap().to_bytes();
        let back = decompress(&bytes).unwrap();
        prop_assert_eq!((back.width(), back.height(), back.channels()), (w, h, c));
    }

    #[test]
    fn bit_packing_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(bits_to_bytes(&bytes_to_bits(&bytes)), bytes);
    }

    #[test]
    fn noiseless_qpsk_ldpc_link_is_exact(seed in any::<u64>()) {
        let h = ShippedCode::Desk.build();
        let info: Vec<u8> = (0..h.k()).map(|i| ((seed >> (i % 64)) & 1) as u8 ^ (i % 3 == 0) as u8).collect();
        let cw = ldpc_encode(&h, &info).unwrap();
        let (sym, padded) = qpsk_modulate(&cw);
        prop_assert!(!padded);
        let gains = vec![Complex64::new(1.0, 0.0); sym.len()];
        let llr = qpsk_soft_demod(&sym, &gains, 0.5);
        let r = ldpc_decode_bp(&h, &llr, 50).unwrap();
        prop_assert!(r.converged);
        prop_assert_eq!(&r.bits[..h.k()], &info[..]);
    }
}

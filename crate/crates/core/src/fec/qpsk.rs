//! Gray-mapped QPSK and its coherent soft demapper.

use num_complex::Complex64;

use super::ldpc::LLR_LIMIT;

/// Maps bit pairs `(b0, b1)` to `((1 - 2 b0) + i (1 - 2 b1)) / sqrt 2`.
/// An odd-length input is padded with one zero bit; the flag reports it.
pub fn qpsk_modulate(bits: &[u8]) -> (Vec<Complex64>, bool) {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let level = |b: u8| if b == 0 { a } else { -a };
    let padded = bits.len() % 2 == 1;
    let symbols = bits
        .chunks(2)
        .map(|p| Complex64::new(level(p[0]), level(p.get(1).copied().unwrap_or(0))))
        .collect();
    (symbols, padded)
}

/// Per-bit LLRs `2 sqrt 2 Re/Im(h* y) / sigma2`, i.e. the equalized sample
/// scaled by `|h|^2 / sigma2`, saturated at `+-30`. A zero gain yields 0.
pub fn qpsk_soft_demod(y: &[Complex64], h: &[Complex64], sigma2: f64) -> Vec<f64> {
    assert_eq!(y.len(), h.len(), "one gain per received symbol");
    assert!(sigma2 > 0.0, "noise variance must be positive");
    let scale = 2.0 * std::f64::consts::SQRT_2 / sigma2;
    let mut out = Vec::with_capacity(2 * y.len());
    for (yi, hi) in y.iter().zip(h) {
        if hi.norm_sqr() == 0.0 {
            out.extend([0.0, 0.0]);
            continue;
        }
        let m = hi.conj() * yi;
        out.push((scale * m.re).clamp(-LLR_LIMIT, LLR_LIMIT));
        out.push((scale * m.im).clamp(-LLR_LIMIT, LLR_LIMIT));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_convention() {
        let (s, pad) = qpsk_modulate(&[0, 0, 1, 1, 0, 1]);
        let a = std::f64::consts::FRAC_1_SQRT_2;
        assert!(!pad);
        assert_eq!(s[0], Complex64::new(a, a));
        assert_eq!(s[1], Complex64::new(-a, -a));
        assert_eq!(s[2], Complex64::new(a, -a));
        let (s, pad) = qpsk_modulate(&[1]);
        assert!(pad);
        assert_eq!(s, vec![Complex64::new(-a, a)]);
    }

    #[test]
    fn unit_power() {
        let bits: Vec<u8> = (0..1000).map(|i| ((i * 7 + i / 3) % 2) as u8).collect();
        let (s, _) = qpsk_modulate(&bits);
        let p = s.iter().map(|z| z.norm_sqr()).sum::<f64>() / s.len() as f64;
        assert!((p - 1.0).abs() < 1e-15);
    }

    #[test]
    fn llr_examples() {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let one = Complex64::new(1.0, 0.0);
        let l = qpsk_soft_demod(&[Complex64::new(a, a)], &[one], 1.0);
        assert!((l[0] - 2.0).abs() < 1e-12 && (l[1] - 2.0).abs() < 1e-12);
        let l = qpsk_soft_demod(&[Complex64::new(a, a)], &[Complex64::new(0.0, 0.0)], 1.0);
        assert_eq!(l, vec![0.0, 0.0]);
    }

    #[test]
    fn noiseless_round_trip_through_fading() {
        let bits: Vec<u8> = (0..64).map(|i| ((i * 5 + 1) % 3 % 2) as u8).collect();
        let (s, _) = qpsk_modulate(&bits);
        let h: Vec<Complex64> = (0..s.len()).map(|i| Complex64::from_polar(0.3 + i as f64 * 0.01, i as f64)).collect();
        let y: Vec<Complex64> = s.iter().zip(&h).map(|(a, b)| a * b).collect();
        let llr = qpsk_soft_demod(&y, &h, 1e-9);
        let hard: Vec<u8> = llr.iter().map(|&l| u8::from(l < 0.0)).collect();
        assert_eq!(hard, bits);
    }
}

//! Channel coding and modulation for the image stream.

pub mod ldpc;
pub mod qpsk;
pub mod sim;

use thiserror::Error;

pub use ldpc::{
    build_qc_ldpc, design_base, ldpc_decode_bp, ldpc_encode, BaseMatrix, DecodeResult, ParityCheckMatrix,
    DEFAULT_MAX_ITER,
};
pub use qpsk::{qpsk_modulate, qpsk_soft_demod};
pub use sim::{frame_error_rate, FerPoint, SimError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FecError {
    #[error("invalid base matrix: {0}")]
    Base(String),
    #[error("shift table line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("parity-check matrix has rank {rank}, expected {rows}")]
    RankDeficient { rank: usize, rows: usize },
    #[error("parity part is not dual-diagonal; the encoder needs that layout")]
    Structure,
    #[error("expected {expected} bits, got {got}")]
    Length { expected: usize, got: usize },
    #[error("unknown code {0:?}; expected `desk`, `full` or a shift-table path")]
    UnknownCode(String),
    #[error("reading shift table: {0}")]
    Io(String),
}

const DESK_TABLE: &str = include_str!("../../data/qc_r34_n1024.txt");
const FULL_TABLE: &str = include_str!("../../data/qc_r34_n6144.txt");

/// Rate-3/4 shipped codes: `desk` (n = 1024, Z = 64) and `full` (n = 6144, Z = 384).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShippedCode {
    Desk,
    Full,
}

impl ShippedCode {
    pub fn base(self) -> BaseMatrix {
        let text = match self {
            ShippedCode::Desk => DESK_TABLE,
            ShippedCode::Full => FULL_TABLE,
        };
        BaseMatrix::parse(text).expect("shipped shift table is valid")
    }

    pub fn build(self) -> ParityCheckMatrix {
        build_qc_ldpc(&self.base()).expect("shipped code has full rank")
    }
}

/// Resolves `desk`, `full`, or a path to a shift-table file.
pub fn load_code(name: &str) -> Result<ParityCheckMatrix, FecError> {
    let base = match name {
        "desk" => ShippedCode::Desk.base(),
        "full" => ShippedCode::Full.base(),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| FecError::Io(format!("{path}: {e}")))?;
            BaseMatrix::parse(&text)?
        }
    };
    build_qc_ldpc(&base)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn shipped_tables_are_reproducible() {
        assert_eq!(ShippedCode::Desk.base(), design_base(4, 16, 64, 5).unwrap());
        assert_eq!(ShippedCode::Full.base(), design_base(4, 16, 384, 0).unwrap());
    }

    #[test]
    fn shipped_dimensions() {
        let d = ShippedCode::Desk.build();
        assert_eq!((d.m(), d.n(), d.k()), (256, 1024, 768));
        let f = ShippedCode::Full.build();
        assert_eq!((f.m(), f.n()), (1536, 6144));
        assert!((f.rate() - 0.75).abs() < 1e-15);
        assert!(!ShippedCode::Desk.base().has_four_cycle());
        assert!(!ShippedCode::Full.base().has_four_cycle());
    }

    #[test]
    fn clean_and_single_flip_decoding() {
        let h = ShippedCode::Desk.build();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let info: Vec<u8> = (0..h.k()).map(|_| rng.random_range(0..2)).collect();
        let cw = ldpc_encode(&h, &info).unwrap();
        let llr: Vec<f64> = cw.iter().map(|&b| if b == 0 { 8.0 } else { -8.0 }).collect();
        let r = ldpc_decode_bp(&h, &llr, DEFAULT_MAX_ITER).unwrap();
        assert!(r.converged && r.iterations == 0 && r.bits == cw);
        let mut bad = llr.clone();
        bad[17] = -bad[17];
        let r = ldpc_decode_bp(&h, &bad, DEFAULT_MAX_ITER).unwrap();
        assert!(r.converged && r.bits == cw);
    }

    #[test]
    fn codewords_are_closed_under_xor() {
        let h = ShippedCode::Desk.build();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<u8> = (0..h.k()).map(|_| rng.random_range(0..2)).collect();
        let b: Vec<u8> = (0..h.k()).map(|_| rng.random_range(0..2)).collect();
        let ca = ldpc_encode(&h, &a).unwrap();
        let cb = ldpc_encode(&h, &b).unwrap();
        let sum: Vec<u8> = ca.iter().zip(&cb).map(|(x, y)| x ^ y).collect();
        assert!(h.syndrome_is_zero(&sum));
        assert!(ldpc_encode(&h, &vec![0; h.k()]).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn load_code_resolves_names_and_paths() {
        assert_eq!(load_code("desk").unwrap().n(), 1024);
        assert!(matches!(load_code("/nonexistent/table.txt"), Err(FecError::Io(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        std::fs::write(&p, design_base(4, 12, 16, 1).unwrap().to_text()).unwrap();
        assert_eq!(load_code(p.to_str().unwrap()).unwrap().n(), 192);
    }
}

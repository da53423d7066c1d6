//! Orthonormal 8x8 type-II DCT.

use std::sync::OnceLock;

pub const N: usize = 8;

/// `C[u][x] = c(u) cos((2x + 1) u pi / 16)` with `c(0) = sqrt(1/8)`,
/// `c(u) = sqrt(2/8)` otherwise.
fn basis() -> &'static [[f64; N]; N] {
    static BASIS: OnceLock<[[f64; N]; N]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; N]; N];
        for (u, row) in c.iter_mut().enumerate() {
            let scale = if u == 0 { (1.0 / N as f64).sqrt() } else { (2.0 / N as f64).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = scale * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / (2 * N) as f64).cos();
            }
        }
        c
    })
}

/// `F = C X C^T` on a row-major block.
pub fn forward(block: &[f64; 64]) -> [f64; 64] {
    let c = basis();
    let mut tmp = [0.0; 64];
    for u in 0..N {
        for y in 0..N {
            tmp[u * N + y] = (0..N).map(|x| c[u][x] * block[x * N + y]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..N {
        for v in 0..N {
            out[u * N + v] = (0..N).map(|y| tmp[u * N + y] * c[v][y]).sum();
        }
    }
    out
}

/// `X = C^T F C`.
pub fn inverse(coeffs: &[f64; 64]) -> [f64; 64] {
    let c = basis();
    let mut tmp = [0.0; 64];
    for x in 0..N {
        for v in 0..N {
            tmp[x * N + v] = (0..N).map(|u| c[u][x] * coeffs[u * N + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for x in 0..N {
        for y in 0..N {
            out[x * N + y] = (0..N).map(|v| tmp[x * N + v] * c[v][y]).sum();
        }
    }
    out
}

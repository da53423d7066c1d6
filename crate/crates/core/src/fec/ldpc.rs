//! Quasi-cyclic LDPC codes: lifting, systematic encoding and sum-product
//! decoding.
//!
//! A base matrix of shifts expands every entry `s >= 0` into the `Z x Z`
//! identity cyclically shifted by `s` (row `r` has its one in column
//! `(r + s) mod Z`) and every `-1` into a zero block. The last `rows` block
//! columns hold the parity part, which must have the dual-diagonal layout
//!
//! ```text
//!   x  0  .  .        row 0
//!   .  0  0  .
//!   0  .  0  0        row `mid`
//!   x  .  .  0        last row
//! ```
//!
//! where the first parity column carries shift `x` in the first and last
//! block rows and shift 0 in one middle row. Encoding is then a
//! back-substitution over block rows.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FecError;

pub const LLR_LIMIT: f64 = 30.0;
const TANH_CLIP: f64 = 0.999_999_999;
pub const DEFAULT_MAX_ITER: usize = 50;

/// Shift table of a QC code; `-1` marks a zero block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub z: usize,
    pub shifts: Vec<i32>,
}

impl BaseMatrix {
    pub fn new(rows: usize, cols: usize, z: usize, shifts: Vec<i32>) -> Result<Self, FecError> {
        if rows == 0 || cols < rows || z == 0 || shifts.len() != rows * cols {
            return Err(FecError::Base(format!(
                "{rows}x{cols} base with Z={z} needs {} shifts, got {}",
                rows * cols,
                shifts.len()
            )));
        }
        if let Some(bad) = shifts.iter().find(|&&s| s < -1 || s >= z as i32) {
            return Err(FecError::Base(format!("shift {bad} outside [-1, {z})")));
        }
        Ok(Self { rows, cols, z, shifts })
    }

    pub fn shift(&self, r: usize, c: usize) -> i32 {
        self.shifts[r * self.cols + c]
    }

    /// Parses the plain-text shift table grammar described in
    /// `docs/ldpc_shift_tables.md`.
    pub fn parse(text: &str) -> Result<Self, FecError> {
        let mut z = None;
        let mut rows = None;
        let mut cols = None;
        let mut shifts = Vec::new();
        let mut data_rows = 0;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let first = toks.next().unwrap_or("");
            let key_value = |slot: &mut Option<usize>, toks: &mut std::str::SplitWhitespace| -> Result<(), FecError> {
                let v = toks
                    .next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| FecError::Parse { line: line_no, msg: format!("`{first}` needs a positive integer") })?;
                if slot.replace(v).is_some() {
                    return Err(FecError::Parse { line: line_no, msg: format!("duplicate `{first}`") });
                }
                Ok(())
            };
            match first {
                "Z" => key_value(&mut z, &mut toks)?,
                "rows" => key_value(&mut rows, &mut toks)?,
                "cols" => key_value(&mut cols, &mut toks)?,
                _ => {
                    let c = cols.ok_or(FecError::Parse { line: line_no, msg: "shift row before `cols`".into() })?;
                    let row: Result<Vec<i32>, _> = line.split_whitespace().map(str::parse::<i32>).collect();
                    let row = row.map_err(|e| FecError::Parse { line: line_no, msg: e.to_string() })?;
                    if row.len() != c {
                        return Err(FecError::Parse { line: line_no, msg: format!("expected {c} shifts, found {}", row.len()) });
                    }
                    shifts.extend(row);
                    data_rows += 1;
                }
            }
        }
        let missing = |k: &str| FecError::Parse { line: 0, msg: format!("missing `{k}`") };
        let (z, rows, cols) = (z.ok_or_else(|| missing("Z"))?, rows.ok_or_else(|| missing("rows"))?, cols.ok_or_else(|| missing("cols"))?);
        if data_rows != rows {
            return Err(FecError::Parse { line: 0, msg: format!("declared {rows} rows, found {data_rows}") });
        }
        Self::new(rows, cols, z, shifts)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Z {}\nrows {}\ncols {}", self.z, self.rows, self.cols);
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| self.shift(r, c).to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Whether any two block rows and two block columns close a length-4 cycle.
    pub fn has_four_cycle(&self) -> bool {
        let z = self.z as i64;
        for a in 0..self.rows {
            for b in a + 1..self.rows {
                for c in 0..self.cols {
                    let (sac, sbc) = (self.shift(a, c), self.shift(b, c));
                    if sac < 0 || sbc < 0 {
                        continue;
                    }
                    for d in c + 1..self.cols {
                        let (sad, sbd) = (self.shift(a, d), self.shift(b, d));
                        if sad < 0 || sbd < 0 {
                            continue;
                        }
                        let v = (sac as i64 - sbc as i64 + sbd as i64 - sad as i64).rem_euclid(z);
                        if v == 0 {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Expanded sparse parity-check matrix with the edge lists BP needs.
#[derive(Debug, Clone)]
pub struct ParityCheckMatrix {
    base: BaseMatrix,
    n: usize,
    m: usize,
    /// Variable index of every edge, grouped by check.
    edge_var: Vec<usize>,
    /// Check `i` owns edges `check_start[i]..check_start[i + 1]`.
    check_start: Vec<usize>,
    /// Edges incident to variable `v`: `var_edges[var_start[v]..var_start[v + 1]]`.
    var_edges: Vec<usize>,
    var_start: Vec<usize>,
    /// Middle row of the dual-diagonal parity part, if the layout matches.
    mid_row: Option<usize>,
}

/// Expands a base matrix and verifies that the lifted matrix has full row rank.
pub fn build_qc_ldpc(base: &BaseMatrix) -> Result<ParityCheckMatrix, FecError> {
    let z = base.z;
    let (m, n) = (base.rows * z, base.cols * z);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); m];
    for br in 0..base.rows {
        for bc in 0..base.cols {
            let s = base.shift(br, bc);
            if s < 0 {
                continue;
            }
            for r in 0..z {
                rows[br * z + r].push(bc * z + (r + s as usize) % z);
            }
        }
    }
    let rank = gf2_rank(&rows, n);
    if rank < m {
        return Err(FecError::RankDeficient { rank, rows: m });
    }
    let mut check_start = Vec::with_capacity(m + 1);
    let mut edge_var = Vec::new();
    for row in &mut rows {
        row.sort_unstable();
        check_start.push(edge_var.len());
        edge_var.extend_from_slice(row);
    }
    check_start.push(edge_var.len());
    let mut degree = vec![0usize; n];
    edge_var.iter().for_each(|&v| degree[v] += 1);
    let mut var_start = vec![0usize; n + 1];
    for v in 0..n {
        var_start[v + 1] = var_start[v] + degree[v];
    }
    let mut fill = var_start.clone();
    let mut var_edges = vec![0usize; edge_var.len()];
    for (e, &v) in edge_var.iter().enumerate() {
        var_edges[fill[v]] = e;
        fill[v] += 1;
    }
    let mid_row = dual_diagonal_mid(base);
    Ok(ParityCheckMatrix {
        base: base.clone(),
        n,
        m,
        edge_var,
        check_start,
        var_edges,
        var_start,
        mid_row,
    })
}

fn gf2_rank(rows: &[Vec<usize>], n: usize) -> usize {
    let words = n.div_ceil(64);
    let mut mat: Vec<Vec<u64>> = rows
        .iter()
        .map(|r| {
            let mut w = vec![0u64; words];
            for &c in r {
                w[c / 64] ^= 1 << (c % 64);
            }
            w
        })
        .collect();
    let mut rank = 0;
    for col in 0..n {
        let (wi, bit) = (col / 64, 1u64 << (col % 64));
        let Some(p) = (rank..mat.len()).find(|&r| mat[r][wi] & bit != 0) else {
            continue;
        };
        mat.swap(rank, p);
        let pivot = mat[rank].clone();
        for row in mat.iter_mut().skip(rank + 1) {
            if row[wi] & bit != 0 {
                for (a, b) in row[wi..].iter_mut().zip(&pivot[wi..]) {
                    *a ^= b;
                }
            }
        }
        rank += 1;
        if rank == mat.len() {
            break;
        }
    }
    rank
}

/// Returns the middle row of the first parity column if the parity part has
/// the dual-diagonal layout described in the module docs.
fn dual_diagonal_mid(base: &BaseMatrix) -> Option<usize> {
    let (mb, k) = (base.rows, base.cols - base.rows);
    if mb < 3 {
        return None;
    }
    let x = base.shift(0, k);
    if x <= 0 || base.shift(mb - 1, k) != x {
        return None;
    }
    let mids: Vec<usize> = (1..mb - 1).filter(|&r| base.shift(r, k) >= 0).collect();
    if mids.len() != 1 || base.shift(mids[0], k) != 0 {
        return None;
    }
    for j in 1..mb {
        for r in 0..mb {
            let expect = if r + 1 == j || r == j { 0 } else { -1 };
            if base.shift(r, k + j) != expect {
                return None;
            }
        }
    }
    Some(mids[0])
}

impl ParityCheckMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of parity checks (rows of H).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Information bits per codeword.
    pub fn k(&self) -> usize {
        self.n - self.m
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    pub fn base(&self) -> &BaseMatrix {
        &self.base
    }

    pub fn num_edges(&self) -> usize {
        self.edge_var.len()
    }

    /// Column indices of the ones in row `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.edge_var[self.check_start[i]..self.check_start[i + 1]]
    }

    pub fn syndrome_is_zero(&self, bits: &[u8]) -> bool {
        (0..self.m).all(|i| self.row(i).iter().fold(0u8, |acc, &v| acc ^ bits[v]) == 0)
    }

    /// `H c^T` over GF(2).
    pub fn syndrome(&self, bits: &[u8]) -> Vec<u8> {
        (0..self.m).map(|i| self.row(i).iter().fold(0u8, |acc, &v| acc ^ bits[v])).collect()
    }
}

fn shift_add(acc: &mut [u8], v: &[u8], s: usize) {
    let z = acc.len();
    for r in 0..z {
        acc[r] ^= v[(r + s) % z];
    }
}

/// Systematic encoding: the codeword is `info` followed by the parity bits.
pub fn ldpc_encode(h: &ParityCheckMatrix, info: &[u8]) -> Result<Vec<u8>, FecError> {
    if info.len() != h.k() {
        return Err(FecError::Length { expected: h.k(), got: info.len() });
    }
    let mid = h.mid_row.ok_or(FecError::Structure)?;
    let base = &h.base;
    let (z, mb, kb) = (base.z, base.rows, base.cols - base.rows);
    let mut lambda = vec![vec![0u8; z]; mb];
    for (r, lam) in lambda.iter_mut().enumerate() {
        for c in 0..kb {
            let s = base.shift(r, c);
            if s >= 0 {
                shift_add(lam, &info[c * z..(c + 1) * z], s as usize);
            }
        }
    }
    let mut p = vec![vec![0u8; z]; mb];
    for lam in &lambda {
        p[0].iter_mut().zip(lam).for_each(|(a, b)| *a ^= b);
    }
    let x = base.shift(0, kb) as usize;
    let mut p1 = lambda[0].clone();
    shift_add(&mut p1, &p[0], x);
    p[1] = p1;
    for i in 1..mb - 1 {
        let mut next = lambda[i].clone();
        next.iter_mut().zip(&p[i]).for_each(|(a, b)| *a ^= b);
        if i == mid {
            next.iter_mut().zip(&p[0]).for_each(|(a, b)| *a ^= b);
        }
        p[i + 1] = next;
    }
    let mut cw = info.to_vec();
    for block in p {
        cw.extend(block);
    }
    debug_assert!(h.syndrome_is_zero(&cw), "encoder produced a non-codeword");
    Ok(cw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub bits: Vec<u8>,
    pub converged: bool,
    pub iterations: usize,
}

fn hard(llr: &[f64]) -> Vec<u8> {
    llr.iter().map(|&l| u8::from(l < 0.0)).collect()
}

/// Flooding sum-product decoding with the tanh rule. LLR > 0 favors bit 0.
/// With `max_iter = 0` the hard decisions of the input are returned.
pub fn ldpc_decode_bp(h: &ParityCheckMatrix, llr: &[f64], max_iter: usize) -> Result<DecodeResult, FecError> {
    if llr.len() != h.n {
        return Err(FecError::Length { expected: h.n, got: llr.len() });
    }
    let ch: Vec<f64> = llr.iter().map(|l| l.clamp(-LLR_LIMIT, LLR_LIMIT)).collect();
    let mut bits = hard(&ch);
    if h.syndrome_is_zero(&bits) || max_iter == 0 {
        return Ok(DecodeResult {
            converged: h.syndrome_is_zero(&bits),
            bits,
            iterations: 0,
        });
    }
    let ne = h.edge_var.len();
    let mut v2c: Vec<f64> = h.edge_var.iter().map(|&v| ch[v]).collect();
    let mut c2v = vec![0.0; ne];
    let mut t = Vec::new();
    let mut suffix = Vec::new();
    let mut total = ch.clone();
    for it in 1..=max_iter {
        for i in 0..h.m {
            let (a, b) = (h.check_start[i], h.check_start[i + 1]);
            t.clear();
            t.extend(v2c[a..b].iter().map(|&m| (m * 0.5).tanh()));
            suffix.clear();
            suffix.resize(t.len() + 1, 1.0);
            for j in (0..t.len()).rev() {
                suffix[j] = suffix[j + 1] * t[j];
            }
            let mut prefix = 1.0;
            for j in 0..t.len() {
                let ext = (prefix * suffix[j + 1]).clamp(-TANH_CLIP, TANH_CLIP);
                c2v[a + j] = 2.0 * ext.atanh();
                prefix *= t[j];
            }
        }
        for v in 0..h.n {
            let edges = &h.var_edges[h.var_start[v]..h.var_start[v + 1]];
            let sum = ch[v] + edges.iter().map(|&e| c2v[e]).sum::<f64>();
            total[v] = sum;
            for &e in edges {
                v2c[e] = (sum - c2v[e]).clamp(-LLR_LIMIT, LLR_LIMIT);
            }
        }
        bits = hard(&total);
        if h.syndrome_is_zero(&bits) {
            return Ok(DecodeResult {
                bits,
                converged: true,
                iterations: it,
            });
        }
    }
    Ok(DecodeResult {
        bits,
        converged: false,
        iterations: max_iter,
    })
}

/// Deterministic greedy search for a 4-cycle-free base matrix with the
/// dual-diagonal parity layout. Information column `c` connects to every
/// block row except row `(c - 1) mod rows` (column 0 connects to all rows);
/// each shift is drawn at random until it closes no 4-cycle with the
/// entries placed so far.
pub fn design_base(rows: usize, cols: usize, z: usize, seed: u64) -> Result<BaseMatrix, FecError> {
    if rows < 3 || cols <= rows || z < 2 {
        return Err(FecError::Base(format!("cannot design a {rows}x{cols} base with Z={z}")));
    }
    let kb = cols - rows;
    let mut shifts = vec![-1i32; rows * cols];
    shifts[kb] = 1;
    shifts[(rows / 2) * cols + kb] = 0;
    shifts[(rows - 1) * cols + kb] = 1;
    for j in 1..rows {
        shifts[(j - 1) * cols + kb + j] = 0;
        shifts[j * cols + kb + j] = 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = BaseMatrix::new(rows, cols, z, shifts)?;
    for c in 0..kb {
        let skip = if c == 0 { None } else { Some((c - 1) % rows) };
        for r in (0..rows).filter(|&r| Some(r) != skip) {
            let mut placed = false;
            for _ in 0..10_000 {
                base.shifts[r * cols + c] = rng.random_range(0..z as i32);
                if !base.has_four_cycle() {
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(FecError::Base(format!("no 4-cycle-free shift for block ({r}, {c}) with Z={z}")));
            }
        }
    }
    Ok(base)
}

//! Canonical prefix codes and MSB-first bit I/O for the coefficient payload.
//!
//! The code tables are the customary luminance DC/AC tables given as
//! per-length code counts plus symbols in code order; codes are assigned
//! canonically (shortest first, consecutive integers within a length).

use super::CodecError;

pub const DC_COUNTS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
pub const DC_SYMBOLS: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

pub const AC_COUNTS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d];
#[rustfmt::skip]
pub const AC_SYMBOLS: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7,
    0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5,
    0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2,
    0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
];

/// End of block: all remaining AC coefficients are zero.
pub const EOB: u8 = 0x00;
/// Sixteen zero coefficients.
pub const ZRL: u8 = 0xf0;

#[derive(Debug, Clone)]
pub struct HuffmanTable {
    /// `(code, length)` per symbol value; length 0 marks an unused symbol.
    encode: [(u16, u8); 256],
    /// Per length `1..=16`: first code, number of codes, offset into `symbols`.
    first: [u16; 17],
    count: [u16; 17],
    offset: [usize; 17],
    symbols: Vec<u8>,
}

impl HuffmanTable {
    pub fn new(counts: &[u8; 16], symbols: &[u8]) -> Self {
        let mut encode = [(0u16, 0u8); 256];
        let mut first = [0u16; 17];
        let mut count = [0u16; 17];
        let mut offset = [0usize; 17];
        let mut code: u32 = 0;
        let mut k = 0;
        for len in 1..=16 {
            first[len] = code as u16;
            count[len] = counts[len - 1] as u16;
            offset[len] = k;
            for _ in 0..counts[len - 1] {
                encode[symbols[k] as usize] = (code as u16, len as u8);
                code += 1;
                k += 1;
            }
            code <<= 1;
        }
        Self {
            encode,
            first,
            count,
            offset,
            symbols: symbols.to_vec(),
        }
    }

    pub fn dc() -> Self {
        Self::new(&DC_COUNTS, &DC_SYMBOLS)
    }

    pub fn ac() -> Self {
        Self::new(&AC_COUNTS, &AC_SYMBOLS)
    }

    pub fn code(&self, symbol: u8) -> Option<(u16, u8)> {
        let (c, l) = self.encode[symbol as usize];
        (l > 0).then_some((c, l))
    }

    pub fn write(&self, w: &mut BitWriter, symbol: u8) {
        let (c, l) = self.code(symbol).expect("symbol missing from code table");
        w.put(c as u32, l);
    }

    pub fn read(&self, r: &mut BitReader) -> Result<u8, CodecError> {
        let start = r.byte_offset();
        let mut code: u32 = 0;
        for len in 1..=16 {
            code = (code << 1) | r.bit()? as u32;
            let idx = code.wrapping_sub(self.first[len] as u32);
            if code >= self.first[len] as u32 && idx < self.count[len] as u32 {
                return Ok(self.symbols[self.offset[len] + idx as usize]);
            }
        }
        Err(CodecError::InvalidCode { offset: start })
    }
}

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u32,
    nbits: u8,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `len` bits of `value`, most significant first.
    pub fn put(&mut self, value: u32, len: u8) {
        for i in (0..len).rev() {
            self.acc = (self.acc << 1) | ((value >> i) & 1);
            self.nbits += 1;
            if self.nbits == 8 {
                self.bytes.push(self.acc as u8);
                self.acc = 0;
                self.nbits = 0;
            }
        }
    }

    /// Pads the last byte with one-bits and returns the bytes.
    pub fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.put((1 << pad) - 1, pad);
        }
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> BitReader<'a> {
    /// `base` is the absolute byte offset of `bytes[0]`, used in errors.
    pub fn new(bytes: &'a [u8], base: usize) -> Self {
        Self { bytes, pos: 0, base }
    }

    pub fn byte_offset(&self) -> usize {
        self.base + self.pos / 8
    }

    pub fn bit(&mut self) -> Result<u8, CodecError> {
        let byte = self
            .bytes
            .get(self.pos / 8)
            .ok_or(CodecError::Truncated { offset: self.byte_offset() })?;
        let b = (byte >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Ok(b)
    }

    pub fn bits(&mut self, len: u8) -> Result<u32, CodecError> {
        let mut v = 0;
        for _ in 0..len {
            v = (v << 1) | self.bit()? as u32;
        }
        Ok(v)
    }
}

/// Magnitude category: number of bits needed for `|v|`.
pub fn category(v: i32) -> u8 {
    (32 - v.unsigned_abs().leading_zeros()) as u8
}

/// Amplitude bits: `v` itself when positive, `v - 1` in `size` bits otherwise.
pub fn amplitude_bits(v: i32, size: u8) -> u32 {
    if v >= 0 {
        v as u32
    } else {
        ((v - 1) as u32) & ((1u32 << size) - 1)
    }
}

pub fn decode_amplitude(bits: u32, size: u8) -> i32 {
    if size == 0 {
        0
    } else if bits >> (size - 1) == 1 {
        bits as i32
    } else {
        bits as i32 - (1 << size) + 1
    }
}

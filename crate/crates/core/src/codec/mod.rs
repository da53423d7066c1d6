//! Block-DCT lossy image codec with a quality knob.
//!
//! Each channel is coded independently as a grayscale plane: level shift,
//! 8x8 orthonormal DCT, quantization by a quality-scaled table, zigzag scan,
//! DC differential coding and run-length coding of the AC coefficients with
//! fixed canonical prefix codes. The container layout is documented in
//! `docs/codec_bitstream.md`.

pub mod dct;
pub mod huffman;

use thiserror::Error;

use crate::image::Image;
use huffman::{amplitude_bits, category, decode_amplitude, BitReader, BitWriter, HuffmanTable, EOB, ZRL};

pub const MAGIC: [u8; 4] = *b"SLDC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 15;
const MIN_BITS_PER_BLOCK: usize = 6;
const MAX_AC: i32 = 1023;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("quality factor {0} outside 1..=100")]
    Quality(u32),
    #[error("invalid image dimensions: {0}")]
    Dims(String),
    #[error("bad magic at byte 0")]
    Magic,
    #[error("unsupported version {version} at byte 4")]
    Version { version: u8 },
    #[error("invalid header field {field} at byte {offset}")]
    Header { field: &'static str, offset: usize },
    #[error("stream truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("invalid prefix code at byte {offset}")]
    InvalidCode { offset: usize },
    #[error("coefficient run past end of block at byte {offset}")]
    Overflow { offset: usize },
}

/// Quality factor `q` in `1..=100`; larger is higher fidelity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quality(u8);

impl Quality {
    pub fn new(q: u32) -> Result<Self, CodecError> {
        if (1..=100).contains(&q) {
            Ok(Self(q as u8))
        } else {
            Err(CodecError::Quality(q))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

#[rustfmt::skip]
pub const BASE_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Zigzag scan order: `ZIGZAG[k]` is the row-major position of the k-th coefficient.
#[rustfmt::skip]
pub const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5,
    12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

/// Quantization table: `scale = 5000/q` below 50, `200 - 2q` otherwise,
/// entries `clamp(round(base * scale / 100), 1, 255)`.
pub fn quant_table(q: Quality) -> [u16; 64] {
    let q = q.0 as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    BASE_TABLE.map(|b| (b as f64 * scale / 100.0).round().clamp(1.0, 255.0) as u16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub quality: Quality,
    pub payload_len: u32,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5..7].copy_from_slice(&self.height.to_be_bytes());
        b[7..9].copy_from_slice(&self.width.to_be_bytes());
        b[9] = self.channels;
        b[10] = self.quality.0;
        b[11..15].copy_from_slice(&self.payload_len.to_be_bytes());
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, CodecError> {
        if b.len() < HEADER_LEN {
            return Err(CodecError::Truncated { offset: b.len() });
        }
        if b[0..4] != MAGIC {
            return Err(CodecError::Magic);
        }
        if b[4] != VERSION {
            return Err(CodecError::Version { version: b[4] });
        }
        let height = u16::from_be_bytes([b[5], b[6]]);
        let width = u16::from_be_bytes([b[7], b[8]]);
        if height == 0 {
            return Err(CodecError::Header { field: "height", offset: 5 });
        }
        if width == 0 {
            return Err(CodecError::Header { field: "width", offset: 7 });
        }
        if !(1..=4).contains(&b[9]) {
            return Err(CodecError::Header { field: "channels", offset: 9 });
        }
        let quality = Quality::new(b[10] as u32).map_err(|_| CodecError::Header { field: "quality", offset: 10 })?;
        Ok(Self {
            height,
            width,
            channels: b[9],
            quality,
            payload_len: u32::from_be_bytes([b[11], b[12], b[13], b[14]]),
        })
    }

    fn blocks_per_channel(&self) -> (usize, usize) {
        ((self.height as usize).div_ceil(8), (self.width as usize).div_ceil(8))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn len_bytes(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

/// Quantized coefficients of one channel, one row-major block per entry.
fn channel_blocks(img: &Image, ch: usize, table: &[u16; 64]) -> Vec<[i32; 64]> {
    let (w, h) = (img.width(), img.height());
    let (by, bx) = (h.div_ceil(8), w.div_ceil(8));
    let mut out = Vec::with_capacity(by * bx);
    for j in 0..by {
        for i in 0..bx {
            let mut block = [0.0; 64];
            for (p, v) in block.iter_mut().enumerate() {
                let y = (j * 8 + p / 8).min(h - 1);
                let x = (i * 8 + p % 8).min(w - 1);
                *v = img.get(x, y, ch) as f64 - 128.0;
            }
            let f = dct::forward(&block);
            let mut q = [0i32; 64];
            for p in 0..64 {
                q[p] = (f[p] / table[p] as f64).round() as i32;
            }
            for v in &mut q[1..] {
                *v = (*v).clamp(-MAX_AC, MAX_AC);
            }
            out.push(q);
        }
    }
    out
}

/// Entropy-codes the blocks of one channel, DC predicted from the previous block.
fn encode_channel(w: &mut BitWriter, blocks: &[[i32; 64]], dc: &HuffmanTable, ac: &HuffmanTable) {
    let mut pred = 0;
    for block in blocks {
        let diff = block[0] - pred;
        pred = block[0];
        let s = category(diff);
        dc.write(w, s);
        w.put(amplitude_bits(diff, s), s);
        let mut run = 0;
        for k in 1..64 {
            let v = block[ZIGZAG[k]];
            if v == 0 {
                run += 1;
                continue;
            }
            while run >= 16 {
                ac.write(w, ZRL);
                run -= 16;
            }
            let s = category(v);
            ac.write(w, (run << 4) as u8 | s);
            w.put(amplitude_bits(v, s), s);
            run = 0;
        }
        if run > 0 {
            ac.write(w, EOB);
        }
    }
}

pub fn compress(img: &Image, q: Quality) -> Result<Bitstream, CodecError> {
    let (h, w) = (img.height(), img.width());
    if h > u16::MAX as usize || w > u16::MAX as usize || img.channels() > 4 {
        return Err(CodecError::Dims(format!("{w}x{h}x{} exceeds the container limits", img.channels())));
    }
    let table = quant_table(q);
    let (dc, ac) = (HuffmanTable::dc(), HuffmanTable::ac());
    let mut bw = BitWriter::new();
    for ch in 0..img.channels() {
        encode_channel(&mut bw, &channel_blocks(img, ch, &table), &dc, &ac);
    }
    let payload = bw.finish();
    Ok(Bitstream {
        header: Header {
            height: h as u16,
            width: w as u16,
            channels: img.channels() as u8,
            quality: q,
            payload_len: payload.len() as u32,
        },
        payload,
    })
}

fn decode_block(r: &mut BitReader, pred: &mut i32, dc: &HuffmanTable, ac: &HuffmanTable) -> Result<[i32; 64], CodecError> {
    let mut zz = [0i32; 64];
    let s = dc.read(r)?;
    *pred += decode_amplitude(r.bits(s)?, s);
    zz[0] = *pred;
    let mut k = 1;
    while k < 64 {
        let offset = r.byte_offset();
        let sym = ac.read(r)?;
        if sym == EOB {
            break;
        }
        let run = (sym >> 4) as usize;
        let size = sym & 0x0f;
        if k + run >= 64 {
            return Err(CodecError::Overflow { offset });
        }
        k += run;
        if size > 0 {
            zz[k] = decode_amplitude(r.bits(size)?, size);
        }
        k += 1;
    }
    let mut block = [0i32; 64];
    for (i, v) in zz.iter().enumerate() {
        block[ZIGZAG[i]] = *v;
    }
    Ok(block)
}

fn reconstruct(block: &[i32; 64], table: &[u16; 64]) -> [u8; 64] {
    let mut coeffs = [0.0; 64];
    for p in 0..64 {
        coeffs[p] = block[p] as f64 * table[p] as f64;
    }
    dct::inverse(&coeffs).map(|v| (v + 128.0).round().clamp(0.0, 255.0) as u8)
}

pub fn decompress(bytes: &[u8]) -> Result<Image, CodecError> {
    let header = Header::parse(bytes)?;
    let end = HEADER_LEN + header.payload_len as usize;
    if bytes.len() < end {
        return Err(CodecError::Truncated { offset: bytes.len() });
    }
    let (by, bx) = header.blocks_per_channel();
    let channels = header.channels as usize;
    if by * bx * channels * MIN_BITS_PER_BLOCK > header.payload_len as usize * 8 {
        return Err(CodecError::Truncated { offset: end });
    }
    let table = quant_table(header.quality);
    let (dc, ac) = (HuffmanTable::dc(), HuffmanTable::ac());
    let mut r = BitReader::new(&bytes[HEADER_LEN..end], HEADER_LEN);
    let (h, w) = (header.height as usize, header.width as usize);
    let mut data = vec![0u8; h * w * channels];
    for ch in 0..channels {
        let mut pred = 0;
        for j in 0..by {
            for i in 0..bx {
                let block = decode_block(&mut r, &mut pred, &dc, &ac)?;
                let px = reconstruct(&block, &table);
                for (p, v) in px.iter().enumerate() {
                    let (y, x) = (j * 8 + p / 8, i * 8 + p % 8);
                    if y < h && x < w {
                        data[(y * w + x) * channels + ch] = *v;
                    }
                }
            }
        }
    }
    Image::new(w, h, channels, data).map_err(|e| CodecError::Dims(e.to_string()))
}

/// Compresses and immediately decodes, as the transmitter does to obtain
/// the reference reconstruction for the residual.
pub fn round_trip(img: &Image, q: Quality) -> Result<(Bitstream, Image), CodecError> {
    let bs = compress(img, q)?;
    let rec = decompress(&bs.to_bytes())?;
    Ok((bs, rec))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn q(v: u32) -> Quality {
        Quality::new(v).unwrap()
    }

    fn psnr(a: &Image, b: &Image) -> f64 {
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / a.dims() as f64;
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }

    #[test]
    fn quant_table_examples() {
        assert_eq!(quant_table(q(50)), BASE_TABLE);
        let t100 = quant_table(q(100));
        assert!(t100.iter().all(|&v| v == 1));
        let t25 = quant_table(q(25));
        assert_eq!(t25[0], 32);
        assert!(quant_table(q(1)).iter().all(|&v| v <= 255));
    }

    #[test]
    fn zigzag_matches_diagonal_walk() {
        let mut order: Vec<usize> = Vec::new();
        for d in 0..15usize {
            let cells: Vec<usize> = (0..8)
                .filter_map(|r| (d >= r && d - r < 8).then(|| r * 8 + (d - r)))
                .collect();
            // even diagonals run bottom-left to top-right
            if d % 2 == 0 {
                order.extend(cells.iter().rev());
            } else {
                order.extend(cells.iter());
            }
        }
        assert_eq!(order, ZIGZAG.to_vec());
    }

    #[test]
    fn quality_bounds() {
        assert!(Quality::new(0).is_err());
        assert!(Quality::new(101).is_err());
        assert!(Quality::new(1).is_ok() && Quality::new(100).is_ok());
    }

    #[test]
    fn mid_gray_is_dc_only() {
        let img = Image::filled(16, 16, 1, 128);
        let bs = compress(&img, q(50)).unwrap();
        // four blocks, each DC category 0 (2 bits) + EOB (4 bits) = 24 bits
        assert_eq!(bs.payload.len(), 3);
        assert_eq!(decompress(&bs.to_bytes()).unwrap(), img);
    }

    #[test]
    fn zero_coefficients_decode_to_gray() {
        let mut w = BitWriter::new();
        let blocks = vec![[0i32; 64]; 6];
        encode_channel(&mut w, &blocks, &HuffmanTable::dc(), &HuffmanTable::ac());
        let payload = w.finish();
        let header = Header {
            height: 16,
            width: 24,
            channels: 1,
            quality: q(10),
            payload_len: payload.len() as u32,
        };
        let mut bytes = header.to_bytes().to_vec();
        bytes.extend_from_slice(&payload);
        let img = decompress(&bytes).unwrap();
        assert!(img.data().iter().all(|&v| v == 128));
    }

    #[test]
    fn header_round_trips() {
        let h = Header {
            height: 300,
            width: 17,
            channels: 3,
            quality: q(77),
            payload_len: 0x01020304,
        };
        assert_eq!(Header::parse(&h.to_bytes()).unwrap(), h);
        let b = h.to_bytes();
        assert_eq!(&b[11..15], &[1, 2, 3, 4]);
    }

    #[test]
    fn handles_non_multiple_of_eight_dims() {
        let img = Image::from_fn(13, 10, 3, |x, y, c| (x * 17 + y * 9 + c * 40) as u8);
        let (_, rec) = round_trip(&img, q(90)).unwrap();
        assert!(rec.same_dims(&img));
        assert!(psnr(&img, &rec) > 30.0);
    }

    #[test]
    fn smooth_gradient_at_high_quality() {
        let img = Image::from_fn(32, 32, 3, |x, y, c| ((x * 4 + y * 2 + c * 20) % 256) as u8);
        let (_, rec) = round_trip(&img, q(95)).unwrap();
        assert!(psnr(&img, &rec) >= 40.0);
    }

    #[test]
    fn decode_errors_carry_offsets() {
        let img = Image::from_fn(16, 16, 1, |x, y, _| (x * 16 + y) as u8);
        let bytes = compress(&img, q(50)).unwrap().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        match decompress(cut) {
            Err(CodecError::Truncated { offset }) => assert_eq!(offset, cut.len()),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decompress(&bad), Err(CodecError::Magic));
    }

    #[test]
    fn corrupted_byte_errors_or_changes_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image::from_fn(24, 24, 3, |_, _, _| rng.random());
        let bytes = compress(&img, q(50)).unwrap().to_bytes();
        let clean = decompress(&bytes).unwrap();
        for pos in HEADER_LEN..bytes.len() - 1 {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x5a;
            if let Ok(img) = decompress(&bad) {
                assert_ne!(img, clean, "flip at {pos} went unnoticed");
            }
        }
    }
}

//! 8-bit images and binary PPM (P6) I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions {width}x{height}x{channels} do not match {len} samples")]
    Dims {
        width: usize,
        height: usize,
        channels: usize,
        len: usize,
    },
    #[error("PPM parse error: {0}")]
    Ppm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major image with interleaved channels, one byte per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(ImageError::Dims {
                width,
                height,
                channels,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of source dimensions `H * W * C`.
    pub fn dims(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// `[1, C, H, W]` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        self.planar_tensor(|v| v as f64 / 255.0)
    }

    /// `[1, C, H, W]` tensor of `(self - other) / 255`, exact on the integer levels.
    pub fn residual_tensor(&self, other: &Image) -> Tensor {
        assert!(self.same_dims(other), "residual of mismatched images");
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            let idx = p * c + ch;
            (self.data[idx] as i16 - other.data[idx] as i16) as f64 / 255.0
        })
    }

    fn planar_tensor(&self, f: impl Fn(u8) -> f64) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            f(self.data[p * c + ch])
        })
    }

    /// Inverse of [`Image::to_tensor`] for one batch entry; values are
    /// clamped to `[0, 1]` and rounded to the nearest level.
    pub fn from_tensor(t: &Tensor, batch: usize) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 4, "expected [B, C, H, W]");
        let (c, h, w) = (s[1], s[2], s[3]);
        let plane = &t.data()[batch * c * h * w..(batch + 1) * c * h * w];
        Self::from_fn(w, h, c, |x, y, ch| (plane[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8)
    }

    pub fn read_ppm(reader: impl Read) -> Result<Self, ImageError> {
        let mut r = BufReader::new(reader);
        let magic = next_token(&mut r)?;
        if magic != "P6" {
            return Err(ImageError::Ppm(format!("unsupported magic {magic:?}, expected P6")));
        }
        let width = parse_dim(&next_token(&mut r)?, "width")?;
        let height = parse_dim(&next_token(&mut r)?, "height")?;
        let maxval = parse_dim(&next_token(&mut r)?, "maxval")?;
        if maxval != 255 {
            return Err(ImageError::Ppm(format!("maxval {maxval} unsupported, expected 255")));
        }
        let mut data = vec![0u8; width * height * 3];
        r.read_exact(&mut data)
            .map_err(|e| ImageError::Ppm(format!("pixel data truncated: {e}")))?;
        Image::new(width, height, 3, data)
    }

    /// Writes a P6 file; single-channel images are replicated to RGB.
    pub fn write_ppm(&self, mut w: impl Write) -> Result<(), ImageError> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        match self.channels {
            3 => w.write_all(&self.data)?,
            1 => {
                let rgb: Vec<u8> = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                w.write_all(&rgb)?;
            }
            c => return Err(ImageError::Ppm(format!("cannot write {c}-channel image as PPM"))),
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::read_ppm(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn parse_dim(tok: &str, what: &str) -> Result<usize, ImageError> {
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| ImageError::Ppm(format!("invalid {what} {tok:?}")))
}

/// Reads one whitespace-delimited header token, skipping `#` comments, and
/// consumes exactly one trailing whitespace byte.
fn next_token(r: &mut impl BufRead) -> Result<String, ImageError> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return if tok.is_empty() {
                Err(ImageError::Ppm("unexpected end of header".into()))
            } else {
                Ok(tok)
            };
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(b as char);
        }
    }
}

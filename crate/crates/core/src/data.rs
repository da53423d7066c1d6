//! Training and evaluation images.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Image, ImageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    Blobs,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Gradient, Pattern::Checkerboard, Pattern::Blobs];
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// One random RGB image of the given pattern.
pub fn procedural_image(pattern: Pattern, size: usize, rng: &mut impl Rng) -> Image {
    let s = size as f64;
    match pattern {
        Pattern::Gradient => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
            let hi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
            Image::from_fn(size, size, 3, |x, y, c| {
                let t = ((x as f64 - s / 2.0) * dx + (y as f64 - s / 2.0) * dy) / s + 0.5;
                to_u8(lo[c] + (hi[c] - lo[c]) * t.clamp(0.0, 1.0))
            })
        }
        Pattern::Checkerboard => {
            let cell = rng.random_range(2..=(size / 2).max(2));
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            let a: [u8; 3] = std::array::from_fn(|_| rng.random());
            let b: [u8; 3] = std::array::from_fn(|_| rng.random());
            Image::from_fn(size, size, 3, |x, y, c| {
                if ((x + ox) / cell + (y + oy) / cell) % 2 == 0 {
                    a[c]
                } else {
                    b[c]
                }
            })
        }
        Pattern::Blobs => {
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..=4))
                .map(|_| {
                    let col = std::array::from_fn(|_| rng.random_range(-200.0..200.0));
                    (
                        rng.random_range(0.0..s),
                        rng.random_range(0.0..s),
                        rng.random_range(s / 10.0..s / 3.0),
                        col,
                    )
                })
                .collect();
            Image::from_fn(size, size, 3, |x, y, c| {
                let v = blobs.iter().fold(bg[c], |acc, &(cx, cy, r, col)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    acc + col[c] * (-d2 / (2.0 * r * r)).exp()
                });
                to_u8(v)
            })
        }
    }
}

/// `count` images cycling through the patterns, reproducible from `seed`.
pub fn procedural_corpus(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| procedural_image(Pattern::ALL[i % Pattern::ALL.len()], size, &mut rng))
        .collect()
}

/// Every `.ppm` file of a directory, in file-name order.
pub fn load_ppm_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>, ImageError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    paths.iter().map(Image::load).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    /// Square random crop side; `None` keeps the full image.
    pub crop: Option<usize>,
}

/// Random flips (each with probability 1/2) and a random crop.
pub fn augment(img: &Image, aug: &Augment, rng: &mut impl Rng) -> Image {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let fx = aug.hflip && rng.random_bool(0.5);
    let fy = aug.vflip && rng.random_bool(0.5);
    let side_w = aug.crop.map_or(w, |s| s.min(w));
    let side_h = aug.crop.map_or(h, |s| s.min(h));
    let ox = rng.random_range(0..=w - side_w);
    let oy = rng.random_range(0..=h - side_h);
    Image::from_fn(side_w, side_h, c, |x, y, ch| {
        let sx = if fx { side_w - 1 - x } else { x } + ox;
        let sy = if fy { side_h - 1 - y } else { y } + oy;
        img.get(sx, sy, ch)
    })
}

//! Image quality metrics on 8-bit images.

use thiserror::Error;

use crate::image::Image;

pub const PEAK: f64 = 255.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("image dimensions differ: {a:?} vs {b:?}")]
    Dims { a: (usize, usize, usize), b: (usize, usize, usize) },
}

fn check(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(MetricsError::Dims {
            a: (a.width(), a.height(), a.channels()),
            b: (b.width(), b.height(), b.channels()),
        })
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// `10 log10(255^2 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / m).log10())
}

#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.v[2 * y * self.w + 2 * x]
                    + self.v[2 * y * self.w + 2 * x + 1]
                    + self.v[(2 * y + 1) * self.w + 2 * x]
                    + self.v[(2 * y + 1) * self.w + 2 * x + 1];
                v.push(s / 4.0);
            }
        }
        Plane { w, h, v }
    }
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering.
fn filter(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (ow, oh) = (p.w + 1 - n, p.h + 1 - n);
    let mut tmp = vec![0.0; ow * p.h];
    for y in 0..p.h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * p.v[y * p.w + x + i]).sum();
        }
    }
    let mut v = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            v[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, v }
}

/// Mean luminance and contrast-structure terms.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64]) -> (f64, f64) {
    let c1 = (K1 * PEAK).powi(2);
    let c2 = (K2 * PEAK).powi(2);
    let prod = |f: fn(f64, f64) -> f64| Plane {
        w: a.w,
        h: a.h,
        v: a.v.iter().zip(&b.v).map(|(&x, &y)| f(x, y)).collect(),
    };
    let mu_a = filter(a, k);
    let mu_b = filter(b, k);
    let aa = filter(&prod(|x, _| x * x), k);
    let bb = filter(&prod(|_, y| y * y), k);
    let ab = filter(&prod(|x, y| x * y), k);
    let n = mu_a.v.len() as f64;
    let (mut l, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        l += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    (l / n, cs / n)
}

/// Largest scale count `n <= 5` with smaller side `> 10 * 2^(n-1)`, at least one.
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let side = width.min(height);
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|&n| side > (WINDOW - 1) << (n - 1))
        .unwrap_or(1)
}

fn window_for(side: usize) -> usize {
    if side >= WINDOW {
        WINDOW
    } else {
        (side - (1 - side % 2)).max(1)
    }
}

/// Multi-scale SSIM averaged over channels, in `[0, 1]`.
///
/// Images with a side below 161 use fewer scales with the leading weights
/// renormalized to sum to one. A scale whose side is below 11 shrinks the
/// window to the largest odd size that fits. Negative contrast-structure
/// terms are clamped to zero.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check(a, b)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let scales = ms_ssim_scales(w, h);
    let weights: Vec<f64> = {
        let lead = &MS_SSIM_WEIGHTS[..scales];
        let s: f64 = lead.iter().sum();
        lead.iter().map(|v| v / s).collect()
    };
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |img: &Image| Plane {
            w,
            h,
            v: (0..w * h).map(|p| img.get(p % w, p / w, ch) as f64).collect(),
        };
        let (mut pa, mut pb) = (plane(a), plane(b));
        let mut value = 1.0;
        for (j, &wt) in weights.iter().enumerate() {
            let kernel = gaussian_window(window_for(pa.w.min(pa.h)));
            let (l, cs) = ssim_terms(&pa, &pb, &kernel);
            value *= cs.max(0.0).powf(wt);
            if j + 1 == scales {
                value *= l.max(0.0).powf(wt);
            } else {
                pa = pa.downsample();
                pb = pb.downsample();
            }
        }
        total += value;
    }
    Ok((total / c as f64).clamp(0.0, 1.0))
}

//! Naive reference implementations used as independent oracles.
#![allow(dead_code)]

use celdecomp::compositor::RasterImage;
use rand::Rng;

pub fn random_image<R: Rng>(rng: &mut R, h: usize, w: usize, opaque: bool) -> RasterImage {
    RasterImage::from_fn(h, w, |_, _| {
        let a = if opaque { 1.0 } else { rng.random() };
        [rng.random(), rng.random(), rng.random(), a]
    })
}

/// White-flattened RGB at `(y, x)`, straight from the pixel definition.
fn rgb(img: &RasterImage, y: usize, x: usize) -> [f64; 3] {
    let p = img.pixel(y, x);
    let a = p[3] as f64;
    [0, 1, 2].map(|c| p[c] as f64 * a + 1.0 * (1.0 - a))
}

pub fn psnr_oracle(a: &RasterImage, b: &RasterImage) -> f64 {
    let (h, w) = a.dims();
    let mut se = 0.0;
    let mut count = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (p, q) = (rgb(a, y, x), rgb(b, y, x));
            for c in 0..3 {
                se += (p[c] - q[c]) * (p[c] - q[c]);
                count += 1.0;
            }
        }
    }
    let mse = se / count;
    if mse == 0.0 {
        99.0
    } else {
        (-10.0 * mse.log10()).min(99.0)
    }
}

fn gray(img: &RasterImage, y: usize, x: usize) -> f64 {
    let p = rgb(img, y, x);
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Two-pass per-window statistics, 8x8 windows, stride 1.
pub fn ssim_oracle(a: &RasterImage, b: &RasterImage) -> f64 {
    let (h, w) = a.dims();
    let k = 8;
    let c1 = (0.01f64 * 1.0).powi(2);
    let c2 = (0.03f64 * 1.0).powi(2);
    let mut acc = 0.0;
    let mut windows = 0.0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    xs.push(gray(a, y, x));
                    ys.push(gray(b, y, x));
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let cov = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
            acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1.0;
        }
    }
    acc / windows
}

/// Per-window least squares by direct residual evaluation.
pub fn lmse_oracle(a: &RasterImage, b: &RasterImage) -> f64 {
    let (h, w) = a.dims();
    let starts = |len: usize| -> Vec<(usize, usize)> {
        if len <= 20 {
            vec![(0, len)]
        } else {
            let mut v = Vec::new();
            let mut s = 0;
            while s + 20 <= len {
                v.push((s, 20));
                s += 10;
            }
            v
        }
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for (y0, hh) in starts(h) {
        for (x0, ww) in starts(w) {
            let mut pa = Vec::new();
            let mut pb = Vec::new();
            for y in y0..y0 + hh {
                for x in x0..x0 + ww {
                    pa.extend(rgb(a, y, x));
                    pb.extend(rgb(b, y, x));
                }
            }
            let dot: f64 = pa.iter().zip(&pb).map(|(p, q)| p * q).sum();
            let nb: f64 = pb.iter().map(|q| q * q).sum();
            let alpha = if nb > 0.0 { dot / nb } else { 0.0 };
            num += pa.iter().zip(&pb).map(|(p, q)| (p - alpha * q).powi(2)).sum::<f64>();
            den += pa.iter().map(|p| p * p).sum::<f64>();
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn l1_oracle(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - t[i]).abs();
    }
    s / p.len() as f64
}

pub fn mse_oracle(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - t[i]) * (p[i] - t[i]);
    }
    s / p.len() as f64
}

pub fn sparse_oracle(h: &[f64], s: &[f64]) -> f64 {
    let mut a = 0.0;
    for v in h {
        a += v.abs();
    }
    let mut b = 0.0;
    for v in s {
        b += v.abs();
    }
    a / h.len() as f64 + b / s.len() as f64
}

pub fn comp_oracle(p: &[Vec<f64>; 4], t: &[Vec<f64>; 4]) -> f64 {
    let n = p[0].len();
    let mut s = 0.0;
    for i in 0..n {
        let sp = p[0][i] + p[1][i] + p[2][i] + p[3][i];
        let st = t[0][i] + t[1][i] + t[2][i] + t[3][i];
        s += (sp - st) * (sp - st);
    }
    s / n as f64
}

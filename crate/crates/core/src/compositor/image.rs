use crate::error::{Error, Result};

/// `height x width` RGBA image, straight alpha, channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width * 4 {
            return Err(Error::shape(format!(
                "{height}x{width} RGBA needs {} values, got {}",
                height * width * 4,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("channel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn transparent(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 4],
        }
    }

    pub fn filled(height: usize, width: usize, px: [f32; 4]) -> Result<Self> {
        Self::new(height, width, px.repeat(height * width))
    }

    /// Builds an image from a per-pixel function; values are clamped.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 4]) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut pixels = Vec::with_capacity(height * width * 4);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(y, x).map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 4] {
        let i = (y * self.width + x) * 4;
        [
            self.pixels[i],
            self.pixels[i + 1],
            self.pixels[i + 2],
            self.pixels[i + 3],
        ]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, px: [f32; 4]) {
        let i = (y * self.width + x) * 4;
        for (c, v) in px.into_iter().enumerate() {
            self.pixels[i + c] = v.clamp(0.0, 1.0);
        }
    }

    pub fn alpha(&self, y: usize, x: usize) -> f32 {
        self.pixels[(y * self.width + x) * 4 + 3]
    }

    /// Rounds every channel to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|v| (v * 255.0).round() / 255.0)
                .collect(),
        }
    }

    pub fn to_rgba8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgba8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Largest absolute per-channel difference.
    pub fn max_abs_diff(&self, other: &RasterImage) -> f32 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Fraction of pixels with nonzero alpha.
    pub fn coverage(&self) -> f32 {
        let n = self.pixels.chunks_exact(4).filter(|p| p[3] > 0.0).count();
        n as f32 / (self.height * self.width) as f32
    }

    /// Replaces the alpha channel; RGB is kept.
    pub fn with_alpha(&self, alpha: impl Fn(usize, usize) -> f32) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixels[(y * self.width + x) * 4 + 3] = alpha(y, x).clamp(0.0, 1.0);
            }
        }
        out
    }

    /// RGB composited over an opaque white background, row-major `[r, g, b]`.
    pub fn flatten_over_white(&self) -> Vec<[f64; 3]> {
        self.pixels
            .chunks_exact(4)
            .map(|p| {
                let a = p[3] as f64;
                [0, 1, 2].map(|c| a * p[c] as f64 + (1.0 - a))
            })
            .collect()
    }
}

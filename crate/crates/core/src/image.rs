//! Planar RGB images with values nominally in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Channel-major: `data[c * h * w + y * w + x]`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "image buffer of {} values does not match 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// Bilinear sample; points outside the image read as zero.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |xi: i64, yi: i64| -> f32 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.get(c, yi as usize, xi as usize)
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn crop(&self, x0: usize, y0: usize, side: usize) -> Result<Self> {
        if x0 + side > self.width || y0 + side > self.height {
            return Err(Error::Geometry(format!(
                "crop {side}x{side} at ({x0},{y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Self::new(side, side);
        for c in 0..3 {
            for y in 0..side {
                let src = self.idx(c, y0 + y, x0);
                let dst = out.idx(c, y, 0);
                out.data[dst..dst + side].copy_from_slice(&self.data[src..src + side]);
            }
        }
        Ok(out)
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                let row = out.idx(c, y, 0);
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(w, h);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Blends a heat map over `base`, upsampling `grid` (side×side, row-major) to the image size.
pub fn heat_overlay(base: &Image, grid: &[f64], side: usize) -> Image {
    let max = grid.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let mut out = base.clone();
    for y in 0..base.height {
        for x in 0..base.width {
            let gy = (y * side / base.height).min(side - 1);
            let gx = (x * side / base.width).min(side - 1);
            let t = (grid[gy * side + gx] / max).clamp(0.0, 1.0) as f32;
            let heat = [t.min(0.5) * 2.0, (2.0 * t - 0.5).clamp(0.0, 1.0), 1.0 - t];
            for (c, h) in heat.iter().enumerate() {
                let v = 0.5 * base.get(c, y, x) + 0.5 * h;
                out.set(c, y, x, v);
            }
        }
    }
    out
}

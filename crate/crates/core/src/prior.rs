//! Landmark-derived prior attention maps.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::rules::{RuleSet, SubCenters};

/// Downsampling between the input crop and the stage-3 token grid.
pub const GRID_STRIDE: f64 = 8.0;

const MAGIC: &[u8; 4] = b"AGT1";

/// A normalized prior over a square `side`×`side` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorAttentionMap {
    pub au: u32,
    pub side: usize,
    pub values: Vec<f64>,
}

/// Maps an image coordinate onto the continuous grid, treating pixel and
/// cell centers consistently so that mirroring commutes with the mapping.
pub fn image_to_grid(v: f64) -> f64 {
    (v + 0.5) / GRID_STRIDE - 0.5
}

fn clamp_to_grid(p: [f64; 2], side: usize) -> [f64; 2] {
    let hi = (side - 1) as f64;
    [p[0].clamp(0.0, hi), p[1].clamp(0.0, hi)]
}

/// Unnormalized Gaussian around `center = [x, y]` given in grid coordinates.
pub fn gaussian_prior(center: [f64; 2], delta: f64, side: usize) -> Result<Vec<f64>> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Config(format!("prior standard deviation must be positive, got {delta}")));
    }
    if side == 0 {
        return Err(Error::Config("prior grid side must be positive".into()));
    }
    let denom = 2.0 * delta * delta;
    let mut out = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let dx = col as f64 - center[0];
            let dy = row as f64 - center[1];
            out.push((-(dx * dx + dy * dy) / denom).exp());
        }
    }
    Ok(out)
}

impl PriorAttentionMap {
    /// Elementwise max of two unnormalized maps, divided by its sum.
    pub fn combine_and_normalize(au: u32, side: usize, m1: &[f64], m2: &[f64]) -> Result<Self> {
        if m1.len() != side * side || m2.len() != side * side {
            return Err(Error::Geometry(format!(
                "prior maps of {} and {} cells do not fit a {side}x{side} grid",
                m1.len(),
                m2.len()
            )));
        }
        let mut values: Vec<f64> = m1.iter().zip(m2).map(|(a, b)| a.max(*b)).collect();
        let total: f64 = values.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Numeric(format!("prior for AU{au} has total mass {total}")));
        }
        for v in &mut values {
            *v /= total;
        }
        Ok(Self { au, side, values })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    /// Horizontal flip.
    pub fn mirror(&self) -> Self {
        let s = self.side;
        let mut values = vec![0.0; s * s];
        for row in 0..s {
            for col in 0..s {
                values[row * s + col] = self.values[row * s + (s - 1 - col)];
            }
        }
        Self {
            au: self.au,
            side: s,
            values,
        }
    }

    /// Prior for one pair of sub-centers given in image pixels.
    pub fn from_subcenters(sc: &SubCenters, delta: f64, side: usize) -> Result<Self> {
        let to_grid = |p: [f64; 2]| clamp_to_grid([image_to_grid(p[0]), image_to_grid(p[1])], side);
        let m1 = gaussian_prior(to_grid(sc.left), delta, side)?;
        let m2 = gaussian_prior(to_grid(sc.right), delta, side)?;
        Self::combine_and_normalize(sc.au, side, &m1, &m2)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.side as u32).to_le_bytes())?;
        w.write_all(&self.au.to_le_bytes())?;
        w.write_all(&8u32.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|e| Error::Data(format!("prior grid header: {e}")))?;
        if &header[..4] != MAGIC {
            return Err(Error::Data("not a prior grid file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let (side, au, width) = (word(4) as usize, word(8), word(12));
        if width != 8 {
            return Err(Error::Data(format!("unsupported element width {width}")));
        }
        let mut bytes = vec![0u8; side * side * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Data(format!("prior grid body: {e}")))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { au, side, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Builds one prior per requested AU for a crop of `crop_side` pixels.
pub fn generate_priors(
    rules: &RuleSet,
    landmarks: &LandmarkSet,
    aus: &[u32],
    crop_side: usize,
    delta: f64,
) -> Result<Vec<PriorAttentionMap>> {
    let side = grid_side(crop_side)?;
    rules
        .compute_subcenters(landmarks, aus)?
        .iter()
        .map(|sc| PriorAttentionMap::from_subcenters(sc, delta, side))
        .collect()
}

pub fn grid_side(crop_side: usize) -> Result<usize> {
    if crop_side == 0 || crop_side % 8 != 0 {
        return Err(Error::Config(format!("crop side {crop_side} is not a positive multiple of 8")));
    }
    Ok(crop_side / 8)
}

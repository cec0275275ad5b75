use std::fs;
use std::path::Path;

use super::annotations::{DotAnnotations, RoiMask};
use super::image::Image;
use crate::error::{Error, Result};

const DENSITY_MAGIC: [u8; 4] = *b"GUND";

/// Kernels are cut off beyond this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

/// Single-channel map whose sum is the object count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    /// Kernel width used to generate a ground-truth map; `None` for
    /// predictions.
    sigma: Option<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap {
            height,
            width,
            values: vec![0.0; height * width],
            sigma: None,
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "density map",
                format!("{height}×{width} map with {} values", values.len()),
            ));
        }
        Ok(DensityMap {
            height,
            width,
            values,
            sigma: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `"GUND"`, u32 height, u32 width, then the values row-major as
    /// little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.values.len());
        out.extend_from_slice(&DENSITY_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || bytes[..4] != DENSITY_MAGIC {
            return Err(Error::InvalidArgument("not a density map file".into()));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let width = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() != 8 * height * width {
            return Err(Error::shape(
                "density map file",
                format!("{height}×{width} map with {} payload bytes", body.len()),
            ));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_values(height, width, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Grayscale rendering scaled so the largest value is white; negative
    /// values clip to black.
    pub fn preview(&self) -> Image {
        let peak = self.values.iter().fold(0.0f64, |m, &v| m.max(v));
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        let data = self
            .values
            .iter()
            .map(|&v| (v * scale).clamp(0.0, 1.0) as f32)
            .collect();
        Image::new(1, self.height, self.width, data).expect("map sides are positive")
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        DensityMap { values, ..self.clone() }
    }
}

/// Normalized 1-D Gaussian weights over the pixels within the truncation
/// window that fall inside `[0, len)`; returns `(first pixel, weights)`.
fn axis_kernel(center: f64, sigma: f64, len: usize) -> (usize, Vec<f64>) {
    let reach = TRUNCATION_SIGMAS * sigma;
    let lo = (center - reach).ceil().max(0.0) as usize;
    let hi = ((center + reach).floor() as isize).min(len as isize - 1);
    if (hi as f64) < lo as f64 {
        // window narrower than a pixel: all mass on the nearest one
        return ((center.round() as usize).min(len - 1), vec![1.0]);
    }
    let weights: Vec<f64> = (lo..=hi as usize)
        .map(|p| {
            let d = p as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    (lo, weights.into_iter().map(|w| w / total).collect())
}

/// Places a truncated isotropic Gaussian of unit mass on every in-bounds
/// dot. Each kernel is renormalized after truncation and clipping at the
/// image border, so the map sums to the dot count.
pub fn generate_density_map(ann: &DotAnnotations, shape: (usize, usize), sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    let (height, width) = shape;
    let mut values = vec![0.0; height * width];
    for (x, y) in ann.in_bounds(height, width) {
        let (x0, wx) = axis_kernel(x, sigma, width);
        let (y0, wy) = axis_kernel(y, sigma, height);
        for (dy, &ky) in wy.iter().enumerate() {
            let row = &mut values[(y0 + dy) * width..(y0 + dy + 1) * width];
            for (dx, &kx) in wx.iter().enumerate() {
                row[x0 + dx] += ky * kx;
            }
        }
    }
    Ok(DensityMap {
        height,
        width,
        values,
        sigma: Some(sigma),
    })
}

/// Zeroes everything outside a region of interest.
pub trait ApplyRoi: Sized {
    fn apply_roi(&self, roi: &RoiMask) -> Result<Self>;
}

impl ApplyRoi for DensityMap {
    fn apply_roi(&self, roi: &RoiMask) -> Result<Self> {
        roi.check_dims("apply_roi", self.height, self.width)?;
        let values = self
            .values
            .iter()
            .zip(roi.cells())
            .map(|(&v, &inside)| if inside { v } else { 0.0 })
            .collect();
        Ok(DensityMap { values, ..self.clone() })
    }
}

impl ApplyRoi for Image {
    fn apply_roi(&self, roi: &RoiMask) -> Result<Self> {
        roi.check_dims("apply_roi", self.height(), self.width())?;
        let mut out = self.clone();
        let plane = self.height() * self.width();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if !roi.cells()[i % plane] {
                *v = 0.0;
            }
        }
        Ok(out)
    }
}

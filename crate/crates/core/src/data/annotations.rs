use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{read_png, RawPixels};
use crate::error::{Error, Result};

/// Binary region-of-interest mask, row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    height: usize,
    width: usize,
    inside: Vec<bool>,
}

impl RoiMask {
    pub fn new(height: usize, width: usize, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != height * width {
            return Err(Error::shape(
                "roi",
                format!("{height}×{width} mask with {} cells", inside.len()),
            ));
        }
        Ok(RoiMask { height, width, inside })
    }

    pub fn full(height: usize, width: usize) -> Self {
        RoiMask {
            height,
            width,
            inside: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let inside = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        RoiMask { height, width, inside }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.inside[y * self.width + x]
    }

    pub fn cells(&self) -> &[bool] {
        &self.inside
    }

    pub(crate) fn check_dims(&self, op: &'static str, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::shape(
                op,
                format!("roi is {}×{}, data is {height}×{width}", self.height, self.width),
            ));
        }
        Ok(())
    }

    /// Nearest-neighbour resampling.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        RoiMask::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.contains(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    /// Reads a PNG mask; any nonzero pixel is inside.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = read_png(path)?;
        let RawPixels::U8(px) = raw.pixels else {
            unreachable!("PNG decoding yields 8-bit pixels")
        };
        let plane = raw.height * raw.width;
        let inside = (0..plane)
            .map(|i| (0..raw.channels).any(|c| px[c * plane + i] != 0))
            .collect();
        RoiMask::new(raw.height, raw.width, inside)
    }
}

/// Object centers of one image, `(x, y)` = (column, row).
#[derive(Clone, Debug, PartialEq)]
pub struct DotAnnotations {
    pub image_id: String,
    pub dots: Vec<(f64, f64)>,
    pub roi: Option<RoiMask>,
}

impl DotAnnotations {
    pub fn new(image_id: impl Into<String>, dots: Vec<(f64, f64)>) -> Self {
        DotAnnotations {
            image_id: image_id.into(),
            dots,
            roi: None,
        }
    }

    /// Dots with `0 ≤ x < width` and `0 ≤ y < height`.
    pub fn in_bounds(&self, height: usize, width: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.dots
            .iter()
            .copied()
            .filter(move |&(x, y)| x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64)
    }
}

/// On-disk annotation document. Relative paths resolve against the dataset
/// root (the directory holding the manifest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub image: PathBuf,
    pub dots: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<PathBuf>,
}

impl AnnotationFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn to_annotations(&self, image_id: &str, root: &Path) -> Result<DotAnnotations> {
        let roi = match &self.roi {
            Some(p) => Some(RoiMask::load(&root.join(p))?),
            None => None,
        };
        Ok(DotAnnotations {
            image_id: image_id.to_string(),
            dots: self.dots.iter().map(|&[x, y]| (x, y)).collect(),
            roi,
        })
    }
}

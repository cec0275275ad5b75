use std::path::Path;

use crate::error::{Error, Result};

/// Planar (C×H×W) image with real pixel values, nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawPixels {
    U8(Vec<u8>),
    Real(Vec<f32>),
}

/// Pixels as decoded, before scaling. Planar layout like [`Image`].
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: RawPixels,
}

impl From<Image> for RawImage {
    fn from(img: Image) -> Self {
        RawImage {
            channels: img.channels,
            height: img.height,
            width: img.width,
            pixels: RawPixels::Real(img.data),
        }
    }
}

/// Maps 8-bit pixels to [0, 1] by dividing by 255; real-valued input is
/// passed through unchanged.
pub fn scale_pixels(raw: RawImage) -> Image {
    let data = match raw.pixels {
        RawPixels::U8(px) => px.into_iter().map(|v| f32::from(v) / 255.0).collect(),
        RawPixels::Real(px) => px,
    };
    Image {
        channels: raw.channels,
        height: raw.height,
        width: raw.width,
        data,
    }
}

/// `v ↦ v^gamma` per pixel.
pub fn gamma_transform(image: &Image, gamma: f64) -> Image {
    assert!(gamma > 0.0, "gamma must be positive");
    let g = gamma as f32;
    image.map(|v| v.max(0.0).powf(g))
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{channels}×{height}×{width} image with {} values", data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.at(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        };
        let mut out = Image::filled(self.channels, height, width, 0.0);
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = taps(x, sx, self.width);
                for c in 0..self.channels {
                    let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
                    let bottom = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
                    out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        out
    }

    /// Pixels quantized to 8 bits, interleaved (HWC).
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.push((self.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }
}

/// Decodes a PNG to planar 8-bit pixels. Alpha channels are dropped.
pub fn read_png(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (channels, buf, width, height) = if img.color().has_color() {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        (3, rgb.into_raw(), w as usize, h as usize)
    } else {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        (1, gray.into_raw(), w as usize, h as usize)
    };
    let mut planar = vec![0u8; buf.len()];
    for (i, &v) in buf.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        planar[c * width * height + pix] = v;
    }
    Ok(RawImage {
        channels,
        height,
        width,
        pixels: RawPixels::U8(planar),
    })
}

pub fn load_image(path: &Path) -> Result<Image> {
    read_png(path).map(scale_pixels)
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let color = match image.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::InvalidArgument(format!(
                "cannot encode a {c}-channel image as PNG"
            )))
        }
    };
    image::save_buffer(
        path,
        &image.to_u8_interleaved(),
        image.width as u32,
        image.height as u32,
        color,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(px: Vec<u8>) -> RawImage {
        RawImage {
            channels: 1,
            height: 1,
            width: px.len(),
            pixels: RawPixels::U8(px),
        }
    }

    #[test]
    fn scaling_endpoints_and_idempotence() {
        let once = scale_pixels(raw(vec![0, 128, 255]));
        assert_eq!(once.data(), &[0.0, 128.0 / 255.0, 1.0]);
        let twice = scale_pixels(once.clone().into());
        assert_eq!(twice, once);
    }

    #[test]
    fn gamma_cases() {
        let img = Image::new(1, 1, 4, vec![0.0, 0.25, 0.6, 1.0]).unwrap();
        assert_eq!(gamma_transform(&img, 1.0), img);
        let g = gamma_transform(&img, 0.5);
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[3], 1.0);
        assert!((g.data()[1] - 0.5).abs() < 1e-7);
        assert_eq!(gamma_transform(&img, 1.4).data()[3], 1.0);
    }

    #[test]
    fn flip_reverses_rows() {
        let img = Image::new(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(img.flip_horizontal().data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = scale_pixels(RawImage {
            channels: 3,
            height: 2,
            width: 2,
            pixels: RawPixels::U8((0..12).map(|v| v * 20).collect()),
        });
        save_png(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }
}

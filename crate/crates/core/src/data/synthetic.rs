//! Procedural scenes of anti-aliased disks, used as a desk-scale stand-in
//! for annotated counting datasets.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotations::AnnotationFile;
use super::dataset::{Manifest, ManifestEntry, Split, MANIFEST_FILE};
use super::image::{save_png, scale_pixels, Image, RawImage, RawPixels};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Flat,
    Stripes,
    Noise,
}

impl fmt::Display for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Background::Flat => "flat",
            Background::Stripes => "stripes",
            Background::Noise => "noise",
        })
    }
}

impl FromStr for Background {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Background::Flat),
            "stripes" => Ok(Background::Stripes),
            "noise" => Ok(Background::Noise),
            other => Err(Error::InvalidArgument(format!("unknown background `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub count_range: (usize, usize),
    pub radius_range: (f64, f64),
    pub background: Background,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            height: 96,
            width: 96,
            count_range: (3, 8),
            radius_range: (3.0, 6.0),
            background: Background::Noise,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (cmin, cmax) = self.count_range;
        let (rmin, rmax) = self.radius_range;
        if cmin > cmax {
            return Err(Error::InvalidArgument(format!("count range {cmin}..{cmax} is empty")));
        }
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::InvalidArgument(format!(
                "radius range {rmin}..{rmax} is invalid"
            )));
        }
        let needed = 2.0 * rmax + 2.0;
        if (self.height as f64) < needed || (self.width as f64) < needed {
            return Err(Error::InvalidArgument(format!(
                "canvas {}×{} cannot hold a disk of radius {rmax}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Renders scene `index`; returns the 8-bit-quantized image and the disk
/// centers as `(x, y)`.
pub fn render_scene(spec: &SyntheticSceneSpec, index: u64) -> Result<(Image, Vec<(f64, f64)>)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Synthetic, index);
    let (h, w) = (spec.height, spec.width);
    let mut pixels = vec![0.0f32; 3 * h * w];

    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.08..0.35));
    match spec.background {
        Background::Flat => {
            for c in 0..3 {
                pixels[c * h * w..(c + 1) * h * w].fill(base[c]);
            }
        }
        Background::Stripes => {
            let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
            let period: f32 = rng.gen_range(6.0..20.0);
            let (ca, sa) = (angle.cos(), angle.sin());
            for y in 0..h {
                for x in 0..w {
                    let phase = (x as f32 * ca + y as f32 * sa) * std::f32::consts::TAU / period;
                    for c in 0..3 {
                        pixels[(c * h + y) * w + x] = base[c] + 0.08 * phase.sin();
                    }
                }
            }
        }
        Background::Noise => {
            for y in 0..h {
                for x in 0..w {
                    let n: f32 = rng.gen_range(-0.08..0.08);
                    for c in 0..3 {
                        pixels[(c * h + y) * w + x] = base[c] + n;
                    }
                }
            }
        }
    }

    let count = rng.gen_range(spec.count_range.0..=spec.count_range.1);
    let mut disks: Vec<(f64, f64, f64)> = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.gen_range(spec.radius_range.0..=spec.radius_range.1);
        let mut candidate = (0.0, 0.0);
        for _ in 0..200 {
            candidate = (
                rng.gen_range(r + 0.5..=w as f64 - 1.5 - r),
                rng.gen_range(r + 0.5..=h as f64 - 1.5 - r),
            );
            let clear = disks
                .iter()
                .all(|&(x, y, rr)| ((x - candidate.0).powi(2) + (y - candidate.1).powi(2)).sqrt() >= r + rr + 1.0);
            if clear {
                break;
            }
        }
        disks.push((candidate.0, candidate.1, r));
    }

    for &(cx, cy, r) in &disks {
        let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.6..0.95));
        let (y0, y1) = (
            (cy - r - 1.0).floor().max(0.0) as usize,
            ((cy + r + 1.0).ceil() as usize).min(h - 1),
        );
        let (x0, x1) = (
            (cx - r - 1.0).floor().max(0.0) as usize,
            ((cx + r + 1.0).ceil() as usize).min(w - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                if alpha > 0.0 {
                    for c in 0..3 {
                        let p = &mut pixels[(c * h + y) * w + x];
                        *p = *p * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }

    let quantized = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let image = scale_pixels(RawImage {
        channels: 3,
        height: h,
        width: w,
        pixels: RawPixels::U8(quantized),
    });
    Ok((image, disks.into_iter().map(|(x, y, _)| (x, y)).collect()))
}

/// Split sizes for a generated set; the remainder goes to train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub val: usize,
    pub test: usize,
}

/// Writes `images/`, `annotations/` and `manifest.json` under `out`.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSceneSpec,
    n_images: usize,
    splits: SplitCounts,
    out: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    if splits.val + splits.test > n_images {
        return Err(Error::InvalidArgument(format!(
            "{} val + {} test images exceed the {n_images} requested",
            splits.val, splits.test
        )));
    }
    let (img_dir, ann_dir) = (out.join("images"), out.join("annotations"));
    for dir in [&img_dir, &ann_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n_train = n_images - splits.val - splits.test;
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let id = format!("img_{i:04}");
        let (image, dots) = render_scene(spec, i as u64)?;
        let image_rel = PathBuf::from("images").join(format!("{id}.png"));
        let ann_rel = PathBuf::from("annotations").join(format!("{id}.json"));
        save_png(&image, &out.join(&image_rel))?;
        AnnotationFile {
            image: image_rel,
            dots: dots.iter().map(|&(x, y)| [x, y]).collect(),
            roi: None,
        }
        .save(&out.join(&ann_rel))?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + splits.val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            id,
            annotation: ann_rel,
            split,
            count: dots.len(),
        });
    }
    let manifest = Manifest { version: 1, entries };
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

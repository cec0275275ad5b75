//! Training patch sampling: a fixed fraction of patches centered on
//! annotated objects, the rest uniformly placed, with joint horizontal
//! flips of image and target and optional gamma jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

/// Where the patches of one batch come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSource {
    /// All patches from one uniformly chosen image.
    #[default]
    SingleImage,
    /// Every patch picks its own image.
    PerPatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub centered_fraction: f64,
    pub patch_side: usize,
    pub flip_probability: f64,
    /// Uniform gamma range for augmentation; `None` disables it.
    pub gamma_range: Option<(f64, f64)>,
    pub source: BatchSource,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 128,
            centered_fraction: 0.5,
            patch_side: 96,
            flip_probability: 0.5,
            gamma_range: None,
            source: BatchSource::SingleImage,
        }
    }
}

pub const DEFAULT_GAMMA_RANGE: (f64, f64) = (0.5, 1.5);

/// Provenance of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchOrigin {
    pub image: usize,
    pub image_id: String,
    pub top: usize,
    pub left: usize,
    pub centered: bool,
    pub flipped: bool,
    pub gamma: Option<f64>,
}

impl PatchOrigin {
    fn key(&self) -> (usize, usize, usize, bool, Option<u64>) {
        (
            self.image,
            self.top,
            self.left,
            self.flipped,
            self.gamma.map(f64::to_bits),
        )
    }
}

#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    pub images: Tensor4<T>,
    pub targets: Tensor4<T>,
    pub provenance: Vec<PatchOrigin>,
}

fn centered_offset(coord: f64, side: usize, extent: usize) -> usize {
    let max_start = extent.saturating_sub(side) as isize;
    (coord.round() as isize - (side / 2) as isize).clamp(0, max_start) as usize
}

/// Draws the provenance of a batch without touching pixels. Positions come
/// from `rng`; flips and then gammas come from `aug`, so enabling gamma
/// jitter leaves positions and flips unchanged.
pub fn plan_patches<R: Rng, A: Rng>(
    ds: &Dataset,
    cfg: &SamplerConfig,
    rng: &mut R,
    aug: &mut A,
) -> Result<Vec<PatchOrigin>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("cannot sample patches from zero images".into()));
    }
    if cfg.batch_size == 0 || cfg.patch_side == 0 {
        return Err(Error::InvalidArgument("batch size and patch side must be ≥ 1".into()));
    }
    let n = cfg.batch_size;
    let side = cfg.patch_side;
    let dots_of = |i: usize| {
        let s = &ds.samples[i];
        s.annotations
            .in_bounds(s.image.height(), s.image.width())
            .collect::<Vec<_>>()
    };

    let single = match cfg.source {
        BatchSource::SingleImage => Some(rng.gen_range(0..ds.len())),
        BatchSource::PerPatch => None,
    };
    // (image, x, y) for every dot that can anchor a centered patch
    let anchors: Vec<(usize, f64, f64)> = match single {
        Some(i) => dots_of(i).into_iter().map(|(x, y)| (i, x, y)).collect(),
        None => (0..ds.len())
            .flat_map(|i| dots_of(i).into_iter().map(move |(x, y)| (i, x, y)))
            .collect(),
    };
    let n_centered = if anchors.is_empty() {
        0
    } else {
        ((cfg.centered_fraction * n as f64).ceil() as usize).min(n)
    };

    let mut plan = Vec::with_capacity(n);
    for i in 0..n {
        let (image, top, left, centered) = if i < n_centered {
            let (img, x, y) = anchors[rng.gen_range(0..anchors.len())];
            let s = &ds.samples[img].image;
            (
                img,
                centered_offset(y, side, s.height()),
                centered_offset(x, side, s.width()),
                true,
            )
        } else {
            let img = single.unwrap_or_else(|| rng.gen_range(0..ds.len()));
            let s = &ds.samples[img].image;
            let top = rng.gen_range(0..=s.height().saturating_sub(side));
            let left = rng.gen_range(0..=s.width().saturating_sub(side));
            (img, top, left, false)
        };
        plan.push(PatchOrigin {
            image,
            image_id: ds.samples[image].id.clone(),
            top,
            left,
            centered,
            flipped: false,
            gamma: None,
        });
    }
    for p in &mut plan {
        p.flipped = aug.gen_bool(cfg.flip_probability);
    }
    if let Some((lo, hi)) = cfg.gamma_range {
        for p in &mut plan {
            p.gamma = Some(aug.gen_range(lo..=hi));
        }
    }
    Ok(plan)
}

/// Collapses identical patches, keeping first-occurrence order; returns the
/// distinct patches and how often each occurred.
pub fn distinct_patches(plan: &[PatchOrigin]) -> (Vec<PatchOrigin>, Vec<usize>) {
    let mut unique: Vec<PatchOrigin> = Vec::new();
    let mut counts = Vec::new();
    for p in plan {
        match unique.iter().position(|u| u.key() == p.key()) {
            Some(i) => counts[i] += 1,
            None => {
                unique.push(p.clone());
                counts.push(1);
            }
        }
    }
    (unique, counts)
}

#[inline]
fn mirror(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Crops the planned patches (reflecting past image borders) into tensors.
pub fn materialize<T: Element>(ds: &Dataset, plan: &[PatchOrigin], side: usize) -> Result<PatchBatch<T>> {
    if plan.is_empty() {
        return Err(Error::InvalidArgument("empty patch plan".into()));
    }
    let channels = ds.samples[plan[0].image].image.channels();
    let mut images = Tensor4::zeros(Shape4::new(plan.len(), channels, side, side));
    let mut targets = Tensor4::zeros(Shape4::new(plan.len(), 1, side, side));
    for (n, p) in plan.iter().enumerate() {
        let s = &ds.samples[p.image];
        if s.image.channels() != channels {
            return Err(Error::shape(
                "sample_patch_batch",
                format!(
                    "image `{}` has {} channels, batch has {channels}",
                    s.id,
                    s.image.channels()
                ),
            ));
        }
        let (h, w) = (s.image.height(), s.image.width());
        let src_x = |px: usize| mirror(p.left + if p.flipped { side - 1 - px } else { px }, w);
        let gamma = p.gamma.map(|g| g as f32);
        let img = images.sample_mut(n);
        for c in 0..channels {
            for py in 0..side {
                let sy = mirror(p.top + py, h);
                for px in 0..side {
                    let mut v = s.image.at(c, sy, src_x(px));
                    if let Some(g) = gamma {
                        v = v.max(0.0).powf(g);
                    }
                    img[(c * side + py) * side + px] = T::of(f64::from(v));
                }
            }
        }
        let tgt = targets.sample_mut(n);
        for py in 0..side {
            let sy = mirror(p.top + py, h);
            for px in 0..side {
                tgt[py * side + px] = T::of(s.density.at(sy, src_x(px)));
            }
        }
    }
    Ok(PatchBatch {
        images,
        targets,
        provenance: plan.to_vec(),
    })
}

pub fn sample_patch_batch<T: Element, R: Rng, A: Rng>(
    ds: &Dataset,
    cfg: &SamplerConfig,
    rng: &mut R,
    aug: &mut A,
) -> Result<PatchBatch<T>> {
    let plan = plan_patches(ds, cfg, rng, aug)?;
    materialize(ds, &plan, cfg.patch_side)
}

//! Dot annotations, ground-truth density maps, patch sampling and
//! augmentation, and the synthetic scene generator.

mod annotations;
mod dataset;
mod density;
mod image;
mod sampler;
mod synthetic;

pub use annotations::{AnnotationFile, DotAnnotations, RoiMask};
pub use dataset::{Dataset, Manifest, ManifestEntry, Sample, Split, MANIFEST_FILE};
pub use density::{generate_density_map, ApplyRoi, DensityMap, TRUNCATION_SIGMAS};
pub use image::{gamma_transform, load_image, read_png, save_png, scale_pixels, Image, RawImage, RawPixels};
pub use sampler::{
    distinct_patches, materialize, plan_patches, sample_patch_batch, BatchSource, PatchBatch, PatchOrigin,
    SamplerConfig, DEFAULT_GAMMA_RANGE,
};
pub use synthetic::{generate_synthetic_dataset, render_scene, Background, SplitCounts, SyntheticSceneSpec};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

/// Ground-truth kernel widths used for the public benchmarks.
pub fn sigma_preset(name: &str) -> Option<f64> {
    match name {
        "trancos" => Some(10.0),
        "shanghai" => Some(4.0),
        "ucsd" => Some(5.0),
        _ => None,
    }
}

/// Bilinearly shrinks `image` so its longer side is `max_side`, scaling dot
/// coordinates by the same factors. Images already within bounds are
/// returned unchanged. Density maps must be regenerated afterwards.
pub fn resize_with_dots(image: &Image, ann: &DotAnnotations, max_side: usize) -> Result<(Image, DotAnnotations)> {
    if max_side < 32 {
        return Err(Error::InvalidArgument(format!("max side {max_side} must be ≥ 32")));
    }
    let (h, w) = (image.height(), image.width());
    if h.max(w) <= max_side {
        return Ok((image.clone(), ann.clone()));
    }
    let factor = max_side as f64 / h.max(w) as f64;
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    let (fy, fx) = (nh as f64 / h as f64, nw as f64 / w as f64);
    let resized = DotAnnotations {
        image_id: ann.image_id.clone(),
        dots: ann.dots.iter().map(|&(x, y)| (x * fx, y * fy)).collect(),
        roi: ann.roi.as_ref().map(|r| r.resize(nh, nw)),
    };
    Ok((image.resize_bilinear(nh, nw), resized))
}

/// Wraps one image as a `1 × C × H × W` tensor.
pub fn image_tensor<T: Element>(image: &Image) -> Tensor4<T> {
    let shape = Shape4::new(1, image.channels(), image.height(), image.width());
    Tensor4::new(shape, image.data().iter().map(|&v| T::of(f64::from(v))).collect())
        .expect("image buffers are non-empty and sized to their shape")
}

/// Reads channel 0 of batch item `n` as a density map.
pub fn tensor_to_density<T: Element>(t: &Tensor4<T>, n: usize) -> DensityMap {
    let s = t.shape();
    DensityMap::from_values(s.h, s.w, t.plane(n, 0).iter().map(|v| v.f64()).collect())
        .expect("plane length matches its sides")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_halves_dots() {
        let img = Image::filled(3, 380, 760, 0.5);
        let ann = DotAnnotations::new("a", vec![(400.0, 100.0), (10.0, 5.0)]);
        let (out, moved) = resize_with_dots(&img, &ann, 380).unwrap();
        assert_eq!((out.height(), out.width()), (190, 380));
        assert_eq!(moved.dots[0], (200.0, 50.0));
        assert_eq!(moved.dots.len(), ann.dots.len());
    }

    #[test]
    fn resize_noop_when_small() {
        let img = Image::filled(1, 200, 300, 0.1);
        let ann = DotAnnotations::new("b", vec![(1.0, 2.0)]);
        let (out, same) = resize_with_dots(&img, &ann, 380).unwrap();
        assert_eq!(out, img);
        assert_eq!(same, ann);
    }

    #[test]
    fn presets() {
        assert_eq!(sigma_preset("trancos"), Some(10.0));
        assert_eq!(sigma_preset("shanghai"), Some(4.0));
        assert_eq!(sigma_preset("ucsd"), Some(5.0));
        assert_eq!(sigma_preset("mall"), None);
    }
}

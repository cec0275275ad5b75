//! Counting metrics: MAE, root-mean-square error and the grid average mean
//! absolute error GAME(s), plus split-level evaluation and gate reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{image_tensor, tensor_to_density, Dataset, DensityMap, RoiMask, Sample};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Element;

/// How per-region errors of one image are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GameConvention {
    /// Sum over the 4ˢ regions; GAME(0) is the MAE and GAME grows with s.
    #[default]
    Sum,
    /// Sum divided by the number of regions.
    Averaged,
}

/// Sum of `map` over rows `ys` and columns `xs`, skipping pixels outside
/// `roi`. Row-major order, so every caller accumulates identically.
fn region_sum(map: &DensityMap, roi: Option<&RoiMask>, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> f64 {
    let w = map.width();
    let values = map.values();
    let mut total = 0.0;
    for y in ys {
        let row = &values[y * w..(y + 1) * w];
        for x in xs.clone() {
            if roi.is_none_or(|r| r.contains(y, x)) {
                total += row[x];
            }
        }
    }
    total
}

fn check_roi(op: &'static str, map: &DensityMap, roi: Option<&RoiMask>) -> Result<()> {
    match roi {
        Some(r) => r.check_dims(op, map.height(), map.width()),
        None => Ok(()),
    }
}

/// Integrated density, restricted to `roi` when given. No clamping.
pub fn count(map: &DensityMap, roi: Option<&RoiMask>) -> Result<f64> {
    check_roi("count", map, roi)?;
    Ok(region_sum(map, roi, 0..map.height(), 0..map.width()))
}

fn check_counts(op: &str, preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset(format!("{op} needs at least one image")));
    }
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: {} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_counts("mae", preds, gts)?;
    let total: f64 = preds.iter().zip(gts).fold(0.0, |acc, (p, g)| acc + (p - g).abs());
    Ok(total / preds.len() as f64)
}

/// Root of the mean squared count error.
pub fn mse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_counts("mse", preds, gts)?;
    let total: f64 = preds.iter().zip(gts).fold(0.0, |acc, (p, g)| acc + (p - g) * (p - g));
    Ok((total / preds.len() as f64).sqrt())
}

/// Cell boundaries of an `n`-way split of `len` at `⌊i·len/n⌋`. The split
/// for `2n` refines the one for `n`, so GAME never decreases with the level
/// even when `len` is not a multiple of `n`.
fn cell_bounds(len: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let edge = |i: usize| i * len / n;
    (0..n).map(|i| edge(i)..edge(i + 1)).collect()
}

/// `|count(pred) − count(gt)|` for each cell of a 2ˢ × 2ˢ grid, row-major.
pub fn region_errors(pred: &DensityMap, gt: &DensityMap, s: u32, roi: Option<&RoiMask>) -> Result<Vec<f64>> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "game",
            format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    if s > 15 {
        return Err(Error::InvalidArgument(format!("GAME level {s} is too deep")));
    }
    check_roi("game", pred, roi)?;
    let n = 1usize << s;
    let rows = cell_bounds(pred.height(), n);
    let cols = cell_bounds(pred.width(), n);
    let mut out = Vec::with_capacity(n * n);
    for ys in &rows {
        for xs in &cols {
            let p = region_sum(pred, roi, ys.clone(), xs.clone());
            let g = region_sum(gt, roi, ys.clone(), xs.clone());
            out.push((p - g).abs());
        }
    }
    Ok(out)
}

/// GAME(s) error of a single image.
pub fn game_image(
    pred: &DensityMap,
    gt: &DensityMap,
    s: u32,
    roi: Option<&RoiMask>,
    convention: GameConvention,
) -> Result<f64> {
    let errors = region_errors(pred, gt, s, roi)?;
    let total = errors.iter().fold(0.0, |acc, e| acc + e);
    Ok(match convention {
        GameConvention::Sum => total,
        GameConvention::Averaged => total / errors.len() as f64,
    })
}

/// GAME(s) averaged over images. With one region this is the MAE.
pub fn game(
    preds: &[DensityMap],
    gts: &[DensityMap],
    s: u32,
    roi: Option<&RoiMask>,
    convention: GameConvention,
) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset("game needs at least one image".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "game: {} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += game_image(p, g, s, roi, convention)?;
    }
    Ok(total / preds.len() as f64)
}

/// Anything that maps a sample to a density map of the same size.
pub trait DensityPredictor {
    fn predict(&mut self, sample: &Sample) -> Result<DensityMap>;

    /// Per-skip mean gate activation of the last prediction, if gated.
    fn gate_activations(&self) -> Option<Vec<f64>> {
        None
    }
}

impl<T: Element> DensityPredictor for Network<T> {
    fn predict(&mut self, sample: &Sample) -> Result<DensityMap> {
        let y = self.forward_any_size(&image_tensor::<T>(&sample.image))?;
        Ok(tensor_to_density(&y, 0))
    }

    fn gate_activations(&self) -> Option<Vec<f64>> {
        self.gate_activation_report()
            .ok()
            .map(|r| r.into_iter().map(|(_, m)| m).collect())
    }
}

/// Returns the ground-truth map; an evaluation harness sanity check.
pub struct GroundTruthPredictor;

impl DensityPredictor for GroundTruthPredictor {
    fn predict(&mut self, sample: &Sample) -> Result<DensityMap> {
        Ok(sample.density.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub game_max: u32,
    pub convention: GameConvention,
    /// Keep the per-region error grids in the report.
    pub keep_grids: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            game_max: 3,
            convention: GameConvention::Sum,
            keep_grids: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub predicted: f64,
    pub ground_truth: f64,
    /// Per-image GAME(s) for s = 0..=game_max.
    pub game: Vec<f64>,
    /// Region error grids, level 0 first; present when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grids: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageResult>,
    pub mae: f64,
    pub mse: f64,
    pub convention: GameConvention,
    /// GAME(s) for s = 0..=game_max.
    pub game: Vec<f64>,
    /// Mean activation of each gate over the split.
    pub gate_means: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,predicted,ground_truth,abs_error");
        let levels = self.game.len();
        for s in 0..levels {
            let _ = write!(out, ",game{s}");
        }
        out.push('\n');
        for r in &self.images {
            let _ = write!(
                out,
                "{},{},{},{}",
                r.id,
                r.predicted,
                r.ground_truth,
                (r.predicted - r.ground_truth).abs()
            );
            for g in &r.game {
                let _ = write!(out, ",{g}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        fs::write(json_path, self.to_json() + "\n").map_err(|e| Error::io(json_path, e))?;
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

/// Full-image evaluation of a split. Each image's ROI masks both maps
/// before counting.
pub fn evaluate<P: DensityPredictor>(predictor: &mut P, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("evaluation split has no images".into()));
    }
    let mut images = Vec::with_capacity(ds.len());
    let mut gate_sums: Option<Vec<f64>> = None;
    for sample in &ds.samples {
        let result = (|| {
            let pred = predictor.predict(sample)?;
            let roi = sample.annotations.roi.as_ref();
            let predicted = count(&pred, roi)?;
            let ground_truth = count(&sample.density, roi)?;
            let mut game = Vec::with_capacity(opts.game_max as usize + 1);
            let mut grids = Vec::new();
            for s in 0..=opts.game_max {
                let errors = region_errors(&pred, &sample.density, s, roi)?;
                let total = errors.iter().fold(0.0, |acc, e| acc + e);
                game.push(match opts.convention {
                    GameConvention::Sum => total,
                    GameConvention::Averaged => total / errors.len() as f64,
                });
                if opts.keep_grids {
                    grids.push(errors);
                }
            }
            Ok(ImageResult {
                id: sample.id.clone(),
                predicted,
                ground_truth,
                game,
                grids: opts.keep_grids.then_some(grids),
            })
        })()
        .map_err(|e| Error::in_sample(&sample.id, e))?;
        images.push(result);
        if let Some(acts) = predictor.gate_activations() {
            let sums = gate_sums.get_or_insert_with(|| vec![0.0; acts.len()]);
            sums.iter_mut().zip(&acts).for_each(|(s, a)| *s += a);
        }
    }
    let preds: Vec<f64> = images.iter().map(|r| r.predicted).collect();
    let gts: Vec<f64> = images.iter().map(|r| r.ground_truth).collect();
    let n = images.len() as f64;
    let game = (0..=opts.game_max as usize)
        .map(|s| images.iter().fold(0.0, |acc, r| acc + r.game[s]) / n)
        .collect();
    Ok(EvalReport {
        mae: mae(&preds, &gts)?,
        mse: mse(&preds, &gts)?,
        convention: opts.convention,
        game,
        gate_means: gate_sums.map(|s| s.into_iter().map(|v| v / n).collect()),
        images,
    })
}

/// Per-skip gate activation, averaged over the images of `ds`; skip 1
/// first.
pub fn mean_gate_activations<T: Element>(net: &mut Network<T>, ds: &Dataset) -> Result<Vec<(usize, f64)>> {
    if net.gates().is_empty() {
        return Err(Error::Ungated);
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset("gate report needs at least one image".into()));
    }
    let mut sums = vec![0.0; net.gates().len()];
    for sample in &ds.samples {
        net.predict(sample).map_err(|e| Error::in_sample(&sample.id, e))?;
        for (sum, (_, m)) in sums.iter_mut().zip(net.gate_activation_report()?) {
            *sum += m;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(k, s)| (k + 1, s / ds.len() as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_density_map, DotAnnotations};

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> DensityMap {
        DensityMap::from_values(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn count_cases() {
        assert_eq!(count(&DensityMap::zeros(5, 7), None).unwrap(), 0.0);
        let dots = DotAnnotations::new(
            "d",
            vec![(10.0, 10.0), (30.0, 5.0), (2.0, 40.0), (45.0, 45.0), (25.0, 25.0)],
        );
        let gt = generate_density_map(&dots, (48, 48), 4.0).unwrap();
        assert!((count(&gt, None).unwrap() - 5.0).abs() < 1e-3);
        let uniform = map(8, 16, |_, _| 1.0 / 128.0);
        assert!((count(&uniform, None).unwrap() - 1.0).abs() < 1e-12);
        assert!(count(&uniform, Some(&RoiMask::full(8, 15))).is_err());
    }

    #[test]
    fn mae_mse_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[7.0], &[5.0]).unwrap(), 2.0);
        assert_eq!(mse(&[7.0], &[5.0]).unwrap(), 2.0);
        assert_eq!(mae(&[3.0, 5.0], &[1.0, 1.0]).unwrap(), 3.0);
        assert!((mse(&[3.0, 5.0], &[1.0, 1.0]).unwrap() - 10f64.sqrt()).abs() < 1e-15);
        assert!(matches!(mae(&[], &[]), Err(Error::EmptyDataset(_))));
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn compensating_errors_show_at_level_one() {
        let gt = map(8, 8, |_, _| 0.1);
        let mut values = gt.values().to_vec();
        values[0] += 2.0; // top-left quadrant
        values[63] -= 2.0; // bottom-right quadrant
        let pred = DensityMap::from_values(8, 8, values).unwrap();
        let g0 = game_image(&pred, &gt, 0, None, GameConvention::Sum).unwrap();
        let g1 = game_image(&pred, &gt, 1, None, GameConvention::Sum).unwrap();
        assert!(g0.abs() < 1e-12);
        assert!((g1 - 4.0).abs() < 1e-12);
        let avg = game_image(&pred, &gt, 1, None, GameConvention::Averaged).unwrap();
        assert!((avg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_maps_score_zero() {
        let m = map(13, 9, |y, x| (y * x) as f64 * 0.01);
        for s in 0..4 {
            assert_eq!(
                game(
                    std::slice::from_ref(&m),
                    std::slice::from_ref(&m),
                    s,
                    None,
                    GameConvention::Sum
                )
                .unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn uneven_sides_split_proportionally() {
        assert_eq!(cell_bounds(64, 4), vec![0..16, 16..32, 32..48, 48..64]);
        assert_eq!(cell_bounds(10, 4), vec![0..2, 2..5, 5..7, 7..10]);
        assert_eq!(cell_bounds(3, 4), vec![0..0, 0..1, 1..2, 2..3]);
    }

    #[test]
    fn finer_splits_refine_coarser_ones() {
        for len in 1..40 {
            for s in 0..5 {
                let coarse = cell_bounds(len, 1 << s);
                let fine = cell_bounds(len, 2 << s);
                for (i, c) in coarse.iter().enumerate() {
                    assert_eq!((fine[2 * i].start, fine[2 * i + 1].end), (c.start, c.end));
                }
            }
        }
    }

    #[test]
    fn roi_excluded_pixels_contribute_nothing() {
        let gt = map(4, 4, |_, _| 0.0);
        let pred = map(4, 4, |_, _| 1.0);
        let nothing = RoiMask::from_fn(4, 4, |_, _| false);
        for s in 0..3 {
            assert_eq!(
                game_image(&pred, &gt, s, Some(&nothing), GameConvention::Sum).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(region_errors(&DensityMap::zeros(4, 4), &DensityMap::zeros(4, 5), 1, None).is_err());
    }
}

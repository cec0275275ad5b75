use approx::assert_relative_eq;
use gunc_core::data::{
    distinct_patches, generate_density_map, plan_patches, ApplyRoi, Dataset, DensityMap, DotAnnotations, Image,
    RoiMask, Sample, SamplerConfig,
};
use gunc_core::metrics::{count, game, game_image, mae, GameConvention};
use gunc_core::net::{Network, NetworkSpec};
use gunc_core::optim::{decode_checkpoint, encode_checkpoint, Checkpoint};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn map_strategy(h: usize, w: usize) -> impl Strategy<Value = DensityMap> {
    prop::collection::vec(0.0..0.05f64, h * w).prop_map(move |v| DensityMap::from_values(h, w, v).unwrap())
}

fn pair_strategy() -> impl Strategy<Value = (DensityMap, DensityMap)> {
    (8usize..48, 8usize..48).prop_flat_map(|(h, w)| (map_strategy(h, w), map_strategy(h, w)))
}

fn dots_strategy() -> impl Strategy<Value = (usize, usize, Vec<(f64, f64)>)> {
    (4usize..80, 4usize..80).prop_flat_map(|(h, w)| {
        let dot = (0.0..w as f64, 0.0..h as f64);
        (Just(h), Just(w), prop::collection::vec(dot, 0..25))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn game_nondecreasing_in_level((pred, gt) in pair_strategy()) {
        let mut prev = 0.0;
        for s in 0..=4 {
            let g = game_image(&pred, &gt, s, None, GameConvention::Sum).unwrap();
            prop_assert!(g >= prev - 1e-12, "GAME({s}) = {g} < {prev}");
            prev = g;
        }
    }

    #[test]
    fn game_matches_pixelwise_assignment((pred, gt) in pair_strategy(), s in 0u32..5) {
        let n = 1usize << s;
        let (h, w) = (pred.height(), pred.width());
        let mut cells = vec![0.0; n * n];
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = (((y + 1) * n - 1) / h, ((x + 1) * n - 1) / w);
                cells[cy * n + cx] += pred.at(y, x) - gt.at(y, x);
            }
        }
        let oracle: f64 = cells.iter().map(|c| c.abs()).sum();
        let g = game_image(&pred, &gt, s, None, GameConvention::Sum).unwrap();
        prop_assert!((g - oracle).abs() < 1e-9, "library {g} vs oracle {oracle}");
    }

    #[test]
    fn game_zero_is_mae(maps in prop::collection::vec(pair_strategy(), 1..6)) {
        let (preds, gts): (Vec<_>, Vec<_>) = maps.into_iter().unzip();
        let pc: Vec<f64> = preds.iter().map(|m| count(m, None).unwrap()).collect();
        let gc: Vec<f64> = gts.iter().map(|m| count(m, None).unwrap()).collect();
        let g0 = game(&preds, &gts, 0, None, GameConvention::Sum).unwrap();
        prop_assert_eq!(g0.to_bits(), mae(&pc, &gc).unwrap().to_bits());
    }

    #[test]
    fn game_ignores_image_order(maps in prop::collection::vec(pair_strategy(), 2..6), s in 0u32..4) {
        let (preds, gts): (Vec<_>, Vec<_>) = maps.into_iter().unzip();
        let forward = game(&preds, &gts, s, None, GameConvention::Sum).unwrap();
        let rp: Vec<_> = preds.iter().rev().cloned().collect();
        let rg: Vec<_> = gts.iter().rev().cloned().collect();
        let reversed = game(&rp, &rg, s, None, GameConvention::Sum).unwrap();
        assert_relative_eq!(forward, reversed, max_relative = 1e-12);
    }

    #[test]
    fn averaged_convention_divides_by_cells((pred, gt) in pair_strategy(), s in 0u32..4) {
        let sum = game_image(&pred, &gt, s, None, GameConvention::Sum).unwrap();
        let avg = game_image(&pred, &gt, s, None, GameConvention::Averaged).unwrap();
        assert_relative_eq!(avg * (1u32 << (2 * s)) as f64, sum, max_relative = 1e-12);
    }

    #[test]
    fn roi_hides_outside_pixels((pred, gt) in pair_strategy(), cut in 0.1..0.9f64, noise in 0.0..10.0f64) {
        let (h, w) = (pred.height(), pred.width());
        let edge = (cut * w as f64) as usize;
        let roi = RoiMask::from_fn(h, w, |_, x| x < edge);
        // anything outside the mask must not change the metrics
        let tampered: Vec<f64> = pred
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % w < edge { v } else { v + noise })
            .collect();
        let tampered = DensityMap::from_values(h, w, tampered).unwrap();
        prop_assert_eq!(count(&pred, Some(&roi)).unwrap(), count(&tampered, Some(&roi)).unwrap());
        for s in 0..3 {
            prop_assert_eq!(
                game_image(&pred, &gt, s, Some(&roi), GameConvention::Sum).unwrap(),
                game_image(&tampered, &gt, s, Some(&roi), GameConvention::Sum).unwrap()
            );
        }
        let masked = pred.apply_roi(&roi).unwrap();
        assert_relative_eq!(count(&masked, None).unwrap(), count(&pred, Some(&roi)).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn density_conserves_dots((h, w, dots) in dots_strategy(), sigma in 0.3..12.0f64) {
        let n = dots.len() as f64;
        let map = generate_density_map(&DotAnnotations::new("p", dots), (h, w), sigma).unwrap();
        prop_assert!((map.sum() - n).abs() < 1e-9, "sum {} for {n} dots", map.sum());
        prop_assert!(map.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn flip_preserves_mass((h, w, dots) in dots_strategy()) {
        let map = generate_density_map(&DotAnnotations::new("p", dots), (h, w), 4.0).unwrap();
        assert_relative_eq!(map.flip_horizontal().sum(), map.sum(), max_relative = 1e-12, epsilon = 1e-12);
    }

    #[test]
    fn patches_stay_inside_and_dedup_keeps_weight(
        (h, w, dots) in dots_strategy(),
        seed in any::<u64>(),
        batch in 1usize..40,
    ) {
        let sample = Sample::new(Image::filled(3, h.max(32), w.max(32), 0.5), DotAnnotations::new("p", dots), 4.0).unwrap();
        let ds = Dataset::from_samples(vec![sample], 4.0);
        let cfg = SamplerConfig { batch_size: batch, patch_side: 32, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut aug = ChaCha8Rng::seed_from_u64(!seed);
        let plan = plan_patches(&ds, &cfg, &mut rng, &mut aug).unwrap();
        prop_assert_eq!(plan.len(), batch);
        for p in &plan {
            prop_assert!(p.top + 32 <= h.max(32) && p.left + 32 <= w.max(32));
        }
        let (unique, counts) = distinct_patches(&plan);
        prop_assert_eq!(unique.len(), counts.len());
        prop_assert_eq!(counts.iter().sum::<usize>(), batch);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn checkpoints_reencode_identically(seed in any::<u64>(), gated in any::<bool>()) {
        let spec = NetworkSpec { seed, gated, encoder_channels: [2, 2, 2, 2, 2], ..NetworkSpec::narrow() };
        let net = Network::<f32>::build(&spec).unwrap();
        let bytes = encode_checkpoint(&Checkpoint::from_network(&net, seed)).unwrap();
        let decoded = decode_checkpoint::<f32>(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&decoded).unwrap(), bytes);
        prop_assert_eq!(decoded.network().unwrap().parameters().len(), net.parameters().len());
    }
}

use islab_core::domain::{Modality, NormalizedPlane, Organelle};
use islab_core::inference::{plan_tiles, predict_planes, InferenceOptions, Predictor};
use proptest::prelude::*;

struct Echo(usize);

impl Predictor for Echo {
    fn patch_size(&self) -> usize {
        self.0
    }

    fn predict_tiles(&self, tiles: &[f64], n: usize, size: usize, _: Modality, _: &[Organelle]) -> islab_core::Result<Vec<f64>> {
        let plane = size * size;
        Ok((0..n).flat_map(|b| (0..4).flat_map(move |_| tiles[b * plane..(b + 1) * plane].iter().copied())).collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn tiles_cover_every_pixel_inside_bounds(h in 1usize..200, w in 1usize..200, patch in 1usize..64, overlap in 0.0f64..0.95) {
        let grid = plan_tiles(h, w, patch, overlap);
        prop_assert!(grid.height >= h && grid.width >= w);
        let mut hit = vec![false; grid.height * grid.width];
        for &(t, l) in &grid.offsets {
            prop_assert!(t + patch <= grid.height && l + patch <= grid.width);
            for y in t..t + patch {
                for x in l..l + patch {
                    hit[y * grid.width + x] = true;
                }
            }
        }
        prop_assert!(hit.iter().all(|&v| v));
    }

    #[test]
    fn identity_model_reconstructs_its_input(h in 8usize..90, w in 8usize..90, tta in any::<bool>(), seed in any::<u32>()) {
        let values = (0..h * w).map(|i| ((i as u64 * 2654435761 + seed as u64) % 2001) as f64 / 1000.0 - 1.0).collect();
        let img = NormalizedPlane::from_raw(h, w, values).unwrap();
        let opts = InferenceOptions { overlap: 0.5, tta, batch: 2 };
        let out = predict_planes(&Echo(32), &img, Modality::DIC, &[Organelle::Mitochondria], &opts).unwrap();
        let p = out[Organelle::Mitochondria.index()].as_ref().unwrap();
        prop_assert_eq!(p.dims(), (h, w));
        for (a, b) in p.values().iter().zip(img.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(out[Organelle::Actin.index()].is_none());
    }
}

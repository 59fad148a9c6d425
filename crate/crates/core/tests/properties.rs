use proptest::prelude::*;

use cadm::data::synthetic::{rasterize, render_pair, synthetic_pair};
use cadm::data::{reassemble, tile, EdgePolicy, Mask, Planar, SyntheticConfig};
use cadm::metrics::{confusion_slices, score, ConfusionCounts, Metrics, Pooling};
use cadm::sampler::aggregate;
use cadm::schedule::make_linear_schedule;

proptest! {
    #[test]
    fn schedule_products_decrease_inside_unit_interval(
        steps in 1usize..400,
        lo in 1e-5f64..1e-2,
        span in 0.0f64..0.05,
    ) {
        let s = make_linear_schedule(steps, lo, lo + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn respacing_keeps_endpoint_and_products(steps in 2usize..200, k in 1usize..200) {
        let s = make_linear_schedule(steps, 1e-4, 0.02).unwrap();
        let k = k.min(steps);
        let (r, ts) = s.respaced(k).unwrap();
        prop_assert_eq!(r.num_steps(), k);
        prop_assert_eq!(*ts.last().unwrap(), steps);
        prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
        for (i, &t) in ts.iter().enumerate() {
            prop_assert!((r.alpha_bars()[i] - s.alpha_bar(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_identities(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
        let m = Metrics::from_counts(&ConfusionCounts { tp, fp, fn_, tn });
        for v in [m.recall, m.precision, m.oa, m.f1, m.iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.iou <= m.f1 + 1e-15);
        if tp > 0 {
            prop_assert!((m.iou - tp as f64 / (tp + fp + fn_) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_counts_sum(grids in proptest::collection::vec(proptest::collection::vec((0u8..2, 0u8..2), 1..64), 1..6)) {
        let counts: Vec<ConfusionCounts> = grids
            .iter()
            .map(|g| {
                let (p, t): (Vec<u8>, Vec<u8>) = g.iter().copied().unzip();
                confusion_slices(&p, &t).unwrap()
            })
            .collect();
        let total: ConfusionCounts = counts.iter().copied().sum();
        prop_assert_eq!(total.total() as usize, grids.iter().map(Vec::len).sum::<usize>());
        prop_assert_eq!(score(&counts, Pooling::Micro), Metrics::from_counts(&total));
    }

    #[test]
    fn tiling_round_trips(h in 1usize..40, w in 1usize..40, t in 1usize..12) {
        let t = t.min(h).min(w);
        let data: Vec<u8> = (0..h * w).map(|i| (i % 251) as u8).collect();
        let img = Planar::from_vec(1, h, w, data).unwrap();
        let (tiles, index) = tile(&img, t, EdgePolicy::Pad).unwrap();
        prop_assert_eq!(tiles.len(), h.div_ceil(t) * w.div_ceil(t));
        let back = reassemble(&tiles, &index).unwrap();
        prop_assert_eq!(back.crop(0, 0, h, w).unwrap(), img.clone());
        let inside = h * w;
        let padded: usize = back.data.iter().filter(|&&v| v == 0).count();
        prop_assert_eq!(padded - img.data.iter().filter(|&&v| v == 0).count(), back.data.len() - inside);
    }

    #[test]
    fn soft_maps_stay_in_unit_interval(members in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 16), 1..6)) {
        let map = aggregate("p", &members, 4, 4, 0.5).unwrap();
        prop_assert!(map.soft.iter().all(|v| (0.0..=1.0).contains(v)));
        for (s, b) in map.soft.iter().zip(&map.binary.data) {
            prop_assert_eq!(*b, u8::from(*s >= 0.5));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_label_is_symmetric_difference(seed in any::<u64>()) {
        let cfg = SyntheticConfig { size: 32, ..Default::default() };
        let pair = synthetic_pair("p", seed, &cfg);
        prop_assert!(pair.validate().is_ok());
        prop_assert_eq!(pair.image_a.channels, 3);
        prop_assert!(pair.image_a.data.iter().chain(&pair.image_b.data).all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(pair.label.data.iter().all(|&v| v <= 1));
    }
}

#[test]
fn label_of_identical_scenes_is_empty() {
    let cfg = SyntheticConfig { size: 32, ..Default::default() };
    let mut rng = cadm::rng::stream(4, &[]);
    let mut scene = cadm::data::synthetic::random_scene(&mut rng, &cfg);
    scene.shapes_b = scene.shapes_a.clone();
    let pair = render_pair("same", &scene, None);
    assert!(pair.label.data.iter().all(|&v| v == 0));
    let empty: Mask = rasterize(&[], 32);
    assert_eq!(empty.data.len(), 32 * 32);
}

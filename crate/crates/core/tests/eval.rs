use figura_core::eval::*;
use figura_core::forge::{mask_iou, LabelMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-class scores by walking every pixel, one class at a time.
fn brute_force(preds: &[LabelMap], gts: &[LabelMap], classes: usize) -> Vec<[f64; 5]> {
    (0..classes as u8)
        .map(|c| {
            let (mut tp, mut fp, mut fn_, mut tn) = (0u32, 0u32, 0u32, 0u32);
            for (p, g) in preds.iter().zip(gts) {
                for y in 0..g.height {
                    for x in 0..g.width {
                        match (p.get(x, y) == c, g.get(x, y) == c) {
                            (true, true) => tp += 1,
                            (true, false) => fp += 1,
                            (false, true) => fn_ += 1,
                            (false, false) => tn += 1,
                        }
                    }
                }
            }
            let all = (tp + fp + fn_ + tn) as f64;
            if tp + fp + fn_ == 0 {
                return [(tp + tn) as f64 / all, 1.0, 1.0, 1.0, 1.0];
            }
            let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            [(tp + tn) as f64 / all, p, r, f, tp as f64 / (tp + fp + fn_) as f64]
        })
        .collect()
}

fn random_map(rng: &mut ChaCha8Rng, classes: u8) -> LabelMap {
    LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

#[test]
fn metrics_match_pixel_counting_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..100 {
        let classes = if trial % 2 == 0 { 3 } else { 10 };
        let preds: Vec<LabelMap> = (0..3).map(|_| random_map(&mut rng, classes)).collect();
        let gts: Vec<LabelMap> = (0..3).map(|_| random_map(&mut rng, classes)).collect();
        let pr: Vec<&LabelMap> = preds.iter().collect();
        let gr: Vec<&LabelMap> = gts.iter().collect();
        let m = reconstruction_metrics(&pr, &gr, classes as usize).unwrap();
        let want = brute_force(&preds, &gts, classes as usize);
        for (s, w) in m.per_class.iter().zip(&want) {
            let got = [s.accuracy, s.precision, s.recall, s.f1, s.iou];
            for (a, b) in got.iter().zip(w) {
                assert!((a - b).abs() <= 1e-9, "trial {trial}: {got:?} vs {w:?}");
            }
        }
        let hits = preds
            .iter()
            .zip(&gts)
            .map(|(p, g)| p.data.iter().zip(&g.data).filter(|(a, b)| a == b).count())
            .sum::<usize>();
        assert_eq!(m.pixel_accuracy, hits as f64 / 192.0);
        // Class IoU from the mask helper agrees on a single pair.
        for c in 0..classes {
            let single = reconstruction_metrics(&[&preds[0]], &[&gts[0]], classes as usize).unwrap();
            let (pm, gm) = (preds[0].class_mask(c), gts[0].class_mask(c));
            if pm.count() + gm.count() > 0 {
                assert_eq!(mask_iou(&pm, &gm).unwrap(), single.per_class[c as usize].iou);
            }
        }
    }
}

proptest! {
    #[test]
    fn macro_f1_is_bounded_by_class_scores(seed in any::<u64>(), classes in 2u8..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_map(&mut rng, classes);
        let g = random_map(&mut rng, classes);
        let m = reconstruction_metrics(&[&p], &[&g], classes as usize).unwrap();
        let f1s: Vec<f64> = m.per_class.iter().map(|c| c.f1).collect();
        let lo = f1s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = f1s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m.f1 >= lo - 1e-12 && m.f1 <= hi + 1e-12);
        for c in &m.per_class {
            for v in [c.accuracy, c.precision, c.recall, c.f1, c.iou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn metrics_ignore_sample_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<LabelMap> = (0..4).map(|_| random_map(&mut rng, 4)).collect();
        let g: Vec<LabelMap> = (0..4).map(|_| random_map(&mut rng, 4)).collect();
        let a = reconstruction_metrics(&p.iter().collect::<Vec<_>>(), &g.iter().collect::<Vec<_>>(), 4).unwrap();
        let b = reconstruction_metrics(&p.iter().rev().collect::<Vec<_>>(), &g.iter().rev().collect::<Vec<_>>(), 4).unwrap();
        prop_assert_eq!(a, b);
    }
}

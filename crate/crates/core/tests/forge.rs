use figura_core::forge::*;
use proptest::prelude::*;

fn cfg() -> ForgeConfig {
    ForgeConfig::default()
}

#[test]
fn every_sample_has_four_garment_classes() {
    for seed in 0..100 {
        let s = generate_sample(seed, &cfg()).unwrap();
        let hist = s.label.histogram(10);
        assert!(hist[0] > 0);
        let present = hist[1..].iter().filter(|&&n| n > 0).count();
        assert!(present >= 4, "seed {seed}: {hist:?}");
    }
}

#[test]
fn every_silhouette_has_all_six_parts() {
    for seed in 0..100 {
        let s = generate_sample(seed, &cfg()).unwrap();
        let hist = s.silhouette.map().histogram(part::COUNT);
        assert!(hist.iter().all(|&n| n > 0), "seed {seed}: {hist:?}");
    }
}

#[test]
fn garments_stay_within_overhang_of_the_body() {
    let c = cfg();
    let r = c.garment_overhang as isize;
    for seed in 0..50 {
        let s = generate_sample(seed, &c).unwrap();
        let (w, h) = (c.resolution as isize, c.resolution as isize);
        let body = s.silhouette.foreground();
        for y in 0..h {
            for x in 0..w {
                if s.label.get(x as usize, y as usize) == 0 {
                    continue;
                }
                let mut near = false;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx >= 0 && yy >= 0 && xx < w && yy < h && body.data[(yy * w + xx) as usize] {
                            near = true;
                        }
                    }
                }
                assert!(near, "seed {seed}: label pixel ({x}, {y}) far from body");
            }
        }
    }
}

#[test]
fn rgb_in_unit_range_and_deterministic() {
    for seed in [0, 7, 99] {
        let a = generate_sample(seed, &cfg()).unwrap();
        assert!(a.rgb.in_unit_range());
        assert_eq!(a, generate_sample(seed, &cfg()).unwrap());
    }
}

#[test]
fn forged_maps_are_already_clean() {
    for seed in 0..100 {
        let s = generate_sample(seed, &cfg()).unwrap();
        assert_eq!(clean_mask(&s.label, 7).unwrap(), s.label, "seed {seed}");
    }
}

#[test]
fn holes_then_cleaning_restore_the_original() {
    for seed in 0..100 {
        let s = generate_sample(seed, &cfg()).unwrap();
        let holed = inject_holes(&s.label, seed, 5, 3).unwrap();
        assert_ne!(holed, s.label);
        assert_eq!(clean_mask(&holed, 7).unwrap(), s.label, "seed {seed}");
    }
}

#[test]
fn larger_holes_up_to_five_are_restored() {
    for seed in 0..100 {
        let s = generate_sample(seed, &cfg()).unwrap();
        let holed = inject_holes(&s.label, seed + 1000, 2, 5).unwrap();
        assert_eq!(clean_mask(&holed, 7).unwrap(), s.label, "seed {seed}");
    }
}

fn arb_mask() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(any::<bool>(), w * h),
            proptest::collection::vec(any::<bool>(), w * h),
        )
            .prop_map(move |(a, b)| {
                (
                    Mask {
                        width: w,
                        height: h,
                        data: a,
                    },
                    Mask {
                        width: w,
                        height: h,
                        data: b,
                    },
                )
            })
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in arb_mask()) {
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        let (na, nb) = (a.count(), b.count());
        if na.max(nb) > 0 {
            prop_assert!(ab <= na.min(nb) as f64 / na.max(nb) as f64 + 1e-12);
        }
        if na > 0 || nb > 0 {
            prop_assert_eq!(ab == 1.0, a == b);
        }
    }

    #[test]
    fn median_map_is_constant_per_region(
        labels in proptest::collection::vec(0u8..5, 36),
        pixels in proptest::collection::vec(0.0f32..=1.0, 108),
    ) {
        let m = LabelMap::new(6, 6, labels).unwrap();
        let img = RgbImage { width: 6, height: 6, data: pixels };
        let cm = median_color_map(&img, &m).unwrap();
        for c in 0..5u8 {
            let colors: Vec<[f32; 3]> = (0..36).filter(|&p| m.data[p] == c).map(|p| cm.0.pixel(p)).collect();
            if let Some(first) = colors.first() {
                prop_assert!(colors.iter().all(|x| x == first));
                if c == 0 {
                    prop_assert_eq!(*first, [0.0; 3]);
                }
            }
        }
    }

    #[test]
    fn cleaning_is_idempotent(labels in proptest::collection::vec(prop_oneof![3 => Just(0u8), 1 => 1u8..4], 144)) {
        let m = LabelMap::new(12, 12, labels).unwrap();
        let once = clean_mask(&m, 5).unwrap();
        prop_assert_eq!(clean_mask(&once, 5).unwrap(), once);
    }
}

mod common;

use common::{random_mask, rng};
use proptest::prelude::*;
use raunet::preprocess::{
    hu_window, liver_patch_sampler, normalize, resample_linear, resample_nearest, slice_sampler_2d, source_coordinate,
    tumor_patch_sampler,
};
use raunet::Volume;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    /// A separable affine ramp is reproduced exactly (up to rounding) by
    /// trilinear resampling at the mapped source coordinates.
    #[test]
    fn linear_ramp_survives_resampling(
        from in prop::array::uniform3(1usize..12),
        to in prop::array::uniform3(1usize..12),
        slope in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let ramp = |p: [f64; 3]| 1.0 + slope[0] * p[0] + slope[1] * p[1] + slope[2] * p[2];
        let v = Volume::from_fn(from, |x, y, z| ramp([x as f64, y as f64, z as f64]) as f32);
        let out = resample_linear(&v, to).unwrap();
        prop_assert_eq!(out.extents(), to);
        for z in 0..to[2] {
            for y in 0..to[1] {
                for x in 0..to[0] {
                    let src = [
                        source_coordinate(x, from[0], to[0]),
                        source_coordinate(y, from[1], to[1]),
                        source_coordinate(z, from[2], to[2]),
                    ];
                    prop_assert!((out.get(x, y, z) as f64 - ramp(src)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn nearest_keeps_label_values(from in prop::array::uniform3(1usize..10), to in prop::array::uniform3(1usize..10), seed in any::<u64>()) {
        let m = random_mask(from, 0.5, &mut rng(seed)).map(|v| v * 3);
        let out = resample_nearest(&m, to).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == 0 || v == 3));
        if from == to {
            prop_assert_eq!(out, m);
        }
    }

    #[test]
    fn window_then_normalize_lands_in_unit_range(seed in any::<u64>(), lo in -500.0f32..0.0, width in 1.0f32..800.0) {
        use rand::Rng;
        let mut r = rng(seed);
        let v = Volume::from_fn([5, 4, 3], |_, _, _| r.random_range(-1200.0f32..1500.0));
        let w = hu_window(&v, lo, lo + width).unwrap();
        prop_assert!(w.data().iter().all(|&x| x >= lo && x <= lo + width));
        let n = normalize(&w);
        prop_assert!(n.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn liver_windows_stay_inside(depth in 1usize..6, extra in 0usize..8, n in 1usize..10, seed in any::<u64>()) {
        let m = depth + extra;
        let v = Volume::from_fn([4, 3, m], |x, y, z| (x + y + z) as f32);
        let mask = random_mask([4, 3, m], 0.3, &mut rng(seed));
        let set = liver_patch_sampler(&v, &mask, depth, n, seed).unwrap();
        prop_assert_eq!(set.patches.len(), n);
        for p in &set.patches {
            prop_assert_eq!(p.origin[0], 0);
            prop_assert_eq!(p.origin[1], 0);
            prop_assert!(p.origin[2] + depth <= m);
            prop_assert_eq!(p.extents(), [4, 3, depth]);
            prop_assert_eq!(&p.label, &mask.crop(p.origin, [4, 3, depth]).unwrap());
        }
    }

    #[test]
    fn tumor_patches_touch_the_liver(seed in any::<u64>(), fraction in 0.0f64..=1.0) {
        let ext = [12, 10, 8];
        let liver = Volume::from_fn(ext, |x, y, z| u8::from((3..9).contains(&x) && (2..8).contains(&y) && (1..7).contains(&z)));
        let tumor = Volume::from_fn(ext, |x, y, z| u8::from(x == 5 && y == 4 && (2..4).contains(&z)));
        let v = liver.to_f32();
        let set = tumor_patch_sampler(&v, &liver, &tumor, 20, [4, 4, 4], fraction, seed).unwrap();
        prop_assert_eq!(set.patches.len(), 20);
        let with_tumor = set.patches.iter().filter(|p| p.label.count() > 0).count();
        prop_assert!(with_tumor >= (20.0 * fraction).round() as usize);
        for p in &set.patches {
            prop_assert!((0..3).all(|a| p.origin[a] + 4 <= ext[a]));
            prop_assert!(liver.crop(p.origin, [4, 4, 4]).unwrap().count() > 0);
        }
    }
}

#[test]
fn slice_sampler_keeps_all_foreground_and_a_third_of_the_rest() {
    let ext = [6, 5, 11];
    let mask = Volume::from_fn(ext, |x, _, z| u8::from(x == 2 && (3..6).contains(&z)));
    let v = mask.to_f32();
    let slices = slice_sampler_2d(&v, &mask, 8, 5).unwrap();
    let zs: Vec<usize> = slices.iter().map(|s| s.z).collect();
    // 3 foreground slices plus (8 + 1) / 3 = 3 background slices.
    assert_eq!(zs.len(), 6);
    assert!([3, 4, 5].iter().all(|z| zs.contains(z)));
    assert!(zs.windows(2).all(|w| w[0] < w[1]));
    assert!(slices.iter().all(|s| s.image.extents() == [8, 8, 1]));
    assert_eq!(slice_sampler_2d(&v, &mask, 8, 5).unwrap(), slices);
}

#[test]
fn constant_volume_normalizes_to_half() {
    let v = Volume::filled([3, 3, 3], 7.0f32);
    assert!(normalize(&v).data().iter().all(|&x| x == 0.5));
}

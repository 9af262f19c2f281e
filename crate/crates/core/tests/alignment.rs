//! Exact-grid augmentation against an index-permutation oracle, plus angle
//! recovery and mask consistency properties.

use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgcseg::augment::{augment_bev, augment_gt, recover_angle, rotation_matrix, AugTransform};
use rgcseg::synth::{self, SynthSpec};
use rgcseg::tensor::Tensor;

mod support;
use support::permutation_oracle;


#[test]
fn sixteen_grid_transforms_are_exact_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [5usize, 6] {
        let features = Tensor::<f64>::from_fn([3, n, n], |_| rng.random_range(-1.0..1.0));
        let masks = Tensor::<f64>::from_fn([6, n, n], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        for (turns, theta) in [(0, 0.0), (1, FRAC_PI_2), (-1, -FRAC_PI_2), (2, PI)] {
            for flip_x in [false, true] {
                for flip_y in [false, true] {
                    let t = AugTransform::new(theta, flip_x, flip_y, 1.0).unwrap();
                    let label = format!("n={n} turns={turns} fx={flip_x} fy={flip_y}");
                    assert_eq!(
                        augment_bev(&features, &t).unwrap(),
                        permutation_oracle(&features, turns, flip_x, flip_y),
                        "features {label}"
                    );
                    assert_eq!(
                        augment_gt(&masks, &t).unwrap(),
                        permutation_oracle(&masks, turns, flip_x, flip_y),
                        "masks {label}"
                    );
                }
            }
        }
    }
}

#[test]
fn recovered_angle_is_negated_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let theta = rng.random_range(-PI + 1e-6..PI - 1e-6);
        let got = recover_angle(&rotation_matrix(theta)).unwrap();
        assert!((got + theta).abs() <= 1e-12, "theta {theta}: recovered {got}");
    }
}

#[test]
fn quarter_turn_moves_pixel_below_centre() {
    // a single lit pixel right of centre on a 5x5 canvas ends up below it
    // after a +90 degree turn (rows grow downwards)
    let mut x = Tensor::<f64>::zeros([1, 5, 5]);
    x.set(&[0, 2, 4], 1.0);
    let t = AugTransform::new(FRAC_PI_2, false, false, 1.0).unwrap();
    let y = augment_bev(&x, &t).unwrap();
    assert_eq!(y.at(&[0, 4, 2]), 1.0);
    assert_eq!(y.sum(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn warped_scenes_keep_mask_invariants(
        seed in 0u64..1000,
        theta in -PI..PI,
        flip_x in any::<bool>(),
        flip_y in any::<bool>(),
        scale in 0.8f64..1.25,
    ) {
        let s = synth::generate_scene(seed, &SynthSpec::square(16)).unwrap();
        let t = AugTransform::new(theta, flip_x, flip_y, scale).unwrap();
        let warped = synth::SceneSample {
            features: augment_bev(&s.features, &t).unwrap(),
            masks: augment_gt(&s.masks, &t).unwrap(),
            ..s
        };
        prop_assert!(synth::check_invariants(&warped).is_ok());
    }

    #[test]
    fn flips_are_involutions(seed in 0u64..1000, flip_x in any::<bool>(), flip_y in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn([2, 7, 4], |_| rng.random_range(-1.0..1.0));
        let t = AugTransform::new(0.0, flip_x, flip_y, 1.0).unwrap();
        let twice = augment_bev(&augment_bev(&x, &t).unwrap(), &t).unwrap();
        prop_assert_eq!(twice, x);
    }
}

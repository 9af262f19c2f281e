//! Kernels against brute-force loop oracles on random small instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rgcseg::tensor::{kernels, Tensor};

mod support;
use support::*;

#[test]
fn conv2d_matches_six_loop_oracle() {
    for seed in 0..INSTANCES {
        let e32 = conv_case::<f32>(seed);
        let e64 = conv_case::<f64>(seed);
        assert!(e32 <= TOL_F32, "seed {seed}: f32 error {e32}");
        assert!(e64 <= TOL_F64, "seed {seed}: f64 error {e64}");
    }
}

#[test]
fn conv2d_fixed_instance() {
    // seed 7, input 1x2x4x4, weight 3x2x3x3, stride 1, padding 1
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform::<f64>(&mut rng, &[1, 2, 4, 4]);
    let wt = uniform::<f64>(&mut rng, &[3, 2, 3, 3]);
    let b = Tensor::<f64>::zeros([3]);
    let got = kernels::conv2d(&x, &wt, Some(&b), 1, 1).unwrap();
    let (want, _, _) = conv_oracle(&as_f64(&x), (1, 2, 4, 4), &as_f64(&wt), (3, 3, 3), &[0.0; 3], 1, 1);
    assert!(max_abs_diff(&got, &want) <= 1e-6);
    let got32 = kernels::conv2d(&x.cast::<f32>(), &wt.cast::<f32>(), None, 1, 1).unwrap();
    let (want32, _, _) = conv_oracle(
        &as_f64(&x.cast::<f32>()),
        (1, 2, 4, 4),
        &as_f64(&wt.cast::<f32>()),
        (3, 3, 3),
        &[0.0; 3],
        1,
        1,
    );
    assert!(max_abs_diff(&got32, &want32) <= 1e-6);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    for seed in 0..INSTANCES {
        let e32 = matmul_case::<f32>(100 + seed);
        let e64 = matmul_case::<f64>(100 + seed);
        assert!(e32 <= TOL_F32, "seed {seed}: f32 error {e32}");
        assert!(e64 <= TOL_F64, "seed {seed}: f64 error {e64}");
    }
}

#[test]
fn bilinear_matches_tent_kernel_oracle() {
    for seed in 0..INSTANCES {
        let e32 = bilinear_case::<f32>(200 + seed);
        let e64 = bilinear_case::<f64>(200 + seed);
        assert!(e32 <= TOL_F32, "seed {seed}: f32 error {e32}");
        assert!(e64 <= TOL_F64, "seed {seed}: f64 error {e64}");
    }
}

#[test]
fn rgc_layer_matches_loop_oracle() {
    for seed in 0..INSTANCES {
        let e32 = rgc_layer_case::<f32>(300 + seed);
        let e64 = rgc_layer_case::<f64>(300 + seed);
        assert!(e32 <= TOL_F32, "seed {seed}: f32 error {e32}");
        assert!(e64 <= TOL_F64, "seed {seed}: f64 error {e64}");
    }
}

//! Brute-force reference implementations shared by the integration suites
//! and the acceptance runner. They accumulate in f64 and share no code with
//! the library kernels.
#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgcseg::autodiff::Graph;
use rgcseg::rgc::{self, GraphLayerVars, GraphParams};
use rgcseg::tensor::{kernels, Element, Tensor};

pub const INSTANCES: u64 = 24;
pub const TOL_F32: f64 = 1e-6;
pub const TOL_F64: f64 = 1e-12;

pub fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

pub fn as_f64<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

pub fn max_abs_diff<T: Element>(got: &Tensor<T>, want: &[f64]) -> f64 {
    assert_eq!(got.numel(), want.len());
    as_f64(got)
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn conv_case<T: Element>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=3usize);
    let stride = rng.random_range(1..=2usize);
    let pad = rng.random_range(0..=k.min(2));
    let (n, cin, cout) = (
        rng.random_range(1..=2usize),
        rng.random_range(1..=3usize),
        rng.random_range(1..=3usize),
    );
    let (h, w) = (rng.random_range(k..=7usize), rng.random_range(k..=7usize));
    let x = uniform::<T>(&mut rng, &[n, cin, h, w]);
    let wt = uniform::<T>(&mut rng, &[cout, cin, k, k]);
    let b = uniform::<T>(&mut rng, &[cout]);
    let got = kernels::conv2d(&x, &wt, Some(&b), stride, pad).unwrap();
    let (want, ho, wo) = conv_oracle(
        &as_f64(&x),
        (n, cin, h, w),
        &as_f64(&wt),
        (cout, k, k),
        &as_f64(&b),
        stride,
        pad,
    );
    assert_eq!(got.shape(), &[n, cout, ho, wo]);
    max_abs_diff(&got, &want)
}



pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

pub fn matmul_case<T: Element>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (
        rng.random_range(1..=6usize),
        rng.random_range(1..=6usize),
        rng.random_range(1..=6usize),
    );
    let batch = rng.random_range(1..=3usize);
    let mut worst = 0.0f64;

    let a = uniform::<T>(&mut rng, &[m, k]);
    let b = uniform::<T>(&mut rng, &[k, n]);
    let got = kernels::matmul(&a, &b).unwrap();
    worst = worst.max(max_abs_diff(&got, &matmul_oracle(&as_f64(&a), &as_f64(&b), m, k, n)));

    // shared left matrix, batched right operand
    let bb = uniform::<T>(&mut rng, &[batch, k, n]);
    let got = kernels::matmul(&a, &bb).unwrap();
    assert_eq!(got.shape(), &[batch, m, n]);
    let bf = as_f64(&bb);
    let want: Vec<f64> = (0..batch)
        .flat_map(|s| matmul_oracle(&as_f64(&a), &bf[s * k * n..(s + 1) * k * n], m, k, n))
        .collect();
    worst = worst.max(max_abs_diff(&got, &want));

    // batched left operand, shared right matrix
    let ab = uniform::<T>(&mut rng, &[batch, m, k]);
    let got = kernels::matmul(&ab, &b).unwrap();
    let af = as_f64(&ab);
    let want: Vec<f64> = (0..batch)
        .flat_map(|s| matmul_oracle(&af[s * m * k..(s + 1) * m * k], &as_f64(&b), m, k, n))
        .collect();
    worst.max(max_abs_diff(&got, &want))
}


/// Each output pixel as a weighted sum over *all* input pixels with the
/// tent kernel `max(0, 1 - |src - i|)`, source coordinate
/// `clamp((dst + 0.5) / s - 0.5, 0, n - 1)`.
pub fn bilinear_oracle(x: &[f64], planes: usize, h: usize, w: usize, s: usize) -> Vec<f64> {
    let src = |dst: usize, n: usize| ((dst as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let (sy, sx) = (src(oy, h), src(ox, w));
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        acc += tent(sy - iy as f64) * tent(sx - ix as f64) * x[(p * h + iy) * w + ix];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn bilinear_case<T: Element>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..=2usize), rng.random_range(1..=3usize));
    let (h, w) = (rng.random_range(1..=5usize), rng.random_range(1..=5usize));
    let s = rng.random_range(1..=4usize);
    let x = uniform::<T>(&mut rng, &[n, c, h, w]);
    let got = kernels::upsample_bilinear(&x, s).unwrap();
    assert_eq!(got.shape(), &[n, c, h * s, w * s]);
    max_abs_diff(&got, &bilinear_oracle(&as_f64(&x), n * c, h, w, s))
}


/// `V_G[n, c, j] = sum_{c', i} W_G[c, c'] V_N[n, c', i] A_G[i, j]`.
pub fn graph_layer_oracle(v: &[f64], a: &[f64], wg: &[f64], n: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * d];
    for b in 0..n {
        for co in 0..c {
            for j in 0..d {
                let mut acc = 0.0;
                for ci in 0..c {
                    for i in 0..d {
                        acc += wg[co * c + ci] * v[(b * c + ci) * d + i] * a[i * d + j];
                    }
                }
                out[(b * c + co) * d + j] = acc;
            }
        }
    }
    out
}

pub fn rgc_layer_case<T: Element>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, d) = (
        rng.random_range(1..=2usize),
        rng.random_range(1..=5usize),
        rng.random_range(1..=9usize),
    );
    let v = uniform::<T>(&mut rng, &[n, c, d]);
    let a = uniform::<T>(&mut rng, &[d, d]);
    let wg = uniform::<T>(&mut rng, &[c, c]);
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let layer = GraphLayerVars {
        a_g: g.constant(a.clone()),
        w_g: g.constant(wg.clone()),
    };
    let out = rgc::rgc_layer(&mut g, vv, &[layer], false).unwrap();
    let want = graph_layer_oracle(&as_f64(&v), &as_f64(&a), &as_f64(&wg), n, c, d);
    max_abs_diff(g.value(out), &want)
}

/// Forward scatter on doubled centred coordinates `X = 2c - (n-1)`, which
/// stay integral under quarter turns and mirrors of a square canvas.
pub fn permutation_oracle(src: &Tensor<f64>, quarter_turns: i32, flip_x: bool, flip_y: bool) -> Tensor<f64> {
    let s = src.shape();
    let (n, planes) = (s[s.len() - 1], src.numel() / (s[s.len() - 1] * s[s.len() - 2]));
    assert_eq!(s[s.len() - 2], n);
    let (cos, sin) = match quarter_turns.rem_euclid(4) {
        0 => (1, 0),
        1 => (0, 1),
        2 => (-1, 0),
        _ => (0, -1),
    };
    let m = n as i64 - 1;
    let mut out = vec![f64::NAN; src.numel()];
    for p in 0..planes {
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (2 * c as i64 - m, 2 * r as i64 - m);
                let (mut x2, mut y2) = (cos * x - sin * y, sin * x + cos * y);
                if flip_x {
                    x2 = -x2;
                }
                if flip_y {
                    y2 = -y2;
                }
                let (c2, r2) = (((x2 + m) / 2) as usize, ((y2 + m) / 2) as usize);
                out[(p * n + r2) * n + c2] = src.data()[(p * n + r) * n + c];
            }
        }
    }
    assert!(out.iter().all(|v| !v.is_nan()), "oracle must be a bijection");
    Tensor::new(s.to_vec(), out).unwrap()
}

pub fn fixed_point_params<T: Element>(c: usize, size: usize, d: usize) -> GraphParams<T> {
    let mut p = rgc::init_graph_params::<T>(3, c, size, size, d, 1).unwrap();
    let eye = |n: usize| Tensor::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() });
    let avg = T::from_f64_lossy(1.0 / (d * d) as f64);
    p.phi_weight = Tensor::from_fn([c, c, d, d], |i| if i / (c * d * d) == (i / (d * d)) % c { avg } else { T::zero() });
    p.phi_bias = Tensor::zeros([c]);
    p.sigma_weight = Tensor::zeros([c, c, d, d]);
    p.sigma_bias = Tensor::zeros([c]);
    p.layers[0].a_g = eye((size / d) * (size / d));
    p.layers[0].w_g = eye(c);
    p
}

pub fn fixed_point_error<T: Element>(c: usize, size: usize, d: usize, value: f64) -> f64 {
    let p = fixed_point_params::<T>(c, size, d);
    let x = Tensor::full([1, c, size, size], T::from_f64_lossy(value));
    let y = p.forward(&x, false).unwrap();
    assert_eq!(y.shape(), &[1, 2 * c, size, size]);
    y.data()[c * size * size..]
        .iter()
        .map(|v| (v.to_f64_lossy() - value).abs())
        .fold(0.0, f64::max)
}

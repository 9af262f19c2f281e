//! Central-difference verification of backward rules.
//!
//! [`grad_check`] compares the reverse-mode gradient of a scalar function
//! against `(f(x + eps) - f(x - eps)) / 2eps` for every input element. The
//! suite in [`run_suite`] covers every graph op plus the composite model
//! pieces; the CLI `gradcheck` command prints it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::rgc;
use crate::tensor::{kernels, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-6;
/// Seeds every suite case is evaluated on.
pub const SUITE_SEEDS: [u64; 3] = [11, 23, 47];

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let mut out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        out = g.sum(out);
    }
    if let Some((_, op)) = g.first_non_finite() {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    Ok((g, vars, out))
}

/// Maximum over all input elements of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// Non-scalar outputs are sum-reduced first.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(&f, inputs)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    drop(g);

    let scalar = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, out) = evaluate(&f, perturbed)?;
        Ok(g.value(out).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = scalar(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = scalar(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

/// One row of the suite report.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// A named check: builds inputs from a seed and returns the maximum error.
pub struct CheckCase {
    pub name: String,
    pub run: Box<dyn Fn(u64) -> Result<f64>>,
}

impl CheckCase {
    pub fn new(name: impl Into<String>, run: impl Fn(u64) -> Result<f64> + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-op cases; `full` adds the composite RGC and model cases.
pub fn suite_cases(full: bool) -> Vec<CheckCase> {
    let mut cases = vec![
        CheckCase::new("conv2d", |seed| {
            let mut r = rng(seed);
            let inputs = [
                normal_tensor(&mut r, &[1, 2, 5, 5], 1.0),
                normal_tensor(&mut r, &[3, 2, 3, 3], 0.5),
                normal_tensor(&mut r, &[3], 0.5),
            ];
            grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    Ok(g.relu(y))
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("conv2d_strided", |seed| {
            let mut r = rng(seed);
            let inputs = [
                normal_tensor(&mut r, &[2, 2, 6, 6], 1.0),
                normal_tensor(&mut r, &[2, 2, 2, 2], 0.5),
                normal_tensor(&mut r, &[2], 0.5),
            ];
            grad_check(
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 0),
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("matmul", |seed| {
            let mut r = rng(seed);
            let inputs = [
                normal_tensor(&mut r, &[3, 4], 1.0),
                normal_tensor(&mut r, &[4, 5], 1.0),
                normal_tensor(&mut r, &[2, 5, 3], 1.0),
            ];
            grad_check(
                |g, v| {
                    let ab = g.matmul(v[0], v[1])?;
                    // batched right operand, then batched left operand
                    let batched = g.matmul(ab, v[2])?;
                    let sq = g.relu(batched);
                    g.matmul(sq, v[0])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("bilinear_upsample", |seed| {
            let mut r = rng(seed);
            let inputs = [
                normal_tensor(&mut r, &[1, 2, 3, 4], 1.0),
                normal_tensor(&mut r, &[1, 2, 9, 12], 1.0),
            ];
            grad_check(
                |g, v| {
                    let up = g.upsample_bilinear(v[0], 3)?;
                    elementwise_product(g, up, v[1])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("concat_channels", |seed| {
            let mut r = rng(seed);
            let inputs = [
                normal_tensor(&mut r, &[2, 2, 3, 3], 1.0),
                normal_tensor(&mut r, &[2, 3, 3, 3], 1.0),
                normal_tensor(&mut r, &[2, 5, 3, 3], 1.0),
            ];
            grad_check(
                |g, v| {
                    let c = g.concat_channels(v[0], v[1])?;
                    elementwise_product(g, c, v[2])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("reshape", |seed| {
            let mut r = rng(seed);
            let inputs = [
                normal_tensor(&mut r, &[1, 4, 2, 3], 1.0),
                normal_tensor(&mut r, &[4, 6], 1.0),
            ];
            grad_check(
                |g, v| {
                    let flat = g.reshape(v[0], &[4, 6])?;
                    elementwise_product(g, flat, v[1])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("add", |seed| {
            let mut r = rng(seed);
            let inputs = [
                normal_tensor(&mut r, &[2, 3], 1.0),
                normal_tensor(&mut r, &[2, 3], 1.0),
                normal_tensor(&mut r, &[2, 3], 1.0),
            ];
            grad_check(
                |g, v| {
                    let s = g.add(v[0], v[1])?;
                    elementwise_product(g, s, v[2])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("relu", |seed| {
            let mut r = rng(seed);
            let inputs = [
                away_from_zero(normal_tensor(&mut r, &[3, 4], 1.0)),
                normal_tensor(&mut r, &[3, 4], 1.0),
            ];
            grad_check(
                |g, v| {
                    let a = g.relu(v[0]);
                    elementwise_product(g, a, v[1])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("sigmoid", |seed| {
            let mut r = rng(seed);
            let inputs = [
                normal_tensor(&mut r, &[3, 4], 2.0),
                normal_tensor(&mut r, &[3, 4], 1.0),
            ];
            grad_check(
                |g, v| {
                    let a = g.sigmoid(v[0]);
                    elementwise_product(g, a, v[1])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("scale_by", |seed| {
            let mut r = rng(seed);
            let inputs = [normal_tensor(&mut r, &[5], 1.0), normal_tensor(&mut r, &[5], 1.0)];
            grad_check(
                |g, v| {
                    let a = g.scale(v[0], -2.5);
                    elementwise_product(g, a, v[1])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("mean", |seed| {
            let mut r = rng(seed);
            let inputs = [normal_tensor(&mut r, &[2, 3, 4], 1.0)];
            grad_check(
                |g, v| {
                    let sq = elementwise_square(g, v[0])?;
                    g.mean(sq)
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("bce_loss", |seed| {
            let mut r = rng(seed);
            let logits = normal_tensor(&mut r, &[1, 3, 4, 4], 2.0);
            let masks = Tensor::from_fn([1, 3, 4, 4], |i| ((i * 7 + seed as usize) % 3 == 0) as u8 as f64);
            grad_check(
                move |g, v| g.bce_loss(v[0], masks.clone()),
                &[logits],
                DEFAULT_EPS,
            )
        }),
        CheckCase::new("rgc_layer", |seed| {
            let mut r = rng(seed);
            let inputs = [
                normal_tensor(&mut r, &[3, 3], 1.0),
                normal_tensor(&mut r, &[3, 4], 1.0),
                normal_tensor(&mut r, &[4, 4], 1.0),
                normal_tensor(&mut r, &[3, 4], 1.0),
            ];
            grad_check(
                |g, v| {
                    let layer = rgc::GraphLayerVars { a_g: v[2], w_g: v[0] };
                    let out = rgc::rgc_layer(g, v[1], &[layer], false)?;
                    elementwise_product(g, out, v[3])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
    ];
    if full {
        cases.push(CheckCase::new("rgc_forward", |seed| {
            let params = rgc::init_graph_params::<f64>(seed, 4, 8, 8, 2, 1)?;
            let mut r = rng(seed ^ 0x5eed);
            let x = normal_tensor(&mut r, &[1, 4, 8, 8], 1.0);
            let (mut inputs, names) = params.to_named_tensors();
            inputs.insert(0, x);
            let d = params.stride();
            grad_check(
                |g, v| {
                    let vars = rgc::RgcVars::from_ordered(&names, &v[1..], d)?;
                    rgc::rgc_forward(g, v[0], &vars, false)
                },
                &inputs,
                DEFAULT_EPS,
            )
        }));
        cases.push(CheckCase::new("encoder_forward", |seed| {
            let cfg = gradcheck_model_config();
            model_piece_check(&cfg, seed, Piece::Encoder)
        }));
        cases.push(CheckCase::new("head_forward", |seed| {
            let cfg = gradcheck_model_config();
            model_piece_check(&cfg, seed, Piece::Head)
        }));
        cases.push(CheckCase::new("loss@model", |seed| {
            let cfg = gradcheck_model_config();
            model_piece_check(&cfg, seed, Piece::Loss)
        }));
    }
    cases
}

/// Small model used by the end-to-end checks: 1x2x8x8 input, d = 2.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        channels: 4,
        height: 8,
        width: 8,
        stride: 2,
        layers: 1,
        num_classes: 6,
        use_rgc: true,
        use_aug: false,
        encoder_blocks: 1,
        rgc_post_activation: false,
    }
}

#[derive(Clone, Copy)]
enum Piece {
    Encoder,
    Head,
    Loss,
}

fn model_piece_check(cfg: &ModelConfig, seed: u64, piece: Piece) -> Result<f64> {
    let store = model::init_params::<f64>(cfg, seed)?;
    let mut r = rng(seed ^ 0xfeed);
    let head_in = cfg.head_in_channels();
    let x = match piece {
        Piece::Head => normal_tensor(&mut r, &[1, head_in, cfg.height, cfg.width], 1.0),
        _ => normal_tensor(&mut r, &[1, cfg.in_channels, cfg.height, cfg.width], 1.0),
    };
    let masks = Tensor::from_fn([1, cfg.num_classes, cfg.height, cfg.width], |i| {
        ((i * 13 + seed as usize) % 5 < 2) as u8 as f64
    });
    let prefix = match piece {
        Piece::Encoder => "enc.",
        Piece::Head => "head.",
        Piece::Loss => "",
    };
    let selected: Vec<(String, Tensor<f64>)> = store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| {
            // the initial head readout is zero, which would starve every
            // upstream gradient; check a generic random head instead
            if !n.starts_with("head.") {
                return (n.to_string(), t.clone());
            }
            let std = match t.shape() {
                [_, cin, kh, kw] => (2.0 / (cin * kh * kw) as f64).sqrt(),
                _ => 0.1,
            };
            (n.to_string(), normal_tensor(&mut r, t.shape(), std))
        })
        .collect();
    let names: Vec<String> = selected.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs = vec![x];
    inputs.extend(selected.into_iter().map(|(_, t)| t));
    grad_check(
        |g, v| {
            let bound = model::BoundParams::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
            match piece {
                Piece::Encoder => model::encoder_forward(g, cfg, &bound, v[0]),
                Piece::Head => model::head_forward(g, cfg, &bound, v[0]),
                Piece::Loss => {
                    let logits = model::model_forward(g, cfg, &bound, v[0])?;
                    g.bce_loss(logits, masks.clone())
                }
            }
        },
        &inputs,
        DEFAULT_EPS,
    )
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// `sum(a * b)` built from graph primitives via a custom node, so checks of
/// linear ops see a non-uniform output weighting.
fn elementwise_product(g: &mut Graph<f64>, a: Var, b: Var) -> Result<Var> {
    let (va, vb) = (g.value(a), g.value(b));
    if va.shape() != vb.shape() {
        return Err(Error::shape(
            "elementwise_product",
            format!("{:?} vs {:?}", va.shape(), vb.shape()),
        ));
    }
    let value = Tensor::new(
        va.shape().to_vec(),
        va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
    )?;
    Ok(g.custom(
        "product",
        &[a, b],
        value,
        Box::new(|inputs, _out, grad| {
            let ga = kernels_mul(inputs[1], grad);
            let gb = kernels_mul(inputs[0], grad);
            vec![ga, gb]
        }),
    ))
}

fn elementwise_square(g: &mut Graph<f64>, a: Var) -> Result<Var> {
    let value = g.value(a).map(|v| v * v);
    Ok(g.custom(
        "square",
        &[a],
        value,
        Box::new(|inputs, _out, grad| vec![kernels::scale(&kernels_mul(inputs[0], grad), 2.0)]),
    ))
}

fn kernels_mul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
    .expect("same shape")
}

/// Runs every case over [`SUITE_SEEDS`] and keeps the worst error per case.
pub fn run_cases(cases: &[CheckCase]) -> Result<Vec<CheckRow>> {
    cases
        .iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for seed in SUITE_SEEDS {
                worst = worst.max((case.run)(seed)?);
            }
            Ok(CheckRow {
                name: case.name.clone(),
                max_rel_error: worst,
            })
        })
        .collect()
}

pub fn run_suite(full: bool) -> Result<Vec<CheckRow>> {
    run_cases(&suite_cases(full))
}

/// A relu whose backward rule is deliberately wrong (gradient halved); used
/// to confirm the suite detects broken rules.
pub fn sabotaged_relu_case() -> CheckCase {
    CheckCase::new("relu(sabotaged)", |seed| {
        let mut r = rng(seed);
        let inputs = [away_from_zero(normal_tensor(&mut r, &[3, 4], 1.0))];
        grad_check(
            |g, v| {
                let value = kernels::relu(g.value(v[0]));
                Ok(g.custom(
                    "relu_sabotaged",
                    &[v[0]],
                    value,
                    Box::new(|inputs, _out, grad| {
                        vec![kernels::scale(&kernels::relu_backward(inputs[0], grad), 0.5)]
                    }),
                ))
            },
            &inputs,
            DEFAULT_EPS,
        )
    })
}

//! SGD with momentum and the training state it mutates.

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SGD settings {self:?}")))
        }
    }
}

/// Everything needed to resume training: parameters, momentum buffers,
/// step counter and the seed the model was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub momenta: ParamStore<f32>,
    pub step: u64,
    pub sgd: SgdConfig,
    pub seed: u64,
}

/// Fresh state for `cfg`, with zero momenta and default SGD settings.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<TrainState> {
    let params = model::init_params::<f32>(cfg, seed)?;
    let momenta = params.zeros_like();
    Ok(TrainState {
        cfg: cfg.clone(),
        params,
        momenta,
        step: 0,
        sgd: SgdConfig::default(),
        seed,
    })
}

/// One update of every parameter:
/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
///
/// All gradients are checked before anything is mutated; a non-finite or
/// missing gradient aborts the step and names the parameter.
pub fn sgd_step(state: &mut TrainState, grads: &ParamStore<f32>) -> Result<()> {
    for (name, p) in state.params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("gradient {:?} for `{name}` {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of `{name}`"),
            });
        }
    }
    let lr = state.sgd.lr as f32;
    let mu = state.sgd.momentum as f32;
    let wd = state.sgd.weight_decay as f32;
    for ((name, p), (_, v)) in state.params.iter_mut().zip(state.momenta.iter_mut()) {
        let g = grads.get(name).expect("checked above");
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = mu * *vi + (gi + wd * *pi);
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_state(sgd: SgdConfig) -> TrainState {
        let mut params = ParamStore::new();
        params.push("w", Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        TrainState {
            cfg: ModelConfig::default(),
            momenta: params.zeros_like(),
            params,
            step: 0,
            sgd,
            seed: 0,
        }
    }

    fn grads(values: &[f64]) -> ParamStore<f32> {
        let mut g = ParamStore::new();
        g.push("w", Tensor::from_f64([values.len()], values).unwrap());
        g
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut s = tiny_state(SgdConfig {
            lr: 0.0,
            ..SgdConfig::default()
        });
        let before = s.params.clone();
        sgd_step(&mut s, &grads(&[3.0, 1.0, -7.0])).unwrap();
        assert_eq!(s.params, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn vanilla_sgd_update() {
        let mut s = tiny_state(SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        sgd_step(&mut s, &grads(&[2.0, 1.0, -1.0])).unwrap();
        assert_eq!(s.params.get("w").unwrap().data(), &[0.0, -2.5, 1.0]);
    }

    #[test]
    fn momentum_two_step_unroll() {
        let (lr, g) = (0.1f64, 0.25f64);
        let mut s = tiny_state(SgdConfig {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        let start = s.params.get("w").unwrap().clone();
        for _ in 0..2 {
            sgd_step(&mut s, &grads(&[g, g, g])).unwrap();
        }
        let expected = lr * g * (1.0 + 1.9);
        for (a, b) in start.data().iter().zip(s.params.get("w").unwrap().data()) {
            assert!(((a - b) as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut s = tiny_state(SgdConfig::default());
        let before = s.clone();
        let err = sgd_step(&mut s, &grads(&[1.0, f64::NAN, 0.0])).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(s, before);
    }

    #[test]
    fn build_model_is_deterministic() {
        let cfg = ModelConfig {
            height: 16,
            width: 16,
            ..ModelConfig::default()
        };
        assert_eq!(build_model(&cfg, 3).unwrap(), build_model(&cfg, 3).unwrap());
        assert_ne!(
            build_model(&cfg, 3).unwrap().params,
            build_model(&cfg, 4).unwrap().params
        );
    }
}

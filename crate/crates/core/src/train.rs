//! Training loop, evaluation and checkpoints.
//!
//! Each sample gets its own graph; per-sample gradients are summed in
//! sample order, so results do not depend on the worker count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{self, AugConfig};
use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::metrics::{IouAccumulator, SegMetrics};
use crate::model::{self, ModelConfig, ParamStore};
use crate::optim::{self, TrainState};
use crate::synth::SceneSample;
use crate::tensor::Tensor;

const MOMENTUM_PREFIX: &str = "momentum:";
/// Environment variable capping the worker count; 0 or unset is serial.
pub const THREADS_ENV: &str = "RGCSEG_THREADS";

/// Worker count from [`THREADS_ENV`].
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

/// Runs `f(i)` for `i in 0..n`, on `threads` workers when nonzero, and
/// returns the results in index order.
fn map_ordered<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync + Send) -> Result<Vec<R>> {
    if threads == 0 || n <= 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

/// Checks that every sample matches the model's input geometry.
pub fn check_compat(cfg: &ModelConfig, samples: &[SceneSample]) -> Result<()> {
    let want_f = [cfg.in_channels, cfg.height, cfg.width];
    let want_m = [cfg.num_classes, cfg.height, cfg.width];
    for (i, s) in samples.iter().enumerate() {
        if s.features.shape() != want_f || s.masks.shape() != want_m {
            return Err(Error::shape(
                "data",
                format!(
                    "sample {i}: expected features {:?} and masks {:?}, found {:?} and {:?}",
                    want_f,
                    want_m,
                    s.features.shape(),
                    s.masks.shape()
                ),
            ));
        }
    }
    Ok(())
}

fn batch_of(t: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(shape).expect("same element count")
}

/// Mean BCE of one sample and the gradient of every parameter, in store order.
pub fn sample_loss_and_grads(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    features: &Tensor<f32>,
    masks: &Tensor<f32>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(batch_of(features));
    let logits = model::model_forward(&mut g, cfg, &bound, x)?;
    let loss = g.bce_loss(logits, batch_of(masks))?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        let op = g
            .first_non_finite()
            .map(|(_, name)| name.to_string())
            .unwrap_or_else(|| "bce_loss".into());
        return Err(Error::NonFinite { op });
    }
    let mut grads = g.backward(loss)?;
    let out = bound
        .iter()
        .zip(params.iter())
        .map(|((_, v), (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((value, out))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    crate::synth::sample_seed(crate::synth::sample_seed(seed, a), b)
}

/// Features and masks of `sample` as seen at `step`: augmented with a
/// transform drawn from `(seed, step, index)` when `aug` is given.
pub fn training_view(
    sample: &SceneSample,
    aug: Option<&AugConfig>,
    seed: u64,
    step: u64,
    index: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    match aug {
        None => Ok((sample.features.clone(), sample.masks.clone())),
        Some(cfg) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, index as u64));
            let t = augment::sample_transform(&mut rng, cfg)?;
            Ok((
                augment::augment_bev(&sample.features, &t)?,
                augment::augment_gt(&sample.masks, &t)?,
            ))
        }
    }
}

/// Sample indices used at `step`: everything when `batch_size` is 0 or
/// covers the set, otherwise consecutive slices of per-epoch shuffles.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    if batch_size == 0 || batch_size >= n {
        return (0..n).collect();
    }
    let start = step as usize * batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + batch_size)
        .map(|q| {
            let epoch = q / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX, epoch as u64));
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("set above").1[q % n]
        })
        .collect()
}

/// One SGD step on `indices`. Returns the mean loss before the update.
pub fn train_step(
    state: &mut TrainState,
    samples: &[SceneSample],
    indices: &[usize],
    aug: Option<&AugConfig>,
    threads: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let step = state.step;
    let seed = state.seed;
    let cfg = &state.cfg;
    let params = &state.params;
    let results = map_ordered(indices.len(), threads, |j| {
        let i = indices[j];
        let (f, m) = training_view(&samples[i], aug, seed, step, i)?;
        sample_loss_and_grads(cfg, params, &f, &m)
    })?;
    let inv = 1.0 / indices.len() as f32;
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor<f32>>> = None;
    for r in results {
        let (l, grads) = r?;
        loss += l;
        match total.as_mut() {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    let mut store = ParamStore::new();
    for ((name, _), g) in state.params.iter().zip(total.expect("non-empty batch")) {
        store.push(name, g.map(|v| v * inv));
    }
    optim::sgd_step(state, &store)?;
    Ok(loss / indices.len() as f64)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub threads: usize,
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

/// Fresh state for `run`, with its SGD settings applied.
pub fn init_state(run: &RunConfig) -> Result<TrainState> {
    run.validate()?;
    let mut state = optim::build_model(&run.model, run.seed)?;
    state.sgd = run.sgd;
    Ok(state)
}

/// Trains `state` for `run.steps` steps and returns the per-step losses.
///
/// The checkpoint is written before the first step, every `save_every`
/// steps and at the end. A failing step leaves the last checkpoint intact.
pub fn train(
    state: &mut TrainState,
    run: &RunConfig,
    samples: &[SceneSample],
    opts: &TrainOptions,
    mut on_step: impl FnMut(u64, f64),
) -> Result<Vec<f64>> {
    run.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    check_compat(&state.cfg, samples)?;
    let aug = run.model.use_aug.then_some(run.aug);
    let mut log = match &opts.loss_log {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "step,loss").map_err(|e| Error::io(p, e))?;
            Some((p.clone(), w))
        }
        None => None,
    };
    let save = |state: &TrainState| -> Result<()> {
        match &opts.checkpoint {
            Some(p) => save_checkpoint(state, run, p),
            None => Ok(()),
        }
    };
    save(state)?;
    let mut losses = Vec::with_capacity(run.steps as usize);
    for k in 0..run.steps {
        let idx = batch_indices(samples.len(), run.batch_size, run.seed, state.step);
        let step = state.step;
        let loss = train_step(state, samples, &idx, aug.as_ref(), opts.threads)?;
        if let Some((p, w)) = log.as_mut() {
            writeln!(w, "{step},{loss}").and_then(|_| w.flush()).map_err(|e| Error::io(&*p, e))?;
        }
        losses.push(loss);
        on_step(step, loss);
        let done = k + 1 == run.steps;
        if !done && run.save_every > 0 && state.step % run.save_every == 0 {
            save(state)?;
        }
    }
    if run.steps > 0 {
        save(state)?;
    }
    Ok(losses)
}

/// Dataset-level IoU of the model on `samples` (no augmentation).
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    samples: &[SceneSample],
    threads: usize,
) -> Result<SegMetrics> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    check_compat(cfg, samples)?;
    let parts = map_ordered(samples.len(), threads, |i| -> Result<IouAccumulator> {
        let logits = model::predict(cfg, params, &batch_of(&samples[i].features))?;
        let mut acc = IouAccumulator::new(cfg.num_classes);
        acc.add(&logits, &batch_of(&samples[i].masks))?;
        Ok(acc)
    })?;
    let mut acc = IouAccumulator::new(cfg.num_classes);
    for p in parts {
        acc.merge(&p?);
    }
    Ok(acc.finish())
}

/// Mean BCE over `samples` without augmentation.
pub fn dataset_loss(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    samples: &[SceneSample],
    threads: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    check_compat(cfg, samples)?;
    let parts = map_ordered(samples.len(), threads, |i| -> Result<f64> {
        let s = &samples[i];
        let logits = model::predict(cfg, params, &batch_of(&s.features))?;
        Ok(crate::tensor::kernels::bce_with_logits(&logits, &batch_of(&s.masks))? as f64)
    })?;
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / samples.len() as f64)
}

/// Parameters, momentum buffers and a metadata record holding the step and
/// the full run config echo.
pub fn checkpoint_container(state: &TrainState, run: &RunConfig) -> Container {
    let mut c = Container::new();
    for (name, t) in state.params.iter() {
        c.push(name, t.clone());
    }
    for (name, t) in state.momenta.iter() {
        c.push(format!("{MOMENTUM_PREFIX}{name}"), t.clone());
    }
    let mut run = run.clone();
    run.model = state.cfg.clone();
    run.sgd = state.sgd;
    run.seed = state.seed;
    c.metadata = Some(format!("step={}\n{}", state.step, run.echo()));
    c
}

pub fn save_checkpoint(state: &TrainState, run: &RunConfig, path: &Path) -> Result<()> {
    checkpoint_container(state, run).write(path)
}

/// Reads a checkpoint back into a training state and its run config.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, RunConfig)> {
    let c = Container::read(path)?;
    let meta = c
        .metadata
        .as_deref()
        .ok_or_else(|| Error::format(path, "checkpoint has no metadata record"))?;
    let (first, rest) = meta.split_once('\n').unwrap_or((meta, ""));
    let step = first
        .strip_prefix("step=")
        .and_then(|s| s.trim().parse::<u64>().ok())
        .ok_or_else(|| Error::format(path, "metadata must start with step=<n>"))?;
    let run = RunConfig::parse(rest).map_err(|e| Error::format(path, e.to_string()))?;
    let expected = model::init_params::<f32>(&run.model, run.seed)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut params = ParamStore::new();
    let mut momenta = ParamStore::new();
    for (name, init) in expected.iter() {
        for (store, key) in [
            (&mut params, name.to_string()),
            (&mut momenta, format!("{MOMENTUM_PREFIX}{name}")),
        ] {
            let t = c
                .get(&key)
                .ok_or_else(|| Error::format(path, format!("missing tensor `{key}`")))?
                .to_float::<f32>();
            if t.shape() != init.shape() {
                return Err(Error::format(
                    path,
                    format!("`{key}` has shape {:?}, expected {:?}", t.shape(), init.shape()),
                ));
            }
            store.push(name, t);
        }
    }
    let state = TrainState {
        cfg: run.model.clone(),
        params,
        momenta,
        step,
        sgd: run.sgd,
        seed: run.seed,
    };
    Ok((state, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthSpec};

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model.height = 16;
        run.model.width = 16;
        run.model.channels = 4;
        run.model.stride = 4;
        run.model.encoder_blocks = 1;
        run.steps = 2;
        run
    }

    fn tiny_data(n: usize) -> Vec<SceneSample> {
        generate_dataset(&SynthSpec::square(16), 3, n).unwrap()
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, 9, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(4, 0, 1, 7), vec![0, 1, 2, 3]);
    }

    #[test]
    fn serial_and_parallel_steps_agree() {
        let run = tiny_run();
        let data = tiny_data(3);
        let mut a = init_state(&run).unwrap();
        let mut b = a.clone();
        let aug = AugConfig::default();
        let la = train_step(&mut a, &data, &[0, 1, 2], Some(&aug), 0).unwrap();
        let lb = train_step(&mut b, &data, &[0, 1, 2], Some(&aug), 2).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let run = tiny_run();
        let data = tiny_data(2);
        let mut state = init_state(&run).unwrap();
        train_step(&mut state, &data, &[0, 1], None, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.rgct");
        save_checkpoint(&state, &run, &p).unwrap();
        let (back, run_back) = load_checkpoint(&p).unwrap();
        assert_eq!(back, state);
        assert_eq!(run_back, run);
    }

    #[test]
    fn evaluate_rejects_empty_and_mismatched_sets() {
        let run = tiny_run();
        let state = init_state(&run).unwrap();
        assert!(evaluate(&state.cfg, &state.params, &[], 0).is_err());
        let other = generate_dataset(&SynthSpec::square(32), 1, 1).unwrap();
        let e = evaluate(&state.cfg, &state.params, &other, 0).unwrap_err().to_string();
        assert!(e.contains("expected") && e.contains("found"), "{e}");
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_checkpoint() {
        let mut run = tiny_run();
        run.sgd.lr = 1e30;
        run.steps = 20;
        let data = tiny_data(2);
        let mut state = init_state(&run).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            checkpoint: Some(dir.path().join("c.rgct")),
            ..TrainOptions::default()
        };
        let err = train(&mut state, &run, &data, &opts, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        let (saved, _) = load_checkpoint(&dir.path().join("c.rgct")).unwrap();
        assert!(saved.params.iter().all(|(_, t)| t.all_finite()));
    }
}

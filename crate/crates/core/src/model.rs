//! Segmentation network: toy BEV encoder, optional RGC block, and the
//! nine-layer segmentation head.
//!
//! ```text
//! features [N,Cin,H,W]
//!   -> enc.lift (1x1) -> encoder_blocks x (3x3 conv, relu, 3x3 conv, + skip)   [N,C,H,W]
//!   -> rgc_forward (when use_rgc)                                              [N,2C,H,W]
//!   -> head.0..head.7 (3x3, relu) -> head.8 (1x1)                              [N,K,H,W]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::rgc::{self, RgcVars};
use crate::tensor::{Element, Tensor};

/// Number of 3x3 layers in the head; a final 1x1 layer follows them.
pub const HEAD_3X3_LAYERS: usize = 8;
/// Total head conv layers, serialized as `head.0` .. `head.8`.
pub const HEAD_LAYERS: usize = HEAD_3X3_LAYERS + 1;

// Head init: each 3x3 layer starts as identity plus scaled Kaiming noise, the
// 1x1 readout starts at zero with a bias that predicts "absent". A plain
// Kaiming head compounds gain over eight layers and diverges at lr 0.05.
const HEAD_NOISE_SCALE: f64 = 0.1;
const HEAD_BIAS_INIT: f64 = -3.0;

/// Segmentation classes in channel order.
pub const CLASS_NAMES: [&str; 6] = [
    "drivable_area",
    "ped_crossing",
    "walkway",
    "stop_line",
    "carpark_area",
    "divider",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of the input feature raster.
    pub in_channels: usize,
    /// BEV feature channels `C` after the encoder.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// RGC projection stride `d`.
    pub stride: usize,
    /// Number of graph layers.
    pub layers: usize,
    pub num_classes: usize,
    pub use_rgc: bool,
    pub use_aug: bool,
    pub encoder_blocks: usize,
    pub rgc_post_activation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            channels: 16,
            height: 64,
            width: 64,
            stride: 8,
            layers: 1,
            num_classes: CLASS_NAMES.len(),
            use_rgc: true,
            use_aug: true,
            encoder_blocks: 2,
            rgc_post_activation: false,
        }
    }
}

impl ModelConfig {
    /// Full-scale geometry: 64 channels at 128 x 128.
    pub fn full_scale() -> Self {
        Self {
            channels: 64,
            height: 128,
            width: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.in_channels == 0 || self.channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("BEV resolution must be positive".into()));
        }
        if self.use_rgc {
            rgc::validate_geometry(self.channels, self.height, self.width, self.stride)?;
            if self.layers == 0 {
                return Err(Error::Config("rgc needs at least one graph layer".into()));
            }
        }
        Ok(())
    }

    /// `2C` with the RGC concat, `C` without.
    pub fn head_in_channels(&self) -> usize {
        if self.use_rgc {
            2 * self.channels
        } else {
            self.channels
        }
    }

    /// Ablation variant label: A (baseline), B (+RGC), C (+aug), E (+both).
    pub fn variant(&self) -> char {
        match (self.use_aug, self.use_rgc) {
            (false, false) => 'A',
            (false, true) => 'B',
            (true, false) => 'C',
            (true, true) => 'E',
        }
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// Registers every tensor as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams::from_vars(
            self.entries
                .iter()
                .map(|(n, t)| (n.clone(), g.param(t.clone()))),
        )
    }
}

/// Parameter names mapped to graph handles.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.try_get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

fn conv_param<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    store.push(
        format!("{name}.w"),
        init::kaiming_uniform(rng, &[cout, cin, k, k], cin * k * k),
    );
    store.push(format!("{name}.b"), Tensor::zeros([cout]));
}

fn encoder_block_names(i: usize) -> (String, String) {
    (format!("enc.block{i}.conv1"), format!("enc.block{i}.conv2"))
}

/// Initializes every parameter of the network for `cfg`, deterministically
/// in `seed`.
pub fn init_params<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.channels;

    conv_param(&mut store, &mut rng, "enc.lift", c, cfg.in_channels, 1);
    for i in 0..cfg.encoder_blocks {
        let (conv1, conv2) = encoder_block_names(i);
        conv_param(&mut store, &mut rng, &conv1, c, c, 3);
        conv_param(&mut store, &mut rng, &conv2, c, c, 3);
    }

    if cfg.use_rgc {
        let rgc_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
        let params = rgc::init_graph_params::<T>(
            rgc_seed,
            c,
            cfg.height,
            cfg.width,
            cfg.stride,
            cfg.layers,
        )?;
        let (tensors, names) = params.to_named_tensors();
        for (name, t) in names.into_iter().zip(tensors) {
            store.push(name, t);
        }
    }

    let hidden = cfg.head_in_channels();
    for i in 0..HEAD_3X3_LAYERS {
        let scale = T::from_f64_lossy(HEAD_NOISE_SCALE);
        let mut w = init::kaiming_uniform::<T>(&mut rng, &[hidden, hidden, 3, 3], hidden * 9).map(|v| v * scale);
        for o in 0..hidden {
            let centre = ((o * hidden + o) * 3 + 1) * 3 + 1;
            w.data_mut()[centre] += T::one();
        }
        store.push(format!("head.{i}.w"), w);
        store.push(format!("head.{i}.b"), Tensor::zeros([hidden]));
    }
    let last = format!("head.{HEAD_3X3_LAYERS}");
    store.push(format!("{last}.w"), Tensor::zeros([cfg.num_classes, hidden, 1, 1]));
    store.push(
        format!("{last}.b"),
        Tensor::full([cfg.num_classes], T::from_f64_lossy(HEAD_BIAS_INIT)),
    );
    Ok(store)
}

fn conv<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    padding: usize,
) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), 1, padding)
}

/// 1x1 channel lift followed by `encoder_blocks` residual blocks.
pub fn encoder_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    features: Var,
) -> Result<Var> {
    let mut x = conv(g, p, "enc.lift", features, 0)?;
    for i in 0..cfg.encoder_blocks {
        let (conv1, conv2) = encoder_block_names(i);
        let h = conv(g, p, &conv1, x, 1)?;
        let h = g.relu(h);
        let h = conv(g, p, &conv2, h, 1)?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

/// Eight 3x3 convs with relu, then a 1x1 conv to raw per-class logits.
pub fn head_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    features: Var,
) -> Result<Var> {
    let (_, c, _, _) = g.value(features).dims4("head_forward")?;
    if c != cfg.head_in_channels() {
        return Err(Error::shape(
            "head_forward",
            format!(
                "head expects {} input channels, got {}",
                cfg.head_in_channels(),
                c
            ),
        ));
    }
    let mut x = features;
    for i in 0..HEAD_3X3_LAYERS {
        let y = conv(g, p, &format!("head.{i}"), x, 1)?;
        x = g.relu(y);
    }
    conv(g, p, &format!("head.{HEAD_3X3_LAYERS}"), x, 0)
}

/// Encoder, optional RGC block, head.
pub fn model_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    features: Var,
) -> Result<Var> {
    let mut x = encoder_forward(g, cfg, p, features)?;
    if cfg.use_rgc {
        let vars = RgcVars::from_lookup(cfg.layers, cfg.stride, |n| p.try_get(n))?;
        x = rgc::rgc_forward(g, x, &vars, cfg.rgc_post_activation)?;
    }
    head_forward(g, cfg, p, x)
}

/// Inference-only logits for a batch `[N, Cin, H, W]`.
pub fn predict<T: Element>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    features: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = BoundParams::from_vars(
        params
            .iter()
            .map(|(n, t)| (n.to_string(), g.constant(t.clone()))),
    );
    let x = g.constant(features.clone());
    let out = model_forward(&mut g, cfg, &bound, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(use_rgc: bool) -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            channels: 4,
            height: 8,
            width: 8,
            stride: 2,
            use_rgc,
            encoder_blocks: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn head_input_channels_follow_rgc_flag() {
        let mut cfg = small(true);
        assert_eq!(cfg.head_in_channels(), 8);
        cfg.use_rgc = false;
        assert_eq!(cfg.head_in_channels(), 4);
    }

    #[test]
    fn head_has_nine_conv_layers() {
        let store = init_params::<f32>(&small(true), 0).unwrap();
        let heads: Vec<&str> = store
            .names()
            .filter(|n| n.starts_with("head.") && n.ends_with(".w"))
            .collect();
        assert_eq!(heads.len(), HEAD_LAYERS);
        for (i, n) in heads.iter().enumerate() {
            assert_eq!(*n, format!("head.{i}.w"));
        }
        assert_eq!(store.get("head.8.w").unwrap().shape(), &[6, 8, 1, 1]);
        assert_eq!(store.get("head.3.w").unwrap().shape(), &[8, 8, 3, 3]);
    }

    #[test]
    fn zero_residual_encoder_returns_lifted_input() {
        let cfg = small(false);
        let mut store = init_params::<f64>(&cfg, 4).unwrap();
        for (name, t) in store.iter_mut() {
            if name.starts_with("enc.block") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let x = Tensor::from_fn([1, 2, 8, 8], |i| (i as f64 * 0.17).sin());
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let out = encoder_forward(&mut g, &cfg, &p, xv).unwrap();
        let lifted = conv(&mut g, &p, "enc.lift", xv, 0).unwrap();
        assert_eq!(g.value(out), g.value(lifted));
        assert_eq!(g.value(out).shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let cfg = small(true);
        let mut store = init_params::<f32>(&cfg, 1).unwrap();
        for (name, t) in store.iter_mut() {
            if name.starts_with("head.") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let logits = predict(&cfg, &store, &Tensor::ones([1, 2, 8, 8])).unwrap();
        assert_eq!(logits.shape(), &[1, 6, 8, 8]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_rejects_wrong_channel_count() {
        let cfg = small(true);
        let store = init_params::<f32>(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros([1, 4, 8, 8]));
        assert!(head_forward(&mut g, &cfg, &p, x).is_err());
    }

    #[test]
    fn variant_labels() {
        let mut cfg = ModelConfig::default();
        let mut seen = String::new();
        for (aug, rgc) in [(false, false), (false, true), (true, false), (true, true)] {
            cfg.use_aug = aug;
            cfg.use_rgc = rgc;
            seen.push(cfg.variant());
        }
        assert_eq!(seen, "ABCE");
    }

    #[test]
    fn validate_catches_indivisible_stride() {
        let cfg = ModelConfig {
            height: 60,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            height: 60,
            use_rgc: false,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }
}

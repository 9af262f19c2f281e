//! Residual graph convolution block.
//!
//! Dataflow for an input `X: [N, C, H, W]` and stride `d`:
//!
//! ```text
//! V_D = phi(X)                  stride-d, d x d conv      [N, C, H/d, W/d]
//! V_N = reshape(V_D)                                      [N, C, D_N]
//! V_G = W_G . V_N . A_G         per graph layer           [N, C, D_N]
//! Y_G = reshape(V_G)                                      [N, C, H/d, W/d]
//! Y   = Y_G + sigma(X)          stride-d residual         [N, C, H/d, W/d]
//! X_G = bilinear_upsample(Y, d)                           [N, C, H, W]
//! out = concat(X, X_G)                                    [N, 2C, H, W]
//! ```
//!
//! `A_G` (node adjacency, `D_N x D_N`) mixes spatial regions and `W_G`
//! (channel weights, `C x C`) mixes channels. Both are free matrices: no
//! normalization or symmetry is imposed. With more than one graph layer the
//! products are applied in sequence, each layer with its own pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Element, Tensor};

/// Standard deviation of the initial `A_G` and `W_G` entries.
pub const GRAPH_INIT_STD: f64 = 0.01;

/// One graph layer's learned matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLayer<T> {
    /// Node adjacency, `D_N x D_N`.
    pub a_g: Tensor<T>,
    /// Channel weights, `C x C`.
    pub w_g: Tensor<T>,
}

/// Learned parameters of the RGC block.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams<T> {
    pub layers: Vec<GraphLayer<T>>,
    pub phi_weight: Tensor<T>,
    pub phi_bias: Tensor<T>,
    pub sigma_weight: Tensor<T>,
    pub sigma_bias: Tensor<T>,
    stride: usize,
    channels: usize,
    height: usize,
    width: usize,
}

/// Checks the feature geometry the block is configured for.
pub fn validate_geometry(channels: usize, height: usize, width: usize, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::Config("rgc stride d must be positive".into()));
    }
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "rgc feature shape {channels}x{height}x{width} must be non-empty"
        )));
    }
    if height % stride != 0 || width % stride != 0 {
        return Err(Error::Config(format!(
            "feature resolution {height}x{width} is not divisible by rgc stride {stride}"
        )));
    }
    Ok(())
}

/// Parameter names in serialization order.
pub fn param_names(layers: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(2 * layers + 4);
    for k in 0..layers {
        if layers == 1 {
            names.push("rgc.A_G".to_string());
            names.push("rgc.W_G".to_string());
        } else {
            names.push(format!("rgc.A_G.{k}"));
            names.push(format!("rgc.W_G.{k}"));
        }
    }
    for n in ["rgc.phi.w", "rgc.phi.b", "rgc.sigma.w", "rgc.sigma.b"] {
        names.push(n.to_string());
    }
    names
}

/// Random initialization: graph matrices from `N(0, 0.01^2)`, phi/sigma
/// weights Kaiming-uniform over their `C * d * d` fan-in, zero biases.
pub fn init_graph_params<T: Element>(
    seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    layers: usize,
) -> Result<GraphParams<T>> {
    validate_geometry(channels, height, width, stride)?;
    if layers == 0 {
        return Err(Error::Config("rgc needs at least one graph layer".into()));
    }
    let nodes = (height / stride) * (width / stride);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph_layers = (0..layers)
        .map(|_| GraphLayer {
            a_g: init::normal(&mut rng, &[nodes, nodes], GRAPH_INIT_STD),
            w_g: init::normal(&mut rng, &[channels, channels], GRAPH_INIT_STD),
        })
        .collect();
    let conv_shape = [channels, channels, stride, stride];
    let fan_in = channels * stride * stride;
    let phi_weight = init::kaiming_uniform(&mut rng, &conv_shape, fan_in);
    let sigma_weight = init::kaiming_uniform(&mut rng, &conv_shape, fan_in);
    Ok(GraphParams {
        layers: graph_layers,
        phi_weight,
        phi_bias: Tensor::zeros([channels]),
        sigma_weight,
        sigma_bias: Tensor::zeros([channels]),
        stride,
        channels,
        height,
        width,
    })
}

impl<T: Element> GraphParams<T> {
    /// Assembles parameters from explicit tensors, validating every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layers: Vec<GraphLayer<T>>,
        phi_weight: Tensor<T>,
        phi_bias: Tensor<T>,
        sigma_weight: Tensor<T>,
        sigma_bias: Tensor<T>,
        height: usize,
        width: usize,
        stride: usize,
    ) -> Result<Self> {
        let channels = phi_bias.numel();
        validate_geometry(channels, height, width, stride)?;
        let nodes = (height / stride) * (width / stride);
        let conv_shape = [channels, channels, stride, stride];
        let check = |name: &str, t: &Tensor<T>, want: &[usize]| {
            if t.shape() == want {
                Ok(())
            } else {
                Err(Error::shape(
                    "rgc",
                    format!("{name} has shape {:?}, expected {:?}", t.shape(), want),
                ))
            }
        };
        if layers.is_empty() {
            return Err(Error::Config("rgc needs at least one graph layer".into()));
        }
        for l in &layers {
            check("A_G", &l.a_g, &[nodes, nodes])?;
            check("W_G", &l.w_g, &[channels, channels])?;
        }
        check("phi.w", &phi_weight, &conv_shape)?;
        check("sigma.w", &sigma_weight, &conv_shape)?;
        check("sigma.b", &sigma_bias, &[channels])?;
        Ok(Self {
            layers,
            phi_weight,
            phi_bias,
            sigma_weight,
            sigma_bias,
            stride,
            channels,
            height,
            width,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Graph node count `D_N = (H/d) * (W/d)`.
    pub fn node_count(&self) -> usize {
        (self.height / self.stride) * (self.width / self.stride)
    }

    /// Tensors in [`param_names`] order, with their names.
    pub fn to_named_tensors(&self) -> (Vec<Tensor<T>>, Vec<String>) {
        let mut tensors = Vec::new();
        for l in &self.layers {
            tensors.push(l.a_g.clone());
            tensors.push(l.w_g.clone());
        }
        tensors.extend([
            self.phi_weight.clone(),
            self.phi_bias.clone(),
            self.sigma_weight.clone(),
            self.sigma_bias.clone(),
        ]);
        (tensors, param_names(self.layers.len()))
    }

    /// Registers all parameters on `g` as trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> RgcVars {
        let (tensors, names) = self.to_named_tensors();
        let vars: Vec<Var> = tensors.into_iter().map(|t| g.param(t)).collect();
        RgcVars::from_ordered(&names, &vars, self.stride).expect("names come from param_names")
    }

    /// Inference-only forward pass of the whole block.
    pub fn forward(&self, x: &Tensor<T>, post_activation: bool) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = rgc_forward(&mut g, xv, &vars, post_activation)?;
        Ok(g.value(out).clone())
    }
}

/// Graph handles of one graph layer.
#[derive(Clone, Copy, Debug)]
pub struct GraphLayerVars {
    pub a_g: Var,
    pub w_g: Var,
}

/// Graph handles of all RGC parameters.
#[derive(Clone, Debug)]
pub struct RgcVars {
    pub layers: Vec<GraphLayerVars>,
    pub phi_weight: Var,
    pub phi_bias: Var,
    pub sigma_weight: Var,
    pub sigma_bias: Var,
    pub stride: usize,
}

impl RgcVars {
    /// Looks up parameters by their serialized names.
    pub fn from_lookup(
        layers: usize,
        stride: usize,
        mut lookup: impl FnMut(&str) -> Option<Var>,
    ) -> Result<Self> {
        let names = param_names(layers);
        let mut get = |name: &str| {
            lookup(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
        };
        let mut graph_layers = Vec::with_capacity(layers);
        for k in 0..layers {
            graph_layers.push(GraphLayerVars {
                a_g: get(&names[2 * k])?,
                w_g: get(&names[2 * k + 1])?,
            });
        }
        Ok(Self {
            layers: graph_layers,
            phi_weight: get("rgc.phi.w")?,
            phi_bias: get("rgc.phi.b")?,
            sigma_weight: get("rgc.sigma.w")?,
            sigma_bias: get("rgc.sigma.b")?,
            stride,
        })
    }

    /// Pairs `names` with `vars` positionally and resolves them.
    pub fn from_ordered(names: &[String], vars: &[Var], stride: usize) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::Config("parameter name/var count mismatch".into()));
        }
        let layers = names.iter().filter(|n| n.starts_with("rgc.A_G")).count();
        Self::from_lookup(layers, stride, |name| {
            names.iter().position(|n| n == name).map(|i| vars[i])
        })
    }
}

/// `V_D = phi(X)`: non-overlapping `d x d` convolution with stride `d`, so
/// every input pixel feeds exactly one node.
pub fn graph_space_projection<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    vars: &RgcVars,
) -> Result<Var> {
    check_divisible(g.value(x), vars.stride)?;
    g.conv2d(x, vars.phi_weight, Some(vars.phi_bias), vars.stride, 0)
}

/// `V_G = W_G . V_N . A_G`, applied once per graph layer. `V_N` is either
/// `[C, D_N]` or batched `[N, C, D_N]`. Purely linear unless
/// `post_activation` adds a relu after each layer.
pub fn rgc_layer<T: Element>(
    g: &mut Graph<T>,
    v_n: Var,
    layers: &[GraphLayerVars],
    post_activation: bool,
) -> Result<Var> {
    let mut v = v_n;
    for layer in layers {
        let channel_mixed = g.matmul(layer.w_g, v)?;
        v = g.matmul(channel_mixed, layer.a_g)?;
        if post_activation {
            v = g.relu(v);
        }
    }
    Ok(v)
}

/// `Y = Y_G + sigma(X)` with `sigma` a stride-`d` convolution of the input.
pub fn downsample_residual<T: Element>(
    g: &mut Graph<T>,
    y_g: Var,
    x: Var,
    vars: &RgcVars,
) -> Result<Var> {
    check_divisible(g.value(x), vars.stride)?;
    let coords = g.conv2d(x, vars.sigma_weight, Some(vars.sigma_bias), vars.stride, 0)?;
    g.add(y_g, coords)
}

/// `X_G = bilinear_upsample(Y, d)`.
pub fn coordinate_reprojection<T: Element>(g: &mut Graph<T>, y: Var, stride: usize) -> Result<Var> {
    g.upsample_bilinear(y, stride)
}

/// Full block: returns `concat(X, X_G)` with `2C` channels.
pub fn rgc_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    vars: &RgcVars,
    post_activation: bool,
) -> Result<Var> {
    let v_d = graph_space_projection(g, x, vars)?;
    let (n, c, h, w) = g.value(v_d).dims4("rgc_forward")?;
    let v_n = g.reshape(v_d, &[n, c, h * w])?;
    let v_g = rgc_layer(g, v_n, &vars.layers, post_activation)?;
    let y_g = g.reshape(v_g, &[n, c, h, w])?;
    let y = downsample_residual(g, y_g, x, vars)?;
    let x_g = coordinate_reprojection(g, y, vars.stride)?;
    g.concat_channels(x, x_g)
}

fn check_divisible<T: Element>(x: &Tensor<T>, stride: usize) -> Result<()> {
    let (_, _, h, w) = x.dims4("rgc")?;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "rgc",
            format!("input {:?} is not divisible by stride {stride}", x.shape()),
        ));
    }
    Ok(())
}

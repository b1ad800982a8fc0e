//! Declarative network specifications and the networks built from them.

mod checkpoint;
mod init;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use init::{distill, init_side, DistillConfig, DistillReport, InitScheme};
pub use params::{Param, ParamStore, Parameters};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Conv2dGeometry, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        #[serde(rename = "in")]
        in_features: usize,
        #[serde(rename = "out")]
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    Tanh,
    AvgPool2d {
        kernel: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Flatten,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            bias: true,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }

    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Per-example output shape for a per-example input shape.
    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        let window = |size: usize, k: usize, s: usize, p: usize| {
            (s > 0 && k > 0 && size + 2 * p >= k).then(|| (size + 2 * p - k) / s + 1)
        };
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => (input == [in_features] && out_features > 0).then(|| vec![out_features]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels || out_channels == 0 {
                    return None;
                }
                Some(vec![
                    out_channels,
                    window(input[1], kernel, stride, pad)?,
                    window(input[2], kernel, stride, pad)?,
                ])
            }
            LayerSpec::Relu | LayerSpec::Tanh => Some(input.to_vec()),
            LayerSpec::AvgPool2d { kernel, stride } => {
                let s = stride.unwrap_or(kernel);
                if input.len() != 3 {
                    return None;
                }
                Some(vec![
                    input[0],
                    window(input[1], kernel, s, 0)?,
                    window(input[2], kernel, s, 0)?,
                ])
            }
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkRole {
    Base,
    Side,
    Readout,
    MergeInternal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-example input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_role")]
    pub role: NetworkRole,
}

fn default_role() -> NetworkRole {
    NetworkRole::Side
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, role: NetworkRole) -> Self {
        NetworkSpec {
            input_shape,
            layers,
            role,
        }
    }

    /// Multilayer perceptron `widths[0] → … → widths[last]` with `activation`
    /// after every hidden linear layer, and after the last one when
    /// `final_activation` is set.
    pub fn mlp(widths: &[usize], activation: LayerSpec, final_activation: bool, role: NetworkRole) -> Self {
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(LayerSpec::linear(w[0], w[1]));
            if i + 2 < widths.len() || final_activation {
                layers.push(activation.clone());
            }
        }
        NetworkSpec::new(vec![widths[0]], layers, role)
    }

    /// Per-example shape after each layer; errors name the first boundary
    /// that does not compose.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = shapes.last().expect("non-empty");
            let next = layer.output_shape(prev).ok_or_else(|| {
                Error::Spec(format!(
                    "layer {i} ({}) cannot accept input of shape {prev:?}",
                    layer.name()
                ))
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("non-empty"))
    }
}

/// A layer stack together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    prefix: String,
    params: ParamStore,
}

fn xavier(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
    Tensor::from_parts_unchecked(shape.to_vec(), data)
}

/// Builds a network whose parameter names start with `prefix`.
///
/// Weights use Xavier-uniform (Glorot) initialisation, bound
/// `sqrt(6 / (fan_in + fan_out))`, with convolution fans scaled by the kernel
/// area. Biases start at zero.
pub fn build_network(spec: &NetworkSpec, prefix: &str, rng: &mut Rng) -> Result<Network> {
    spec.shapes()?;
    let mut params = ParamStore::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Linear {
                in_features,
                out_features,
                bias,
            } => {
                params.insert(
                    format!("{prefix}.{i}.weight"),
                    xavier(rng, &[in_features, out_features], in_features, out_features),
                );
                if bias {
                    params.insert(format!("{prefix}.{i}.bias"), Tensor::zeros(&[out_features]));
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let area = kernel * kernel;
                params.insert(
                    format!("{prefix}.{i}.weight"),
                    xavier(
                        rng,
                        &[out_channels, in_channels, kernel, kernel],
                        in_channels * area,
                        out_channels * area,
                    ),
                );
                if bias {
                    params.insert(format!("{prefix}.{i}.bias"), Tensor::zeros(&[out_channels]));
                }
            }
            _ => {}
        }
    }
    Ok(Network {
        spec: spec.clone(),
        prefix: prefix.to_string(),
        params,
    })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn unfreeze(&mut self) {
        self.params.unfreeze();
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.spec.output_shape().expect("validated at build time")
    }

    /// Same architecture and parameter values under another name prefix.
    pub fn renamed(&self, prefix: &str) -> Network {
        let mut params = ParamStore::new();
        for (name, p) in self.params.iter() {
            let suffix = &name[self.prefix.len()..];
            params.insert(format!("{prefix}{suffix}"), p.value.clone());
            if p.frozen {
                params.get_mut(&format!("{prefix}{suffix}")).expect("inserted").frozen = true;
            }
        }
        Network {
            spec: self.spec.clone(),
            prefix: prefix.to_string(),
            params,
        }
    }

    /// Index of each layer that owns parameters.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.spec.layers.len())
            .filter(|&i| self.spec.layers[i].has_params())
            .collect()
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.prefix)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::dim(
                "network",
                format!("input {shape:?} does not match N×{:?}", self.spec.input_shape),
            ));
        }
        Ok(())
    }

    /// Applies layer `i` to `x`.
    pub fn forward_layer(&self, tape: &mut Tape, i: usize, x: Var) -> Result<Var> {
        match self.spec.layers[i] {
            LayerSpec::Linear { bias, .. } => {
                let w = self.params.var(tape, &self.weight_name(i))?;
                let y = tape.matmul(x, w)?;
                if bias {
                    let b = self.params.var(tape, &self.bias_name(i))?;
                    tape.add(y, b)
                } else {
                    Ok(y)
                }
            }
            LayerSpec::Conv2d { stride, pad, bias, .. } => {
                let w = self.params.var(tape, &self.weight_name(i))?;
                let b = if bias {
                    Some(self.params.var(tape, &self.bias_name(i))?)
                } else {
                    None
                };
                tape.conv2d(x, w, b, Conv2dGeometry { stride, pad })
            }
            LayerSpec::Relu => tape.relu(x),
            LayerSpec::Tanh => tape.tanh(x),
            LayerSpec::AvgPool2d { kernel, stride } => tape.avgpool2d(x, kernel, stride.unwrap_or(kernel)),
            LayerSpec::Flatten => tape.flatten(x),
        }
    }

    /// Applies layers `range` in order.
    pub fn forward_range(&self, tape: &mut Tape, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let mut h = x;
        for i in range {
            h = self.forward_layer(tape, i, h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        self.forward_range(tape, x, 0..self.spec.layers.len())
    }

    /// Forward pass on a fresh tape; values only.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl Parameters for Network {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }
}
